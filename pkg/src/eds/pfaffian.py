"""Pfaffian systems and decomposable presentations: derived flags,
Frobenius/first-integral checks, the decomposability test, singular systems,
box-plus reconstruction, and direct sums."""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field

import sympy as sp

from .errors import EDSError, RankInstabilityError, VerificationError
from .expr import is_zero, normalize
from .forms import Chart, ChartMap, Coframe, DForm, VectorField
from .linear import _entry_zero, solve_linear, symbolic_rank


def _coefficient_matrix(forms):
    chart = forms[0].chart
    return sp.Matrix([[f.coefficient(j) for j in range(chart.dim)]
                      for f in forms])


def _certify_rank(forms, seed=0, points=4):
    """Symbolic rank, certified equal to the sampled rank at >= 4 points."""
    M = _coefficient_matrix(forms)
    rank = symbolic_rank(M, check=False)
    from .linear import _freeze
    frozen = _freeze(M)
    syms = sorted(frozen.free_symbols, key=lambda s: s.name)
    rng = random.Random((seed if isinstance(seed, int) else 0) ^ 0xF1A6)
    good = 0
    for _ in range(24):
        if good >= points:
            return rank
        point = {s: sp.Rational(rng.randint(1, 30), rng.randint(1, 30))
                 * rng.choice((1, -1)) for s in syms}
        N = frozen.xreplace(point)
        if N.has(sp.zoo, sp.nan, sp.oo):
            continue
        try:
            if N.rank() == rank:
                good += 1
        except (ValueError, ZeroDivisionError):
            continue
    raise RankInstabilityError(
        "could not certify constant rank at sampled rational points")


def complete_to_coframe(forms, chart, labels=None):
    """Complete independent 1-forms to a coframe with coordinate
    differentials chosen greedily in chart order (deterministic)."""
    out = list(forms)
    lab = list(labels) if labels else [""] * len(forms)
    rank = symbolic_rank(_coefficient_matrix(out), check=False)
    if rank != len(out):
        raise RankInstabilityError("generators are not independent")
    for c in chart.coords:
        if len(out) == chart.dim:
            break
        cand = out + [DForm.coordinate_differential(chart, c)]
        if symbolic_rank(_coefficient_matrix(cand), check=False) == len(cand):
            out = cand
            lab.append("aux")
    if len(out) != chart.dim:
        raise EDSError("could not complete generators to a coframe")
    return Coframe(out, lab)


class PfaffianSystem:
    """Ordered 1-form generators with a constant-rank certificate."""

    def __init__(self, chart, generators, seed=0):
        self.chart = chart
        self.generators = list(generators)
        for g in self.generators:
            if g.degree != 1 or g.chart != chart:
                raise EDSError("generators must be 1-forms on the chart")
        self.rank = _certify_rank(self.generators, seed=seed) if generators else 0
        if self.rank != len(self.generators):
            raise RankInstabilityError("generator list is not independent")
        self._derived = None

    def __repr__(self):
        return f"PfaffianSystem(rank {self.rank} on {self.chart!r})"

    def contains(self, omega):
        """True iff ω is an Expr-linear combination of the generators."""
        if omega.chart != self.chart:
            raise EDSError("different charts")
        if not self.generators:
            return omega.is_zero_form()
        A = _coefficient_matrix(self.generators).T
        b = sp.Matrix([omega.coefficient(j) for j in range(self.chart.dim)])
        return solve_linear(A, b, check_rank=False).consistent

    def contains_system(self, other):
        return all(self.contains(g) for g in other.generators)

    def same_span(self, other):
        return (self.rank == other.rank and self.contains_system(other))

    def derived(self):
        """Span of {ω in V : dω ≡ 0 mod V}."""
        if self._derived is not None:
            return self._derived
        gens = self.generators
        r = len(gens)
        if r == 0:
            self._derived = self
            return self
        cof = complete_to_coframe(gens, self.chart)
        pairs = [k for k in itertools.combinations(range(self.chart.dim), 2)
                 if k[0] >= r]          # transverse wedge monomials
        cols = []
        for g in gens:
            table = cof.express(g.d())
            cols.append([table.get(k, sp.S.Zero) for k in pairs])
        M = sp.Matrix(len(pairs), r, lambda i, j: cols[j][i]) if pairs \
            else sp.zeros(1, r)
        sol = solve_linear(M, check_rank=False)
        new = []
        for v in sol.nullspace:
            form = DForm.zero(self.chart, 1)
            for c, g in zip(v, gens):
                form = form + sp.sympify(c) * g
            new.append(_normalize_generator(form))
        derived = PfaffianSystem(self.chart, new)
        if not self.contains_system(derived):
            raise RankInstabilityError("derived system escaped the span")
        self._derived = derived
        return derived

    def derived_flag(self):
        """The flag V ⊇ V' ⊇ ... down to the stable (Frobenius) system."""
        systems = [self]
        while True:
            nxt = systems[-1].derived()
            if nxt.rank == systems[-1].rank:
                break
            systems.append(nxt)
        return DerivedFlag(systems)

    def infinite_derived(self):
        return self.derived_flag().terminal

    def is_frobenius(self):
        """True iff dω ≡ 0 mod V for every generator."""
        return self.derived().rank == self.rank

    def is_first_integral(self, f):
        return self.contains(DForm.from_expr(self.chart, sp.sympify(f)))

    def restricted(self, constraints, keep=None):
        """Restriction to a level set; drops dependent/zero restrictions."""
        from .forms import solve_level_set
        sub, incl = solve_level_set(self.chart, constraints, keep=keep)
        gens = []
        for g in self.generators:
            h = incl.pullback(g)
            if h.is_zero_form():
                continue
            if gens and PfaffianSystem(sub, gens).contains(h):
                continue
            gens.append(_normalize_generator(h))
        return PfaffianSystem(sub, gens), sub, incl


def _normalize_generator(form):
    """Deterministic scaling: clear denominators, make the leading
    coefficient (first coordinate index) unity when constant-free."""
    if not form.comps:
        return form
    num = sp.S.Zero
    comps = {k: sp.sympify(v) for k, v in form.comps.items()}
    denoms = [sp.fraction(sp.cancel(v))[1] for v in comps.values()]
    lcm = sp.lcm(denoms) if denoms else sp.S.One
    comps = {k: normalize(v * lcm) for k, v in comps.items()}
    lead = comps[min(comps)]
    if lead.is_Number and lead != 0:
        comps = {k: normalize(v / lead) for k, v in comps.items()}
    return DForm(form.chart, 1, comps)


@dataclass
class DerivedFlag:
    systems: list

    @property
    def ranks(self):
        return [s.rank for s in self.systems]

    @property
    def terminal(self):
        return self.systems[-1]

    def __iter__(self):
        return iter(self.systems)


def span_contains(omega, V):
    return V.contains(omega)


def derived_system(V):
    return V.derived()


def infinite_derived(V):
    return V.derived_flag()


def check_frobenius(V):
    return V.is_frobenius()


def is_first_integral(f, V):
    return V.is_first_integral(f)


class EDSPresentation:
    """Algebraic generators: 1-forms plus 2-forms."""

    def __init__(self, chart, one_forms, two_forms=()):
        self.chart = chart
        self.one_forms = list(one_forms)
        self.two_forms = list(two_forms)
        for f in self.one_forms:
            if f.degree != 1:
                raise EDSError("expected 1-form generator")
        for f in self.two_forms:
            if f.degree != 2:
                raise EDSError("expected 2-form generator")

    def pfaffian_part(self):
        return PfaffianSystem(self.chart, self.one_forms)

    def contains_two_form(self, omega, coframe=None):
        """Membership in the degree-2 part of the algebraic ideal."""
        cof = coframe or complete_to_coframe(self.one_forms, self.chart)
        target = cof.express(omega)
        n = len(cof)
        r = len(self.one_forms)
        # unknowns: coefficients of the declared 2-forms plus mu_j^i for
        # theta^i ∧ (coframe member j) terms
        pairs = sorted({k for k in itertools.combinations(range(n), 2)})
        cols = []
        for tf in self.two_forms:
            tab = cof.express(tf)
            cols.append([tab.get(k, sp.S.Zero) for k in pairs])
        for i in range(r):
            for j in range(n):
                if i == j:
                    continue
                key = (min(i, j), max(i, j))
                sign = 1 if i < j else -1
                col = [sp.S.One * sign if k == key else sp.S.Zero
                       for k in pairs]
                cols.append(col)
        A = sp.Matrix(len(pairs), len(cols), lambda a, b: cols[b][a])
        b = sp.Matrix([target.get(k, sp.S.Zero) for k in pairs])
        return solve_linear(A, b, check_rank=False).consistent

    def same_span(self, other):
        """Generator-span agreement in degrees 1 and 2."""
        mine = self.pfaffian_part()
        theirs = other.pfaffian_part()
        if not mine.same_span(theirs):
            return False
        return (all(self.contains_two_form(w) for w in other.two_forms)
                and all(other.contains_two_form(w) for w in self.two_forms))


@dataclass
class DecomposabilityReport:
    decomposable: bool
    reason: str = ""
    coframe: Coframe | None = None
    A: sp.Matrix | None = None          # sigma-hat-wedge rows x theta cols
    B: sp.Matrix | None = None
    rank_A: int = 0
    rank_B: int = 0
    kernel_sum_dim: int = 0
    rank_I: int = 0
    t_basis: sp.Matrix | None = None    # rows = new theta-tilde combinations
    block_sizes: tuple = (0, 0, 0)      # (closed, hat, check)
    theta_tilde: list = field(default_factory=list)
    omega_hat: list = field(default_factory=list)
    omega_check: list = field(default_factory=list)


def _sigma_block_coeffs(table, block, offset):
    """Extract wedge coefficients lying entirely inside one sigma block."""
    out = {}
    for (i, j), c in table.items():
        if i >= offset and j < offset + len(block):
            if offset <= i and j < offset + len(block):
                out[(i, j)] = c
    return out


def check_decomposable(I, sigma_hat, sigma_check, seed=0):
    """Decomposability test for a presentation with designated sigma blocks.

    Builds the maps A and B (2-form content of each d(theta) over the
    sigma-hat / sigma-check wedge blocks, modulo the declared 2-form
    generators), checks both blocks are populated and that the kernels of A
    and B together span the theta directions, and on success returns the
    adapted T-basis with split generators.
    """
    chart = I.chart
    thetas = I.one_forms
    r = len(thetas)
    forms = thetas + list(sigma_hat) + list(sigma_check)
    if len(forms) != chart.dim:
        return DecomposabilityReport(
            False, "declared blocks do not complete the generators to a coframe")
    labels = (["theta"] * r + ["sigma_hat"] * len(sigma_hat)
              + ["sigma_check"] * len(sigma_check))
    cof = Coframe(forms, labels)
    p, q = len(sigma_hat), len(sigma_check)
    hat_idx = list(range(r, r + p))
    check_idx = list(range(r + p, r + p + q))
    hat_pairs = list(itertools.combinations(hat_idx, 2))
    check_pairs = list(itertools.combinations(check_idx, 2))

    def split_table(omega, drop_theta):
        tab = cof.express(omega)
        hat, check, mixed = {}, {}, {}
        for key, c in tab.items():
            i, j = key
            if i < r or j < r:
                if drop_theta:
                    continue
                mixed[key] = c
            elif j < r + p:
                hat[key] = c
            elif i >= r + p:
                check[key] = c
            else:
                mixed[key] = c
        return hat, check, mixed

    # declared 2-form generators must split into pure blocks mod theta
    hat_gen_rows, check_gen_rows = [], []
    for w in I.two_forms:
        hat, check, mixed = split_table(w, drop_theta=True)
        if mixed and not all(is_zero(c) for c in mixed.values()):
            return DecomposabilityReport(
                False, "a 2-form generator has mixed sigma-hat/sigma-check terms")
        if hat and check:
            # one generator straddling both blocks: not pure, and the span
            # test below decides whether a re-combination can split it
            hat_gen_rows.append(([hat.get(k, sp.S.Zero) for k in hat_pairs],
                                 [check.get(k, sp.S.Zero) for k in check_pairs]))
        elif hat:
            hat_gen_rows.append(([hat.get(k, sp.S.Zero) for k in hat_pairs],
                                 [sp.S.Zero] * len(check_pairs)))
        elif check:
            check_gen_rows.append(([sp.S.Zero] * len(hat_pairs),
                                   [check.get(k, sp.S.Zero) for k in check_pairs]))
    # the declared 2-forms must split: W = (W ∩ hat-block) + (W ∩ check-block)
    all_rows = [h + c for h, c in hat_gen_rows] + \
               [h + c for h, c in check_gen_rows]
    if all_rows:
        W = sp.Matrix(all_rows)
        rank_W = symbolic_rank(W, check=False)
        pure = []
        for h, c in hat_gen_rows + check_gen_rows:
            if all(_entry_zero(x) or is_zero(x) for x in c):
                pure.append(h + c)
            elif all(_entry_zero(x) or is_zero(x) for x in h):
                pure.append(h + c)
        # complete pure rows from intersections with each block
        Wh = _block_intersection(W, len(hat_pairs), "hat")
        Wc = _block_intersection(W, len(hat_pairs), "check")
        if symbolic_rank(sp.Matrix.vstack(Wh, Wc), check=False) != rank_W:
            return DecomposabilityReport(
                False, "2-form generators cannot be split into pure blocks")
        hat_content = Wh
        check_content = Wc
    else:
        hat_content = sp.zeros(0, len(hat_pairs) + len(check_pairs))
        check_content = sp.zeros(0, len(hat_pairs) + len(check_pairs))

    # structure rows of the theta generators
    A_rows, B_rows = [], []
    for th in thetas:
        hat, check, mixed = split_table(th.d(), drop_theta=True)
        A_rows.append([hat.get(k, sp.S.Zero) for k in hat_pairs])
        B_rows.append([check.get(k, sp.S.Zero) for k in check_pairs])
        if mixed and not all(is_zero(c) for c in mixed.values()):
            return DecomposabilityReport(
                False, "d(theta) has mixed sigma-hat/sigma-check terms",
                coframe=cof)
    A = sp.Matrix(r, len(hat_pairs), lambda i, j: A_rows[i][j]) \
        if hat_pairs else sp.zeros(r, 0)
    B = sp.Matrix(r, len(check_pairs), lambda i, j: B_rows[i][j]) \
        if check_pairs else sp.zeros(r, 0)
    Wh_hat = hat_content[:, :len(hat_pairs)] if hat_content.rows else \
        sp.zeros(0, len(hat_pairs))
    Wc_check = check_content[:, len(hat_pairs):] if check_content.rows else \
        sp.zeros(0, len(check_pairs))

    ker_A = _kernel_mod(A, Wh_hat)
    ker_B = _kernel_mod(B, Wc_check)
    rank_A = r - len(ker_A) + symbolic_rank(Wh_hat, check=False) \
        if (A.cols and (any(not _entry_zero(x) for x in A) or Wh_hat.rows)) else \
        symbolic_rank(Wh_hat, check=False)
    rank_B = r - len(ker_B) + symbolic_rank(Wc_check, check=False) \
        if (B.cols and (any(not _entry_zero(x) for x in B) or Wc_check.rows)) else \
        symbolic_rank(Wc_check, check=False)
    if rank_A == 0 or rank_B == 0:
        return DecomposabilityReport(
            False, "a sigma block carries no 2-form content", coframe=cof,
            A=A, B=B, rank_A=rank_A, rank_B=rank_B, rank_I=r)
    span = ker_A + ker_B
    if span:
        S = sp.Matrix([list(v.T) for v in span])
        dim_sum = symbolic_rank(S, check=False)
    else:
        dim_sum = 0
    if dim_sum != r:
        return DecomposabilityReport(
            False, "kernel condition fails: dim(ker A + ker B) != rank I",
            coframe=cof, A=A, B=B, rank_A=rank_A, rank_B=rank_B,
            kernel_sum_dim=dim_sum, rank_I=r)
    # T-basis: closed block first, then hat block (in ker B), then check block
    t_rows = _t_basis(ker_A, ker_B, r)
    closed, hat_block, check_block = t_rows
    T = sp.Matrix([list(v.T) for v in closed + hat_block + check_block])
    theta_tilde = []
    for row in range(T.rows):
        form = DForm.zero(chart, 1)
        for i, th in enumerate(thetas):
            form = form + sp.sympify(T[row, i]) * th
        theta_tilde.append(_normalize_generator(form))
    omega_hat, omega_check = [], []
    for k, form in enumerate(theta_tilde):
        if k < len(closed):
            continue
        hat, check, _ = split_table(form.d(), drop_theta=True)
        table = hat if k < len(closed) + len(hat_block) else check
        w = cof.reconstruct(table, 2)
        if not w.is_zero_form():
            (omega_hat if k < len(closed) + len(hat_block)
             else omega_check).append(w)
    for w in I.two_forms:
        hat, check, _ = split_table(w, drop_theta=True)
        if hat and not check:
            omega_hat.append(cof.reconstruct(hat, 2))
        elif check and not hat:
            omega_check.append(cof.reconstruct(check, 2))
        else:
            # straddling generator split by the intersection bases
            if hat:
                omega_hat.append(cof.reconstruct(hat, 2))
            if check:
                omega_check.append(cof.reconstruct(check, 2))
    return DecomposabilityReport(
        True, "", coframe=cof, A=A, B=B, rank_A=rank_A, rank_B=rank_B,
        kernel_sum_dim=dim_sum, rank_I=r, t_basis=T,
        block_sizes=(len(closed), len(hat_block), len(check_block)),
        theta_tilde=theta_tilde, omega_hat=omega_hat, omega_check=omega_check)


def _block_intersection(W, split, which):
    """Basis of the rows of span(W) supported on a single sigma block."""
    # vectors v = c^T W with the complementary block zero
    n = W.cols
    rows = []
    lo, hi = (split, n) if which == "hat" else (0, split)
    M = W[:, lo:hi].T
    sol = solve_linear(M, check_rank=False)
    for v in sol.nullspace:
        rows.append(list((v.T * W)))
    return sp.Matrix(rows) if rows else sp.zeros(0, n)


def _kernel_mod(A, W):
    """Kernel of k -> k^T A modulo the row space of W."""
    if A.cols == 0:
        return [sp.Matrix(sp.eye(A.rows)[:, i]) for i in range(A.rows)]
    stacked = sp.Matrix.vstack(A, W) if W.rows else A
    sol = solve_linear(stacked.T, check_rank=False)
    out = []
    for v in sol.nullspace:
        k = v[:A.rows, :]
        if any(not _entry_zero(x) for x in k):
            out.append(k)
    return _independent(out)


def _independent(vectors):
    out = []
    for v in vectors:
        if not out:
            out.append(v)
            continue
        M = sp.Matrix([list(w.T) for w in out + [v]])
        if symbolic_rank(M, check=False) == len(out) + 1:
            out.append(v)
    return out


def _t_basis(ker_A, ker_B, r):
    """Order a T-basis: ker A ∩ ker B, then rest of ker B, then rest of ker A."""
    inter = []
    if ker_A and ker_B:
        MA = sp.Matrix([list(v.T) for v in ker_A])
        MB = sp.Matrix([list(v.T) for v in ker_B])
        # intersection = {c^T MA : c^T MA = d^T MB}
        big = sp.Matrix.hstack(MA.T, -MB.T)
        sol = solve_linear(big, check_rank=False)
        for v in sol.nullspace:
            c = v[:MA.rows, :]
            w = MA.T * c
            if any(not _entry_zero(x) for x in w):
                inter.append(w)
        inter = _independent(inter)
    hat_block = []
    for v in ker_B:      # d(theta-tilde) has only sigma-hat content
        if _rank_grows(inter + hat_block, v):
            hat_block.append(v)
    check_block = []
    for v in ker_A:
        if _rank_grows(inter + hat_block + check_block, v):
            check_block.append(v)
    return inter, hat_block, check_block


def _rank_grows(basis, v):
    if not basis:
        return any(not _entry_zero(x) for x in v)
    M = sp.Matrix([list(w.T) for w in basis + [v]])
    return symbolic_rank(M, check=False) == len(basis) + 1


def singular_systems(I, report):
    """(V-hat, V-check) presentations from a decomposability report."""
    if not report.decomposable:
        raise VerificationError("decomposability", report.reason)
    cof = report.coframe
    r = len(report.theta_tilde)
    p = sum(1 for lab in cof.labels if lab == "sigma_hat")
    hat_sigma = [cof.forms[i] for i, lab in enumerate(cof.labels)
                 if lab == "sigma_hat"]
    check_sigma = [cof.forms[i] for i, lab in enumerate(cof.labels)
                   if lab == "sigma_check"]
    V_hat = EDSPresentation(I.chart, report.theta_tilde + hat_sigma,
                            report.omega_check)
    V_check = EDSPresentation(I.chart, report.theta_tilde + check_sigma,
                              report.omega_hat)
    return V_hat, V_check


def pfaffian_generators(V):
    """Pfaffian generator list for a singular presentation, when the
    declared 2-forms lie in the differential closure of the 1-forms."""
    system = V.pfaffian_part()
    cof = complete_to_coframe(V.one_forms, V.chart)
    closure = EDSPresentation(V.chart, V.one_forms,
                              [f.d() for f in V.one_forms])
    for w in V.two_forms:
        if not closure.contains_two_form(w, coframe=cof):
            return None
    return system


def box_plus_generators(stage1):
    """Reconstruction generators from a 1-adapted coframe: the theta and eta
    blocks plus the pure sigma-wedge content of their differentials."""
    cof = stage1.coframe
    chart = cof.chart
    one_forms = [f for f, lab in zip(cof.forms, cof.labels)
                 if lab in ("theta", "eta_hat", "eta_check")]
    hat_idx = [i for i, lab in enumerate(cof.labels) if lab == "sigma_hat"]
    check_idx = [i for i, lab in enumerate(cof.labels) if lab == "sigma_check"]
    two = []
    for f in one_forms:
        tab = cof.express(f.d())
        hat = {k: c for k, c in tab.items()
               if k[0] in hat_idx and k[1] in hat_idx}
        check = {k: c for k, c in tab.items()
                 if k[0] in check_idx and k[1] in check_idx}
        for blockt in (hat, check):
            if blockt:
                w = cof.reconstruct(blockt, 2)
                if not w.is_zero_form():
                    two.append(w)
    return EDSPresentation(chart, one_forms, two)


def direct_sum(W1, W2):
    """Direct sum on the product chart; returns (J, W-hat, W-check)."""
    for W in (W1, W2):
        if W.generators and W.infinite_derived().rank != 0:
            raise VerificationError("direct_sum",
                                    "factor has nonzero infinite derived system")
    product = W1.chart.product(W2.chart)
    lift1 = ChartMap(product, W1.chart, list(W1.chart.coords))
    lift2 = ChartMap(product, W2.chart, list(W2.chart.coords))
    g1 = [lift1.pullback(g) for g in W1.generators]
    g2 = [lift2.pullback(g) for g in W2.generators]
    J = PfaffianSystem(product, g1 + g2)
    lambda2 = [DForm.coordinate_differential(product, c)
               for c in W2.chart.coords]
    lambda1 = [DForm.coordinate_differential(product, c)
               for c in W1.chart.coords]
    W_hat = PfaffianSystem(product, g1 + lambda2)
    W_check = PfaffianSystem(product, lambda1 + g2)
    inf_hat = W_hat.infinite_derived()
    if not inf_hat.same_span(PfaffianSystem(product, lambda2)):
        raise VerificationError("direct_sum",
                                "W-hat infinite derived is not Lambda^1(M2)")
    return J, W_hat, W_check
