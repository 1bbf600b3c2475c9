"""Linear algebra over the function field: fraction-free elimination,
deterministic pivoting, and closed-form matrix exponentials."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import sympy as sp

from .errors import (RankInstabilityError, SingularCoframeError,
                     UnsupportedSpectrumError)
from .expr import is_zero, normalize, _opaque_atoms

ExprMatrix = sp.Matrix


def _total_degree(e):
    """Degree measure for pivot choice: deg(num) + deg(den) over all atoms."""
    e = sp.cancel(sp.sympify(e))
    num, den = e.as_numer_denom()
    deg = 0
    for part in (num, den):
        repl = {a: sp.Dummy() for a in _opaque_atoms(part)}
        part = part.xreplace(repl)
        funcs = {f: sp.Dummy() for f in part.atoms(sp.Function)}
        part = part.xreplace(funcs)
        gens = sorted(part.free_symbols, key=lambda s: s.name)
        if not gens:
            continue
        try:
            deg += sp.Poly(part, *gens).total_degree()
        except sp.PolynomialError:
            deg += sp.count_ops(part)
    return deg


def _entry_zero(e):
    """Zero test for already-normalized entries.

    The normal form is canonical for the rational-function model, so a
    syntactic zero check suffices unless trig atoms (whose Pythagorean
    relation the normal form does not resolve) are present.
    """
    if e == 0:
        return True
    if e.has(sp.sin, sp.cos, sp.tan):
        return is_zero(e)
    return False


@dataclass
class Echelon:
    """Row echelon data from fraction-free elimination of [A | B]."""

    rows: list                 # reduced rows (lists of Expr), length m
    pivots: list               # list of (row, col) in elimination order
    ncols_a: int

    @property
    def rank(self):
        return len(self.pivots)


def _eliminate(aug, ncols_a):
    """Gaussian elimination over the function field with deterministic
    pivoting.

    Pivot choice at each step: among nonzero entries of the remaining
    A-block, lowest total degree, ties broken by column then row order.
    Row updates divide by the pivot; division of normalized rational
    expressions is exact, and every entry is re-normalized.
    """
    rows = [[normalize(x) for x in r] for r in aug]
    m = len(rows)
    pivots = []
    used_rows = set()
    used_cols = set()
    while True:
        best = None
        for c in range(ncols_a):
            if c in used_cols:
                continue
            for r in range(m):
                if r in used_rows:
                    continue
                entry = rows[r][c]
                if _entry_zero(entry):
                    rows[r][c] = sp.S.Zero
                    continue
                key = (_total_degree(entry), c, r)
                if best is None or key < best[0]:
                    best = (key, r, c)
        if best is None:
            break
        _, pr, pc = best
        pivots.append((pr, pc))
        used_rows.add(pr)
        used_cols.add(pc)
        piv = rows[pr][pc]
        for r in range(m):
            if r in used_rows or rows[r][pc] == 0:
                continue
            ratio = normalize(rows[r][pc] / piv)
            rows[r] = [normalize(rows[r][j] - ratio * rows[pr][j])
                       for j in range(len(rows[r]))]
    # back-substitute into pivot rows so pivot columns are isolated
    for i in reversed(range(len(pivots))):
        pr, pc = pivots[i]
        for j, (qr, qc) in enumerate(pivots):
            if j == i or rows[qr][pc] == 0:
                continue
            ratio = normalize(rows[qr][pc] / rows[pr][pc])
            rows[qr] = [normalize(rows[qr][k] - ratio * rows[pr][k])
                        for k in range(len(rows[qr]))]
    return Echelon(rows, pivots, ncols_a)


@dataclass
class LinearSolution:
    consistent: bool
    solution: ExprMatrix | None = None     # particular solution, n x rhs-cols
    nullspace: list = field(default_factory=list)
    rank: int = 0


def solve_linear(A, b=None, check_rank=True, seed=0):
    """Solve A x = b by fraction-free elimination over the function field.

    Returns a LinearSolution: particular solution plus a nullspace basis,
    or consistent=False (a distinguished result, not a crash).  With
    ``check_rank``, the symbolic rank is cross-checked against the rank at
    random rational points; disagreement raises RankInstabilityError.
    """
    A = sp.Matrix(A)
    m, n = A.shape
    if b is None:
        b = sp.zeros(m, 1)
    b = sp.Matrix(b)
    aug = [list(A.row(i)) + list(b.row(i)) for i in range(m)]
    ech = _eliminate(aug, n)
    rank = ech.rank
    if check_rank:
        _cross_check_rank(A, rank, seed)
    # consistency: every zero A-row must carry zero rhs
    pivot_rows = {r for r, _ in ech.pivots}
    for r in range(m):
        if r in pivot_rows:
            continue
        for j in range(n, n + b.shape[1]):
            if not _entry_zero(ech.rows[r][j]) and not is_zero(ech.rows[r][j]):
                return LinearSolution(False, rank=rank)
    sol = sp.zeros(n, b.shape[1])
    for r, c in ech.pivots:
        piv = ech.rows[r][c]
        for j in range(b.shape[1]):
            sol[c, j] = normalize(ech.rows[r][n + j] / piv)
    null = []
    pivot_cols = {c for _, c in ech.pivots}
    col_of_row = {r: c for r, c in ech.pivots}
    for free in range(n):
        if free in pivot_cols:
            continue
        v = sp.zeros(n, 1)
        v[free] = sp.S.One
        for r, c in ech.pivots:
            v[c] = normalize(-ech.rows[r][free] / ech.rows[r][c])
        null.append(v)
    return LinearSolution(True, sol, null, rank)


def symbolic_rank(A, check=True, seed=0):
    """Rank by the same deterministic elimination; optionally cross-checked."""
    A = sp.Matrix(A)
    ech = _eliminate([list(A.row(i)) for i in range(A.rows)], A.cols)
    if check:
        _cross_check_rank(A, ech.rank, seed)
    return ech.rank


def _freeze(A):
    """Replace opaque/transcendental atoms by fresh symbols for sampling."""
    atoms = set()
    for e in A:
        e = sp.sympify(e)
        atoms |= _opaque_atoms(e)
        atoms |= {a for a in e.atoms(sp.Function) if a.has(*e.free_symbols)}
        atoms |= {a for a in e.atoms(sp.Pow)
                  if isinstance(a.exp, sp.Rational) and not a.exp.is_Integer}
    outer = [a for a in atoms
             if not any(a is not z and z.has(a) for z in atoms)]
    repl = {a: sp.Dummy() for a in outer}
    return A.xreplace(repl) if repl else A


def _cross_check_rank(A, rank, seed, points=4):
    """Sampled rank must never exceed the symbolic rank."""
    frozen = _freeze(A)
    syms = sorted(frozen.free_symbols, key=lambda s: s.name)
    rng = random.Random((seed if isinstance(seed, int) else 0) ^ 0x0A11)
    seen = 0
    for _ in range(16):
        if seen >= points:
            break
        point = {s: sp.Rational(rng.randint(1, 30), rng.randint(1, 30))
                 * rng.choice((1, -1)) for s in syms}
        M = frozen.xreplace(point)
        if M.has(sp.zoo, sp.nan, sp.oo):
            continue
        try:
            num = sp.Matrix([[sp.nsimplify(x.evalf(40), rational=True)
                              for x in M.row(i)] for i in range(M.rows)])
            sampled = num.rank()
        except (ValueError, TypeError, ZeroDivisionError):
            continue
        seen += 1
        if sampled > rank:
            raise RankInstabilityError(
                f"sampled rank {sampled} exceeds symbolic rank {rank}")


def invert(A):
    """Exact inverse via the same deterministic elimination."""
    A = sp.Matrix(A)
    n = A.rows
    if A.cols != n:
        raise SingularCoframeError("only square matrices can be inverted")
    sol = solve_linear(A, sp.eye(n), check_rank=False)
    if not sol.consistent or sol.rank != n:
        raise SingularCoframeError("matrix is singular over the function field")
    return sol.solution.applyfunc(normalize)


def _min_poly_degree(A):
    """Smallest k with I, A, ..., A^k linearly dependent."""
    n = A.shape[0]
    powers = [sp.eye(n)]
    for k in range(1, n + 1):
        powers.append(powers[-1] * A)
        cols = sp.Matrix([[p[i, j] for p in powers]
                          for i in range(n) for j in range(n)])
        if solve_linear(cols, check_rank=False).rank <= k:
            return k
    return n


_EXP_OK = (sp.exp, sp.sin, sp.cos)


def matrix_exp_closed(A, s):
    """exp(-A*s) in closed form for constant A with tame spectrum.

    Supported: minimal polynomial degree <= 3 with eigenvalues 0, rational,
    or +-beta*i.  The result uses only exp/sin/cos atoms and is verified
    against dR + R*(A ds) = 0 before being returned; anything else raises
    UnsupportedSpectrumError ("supply R manually").
    """
    A = sp.Matrix(A)
    if s in A.free_symbols:
        raise UnsupportedSpectrumError("matrix depends on the exp variable")
    if _min_poly_degree(A) > 3:
        raise UnsupportedSpectrumError("minimal polynomial degree exceeds 3")
    try:
        R = sp.exp(-A * s)
    except Exception as exc:  # sympy could not diagonalize/jordanize
        raise UnsupportedSpectrumError(str(exc)) from exc
    R = R.applyfunc(lambda e: sp.simplify(sp.expand(e)))
    if R.has(sp.I):
        R = R.applyfunc(lambda e: sp.simplify(e.rewrite(sp.cos)))
    if R.has(sp.I):
        raise UnsupportedSpectrumError("spectrum outside the real closed-form class")
    for e in R:
        bad = [f for f in sp.sympify(e).atoms(sp.Function)
               if not isinstance(f, _EXP_OK)]
        if bad or e.has(sp.log):
            raise UnsupportedSpectrumError(f"unsupported atoms in {e}")
    residual = sp.diff(R, s) + R * A
    for e in residual:
        if not is_zero(e):
            raise UnsupportedSpectrumError("closed form failed verification")
    if is_zero(R.det()):
        raise UnsupportedSpectrumError("degenerate exponential")
    return R.applyfunc(normalize)
