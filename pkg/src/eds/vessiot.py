"""Lie algebra structure constants: Jacobi checks, series, Killing form,
classification (abelian / nilpotent / solvable / semisimple / Levi)."""

from __future__ import annotations

from dataclasses import dataclass, field

import sympy as sp

from .errors import UnsupportedCaseError, VerificationError
from .expr import is_zero, normalize


class StructureConstants:
    """C^i_jk with bracket [e_j, e_k] = C^i_jk e_i."""

    def __init__(self, dim, table=None):
        self.dim = dim
        self._c = {}
        if table:
            for (i, j, k), v in table.items():
                self.set(i, j, k, v)

    def set(self, i, j, k, value):
        value = sp.sympify(value)
        if j == k:
            if not is_zero(value):
                raise VerificationError("antisymmetry", "C^i_jj must vanish")
            return
        if j > k:
            i, j, k, value = i, k, j, -value
        cur = self._c.get((i, j, k))
        if cur is not None and not is_zero(cur - value):
            raise VerificationError("antisymmetry",
                                    f"conflicting values for C^{i}_{j}{k}")
        if not is_zero(value):
            self._c[(i, j, k)] = normalize(value)

    def get(self, i, j, k):
        if j == k:
            return sp.S.Zero
        if j > k:
            return -self._c.get((i, k, j), sp.S.Zero)
        return self._c.get((i, j, k), sp.S.Zero)

    def items(self):
        return sorted(self._c.items())

    def is_constant(self):
        return all(v.free_symbols == set() for v in self._c.values())

    def is_zero_algebra(self):
        return not self._c

    def bracket(self, v, w):
        """Bracket of coefficient vectors (as sympy column matrices)."""
        n = self.dim
        out = sp.zeros(n, 1)
        for i in range(n):
            s = sp.S.Zero
            for j in range(n):
                for k in range(n):
                    c = self.get(i, j, k)
                    if c != 0:
                        s += c * v[j] * w[k]
            out[i] = sp.nsimplify(sp.cancel(s))
        return out

    def ad(self, j):
        """Matrix of ad(e_j): column k holds [e_j, e_k]."""
        n = self.dim
        return sp.Matrix(n, n, lambda i, k: self.get(i, j, k))

    def jacobi_residuals(self):
        n = self.dim
        out = []
        for i in range(n):
            for j in range(n):
                for k in range(j + 1, n):
                    for l in range(k + 1, n):
                        s = sp.S.Zero
                        for m in range(n):
                            s += (self.get(m, j, k) * self.get(i, m, l)
                                  + self.get(m, k, l) * self.get(i, m, j)
                                  + self.get(m, l, j) * self.get(i, m, k))
                        out.append(sp.cancel(s))
        return out

    def check_jacobi(self):
        for r in self.jacobi_residuals():
            if not is_zero(r):
                raise VerificationError("jacobi", f"residual {r} nonzero")
        return True

    def killing(self):
        n = self.dim
        ads = [self.ad(j) for j in range(n)]
        return sp.Matrix(n, n,
                         lambda i, j: sp.cancel(sp.trace(ads[i] * ads[j])))

    def subspace_bracket(self, basis_a, basis_b):
        """Span (as column basis matrix) of [A, B] for spans A, B."""
        cols = []
        for v in basis_a:
            for w in basis_b:
                b = self.bracket(v, w)
                if any(x != 0 for x in b):
                    cols.append(b)
        return _column_reduce(cols, self.dim)


def _column_reduce(cols, n):
    if not cols:
        return []
    M = sp.Matrix.hstack(*cols)
    pivots = M.rref()[1]
    basis = M.columnspace()
    return [sp.nsimplify(c) for c in basis] if pivots else []


def _inertia(K):
    """(positive, negative, zero) inertia of a rational symmetric matrix
    by congruence diagonalization."""
    A = sp.Matrix(K)
    n = A.rows
    pos = neg = zero = 0
    idx = list(range(n))
    A = A[:, :]
    i = 0
    while i < n:
        # find a nonzero diagonal pivot at or after i
        piv = None
        for j in range(i, n):
            if A[j, j] != 0:
                piv = j
                break
        if piv is None:
            # look for an off-diagonal nonzero; symmetrize via e_j += e_k
            found = None
            for j in range(i, n):
                for k in range(j + 1, n):
                    if A[j, k] != 0:
                        found = (j, k)
                        break
                if found:
                    break
            if not found:
                zero += n - i
                break
            j, k = found
            A[j, :] = A[j, :] + A[k, :]
            A[:, j] = A[:, j] + A[:, k]
            piv = j
        if piv != i:
            A[i, :], A[piv, :] = A[piv, :], A[i, :]
            A[:, i], A[:, piv] = A[:, piv], A[:, i]
        d = A[i, i]
        for j in range(i + 1, n):
            f = A[j, i] / d
            if f != 0:
                A[j, :] = A[j, :] - f * A[i, :]
                A[:, j] = A[:, j] - f * A[:, i]
        if d > 0:
            pos += 1
        else:
            neg += 1
        i += 1
    return pos, neg, zero


@dataclass
class VessiotClassification:
    dimension: int
    derived_series_ranks: list
    lower_central_ranks: list
    killing_rank: int
    killing_signature: tuple
    tag: str
    step: int = 0
    flag_basis: sp.Matrix | None = None   # rows: flag-adapted combinations
    levi_split: tuple | None = None       # (dim semisimple, dim radical)
    radical_basis: list = field(default_factory=list)

    def describe(self):
        if self.tag in ("nilpotent", "solvable"):
            return f"{self.tag}({self.step})"
        if self.tag == "levi" and self.levi_split:
            return f"levi({self.levi_split[0]}+{self.levi_split[1]})"
        return self.tag


def _series_ranks(C, lower_central=False):
    n = C.dim
    basis = [sp.Matrix(sp.eye(n)[:, i]) for i in range(n)]
    full = basis
    ranks = [n]
    cur = basis
    while True:
        nxt = C.subspace_bracket(full if lower_central else cur, cur)
        r = len(nxt)
        ranks.append(r)
        if r == 0 or r == len(cur):
            break
        cur = nxt
    return ranks, cur


def _annihilator_rows(vectors, n):
    """Rows spanning the annihilator of span(vectors) in the dual space."""
    if not vectors:
        return sp.eye(n)
    M = sp.Matrix.hstack(*vectors)
    null = M.T.nullspace()
    return sp.Matrix([list(v.T) for v in null]) if null else sp.zeros(0, n)


def flag_basis_matrix(C):
    """Constant invertible matrix T whose row blocks span the annihilators
    of the derived series: ann(g^(1)) first, then the extensions."""
    n = C.dim
    basis = [sp.Matrix(sp.eye(n)[:, i]) for i in range(n)]
    layers = []
    cur = basis
    while True:
        nxt = C.subspace_bracket(cur, cur)
        layers.append(list(nxt))
        if not nxt:
            break
        cur = nxt
    # layers[0] = derived subalgebra, ..., layers[-1] = 0; the annihilators
    # grow along the series, smallest first
    rows = sp.zeros(0, n)
    sizes = []
    for g in layers:
        ann = _annihilator_rows(g, n)
        take = []
        for i in range(ann.rows):
            cand = sp.Matrix.vstack(rows, ann[i, :])
            if cand.rank() == rows.rows + 1:
                rows = cand
                take.append(i)
        sizes.append(len(take))
    if rows.rows != n:
        raise VerificationError("flag_basis", "flag completion failed")
    return rows, sizes


def classify(C):
    """Classification record for structure constants C (Jacobi assumed)."""
    n = C.dim
    derived, _ = _series_ranks(C)
    central, _ = _series_ranks(C, lower_central=True)
    K = C.killing()
    rankK = K.rank()
    pos, neg, zero = _inertia(K)
    flag = None
    levi = None
    radical = []
    if C.is_zero_algebra():
        tag, step = "abelian", 0
    elif central[-1] == 0:
        tag, step = "nilpotent", len(central) - 1
        flag = flag_basis_matrix(C)[0]
    elif derived[-1] == 0:
        tag, step = "solvable", len(derived) - 1
        flag = flag_basis_matrix(C)[0]
    elif rankK == n:
        tag, step = "semisimple", 0
    else:
        tag, step = "levi", 0
        radical = _radical(C, K)
        levi = (n - len(radical), len(radical))
    return VessiotClassification(
        dimension=n, derived_series_ranks=derived,
        lower_central_ranks=central, killing_rank=rankK,
        killing_signature=(pos, neg), tag=tag, step=step,
        flag_basis=flag, levi_split=levi, radical_basis=radical)


def _radical(C, K):
    """Radical = Killing-orthogonal complement of the derived algebra."""
    n = C.dim
    basis = [sp.Matrix(sp.eye(n)[:, i]) for i in range(n)]
    derived = C.subspace_bracket(basis, basis)
    if not derived:
        return basis
    D = sp.Matrix.hstack(*derived)
    null = (D.T * K).nullspace()
    return [sp.nsimplify(v) for v in null]


def levi_blocks(C, klass):
    """Row matrices spanning ann(radical) and a complementary ann(s);
    the Levi complement is sought as the Killing-orthogonal complement of
    the radical (sufficient for the reductive-style cases handled here)."""
    n = C.dim
    rad = klass.radical_basis
    K = C.killing()
    R = sp.Matrix.hstack(*rad) if rad else sp.zeros(n, 0)
    comp = (R.T * K).nullspace()
    S = comp
    # s must be a subalgebra
    for v in S:
        for w in S:
            b = C.bracket(v, w)
            M = sp.Matrix.hstack(*(S + [b])) if S else b
            if M.rank() != len(S):
                raise UnsupportedCaseError(
                    "Levi complement not found by Killing-orthogonal "
                    "construction; supply a basis split manually")
    ann_rad = _annihilator_rows(rad, n)
    ann_s = _annihilator_rows(S, n)
    T = sp.Matrix.vstack(ann_rad, ann_s)
    if T.rank() != n:
        raise UnsupportedCaseError("degenerate Levi basis split")
    return ann_rad, ann_s
