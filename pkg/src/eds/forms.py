"""Charts, differential forms, vector fields, coframes, and chart maps.

Forms carry exact Expr coefficients over strictly increasing coordinate-index
tuples; degree is capped at 3 (3-forms only ever arise inside d(2-form)).
"""

from __future__ import annotations

import itertools

import sympy as sp

from .errors import EDSError, SingularCoframeError
from .expr import normalize, is_zero
from .linear import _entry_zero, invert

MAX_DEGREE = 3


class Chart:
    """Ordered coordinates plus parameters; ordering fixes the wedge basis."""

    def __init__(self, coords, params=(), label=""):
        self.coords = tuple(sp.Symbol(c) if isinstance(c, str) else c
                            for c in coords)
        self.params = tuple(sp.Symbol(p) if isinstance(p, str) else p
                            for p in params)
        names = [s.name for s in self.coords + self.params]
        if len(set(names)) != len(names):
            raise EDSError(f"duplicate symbol names in chart {label!r}")
        self.label = label
        self.symbol_map = {s.name: s for s in self.coords + self.params}

    @property
    def dim(self):
        return len(self.coords)

    def index(self, sym):
        return self.coords.index(sym)

    def renamed(self, mapping, label=""):
        """New chart with coordinates renamed per {old name: new name}."""
        new = [sp.Symbol(mapping.get(c.name, c.name)) for c in self.coords]
        return Chart(new, self.params, label or self.label)

    def product(self, other, label=""):
        """Product chart; coordinate names must not collide."""
        return Chart(self.coords + other.coords,
                     tuple(dict.fromkeys(self.params + other.params)),
                     label or f"{self.label}x{other.label}")

    def __eq__(self, other):
        return (isinstance(other, Chart) and self.coords == other.coords
                and self.params == other.params)

    def __hash__(self):
        return hash((self.coords, self.params))

    def __repr__(self):
        return f"Chart({', '.join(c.name for c in self.coords)})"


def _same_chart(*objs):
    chart = objs[0].chart
    for o in objs[1:]:
        if o.chart != chart:
            raise EDSError("objects live on different charts")
    return chart


class DForm:
    """Exterior form of degree <= 3 with Expr coefficients."""

    def __init__(self, chart, degree, comps=None, normalized=False):
        if not 0 <= degree <= MAX_DEGREE:
            raise EDSError(f"degree {degree} outside supported range")
        self.chart = chart
        self.degree = degree
        out = {}
        for key, val in (comps or {}).items():
            key = tuple(key)
            if len(key) != degree or list(key) != sorted(set(key)):
                raise EDSError(f"bad component key {key} for degree {degree}")
            if not normalized:
                val = normalize(sp.sympify(val))
            if not _entry_zero(val):
                out[key] = val
        self.comps = out

    # -- constructors ------------------------------------------------------
    @classmethod
    def function(cls, chart, expr):
        return cls(chart, 0, {(): expr})

    @classmethod
    def coordinate_differential(cls, chart, sym):
        return cls(chart, 1, {(chart.index(sym),): sp.S.One}, normalized=True)

    @classmethod
    def from_expr(cls, chart, expr):
        """d applied to a scalar Expr: the differential as a 1-form."""
        return cls.function(chart, expr).d()

    @classmethod
    def zero(cls, chart, degree=1):
        return cls(chart, degree)

    # -- ring structure ----------------------------------------------------
    def __add__(self, other):
        _same_chart(self, other)
        if self.degree != other.degree:
            raise EDSError("cannot add forms of different degree")
        comps = dict(self.comps)
        for k, v in other.comps.items():
            comps[k] = comps.get(k, sp.S.Zero) + v
        return DForm(self.chart, self.degree, comps)

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return self.scale(-1)

    def scale(self, factor):
        factor = sp.sympify(factor)
        return DForm(self.chart, self.degree,
                     {k: factor * v for k, v in self.comps.items()})

    def __rmul__(self, factor):
        if isinstance(factor, DForm):
            return NotImplemented
        return self.scale(factor)

    __mul__ = __rmul__

    def is_zero_form(self):
        return all(is_zero(v) for v in self.comps.values())

    # -- exterior operations -----------------------------------------------
    def d(self):
        """Exterior derivative."""
        if self.degree >= MAX_DEGREE:
            raise EDSError("degree overflow in exterior derivative")
        chart = self.chart
        comps = {}
        for key, val in self.comps.items():
            for j, x in enumerate(chart.coords):
                dv = sp.diff(val, x)
                if dv == 0 or j in key:
                    continue
                new, sign = _insert_index(j, key)
                comps[new] = comps.get(new, sp.S.Zero) + sign * dv
        return DForm(chart, self.degree + 1, comps)

    def wedge(self, other):
        _same_chart(self, other)
        k = self.degree + other.degree
        if k > MAX_DEGREE:
            raise EDSError("degree overflow in wedge product")
        comps = {}
        for ka, va in self.comps.items():
            for kb, vb in other.comps.items():
                if set(ka) & set(kb):
                    continue
                key, sign = _merge_indices(ka, kb)
                comps[key] = comps.get(key, sp.S.Zero) + sign * va * vb
        return DForm(self.chart, k, comps)

    def interior(self, X):
        """Interior product X ⌟ ω."""
        _same_chart(self, X)
        if self.degree == 0:
            raise EDSError("interior product needs degree >= 1")
        comps = {}
        for key, val in self.comps.items():
            for pos, idx in enumerate(key):
                coeff = X.comps[idx]
                if coeff == 0:
                    continue
                rest = key[:pos] + key[pos + 1:]
                sign = (-1) ** pos
                comps[rest] = comps.get(rest, sp.S.Zero) + sign * coeff * val
        return DForm(self.chart, self.degree - 1, comps)

    def __call__(self, *vectors):
        """Evaluate on vector fields; returns an Expr."""
        out = self
        for X in vectors:
            out = out.interior(X)
        if out.degree != 0:
            raise EDSError("form not fully contracted")
        return normalize(out.comps.get((), sp.S.Zero))

    def subs(self, mapping):
        return DForm(self.chart, self.degree,
                     {k: sp.sympify(v).xreplace(mapping)
                      for k, v in self.comps.items()})

    def coefficient(self, *key):
        return self.comps.get(tuple(key), sp.S.Zero)

    def __eq__(self, other):
        return (isinstance(other, DForm) and self.chart == other.chart
                and self.degree == other.degree
                and (self - other).is_zero_form())

    def __hash__(self):
        return hash((self.chart, self.degree, frozenset(self.comps)))

    def __repr__(self):
        if not self.comps:
            return "0"
        names = [c.name for c in self.chart.coords]
        bits = []
        for key in sorted(self.comps):
            basis = "^".join(f"d{names[i]}" for i in key) or "1"
            bits.append(f"({self.comps[key]}) {basis}".strip())
        return " + ".join(bits)


def _insert_index(j, key):
    """Insert j into the increasing tuple key; returns (tuple, sign)."""
    pos = 0
    while pos < len(key) and key[pos] < j:
        pos += 1
    return key[:pos] + (j,) + key[pos:], (-1) ** pos


def _merge_indices(ka, kb):
    merged = ka + kb
    order = sorted(range(len(merged)), key=lambda i: merged[i])
    sign = _permutation_sign(order)
    return tuple(merged[i] for i in order), sign


def _permutation_sign(perm):
    sign = 1
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def wedge(a, b, *more):
    out = a.wedge(b)
    for m in more:
        out = out.wedge(m)
    return out


def exterior_derivative(omega):
    return omega.d()


def interior_product(X, omega):
    return omega.interior(X)


class VectorField:
    """Vector field with one Expr coefficient per chart coordinate."""

    def __init__(self, chart, comps):
        self.chart = chart
        if isinstance(comps, dict):
            comps = [comps.get(i, 0) for i in range(chart.dim)]
        if len(comps) != chart.dim:
            raise EDSError("wrong number of vector components")
        self.comps = tuple(normalize(sp.sympify(c)) for c in comps)

    @classmethod
    def coordinate(cls, chart, sym):
        comps = [sp.S.Zero] * chart.dim
        comps[chart.index(sym)] = sp.S.One
        return cls(chart, comps)

    def apply(self, f):
        """Directional derivative of a scalar."""
        f = sp.sympify(f)
        return normalize(sum(c * sp.diff(f, x)
                             for c, x in zip(self.comps, self.chart.coords)))

    def __add__(self, other):
        _same_chart(self, other)
        return VectorField(self.chart,
                           [a + b for a, b in zip(self.comps, other.comps)])

    def __sub__(self, other):
        return self + other.scale(-1)

    def __neg__(self):
        return self.scale(-1)

    def scale(self, factor):
        factor = sp.sympify(factor)
        return VectorField(self.chart, [factor * c for c in self.comps])

    __rmul__ = scale

    def is_zero_field(self):
        return all(is_zero(c) for c in self.comps)

    def __repr__(self):
        bits = [f"({c}) d/d{x.name}"
                for c, x in zip(self.comps, self.chart.coords) if c != 0]
        return " + ".join(bits) or "0"


def lie_bracket(X, Y):
    """[X, Y]; antisymmetric, satisfies Jacobi."""
    chart = _same_chart(X, Y)
    comps = [X.apply(Yc) - Y.apply(Xc) for Xc, Yc in zip(X.comps, Y.comps)]
    return VectorField(chart, comps)


def lie_derivative(X, omega):
    """Cartan's identity: L_X ω = X ⌟ dω + d(X ⌟ ω)."""
    out = omega.d().interior(X)
    if omega.degree >= 1:
        out = out + omega.interior(X).d()
    return out


class Coframe:
    """Ordered list of 1-forms spanning T*M, with block labels."""

    def __init__(self, forms, labels=None, base_point=None, seed=0):
        if not forms:
            raise EDSError("empty coframe")
        chart = _same_chart(*forms)
        if len(forms) != chart.dim:
            raise SingularCoframeError(
                f"{len(forms)} forms on a {chart.dim}-dimensional chart")
        for f in forms:
            if f.degree != 1:
                raise EDSError("coframe members must be 1-forms")
        self.chart = chart
        self.forms = list(forms)
        self.labels = list(labels) if labels else [""] * len(forms)
        self._matrix = sp.Matrix(
            [[f.coefficient(j) for j in range(chart.dim)] for f in forms])
        # singularity surfaces in dual_frame(); computing a determinant up
        # front is wasted work on large coframes
        self._dual = None

    @classmethod
    def coordinate(cls, chart):
        return cls([DForm.coordinate_differential(chart, c)
                    for c in chart.coords])

    @classmethod
    def derived(cls, parent, forms, labels=None, seed=0):
        """Coframe whose members combine an existing coframe invertibly.

        The coefficient matrix and dual frame come from the parent's via
        the transition matrix, avoiding a fresh full inversion."""
        chart = parent.chart
        if len(forms) != chart.dim:
            raise SingularCoframeError(
                f"{len(forms)} forms on a {chart.dim}-dimensional chart")
        obj = cls.__new__(cls)
        obj.chart = chart
        obj.forms = list(forms)
        obj.labels = list(labels) if labels else [""] * len(forms)
        L = sp.zeros(chart.dim, chart.dim)
        for i, f in enumerate(forms):
            if f.degree != 1:
                raise EDSError("coframe members must be 1-forms")
            for (k,), c in parent.express(f).items():
                L[i, k] = c
        trans_inv = invert(L)  # raises if the combination is singular
        obj._matrix = (L * parent.matrix()).applyfunc(normalize)
        pdual = parent.dual_frame()
        parent_inv = sp.Matrix([[v.comps[i] for v in pdual]
                                for i in range(chart.dim)])
        dual_matrix = (parent_inv * trans_inv).applyfunc(normalize)
        obj._dual = [VectorField(chart, list(dual_matrix.col(j)))
                     for j in range(chart.dim)]
        return obj

    def __len__(self):
        return len(self.forms)

    def __getitem__(self, i):
        return self.forms[i]

    def matrix(self):
        return self._matrix

    def dual_frame(self):
        """Vector fields e_j with <ω^i, e_j> = δ^i_j exactly."""
        if self._dual is None:
            inv = invert(self._matrix)
            self._dual = [VectorField(self.chart, list(inv.col(j)))
                          for j in range(len(self.forms))]
        return self._dual

    def block(self, label):
        """Members (with indices) carrying the given block label."""
        return [(i, f) for i, (f, lab) in enumerate(zip(self.forms, self.labels))
                if lab == label]

    def express(self, omega):
        """Coefficients of ω over the coframe (deg 1) or its wedge basis (deg 2).

        Returns {index-tuple: Expr}; reconstruction is exact by duality.
        """
        dual = self.dual_frame()
        if omega.degree == 1:
            return {(i,): normalize(omega(e)) for i, e in enumerate(dual)
                    if not _entry_zero(normalize(omega(e)))}
        if omega.degree == 2:
            out = {}
            for i, j in itertools.combinations(range(len(dual)), 2):
                c = normalize(omega(dual[i], dual[j]))
                if not _entry_zero(c):
                    out[(i, j)] = c
            return out
        raise EDSError("express supports degrees 1 and 2")

    def reconstruct(self, coeffs, degree):
        """Inverse of express: assemble a DForm from coframe coefficients."""
        out = DForm.zero(self.chart, degree)
        for key, c in coeffs.items():
            term = DForm.function(self.chart, c)
            for i in key:
                term = term.wedge(self.forms[i])
            out = out + term
        return out


def dual_frame(coframe):
    return coframe.dual_frame()


def express_in_coframe(omega, coframe):
    return coframe.express(omega)


class ChartMap:
    """Map between charts: one target-coordinate Expr per source symbol set."""

    def __init__(self, source, target, exprs):
        if len(exprs) != target.dim:
            raise EDSError("chart map needs one expression per target coordinate")
        self.source = source
        self.target = target
        self.exprs = [sp.sympify(e) for e in exprs]
        self._subs = dict(zip(target.coords, self.exprs))

    @classmethod
    def identity(cls, chart):
        return cls(chart, chart, list(chart.coords))

    @classmethod
    def rename(cls, source, target):
        """Coordinate-wise identification of two same-length charts."""
        return cls(source, target, list(source.coords))

    def component(self, sym):
        return self._subs[sym]

    def compose(self, inner):
        """self ∘ inner : inner.source -> self.target."""
        if inner.target != self.source:
            raise EDSError("charts do not compose")
        return ChartMap(inner.source, self.target,
                        [sp.sympify(e).xreplace(inner._subs) for e in self.exprs])

    def pullback(self, omega):
        """φ*(ω) for ω on the target chart."""
        if omega.chart != self.target:
            raise EDSError("form does not live on the map's target chart")
        out = DForm.zero(self.source, omega.degree)
        for key, val in omega.comps.items():
            term = DForm.function(self.source, sp.sympify(val).xreplace(self._subs))
            for idx in key:
                term = term.wedge(
                    DForm.from_expr(self.source, self.exprs[idx]))
            out = out + term
        return out

    def push_point(self, point):
        """Image of a RationalPoint of the source chart."""
        from .expr import RationalPoint
        out = RationalPoint()
        for sym, e in zip(self.target.coords, self.exprs):
            out[sym] = point.evaluate(e)
        return out

    def __repr__(self):
        bits = [f"{c.name} = {e}" for c, e in zip(self.target.coords, self.exprs)]
        return "ChartMap(" + "; ".join(bits) + ")"


def pullback(phi, omega):
    return phi.pullback(omega)


def solve_level_set(chart, constraints, keep=None):
    """Triangularize constraints (Expr = rational) and solve coordinates.

    Returns (sub-chart, inclusion ChartMap).  Each pass solves constraints
    that are linear in some not-yet-solved coordinate whose coefficient is
    free of unsolved coordinates; failure to progress is an error.
    """
    pending = [(sp.sympify(e) - sp.sympify(v)) for e, v in constraints]
    solved = {}
    while pending:
        progress = False
        for eq in list(pending):
            cur = normalize(sp.sympify(eq).xreplace(solved))
            if _entry_zero(cur):
                pending.remove(eq)
                progress = True
                continue
            num, _den = cur.as_numer_denom()
            for c in chart.coords:
                if c in solved or (keep and c in keep) or not num.has(c):
                    continue
                try:
                    poly = sp.Poly(num, c)
                except sp.PolynomialError:
                    continue
                if poly.degree() != 1:
                    continue
                a, b = poly.nth(1), poly.nth(0)
                if is_zero(a):
                    continue
                solved[c] = normalize(-b / a)
                pending.remove(eq)
                progress = True
                break
            if progress:
                break
        if not progress:
            raise EDSError("constraint set is not triangularizable")
    # substitute chained solutions to closure
    for _ in range(len(solved)):
        solved = {k: normalize(sp.sympify(v).xreplace(solved))
                  for k, v in solved.items()}
    if any(v.has(k) for k in solved for v in solved.values()):
        raise EDSError("circular constraint set")
    rest = [c for c in chart.coords if c not in solved]
    sub = Chart(rest, chart.params,
                label=(chart.label + "|level") if chart.label else "level")
    incl = ChartMap(sub, chart,
                    [solved.get(c, c) for c in chart.coords])
    return sub, incl


def restrict_to_level_set(omega, constraints, keep=None):
    """Restrict a form to the level set {Expr = value}."""
    sub, incl = solve_level_set(omega.chart, constraints, keep=keep)
    return incl.pullback(omega)
