"""Exact symbolic scalars: parsing, normal forms, differentiation, zero tests.

Expressions are sympy objects drawn from the field of rational functions of
coordinate and parameter symbols, extended by transcendental atoms
(exp/ln/sin/cos/tan/sqrt) and opaque arbitrary-function symbols with formal
derivatives.  All arithmetic is exact; no floats enter any trusted result.
Zero verdicts always come from a normal form; rational-point sampling is used
only as a fast negative.
"""

from __future__ import annotations

import random
from fractions import Fraction

import sympy as sp

from .errors import DegenerateDivisionError, ExprSyntaxError, UnknownSymbolError

Expr = sp.Expr

_BUILTINS = {
    "exp": sp.exp,
    "ln": sp.log,
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "sqrt": sp.sqrt,
}

_ILL = (sp.zoo, sp.oo, -sp.oo, sp.nan)


# ---------------------------------------------------------------------------
# Parsing: tokenizer + precedence climbing for the fixture grammar.
# ---------------------------------------------------------------------------

class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind = kind
        self.text = text
        self.pos = pos


def _tokenize(text):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            tokens.append(_Token("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("name", text[i:j], i))
            i = j
            continue
        if c in "+-*/^(),'":
            tokens.append(_Token(c, c, i))
            i += 1
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", i)
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    """Precedence-climbing parser producing sympy expressions.

    Grammar: identifiers, integer literals, ``+ - * / ^`` with standard
    precedence (``^`` right-associative), parentheses, builtin functions,
    arbitrary-function application ``F(x, y)``, derivative quoting ``F'(x)``
    and ``F''(x)``, and ``diff(F(x,y), x)`` for formal partials of
    multi-argument function symbols.  No implicit multiplication.
    """

    def __init__(self, text, symbols=None):
        self.text = text
        self.tokens = _tokenize(text)
        self.k = 0
        self.symbols = symbols  # name -> Symbol, or None for lenient mode

    def peek(self):
        return self.tokens[self.k]

    def take(self, kind=None):
        tok = self.tokens[self.k]
        if kind is not None and tok.kind != kind:
            raise ExprSyntaxError(f"expected {kind!r}, found {tok.text!r}", tok.pos)
        self.k += 1
        return tok

    def parse(self):
        e = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {tok.text!r}", tok.pos)
        return e

    def expr(self):
        e = self.term()
        while self.peek().kind in "+-":
            op = self.take().kind
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self):
        e = self.unary()
        while self.peek().kind in "*/":
            op = self.take()
            rhs = self.unary()
            if op.kind == "*":
                e = e * rhs
            else:
                if rhs == 0:
                    raise DegenerateDivisionError(
                        f"division by literal zero at position {op.pos}")
                e = e / rhs
        return e

    def unary(self):
        if self.peek().kind == "-":
            self.take()
            return -self.unary()
        if self.peek().kind == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "^":
            self.take()
            expo = self.unary_power()
            return base ** expo
        return base

    def unary_power(self):
        # exponent: allows a leading sign, then climbs at power level
        if self.peek().kind == "-":
            self.take()
            return -self.unary_power()
        return self.power()

    def atom(self):
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return sp.Integer(int(tok.text))
        if tok.kind == "(":
            self.take()
            e = self.expr()
            self.take(")")
            return e
        if tok.kind == "name":
            self.take()
            return self.name_atom(tok)
        raise ExprSyntaxError(f"unexpected {tok.text or 'end of input'!r}", tok.pos)

    def name_atom(self, tok):
        primes = 0
        while self.peek().kind == "'":
            self.take()
            primes += 1
        if self.peek().kind == "(":
            self.take()
            args = [self.expr()]
            while self.peek().kind == ",":
                self.take()
                args.append(self.expr())
            self.take(")")
            return self.apply_name(tok, primes, args)
        if primes:
            raise ExprSyntaxError("derivative quote requires an argument list",
                                  tok.pos)
        return self.plain_symbol(tok)

    def plain_symbol(self, tok):
        if self.symbols is not None:
            try:
                return self.symbols[tok.text]
            except KeyError:
                raise UnknownSymbolError(
                    f"unknown symbol {tok.text!r} at position {tok.pos}") from None
        return sp.Symbol(tok.text)

    def apply_name(self, tok, primes, args):
        name = tok.text
        if name == "diff":
            if primes or len(args) != 2:
                raise ExprSyntaxError("diff takes (expression, symbol)", tok.pos)
            if not isinstance(args[1], sp.Symbol):
                raise ExprSyntaxError("diff's second argument must be a symbol",
                                      tok.pos)
            return sp.Derivative(args[0], args[1])
        if name in _BUILTINS:
            if primes:
                raise ExprSyntaxError(f"builtin {name} takes no derivative quote",
                                      tok.pos)
            if len(args) != 1:
                raise ExprSyntaxError(f"builtin {name} takes one argument", tok.pos)
            return _BUILTINS[name](args[0])
        f = sp.Function(name)
        if primes == 0:
            return f(*args)
        if len(args) != 1:
            raise ExprSyntaxError("derivative quoting needs a unary function",
                                  tok.pos)
        arg = args[0]
        if isinstance(arg, sp.Symbol):
            return sp.Derivative(f(arg), (arg, primes))
        dummy = sp.Dummy("xi")
        return sp.Subs(sp.Derivative(f(dummy), (dummy, primes)), dummy, arg)


def parse_expr(text, symbols=None):
    """Parse ``text`` in the fixture grammar.

    ``symbols`` maps declared names to Symbols; when given, undeclared bare
    identifiers raise UnknownSymbolError (strict mode).
    """
    return _Parser(text, symbols).parse()


# ---------------------------------------------------------------------------
# Printing back to the fixture grammar (round-trips through parse_expr).
# ---------------------------------------------------------------------------

class _GrammarPrinter(sp.printing.str.StrPrinter):
    def _print_Pow(self, expr, rational=False):
        return super()._print_Pow(expr).replace("**", "^")

    def _print_log(self, expr):
        return f"ln({self._print(expr.args[0])})"

    def _print_Derivative(self, expr):
        head = expr.expr
        if (isinstance(head, sp.core.function.AppliedUndef)
                and len(head.args) == 1
                and len(expr.variable_count) == 1
                and expr.variable_count[0][0] == head.args[0]):
            n = int(expr.variable_count[0][1])
            return f"{head.func.__name__}{chr(39) * n}({self._print(head.args[0])})"
        out = self._print(expr.expr)
        for v, n in expr.variable_count:
            for _ in range(int(n)):
                out = f"diff({out}, {self._print(v)})"
        return out


def expr_to_str(e):
    """Print an Expr in the fixture grammar; parse_expr inverts it."""
    return _GrammarPrinter().doprint(sp.sympify(e)).replace("**", "^")


# ---------------------------------------------------------------------------
# Normal form, differentiation, zero test.
# ---------------------------------------------------------------------------

def _check_defined(e):
    if e.has(*_ILL):
        raise DegenerateDivisionError(f"expression is undefined: {e}")
    return e


def _trig_reduce(e):
    """Reduce numerator and denominator modulo sin^2 = 1 - cos^2 per angle.

    Keeps every sine degree at most one, so same-angle Pythagorean
    identities cancel rationally and expression sizes stay bounded.
    """
    num, den = sp.fraction(sp.cancel(sp.together(e)))
    angles = ({a.args[0] for a in e.atoms(sp.sin)}
              | {a.args[0] for a in e.atoms(sp.cos)})

    def reduce_poly(p):
        p = sp.expand(p)
        for a in angles:
            s, c = sp.sin(a), sp.cos(a)
            if p.has(s):
                p = sp.expand(sp.rem(p, s**2 + c**2 - 1, s))
        return p

    try:
        return reduce_poly(num) / reduce_poly(den)
    except sp.PolynomialError:
        return e


_NORMALIZE_CACHE: dict = {}


def normalize(e):
    """Canonical rational form over the atom monoid.

    Trigonometric functions are rewritten to half-angle tangents (so all
    same-angle identities cancel rationally) and exp products are fused.
    Idempotent; normalize(e - e) = 0 for every constructible e.  A
    denominator that normalizes to zero raises DegenerateDivisionError.
    """
    e = sp.sympify(e)
    _check_defined(e)
    if e.is_Atom:
        return e
    try:
        cached = _NORMALIZE_CACHE.get(e)
    except TypeError:
        cached = None
        e_key = None
    else:
        e_key = e
    if cached is not None:
        return cached
    work = e
    if work.has(sp.tan, sp.cot, sp.sec, sp.csc):
        work = work.rewrite([sp.tan, sp.cot, sp.sec, sp.csc], sp.sin)
    if work.has(sp.sin, sp.cos):
        work = work.replace(
            lambda f: isinstance(f, (sp.sin, sp.cos)),
            lambda f: f.func(sp.expand(f.args[0])))
        work = _trig_reduce(sp.expand_trig(work))
    if work.has(sp.exp):
        work = sp.powsimp(work, deep=True, combine="exp")
    out = _check_defined(sp.cancel(sp.together(work)))
    if e_key is not None:
        if len(_NORMALIZE_CACHE) > 20000:
            _NORMALIZE_CACHE.clear()
        _NORMALIZE_CACHE[e_key] = out
        _NORMALIZE_CACHE[out] = out
    return out


def differentiate(e, x):
    """Partial derivative; function symbols pick up formal derivative nodes."""
    return sp.diff(sp.sympify(e), x)


def _opaque_atoms(e):
    """Atoms treated as independent indeterminates for sampling."""
    atoms = set()
    for node in sp.preorder_traversal(e):
        if isinstance(node, (sp.Derivative, sp.Subs)):
            atoms.add(node)
        elif isinstance(node, sp.core.function.AppliedUndef):
            atoms.add(node)
    # keep only outermost opaque atoms
    outer = set()
    for a in atoms:
        if not any(a is not b and b.has(a) for b in atoms):
            outer.add(a)
    return outer


def _sample_nonzero(e, rng, tries=5):
    """Numeric fast negative: True when e is definitely not identically zero.

    Opaque function atoms are frozen to fresh symbols, then everything is
    evaluated at random small-rational points in high precision.  Never used
    to conclude zero.
    """
    repl = {a: sp.Dummy(f"atom{i}") for i, a in enumerate(_opaque_atoms(e))}
    frozen = e.xreplace(repl) if repl else e
    syms = sorted(frozen.free_symbols, key=lambda s: s.name)
    hits = 0
    for _ in range(tries):
        point = {s: sp.Rational(rng.randint(1, 40), rng.randint(1, 40))
                 * rng.choice((1, -1)) for s in syms}
        try:
            val = frozen.evalf(60, subs=point)
        except (ValueError, TypeError, ZeroDivisionError):
            continue
        if not val.is_number or val.has(*_ILL):
            continue
        mag = abs(val)
        if mag.is_comparable and mag > sp.Float("1e-30", 60):
            hits += 1
            if hits >= 2:
                return True
    return False


_IS_ZERO_CACHE: dict = {}


def is_zero(e, seed=0):
    """True iff e normalizes to zero.  Sampling is only a fast negative."""
    e = sp.sympify(e)
    if e.is_Number:
        return e == 0
    key = (e, seed if isinstance(seed, int) else 0)
    try:
        cached = _IS_ZERO_CACHE.get(key)
    except TypeError:
        cached = None
        key = None
    if cached is not None:
        return cached
    result = _is_zero_uncached(e, seed)
    if key is not None:
        if len(_IS_ZERO_CACHE) > 20000:
            _IS_ZERO_CACHE.clear()
        _IS_ZERO_CACHE[key] = result
    return result


def _half_angle_rational(nf):
    """Eliminate sin/cos with the half-angle substitution.

    One dummy atom per distinct angle; same-angle identities then cancel
    as rational identities.  Angles are assumed independent after
    normalize() has unified integer multiples via expand_trig.
    """
    args = ({a.args[0] for a in nf.atoms(sp.sin)}
            | {a.args[0] for a in nf.atoms(sp.cos)})
    repl = {}
    for a in args:
        t = sp.Dummy("t_half")
        repl[sp.sin(a)] = 2 * t / (1 + t**2)
        repl[sp.cos(a)] = (1 - t**2) / (1 + t**2)
    return sp.cancel(sp.together(nf.xreplace(repl)))


def _is_zero_uncached(e, seed=0):
    nf = normalize(e)
    if nf.is_Number:
        return nf == 0
    rng = random.Random((seed if isinstance(seed, int) else 0) ^ 0x5ED5)
    if nf.has(sp.sin, sp.cos):
        rational = _half_angle_rational(nf)
        if rational.is_Number:
            return rational == 0
        if _sample_nonzero(rational, rng):
            return False
    elif _sample_nonzero(nf, rng):
        return False
    reduced = sp.simplify(nf)
    if reduced.is_Number:
        return reduced == 0
    reduced = sp.simplify(sp.factor(sp.expand(reduced)))
    return reduced.is_Number and reduced == 0


def are_equal(a, b, seed=0):
    return is_zero(sp.sympify(a) - sp.sympify(b), seed=seed)


# ---------------------------------------------------------------------------
# Rational points.
# ---------------------------------------------------------------------------

class RationalPoint(dict):
    """Exact map symbol -> rational value."""

    @classmethod
    def parse(cls, text, symbols):
        """Parse ``"x=0, y=1/2"`` against a name->Symbol table."""
        point = cls()
        for piece in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in piece:
                raise ValueError(f"bad assignment {piece!r}")
            name, _, val = piece.partition("=")
            name = name.strip()
            if name not in symbols:
                raise ValueError(f"unknown coordinate {name!r}")
            point[symbols[name]] = sp.Rational(Fraction(val.strip()))
        return point

    def evaluate(self, e):
        """Exact evaluation; undefined results raise DegenerateDivisionError."""
        val = sp.sympify(sp.sympify(e).xreplace(dict(self)))
        return _check_defined(sp.cancel(val)) if not val.is_Atom else val

    def defined_on(self, e):
        try:
            self.evaluate(e)
            return True
        except DegenerateDivisionError:
            return False


def random_rational_point(symbols, rng, bound=12):
    """Fresh small-rational point over the given symbols."""
    return RationalPoint(
        (s, sp.Rational(rng.randint(1, bound), rng.randint(1, bound))
         * rng.choice((1, -1)))
        for s in symbols)
