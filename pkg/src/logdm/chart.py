"""The local monomial chart: indexed coefficient algebra and its diagonal action.

The chart is Spec F_p[N^r] with its canonical log structure.  Sections of the
indexed algebra are finite F_p-combinations of monomials u^a th^j with a in
N^r and j in Z^r; the index of such a monomial is j and its action exponent
is n = a + j.  Every operator d_<k> acts diagonally on monomials, with
eigenvalue prod_i q_{k_i}! C(n_i, k_i) mod p — binomials generalized to
negative n_i so that inverse characters th^{-1} transform consistently
(validated by th * th^{-1} = 1 together with the Leibniz rule).

Two chart roles share this code: the base chart carries the level-m operator
ring, and the Frobenius-target chart (the m-th Frobenius twist) carries the
level-0 ring acting on sections whose exponent n is divisible by p^m, through
the scaled exponent n / p^m.
"""

from .errors import ArityError, ContextMismatch, ValidationFailure
from . import mindex as mx
from .mindex import LevelContext
from ._knobs import knob


class AMonomial(tuple):
    """Monomial u^a th^j, stored as the pair (a, j) of exponent tuples."""

    __slots__ = ()

    def __new__(cls, a, j):
        a = tuple(a)
        j = tuple(j)
        if any(x < 0 for x in a):
            raise ValueError("u-exponents must be nonnegative")
        return tuple.__new__(cls, (a, j))

    @property
    def a(self):
        return self[0]

    @property
    def j(self):
        return self[1]

    @property
    def n(self):
        """Action exponent a + j (componentwise, signed)."""
        return mx.mi_add(self[0], self[1])

    def mul(self, other):
        return AMonomial(mx.mi_add(self.a, other.a), mx.mi_add(self.j, other.j))

    def __repr__(self):
        return f"u^{list(self.a)}*th^{list(self.j)}"


def one_monomial(r):
    return AMonomial((0,) * r, (0,) * r)


class ChartRing:
    """A chart together with the operator level acting on it.

    role "base": level-m operators on the chart of X itself (shift 0).
    role "frobenius_target": level-0 operators on the chart of the m-th
    Frobenius twist; coefficient monomials must have p^m | a + j and the
    diagonal action reads the scaled exponent (a + j)/p^m.
    """

    __slots__ = ("ctx", "role", "level", "shift", "scale")

    def __init__(self, ctx, role="base"):
        if role not in ("base", "frobenius_target"):
            raise ValueError(f"unknown chart role {role!r}")
        self.ctx = ctx
        self.role = role
        if role == "base":
            self.level = ctx.m
            self.shift = 0
        else:
            self.level = 0
            self.shift = ctx.m
        self.scale = ctx.p ** self.shift

    @property
    def p(self):
        return self.ctx.p

    @property
    def r(self):
        return self.ctx.r

    @property
    def plevel1(self):
        """p^(level+1): the curvature order of this ring."""
        return self.ctx.p ** (self.level + 1)

    def __eq__(self, other):
        return isinstance(other, ChartRing) and (self.ctx, self.role) == (other.ctx, other.role)

    def __hash__(self):
        return hash((self.ctx, self.role))

    def __repr__(self):
        return f"ChartRing({self.ctx!r}, {self.role})"

    def admits(self, mono):
        """Is the monomial a section of this chart's coefficient algebra?"""
        return all(n % self.scale == 0 for n in mono.n)

    def eigenvalue(self, k, mono):
        """Diagonal eigenvalue of d_<k> on the monomial, in F_p."""
        p, lvl = self.p, self.level
        out = 1
        for ki, ni in zip(k, mono.n):
            if ni % self.scale:
                raise ValueError(f"monomial {mono} is not a section of {self!r}")
            v, u = mx.factorial_val_unit(mx.q_of(ki, p, lvl), p)
            if v > 0:
                return 0
            out = (out * u * mx.binom_mod_p(ni // self.scale, ki, p)) % p
            if out == 0:
                return 0
        return out


def base_ring(ctx):
    return ChartRing(ctx, "base")


def target_ring(ctx):
    return ChartRing(ctx, "frobenius_target")


class AElement:
    """Finite F_p-combination of chart monomials, in normal form.

    Normal form: a dict AMonomial -> nonzero coefficient in [1, p-1].
    Equality is dict equality; there is no tolerance anywhere.
    """

    __slots__ = ("ctx", "terms")

    def __init__(self, ctx, terms=None):
        self.ctx = ctx
        clean = {}
        if terms:
            p = ctx.p
            for mono, c in terms.items():
                c %= p
                if c:
                    clean[mono] = c
        self.terms = clean

    # constructors ---------------------------------------------------------
    @classmethod
    def zero(cls, ctx):
        return cls(ctx)

    @classmethod
    def one(cls, ctx):
        return cls(ctx, {one_monomial(ctx.r): 1})

    @classmethod
    def monomial(cls, ctx, a, j, coeff=1):
        a, j = tuple(a), tuple(j)
        if len(a) != ctx.r or len(j) != ctx.r:
            raise ArityError(f"exponent vectors must have length r={ctx.r}")
        return cls(ctx, {AMonomial(a, j): coeff})

    @classmethod
    def theta(cls, ctx, j):
        return cls.monomial(ctx, (0,) * ctx.r, j)

    @classmethod
    def u(cls, ctx, a):
        return cls.monomial(ctx, a, (0,) * ctx.r)

    # ring structure -------------------------------------------------------
    def _check(self, other):
        if self.ctx != other.ctx:
            raise ContextMismatch("AElements over different contexts")

    def __add__(self, other):
        self._check(other)
        out = dict(self.terms)
        for mono, c in other.terms.items():
            out[mono] = out.get(mono, 0) + c
        return AElement(self.ctx, out)

    def __sub__(self, other):
        return self + other.scale(-1)

    def scale(self, c):
        return AElement(self.ctx, {m: c * v for m, v in self.terms.items()})

    def __mul__(self, other):
        self._check(other)
        out = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = m1.mul(m2)
                out[m] = out.get(m, 0) + c1 * c2
        return AElement(self.ctx, out)

    def __eq__(self, other):
        return isinstance(other, AElement) and self.ctx == other.ctx and self.terms == other.terms

    def __hash__(self):
        return hash((self.ctx, frozenset(self.terms.items())))

    def is_zero(self):
        return not self.terms

    def indices(self):
        return {m.j for m in self.terms}

    def __repr__(self):
        if not self.terms:
            return "0"
        return " + ".join(f"{c}*{m!r}" for m, c in sorted(self.terms.items()))


def a_mul(x, y):
    """Product in the indexed algebra (indices add)."""
    return x * y


def d_action(k, x, ring):
    """Apply d_<k> to an element: diagonal on monomials, extended linearly."""
    if isinstance(ring, LevelContext):
        ring = base_ring(ring)
    k = tuple(k)
    out = {}
    for mono, c in x.terms.items():
        lam = ring.eigenvalue(k, mono)
        if lam:
            out[mono] = out.get(mono, 0) + c * lam
    return AElement(x.ctx, out)


def b_level(mono, ctx):
    """Largest l <= m+1 with p^l dividing every component of a + j.

    Equivalently (tested): d_<p^s eps_i> kills the monomial for all s < l.
    """
    cap = ctx.m + 1
    lvl = cap
    for n in mono.n:
        l = 0
        while l < cap and n % (ctx.p ** (l + 1)) == 0:
            l += 1
        lvl = min(lvl, l)
    return lvl


def b_decompose(x, ctx):
    """Unique decomposition x = sum_j b_j th^j, j in [0, p^{m+1}-1]^r, b_j in B^(m+1).

    Returns a dict from the residue j to the B^(m+1)-coefficient AElement.
    The residue of a monomial is forced: j == (a + j_mono) mod p^{m+1}.
    """
    q = ctx.pm1
    out = {}
    for mono, c in x.terms.items():
        res = tuple(n % q for n in mono.n)
        b_mono = AMonomial(mono.a, mx.mi_sub(mono.j, res))
        bucket = out.setdefault(res, {})
        bucket[b_mono] = bucket.get(b_mono, 0) + c
    return {res: AElement(ctx, terms) for res, terms in out.items() if any(v % ctx.p for v in terms.values())}


def b_reassemble(parts, ctx):
    """Inverse of b_decompose: sum of b_j * th^j."""
    out = AElement.zero(ctx)
    for res, b in parts.items():
        out = out + b * AElement.theta(ctx, res)
    return out


def b_basis_over_higher(ctx):
    """The p^r monomials th^(p^m j), j in [0, p-1]^r: basis of B^(m) over B^(m+1)."""
    basis = []
    for j in mx.iter_box_r(ctx.p - 1, ctx.r):
        e = mx.mi_scale(ctx.pm, j)
        if knob("perturb_bbasis") and mx.mi_total(j) == 1:
            e = mx.mi_add(e, ctx.eps(0))
        basis.append(AElement.theta(ctx, e))
    return basis


def b_decompose_over_higher(x, ctx):
    """Decompose a B^(m)-element over B^(m+1) on the basis {th^(p^m j)}.

    Returns dict from p^m*j (the basis exponent) to the B^(m+1)-coefficient.
    """
    out = {}
    for mono, c in x.terms.items():
        n = mono.n
        if any(t % ctx.pm for t in n):
            raise ValidationFailure("b-membership", f"{mono} is not in B^({ctx.m})")
        t = tuple(((ni // ctx.pm) % ctx.p) * ctx.pm for ni in n)
        b_mono = AMonomial(mono.a, mx.mi_sub(mono.j, t))
        bucket = out.setdefault(t, {})
        bucket[b_mono] = bucket.get(b_mono, 0) + c
    return {t: AElement(ctx, terms) for t, terms in out.items() if any(v % ctx.p for v in terms.values())}
