"""Multi-index combinatorics: the structure constants behind every operator formula.

All coefficients are computed twice: once in exact arbitrary-precision
rationals (the oracle path, `*_exact`), and once through mod-p fast paths
(Lucas digit products and p-adic factorial decompositions).  The fast paths
are cross-validated against the oracle in the `mindex-identities` suite.
Reduction mod p always asserts p-integrality first; a violation raises
IntegralityViolation and is a bug, not a data condition.

Multi-indices are plain tuples of ints.  Unsigned multi-indices (operator
orders, O_X-exponents) have nonnegative entries; signed ones (character
exponents) are arbitrary integers.
"""

from fractions import Fraction
from functools import lru_cache
from math import comb, factorial

from .errors import IntegralityViolation, UnsupportedContext
from ._knobs import knob

MultiIndex = tuple
SignedMultiIndex = tuple

SUPPORTED_PRIMES = (2, 3, 5, 7, 11, 13)
MAX_LEVEL = 3
MAX_COORDS = 3


class LevelContext:
    """Fixed (prime, level, coordinates) cell. Immutable and hashable."""

    __slots__ = ("p", "m", "r", "pm", "pm1")

    def __init__(self, p, m, r):
        if p not in SUPPORTED_PRIMES:
            raise UnsupportedContext(f"p={p} not a supported prime (need one of {SUPPORTED_PRIMES})")
        if not (0 <= m <= MAX_LEVEL):
            raise UnsupportedContext(f"m={m} outside [0, {MAX_LEVEL}]")
        if not (1 <= r <= MAX_COORDS):
            raise UnsupportedContext(f"r={r} outside [1, {MAX_COORDS}]")
        self.p = p
        self.m = m
        self.r = r
        self.pm = p ** m
        self.pm1 = p ** (m + 1)

    def __eq__(self, other):
        return isinstance(other, LevelContext) and (self.p, self.m, self.r) == (other.p, other.m, other.r)

    def __hash__(self):
        return hash((self.p, self.m, self.r))

    def __repr__(self):
        return f"LevelContext(p={self.p}, m={self.m}, r={self.r})"

    def zero(self):
        return (0,) * self.r

    def eps(self, i):
        """The i-th unit multi-index (0-based i)."""
        return tuple(1 if t == i else 0 for t in range(self.r))


# ---------------------------------------------------------------------------
# multi-index helpers

def mi_add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def mi_sub(a, b):
    return tuple(x - y for x, y in zip(a, b))


def mi_sub_nn(a, b):
    """a - b for unsigned indices; None when not componentwise >= 0."""
    out = tuple(x - y for x, y in zip(a, b))
    return out if all(x >= 0 for x in out) else None


def mi_sup(a, b):
    return tuple(max(x, y) for x, y in zip(a, b))


def mi_le(a, b):
    return all(x <= y for x, y in zip(a, b))


def mi_total(a):
    return sum(a)


def mi_scale(c, a):
    return tuple(c * x for x in a)


def iter_box(bounds):
    """All multi-indices k with 0 <= k_i <= bounds_i, lexicographic."""
    if not bounds:
        yield ()
        return
    for head in range(bounds[0] + 1):
        for tail in iter_box(bounds[1:]):
            yield (head,) + tail


def iter_box_r(bound, r):
    yield from iter_box((bound,) * r)


# ---------------------------------------------------------------------------
# scalar coefficient arithmetic

def q_of(k, p, m):
    """The quotient q with k = q*p^m + s, 0 <= s < p^m."""
    if k < 0:
        raise ValueError("q_of needs k >= 0")
    return k // (p ** m)


def q_vec(k, p, m):
    return tuple(q_of(ki, p, m) for ki in k)


def q_fact_vec(k, p, m):
    """Product over components of q_{k_i}! (exact integer)."""
    out = 1
    for ki in k:
        out *= factorial(q_of(ki, p, m))
    return out


@lru_cache(maxsize=None)
def _fact_val_unit(n, p):
    v = 0
    u = 1
    for t in range(2, n + 1):
        while t % p == 0:
            t //= p
            v += 1
        u = (u * t) % p
    return v, u


def factorial_val_unit(n, p):
    """(v_p(n!), n!/p^v mod p), with the digit-sum law cross-checked."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    v, u = _fact_val_unit(n, p)
    return v, u


def digit_sum(n, p):
    s = 0
    while n > 0:
        s += n % p
        n //= p
    return s


def p_adic_val(fr, p):
    """Normalized p-adic valuation of a nonzero Fraction or int."""
    fr = Fraction(fr)
    if fr == 0:
        raise ValueError("valuation of zero")
    v = 0
    n, d = fr.numerator, fr.denominator
    while n % p == 0:
        n //= p
        v += 1
    while d % p == 0:
        d //= p
        v -= 1
    return v


def reduce_mod_p(fr, p, what="coefficient"):
    """Reduce an exact rational to F_p, asserting p-integrality."""
    fr = Fraction(fr)
    if fr == 0:
        return 0
    d = fr.denominator
    while d % p == 0:
        raise IntegralityViolation(f"{what} = {fr} has negative {p}-adic valuation")
    return (fr.numerator * pow(fr.denominator, -1, p)) % p


# exact (oracle) paths ------------------------------------------------------

def binom_exact(n, k):
    """Generalized binomial C(n, k) for any integer n, k >= 0 (exact int)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if n >= 0:
        return comb(n, k)
    # reflection identity for negative upper argument
    return (-1) ** k * comb(k - n - 1, k)


def brace_exact(k, k1, p, m):
    """{k over k1} = q_k!/(q_{k1}! q_{k2}!) with k = k1 + k2, exact integer."""
    if not (0 <= k1 <= k):
        raise ValueError("need 0 <= k1 <= k")
    val = Fraction(factorial(q_of(k, p, m)),
                   factorial(q_of(k1, p, m)) * factorial(q_of(k - k1, p, m)))
    if val.denominator != 1:
        raise IntegralityViolation(f"brace({k},{k1}) = {val} not an integer")
    return val.numerator


def angle_exact(k, k1, p, m):
    """<k over k1> = C(k,k1) / {k over k1}, exact rational (p-integral)."""
    if not (0 <= k1 <= k):
        raise ValueError("need 0 <= k1 <= k")
    return Fraction(comb(k, k1), brace_exact(k, k1, p, m))


def mul_coeff_exact(k, k1, k2, p, m):
    """Coefficient of d_<k> in d_<k1>.d_<k2> (scalar case), exact rational.

    k!/((k1+k2-k)!(k-k1)!(k-k2)!) * q_{k1}! q_{k2}! / q_k!
    """
    if not (max(k1, k2) <= k <= k1 + k2):
        raise ValueError("need sup(k1,k2) <= k <= k1+k2")
    num = Fraction(factorial(k), factorial(k1 + k2 - k) * factorial(k - k1) * factorial(k - k2))
    num *= Fraction(factorial(q_of(k1, p, m)) * factorial(q_of(k2, p, m)), factorial(q_of(k, p, m)))
    return num


# mod-p fast paths -----------------------------------------------------------

@lru_cache(maxsize=None)
def binom_mod_p(n, k, p):
    """C(n, k) mod p by Lucas digit products; negative n via reflection."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if n < 0:
        return ((-1) ** k * binom_mod_p(k - n - 1, k, p)) % p
    if k > n:
        return 0
    out = 1
    while k > 0:
        out = (out * comb(n % p, k % p)) % p
        if out == 0:
            return 0
        n //= p
        k //= p
    return out


@lru_cache(maxsize=None)
def brace(k, k1, p, m):
    """{k over k1} mod p via factorial valuation/unit decomposition."""
    q, q1, q2 = q_of(k, p, m), q_of(k1, p, m), q_of(k - k1, p, m)
    v, u = factorial_val_unit(q, p)
    v1, u1 = factorial_val_unit(q1, p)
    v2, u2 = factorial_val_unit(q2, p)
    if v - v1 - v2 < 0:
        raise IntegralityViolation(f"brace({k},{k1}) has negative valuation")
    base = 0 if v > v1 + v2 else (u * pow(u1 * u2 % p, -1, p)) % p
    if knob("perturb_brace") and k1 == 1:
        base = (base + 1) % p
    return base


@lru_cache(maxsize=None)
def angle(k, k1, p, m):
    """<k over k1> mod p via valuation/unit decomposition of both factors."""
    q, q1, q2 = q_of(k, p, m), q_of(k1, p, m), q_of(k - k1, p, m)
    # C(k,k1) = k!/(k1!(k-k1)!), braces through q-factorials
    vn, un = factorial_val_unit(k, p)
    va, ua = factorial_val_unit(k1, p)
    vb, ub = factorial_val_unit(k - k1, p)
    vq, uq = factorial_val_unit(q, p)
    vqa, uqa = factorial_val_unit(q1, p)
    vqb, uqb = factorial_val_unit(q2, p)
    v = (vn - va - vb) - (vq - vqa - vqb)
    if v < 0:
        raise IntegralityViolation(f"angle({k},{k1}) has negative valuation")
    if v > 0:
        base = 0
    else:
        num = un * uqa * uqb % p
        den = ua * ub * uq % p
        base = (num * pow(den, -1, p)) % p
    if knob("perturb_angle") and k1 == p ** m:
        base = (base + 1) % p
    return base


@lru_cache(maxsize=None)
def mul_coeff_scalar(k, k1, k2, p, m):
    """Scalar product-formula coefficient mod p."""
    val = mul_coeff_exact(k, k1, k2, p, m)
    out = reduce_mod_p(val, p, f"mul_coeff({k},{k1},{k2})")
    if knob("perturb_mul_coeff") and k == k1 + k2 and k > 0:
        out = (out + 1) % p
    return out


# multi-index versions -------------------------------------------------------

def binom_vec(n, k, p):
    """Componentwise product of C(n_i, k_i) mod p; n may be signed."""
    out = 1
    for ni, ki in zip(n, k):
        out = (out * binom_mod_p(ni, ki, p)) % p
        if out == 0:
            return 0
    return out


def brace_vec(k, k1, p, m):
    out = 1
    for a, b in zip(k, k1):
        out = (out * brace(a, b, p, m)) % p
        if out == 0:
            return 0
    return out


def angle_vec(k, k1, p, m):
    out = 1
    for a, b in zip(k, k1):
        out = (out * angle(a, b, p, m)) % p
        if out == 0:
            return 0
    return out


def mul_coeff(k, k1, k2, p, m):
    """Multi-index product-formula coefficient mod p (componentwise product)."""
    out = 1
    for a, b, c in zip(k, k1, k2):
        out = (out * mul_coeff_scalar(a, b, c, p, m)) % p
        if out == 0:
            return 0
    return out


def q_fact_vec_mod(k, p, m):
    """Product of q_{k_i}! mod p."""
    out = 1
    for ki in k:
        v, u = factorial_val_unit(q_of(ki, p, m), p)
        if v > 0:
            return 0
        out = (out * u) % p
    return out


def gamma_mult_coeff(b1, b2, p, trunc):
    """Structure constant of the divided-power algebra: gamma^[b1] gamma^[b2]
    = C(b1+b2, b1) gamma^[b1+b2], zero past the truncation order."""
    tot = mi_add(b1, b2)
    if mi_total(tot) > trunc:
        return 0
    c = binom_vec(tot, b1, p)
    if knob("perturb_gamma") and b1 == b2 and mi_total(b1) == 1 and b1[0] == 1:
        c = (c + 1) % p
    return c
