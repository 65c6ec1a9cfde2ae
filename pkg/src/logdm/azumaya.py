"""Matrix realizations of the operator ring over its center and centralizer,
the End-isomorphism with its two triangular transition matrices, descent to
invariants, and desk-scale Morita checks on finite graded modules.

Finite modules are graded by the cyclic index set J = (Z/p^(m+1))^r (a
quotient I^gp-set); the wrap of a theta-shift past the residue box is
recorded in the separate carry table t = theta^(p^(m+1)), never silently.
Module corpora live on the theta-Laurent fiber of the chart (the u-direction
acts by zero); chart-level suites keep full u-exponents.
"""

import random

import numpy as np

from . import _linalg as la
from . import mindex as mx
from .chart import AElement, AMonomial, base_ring, one_monomial
from .diffops import TDOperator, gen_expr, leibniz_terms, op_mul
from .errors import DegreeOverflow, NonzeroCurvature, ValidationFailure
from .mindex import LevelContext


def _as_ring(ring_or_ctx):
    if isinstance(ring_or_ctx, LevelContext):
        return base_ring(ring_or_ctx)
    return ring_or_ctx


def residue_box(ring):
    """The basis box [0, p^(level+1) - 1]^r of theta-exponents."""
    ring = _as_ring(ring)
    return list(mx.iter_box_r(ring.plevel1 - 1, ring.r))


# ---------------------------------------------------------------------------
# centralizer coefficients

class CxElement:
    """Element of the centralizer A^gp (x) F_p[z], z_i the central generators.

    Keys are (AMonomial, z-exponent tuple); CenterElement is the same data
    with coefficients constrained to the descended subalgebra.
    """

    __slots__ = ("ring", "terms")

    def __init__(self, ring, terms=None):
        self.ring = _as_ring(ring)
        clean = {}
        if terms:
            p = self.ring.p
            for key, c in terms.items():
                c %= p
                if c:
                    clean[key] = c
        self.terms = clean

    @classmethod
    def zero(cls, ring):
        return cls(ring)

    @classmethod
    def one(cls, ring):
        ring = _as_ring(ring)
        return cls(ring, {(one_monomial(ring.r), (0,) * ring.r): 1})

    def __add__(self, other):
        out = dict(self.terms)
        for k, c in other.terms.items():
            out[k] = out.get(k, 0) + c
        return CxElement(self.ring, out)

    def __mul__(self, other):
        out = {}
        for (m1, z1), c1 in self.terms.items():
            for (m2, z2), c2 in other.terms.items():
                key = (m1.mul(m2), mx.mi_add(z1, z2))
                out[key] = out.get(key, 0) + c1 * c2
        return CxElement(self.ring, out)

    def scale(self, c):
        return CxElement(self.ring, {k: c * v for k, v in self.terms.items()})

    def __eq__(self, other):
        return isinstance(other, CxElement) and self.ring == other.ring and self.terms == other.terms

    def is_zero(self):
        return not self.terms

    def z_degree(self):
        return max((mx.mi_total(z) for (_, z) in self.terms), default=0)

    def is_central(self):
        depth = self.ring.scale * self.ring.plevel1
        return all(all(n % depth == 0 for n in mono.n) for (mono, _) in self.terms)

    def to_operator(self):
        """Embed via the curvature map: z^b -> d_<p^(level+1) b>."""
        q = self.ring.plevel1
        out = {}
        for (mono, z), c in self.terms.items():
            out[(mono, mx.mi_scale(q, z))] = c
        return TDOperator(self.ring, out)

    def __repr__(self):
        if not self.terms:
            return "0"
        return " + ".join(f"{c}*{m!r}*z^{list(z)}" for (m, z), c in sorted(self.terms.items()))


class CenterElement(CxElement):
    """Central element: coefficients constrained to the descended subalgebra."""

    def __init__(self, ring, terms=None):
        super().__init__(ring, terms)
        if not self.is_central():
            raise ValidationFailure("center-membership", repr(self))


def right_form(A, N=None):
    """Write A = sum_s d_<s> . c_s with s in the residue box, c_s a CxElement.

    Splits each order k as s + p^(level+1) t and moves coefficients to the
    right through the (triangular) commutation rewrite.  Raises
    DegreeOverflow if a z-degree exceeds N (when N is given).
    """
    ring = A.ring
    p, q = ring.p, ring.plevel1
    out = {}

    def add(s, mono, z, c):
        cx = out.setdefault(s, {})
        key = (mono, z)
        cx[key] = (cx.get(key, 0) + c) % p

    def move_right(mono, s, z, c):
        # mono . d_<s> = d_<s> . mono - sum_{i<s} {s,i} eigen(s-i, mono) mono . d_<i>
        add(s, mono, z, c)
        for i in mx.iter_box(s):
            if i == s:
                continue
            br = mx.brace_vec(s, i, p, ring.level)
            if not br:
                continue
            lam = ring.eigenvalue(mx.mi_sub(s, i), mono)
            if not lam:
                continue
            move_right(mono, i, z, (-c * br * lam) % p)

    for (mono, k), c in A.terms.items():
        s = tuple(t % q for t in k)
        z = tuple(t // q for t in k)
        if N is not None and mx.mi_total(z) > N:
            raise DegreeOverflow(f"z-degree {mx.mi_total(z)} exceeds bound {N}")
        move_right(mono, s, z, c)
    return {s: CxElement(ring, terms) for s, terms in out.items()
            if any(v % p for v in terms.values())}


def matrix_of_left_mul(A, N):
    """Matrix of x -> A.x on the right-module basis {d_<i>, i in the box}.

    Entries are CxElements; row t, column i holds the d_<t>-coordinate of
    A . d_<i>.
    """
    ring = A.ring
    box = residue_box(ring)
    pos = {s: t for t, s in enumerate(box)}
    n = len(box)
    out = [[CxElement.zero(ring) for _ in range(n)] for _ in range(n)]
    for col, i in enumerate(box):
        rf = right_form(op_mul(A, TDOperator.partial(ring, i)), N)
        for s, cx in rf.items():
            out[pos[s]][col] = cx
    return out


# ---------------------------------------------------------------------------
# the End-isomorphism: both transition matrices and a constructive inverse

def _theta_op(ring, e):
    return TDOperator.from_aelement(ring, AElement.theta(ring.ctx, e))


def _beta_conj(ring, x, i):
    """beta_i action: theta_i^-1 . x . theta_i - x (exponents chart-scaled)."""
    e = mx.mi_scale(ring.scale, ring.ctx.eps(i))
    th = _theta_op(ring, e)
    th_inv = _theta_op(ring, mx.mi_scale(-1, e))
    return op_mul(op_mul(th_inv, x), th) - x


def _tw_mul(P, Q, ring):
    """Matrix of the composite map P o Q: (P o Q)_{kt} = sum_i Q_it . P_ki.

    Coordinates are left operator-coefficients, so the entry of the map
    applied second multiplies on the right inside op_mul's first argument.
    """
    n = len(P)
    Z = TDOperator.zero(ring)
    out = [[Z for _ in range(n)] for _ in range(n)]
    for k in range(n):
        for t in range(n):
            acc = Z
            for i in range(n):
                if Q[i][t].is_zero() or P[k][i].is_zero():
                    continue
                acc = acc + op_mul(Q[i][t], P[k][i])
            out[k][t] = acc
    return out


def _tw_identity(ring, n):
    I = [[TDOperator.zero(ring) for _ in range(n)] for _ in range(n)]
    for t in range(n):
        I[t][t] = TDOperator.one(ring)
    return I


def _tw_eq(P, Q):
    return all(P[k][t] == Q[k][t] for k in range(len(P)) for t in range(len(P)))


def _tw_is_zero(P):
    return all(P[k][t].is_zero() for k in range(len(P)) for t in range(len(P)))


def _tw_inverse(P, diag_inv, ring):
    """Inverse of a triangular coordinate matrix with invertible diagonal.

    diag_inv[t] must be the two-sided inverse of P[t][t].  Neumann series on
    the strictly triangular part: X = sum_s (-1)^s D^-1 o (N o D^-1)^s.
    """
    n = len(P)
    Z = TDOperator.zero(ring)
    Dinv = [[diag_inv[t] if k == t else Z for t in range(n)] for k in range(n)]
    Nmat = [[P[k][t] if k != t else Z for t in range(n)] for k in range(n)]
    ND = _tw_mul(Nmat, Dinv, ring)
    out = Dinv
    term = Dinv
    for _ in range(n + 1):
        term = _tw_mul(term, ND, ring)
        term = [[term[k][t].scale(-1) for t in range(n)] for k in range(n)]
        if _tw_is_zero(term):
            break
        out = [[out[k][t] + term[k][t] for t in range(n)] for k in range(n)]
    return out


def end_iso_check(ring_or_ctx, N=1):
    """Verify the End-isomorphism at desk scale, exactly.

    Checks: the beta-basis expansion over {1 (x) theta^i} is upper triangular
    with theta-monomial units on the diagonal; the beta-action expansion over
    the dual basis is lower triangular with the q-factorial units on the
    diagonal; the coordinate identity L = T o U; and that the map has a
    constructive two-sided inverse.  Returns {"rank", "box", "failures"}.
    """
    ring = _as_ring(ring_or_ctx)
    ctx = ring.ctx
    p = ring.p
    box = residue_box(ring)
    pos = {s: t for t, s in enumerate(box)}
    n = len(box)
    failures = []

    def fail(what, expected, got):
        failures.append({"input": what, "expected": expected, "got": got})

    # U: beta^j = sum_{i<=j} (-1)^{|j-i|} C(j,i) theta^{-i} . (1 x theta^i)
    U = [[TDOperator.zero(ring) for _ in range(n)] for _ in range(n)]
    for j in box:
        for i in mx.iter_box(j):
            c = ((-1) ** (mx.mi_total(j) - mx.mi_total(i))) * mx.binom_vec(j, i, p)
            if c % p:
                U[pos[i]][pos[j]] = _theta_op(ring, mx.mi_scale(-ring.scale, i)).scale(c)
    for a in range(n):
        for b in range(n):
            if not U[a][b].is_zero() and not mx.mi_le(box[a], box[b]):
                fail(f"U[{box[a]}][{box[b]}]", "upper triangular", repr(U[a][b]))
    for j in box:
        if U[pos[j]][pos[j]] != _theta_op(ring, mx.mi_scale(-ring.scale, j)):
            fail(f"U diagonal at {j}", "unit theta^-j", repr(U[pos[j]][pos[j]]))

    # building block: beta_i . d_<k> = {k_i, k_i - 1} d_<k - eps_i>
    for i in range(ring.r):
        for k in box:
            got = _beta_conj(ring, TDOperator.partial(ring, k), i)
            if k[i] == 0:
                expect = TDOperator.zero(ring)
            else:
                c = mx.brace(k[i], k[i] - 1, p, ring.level)
                expect = TDOperator.partial(ring, mx.mi_sub(k, ctx.eps(i))).scale(c)
            if got != expect:
                fail(f"beta_{i} on d_{k}", repr(expect), repr(got))

    # L: beta^j in the dual basis, through iterated conjugation (the oracle)
    L = [[TDOperator.zero(ring) for _ in range(n)] for _ in range(n)]
    for i in box:
        for j in box:
            y = TDOperator.partial(ring, i)
            for coord in range(ring.r):
                for _ in range(j[coord]):
                    y = _beta_conj(ring, y, coord)
            diff = mx.mi_sub_nn(i, j)
            if diff is None:
                if not y.is_zero():
                    fail(f"beta^{j} on d_{i}", "zero outside i >= j", repr(y))
                continue
            expect_c = 1
            for a, b in zip(i, diff):
                va, ua = mx.factorial_val_unit(mx.q_of(a, p, ring.level), p)
                vb, ub = mx.factorial_val_unit(mx.q_of(b, p, ring.level), p)
                if va > vb:
                    expect_c = 0
                    break
                expect_c = (expect_c * ua * pow(ub, -1, p)) % p
            expect = TDOperator.partial(ring, diff).scale(expect_c) if expect_c else TDOperator.zero(ring)
            if y != expect:
                fail(f"beta^{j} on d_{i}", f"{expect_c} d_{diff}", repr(y))
            L[pos[i]][pos[j]] = expect
    for a in range(n):
        for b in range(n):
            if not L[a][b].is_zero() and not mx.mi_le(box[b], box[a]):
                fail(f"L[{box[a]}][{box[b]}]", "lower triangular", repr(L[a][b]))
    for j in box:
        c = mx.q_fact_vec_mod(j, p, ring.level)
        if c == 0 or L[pos[j]][pos[j]] != TDOperator.one(ring).scale(c):
            fail(f"L diagonal at {j}", "unit q_j!", repr(L[pos[j]][pos[j]]))

    # T: the map on the basis {1 x theta^i}: T[k][i] = d_<k> . theta^i
    T = [[TDOperator.zero(ring) for _ in range(n)] for _ in range(n)]
    for i in box:
        th = _theta_op(ring, mx.mi_scale(ring.scale, i))
        for k in box:
            T[pos[k]][pos[i]] = op_mul(TDOperator.partial(ring, k), th)
    if not _tw_eq(_tw_mul(T, U, ring), L):
        fail("coordinate identity", "L = T o U", "mismatch")

    # constructive bijectivity: from L = T o U we get T^{-1} = U o L^{-1}
    U_diag_inv = [_theta_op(ring, mx.mi_scale(ring.scale, j)) for j in box]
    L_diag_inv = [TDOperator.one(ring).scale(pow(mx.q_fact_vec_mod(j, p, ring.level), -1, p))
                  for j in box]
    Uinv = _tw_inverse(U, U_diag_inv, ring)
    Linv = _tw_inverse(L, L_diag_inv, ring)
    if not _tw_eq(_tw_mul(U, Uinv, ring), _tw_identity(ring, n)) or \
       not _tw_eq(_tw_mul(Linv, L, ring), _tw_identity(ring, n)):
        fail("triangular inverses", "two-sided", "mismatch")
    Tinv = _tw_mul(U, Linv, ring)
    if not _tw_eq(_tw_mul(T, Tinv, ring), _tw_identity(ring, n)):
        fail("T o T^-1", "identity", "mismatch")
    if not _tw_eq(_tw_mul(Tinv, T, ring), _tw_identity(ring, n)):
        fail("T^-1 o T", "identity", "mismatch")

    return {"rank": n * n, "box": n, "failures": failures}


def azumaya_rank(ring_or_ctx, N=1):
    """The verified Azumaya rank p^(2(level+1)r) on the given chart ring."""
    ring = _as_ring(ring_or_ctx)
    report = end_iso_check(ring, N)
    if report["failures"]:
        raise ValidationFailure("end-isomorphism", f"{len(report['failures'])} failures")
    return report["rank"]


# ---------------------------------------------------------------------------
# finite graded modules

class IndexedModule:
    """Finite F_p-module graded by J = (Z/p^(m+1))^r with generator tables.

    kind selects the acting ring:
      mic      the level ring on the base chart  (th_i^{+-1}, u_i, d_<p^s eps_i>)
      mic_pd   mic plus a horizontal PD-Higgs action (gamma tables, trunc N)
      mic0     the level-0 ring on the Frobenius-target chart
      mic0_pd  mic0 plus gamma tables
      b        the descended coefficient algebra  (t_i^{+-1}, h_i)
      higgs    b plus gamma tables
    ops: generator key -> {degree: block matrix E_deg -> E_{deg+shift}}.
    """

    def __init__(self, ring, kind, dims, ops, trunc=None):
        self.ring = _as_ring(ring)
        self.kind = kind
        self.modulus = self.ring.ctx.pm1
        self.dims = {d: n for d, n in dims.items()}
        self.ops = ops
        self.trunc = trunc
        self._derived = {}

    # degree bookkeeping ------------------------------------------------------
    def wrap(self, deg):
        return tuple(d % self.modulus for d in deg)

    def degrees(self):
        return list(mx.iter_box_r(self.modulus - 1, self.ring.r))

    def dim(self, deg):
        return self.dims.get(self.wrap(deg), 0)

    def total_dim(self):
        return sum(self.dims.values())

    def gen_shift(self, gen):
        name = gen[0]
        r = self.ring.r
        if name == "th":
            return mx.mi_scale(self.ring.scale, self.ring.ctx.eps(gen[1]))
        if name == "th_inv":
            return mx.mi_scale(-self.ring.scale, self.ring.ctx.eps(gen[1]))
        if name == "h":
            return mx.mi_scale(-1, self.ring.ctx.eps(gen[1]))
        if name in ("u", "d", "g", "t", "t_inv"):
            return (0,) * r
        raise KeyError(gen)

    def block(self, gen, deg):
        deg = self.wrap(deg)
        dst = self.dim(mx.mi_add(deg, self.gen_shift(gen)))
        src = self.dim(deg)
        tables = self.ops.get(gen)
        if tables is None or deg not in tables:
            return la.zeros(dst, src)
        return tables[deg]

    def gens(self):
        return sorted(self.ops.keys())

    # composite and derived actions -------------------------------------------
    def compose(self, gens_seq, deg):
        """Matrix of the composite (rightmost generator applied first)."""
        cur = self.wrap(deg)
        out = la.eye(self.dim(cur))
        for gen in reversed(gens_seq):
            out = (self.block(gen, cur) @ out) % self.ring.p
            cur = self.wrap(mx.mi_add(cur, self.gen_shift(gen)))
        return out

    def derived_d(self, k):
        """Matrix tables of d_<k>, derived from the generator tables."""
        k = tuple(k)
        if k in self._derived:
            return self._derived[k]
        p = self.ring.p
        tables = {}
        for deg in self.degrees():
            nloc = self.dim(deg)
            acc = la.eye(nloc)
            for i, ki in enumerate(k):
                if ki == 0:
                    continue
                mat_i = la.zeros(nloc, nloc)
                for word, c in gen_expr(ki, i, self.ring):
                    term = la.eye(nloc)
                    for s, e_s in enumerate(word):
                        if e_s == 0:
                            continue
                        blk = self.block(("d", s, i), deg)
                        for _ in range(e_s):
                            term = (blk @ term) % p
                    mat_i = (mat_i + c * term) % p
                acc = (mat_i @ acc) % p
            tables[deg] = acc
        self._derived[k] = tables
        return tables

    def curvature_is_zero(self):
        q = self.ring.plevel1
        for i in range(self.ring.r):
            tab = self.derived_d(mx.mi_scale(q, self.ring.ctx.eps(i)))
            if any(m.any() for m in tab.values()):
                return False
        return True

    def conjugate(self, seed):
        """Random graded change of basis; preserves every relation."""
        p = self.ring.p
        rng = random.Random(seed)
        Q, Qinv = {}, {}
        for deg in self.degrees():
            nloc = self.dim(deg)
            while True:
                q = np.array([[rng.randrange(p) for _ in range(nloc)] for _ in range(nloc)],
                             dtype=np.int64)
                qi = la.inverse(q, p)
                if qi is not None:
                    break
            Q[deg], Qinv[deg] = q, qi
        ops = {}
        for gen, tables in self.ops.items():
            shift = self.gen_shift(gen)
            new = {}
            for deg in self.degrees():
                dst = self.wrap(mx.mi_add(deg, shift))
                mat0 = self.block(gen, deg)
                new[deg] = (Qinv[dst] @ mat0 @ Q[deg]) % p
            ops[gen] = new
        return IndexedModule(self.ring, self.kind, self.dims, ops, self.trunc)

    # validation ----------------------------------------------------------------
    def _coeff_monomial(self, gen):
        ctx = self.ring.ctx
        name = gen[0]
        e = ctx.eps(gen[1])
        s = self.ring.scale
        zero = (0,) * ctx.r
        if name == "th":
            return AMonomial(zero, mx.mi_scale(s, e))
        if name == "th_inv":
            return AMonomial(zero, mx.mi_scale(-s, e))
        if name == "u":
            return AMonomial(mx.mi_scale(s, e), zero)
        if name == "h":
            return AMonomial(e, mx.mi_scale(-1, e))
        if name == "t":
            return AMonomial(zero, mx.mi_scale(s * self.ring.plevel1, e))
        if name == "t_inv":
            return AMonomial(zero, mx.mi_scale(-s * self.ring.plevel1, e))
        return None

    def validate(self):
        """Check the defining relations as exact matrix identities."""
        p = self.ring.p
        ctx = self.ring.ctx
        gens = self.gens()
        coeff_gens = [g for g in gens if g[0] in ("th", "th_inv", "u", "h", "t", "t_inv")]
        d_gens = [g for g in gens if g[0] == "d"]
        g_gens = [g for g in gens if g[0] == "g"]
        live = [d for d in self.degrees() if self.dim(d)]

        for i in range(self.ring.r):
            for a, b in ((("th", i), ("th_inv", i)), (("t", i), ("t_inv", i))):
                if a in self.ops and b in self.ops:
                    for deg in live:
                        nloc = self.dim(deg)
                        if (self.compose([a, b], deg) != la.eye(nloc)).any() or \
                           (self.compose([b, a], deg) != la.eye(nloc)).any():
                            raise ValidationFailure("theta-inverse", f"{a}/{b} at {deg}")

        for idx, x in enumerate(coeff_gens):
            for y in coeff_gens[idx + 1:]:
                for deg in live:
                    if (self.compose([x, y], deg) != self.compose([y, x], deg)).any():
                        raise ValidationFailure("coefficient-commutativity", f"{x},{y} at {deg}")
        for idx, a in enumerate(d_gens):
            for b in d_gens[idx + 1:]:
                for deg in live:
                    if (self.compose([a, b], deg) != self.compose([b, a], deg)).any():
                        raise ValidationFailure("d-commutativity", f"{a},{b} at {deg}")

        # Leibniz relations of each d-generator against each coefficient generator
        for dg in d_gens:
            _, s, i = dg
            k = mx.mi_scale(p ** s, ctx.eps(i))
            for cg in coeff_gens:
                mono = self._coeff_monomial(cg)
                for deg in live:
                    lhs = self.compose([dg, cg], deg)
                    rhs = la.zeros(lhs.shape[0], lhs.shape[1])
                    for c, t in leibniz_terms(k, mono, self.ring):
                        dmat = self.derived_d(t)[self.wrap(deg)]
                        cmat = self.block(cg, deg)
                        rhs = (rhs + c * ((cmat @ dmat) % p)) % p
                    if (lhs != rhs).any():
                        raise ValidationFailure("leibniz", f"{dg} vs {cg} at {deg}")

        # d-products consistent with the ring's structure constants
        for dg in d_gens:
            _, s, i = dg
            k = mx.mi_scale(p ** s, ctx.eps(i))
            prod = op_mul(TDOperator.partial(self.ring, k), TDOperator.partial(self.ring, k))
            for deg in live:
                lhs = self.compose([dg, dg], deg)
                rhs = la.zeros(lhs.shape[0], lhs.shape[1])
                for (mono, kk), c in prod.terms.items():
                    rhs = (rhs + c * self.derived_d(kk)[self.wrap(deg)]) % p
                if (lhs != rhs).any():
                    raise ValidationFailure("d-product", f"{dg} at {deg}")

        if g_gens:
            N = self.trunc
            for a in g_gens:
                for b in g_gens:
                    ba, bb = a[1], b[1]
                    tot = mx.mi_add(ba, bb)
                    coef = mx.gamma_mult_coeff(ba, bb, p, N)
                    for deg in live:
                        lhs = self.compose([a, b], deg)
                        if coef and ("g", tot) in self.ops:
                            rhs = (coef * self.block(("g", tot), deg)) % p
                        else:
                            rhs = la.zeros(lhs.shape[0], lhs.shape[1])
                        if (lhs != rhs).any():
                            raise ValidationFailure("gamma-product", f"{ba},{bb} at {deg}")
            for a in g_gens:
                for other in coeff_gens + d_gens:
                    for deg in live:
                        if (self.compose([a, other], deg) != self.compose([other, a], deg)).any():
                            raise ValidationFailure("gamma-horizontal", f"{a} vs {other} at {deg}")
            if self.kind in ("mic_pd", "mic0_pd"):
                q = self.ring.plevel1
                for i in range(self.ring.r):
                    e = ctx.eps(i)
                    want = self.derived_d(mx.mi_scale(q, e))
                    for deg in live:
                        if (want[deg] != self.block(("g", e), deg)).any():
                            raise ValidationFailure("curvature-extension", f"xi_{i} at {deg}")
        return True

    def is_admissible(self):
        """The descent criterion: multiplication maps are operator-equivariant."""
        try:
            self.validate()
            return True
        except ValidationFailure:
            return False


# ---------------------------------------------------------------------------
# morphisms

class Morphism:
    """Graded map of fixed J-shift between modules over the same ring."""

    __slots__ = ("src", "dst", "shift", "blocks")

    def __init__(self, src, dst, shift, blocks):
        self.src = src
        self.dst = dst
        self.shift = tuple(shift)
        self.blocks = blocks

    def block(self, deg):
        deg = self.src.wrap(deg)
        m = self.blocks.get(deg)
        if m is None:
            return la.zeros(self.dst.dim(mx.mi_add(deg, self.shift)), self.src.dim(deg))
        return m

    def is_iso(self):
        p = self.src.ring.p
        for deg in self.src.degrees():
            b = self.block(deg)
            if b.shape[0] != b.shape[1] or (b.shape[0] and not la.is_invertible(b, p)):
                return False
        return True


def equivariance_defect(phi, gens):
    """None if phi commutes with every generator; else the first offender."""
    p = phi.src.ring.p
    for gen in gens:
        s = phi.src.gen_shift(gen)
        for deg in phi.src.degrees():
            lhs = (phi.block(mx.mi_add(deg, s)) @ phi.src.block(gen, deg)) % p
            rhs = (phi.dst.block(gen, mx.mi_add(deg, phi.shift)) @ phi.block(deg)) % p
            if lhs.shape != rhs.shape or (lhs != rhs).any():
                return (gen, deg)
    return None


def hom_space(M1, M2, gens, shift):
    """Basis of equivariant maps M1 -> M2 with the given J-shift."""
    p = M1.ring.p
    shift = tuple(shift)
    degs = M1.degrees()
    offsets, total = {}, 0
    for d in degs:
        nr = M2.dim(mx.mi_add(d, shift))
        nc = M1.dim(d)
        offsets[d] = (total, nr, nc)
        total += nr * nc
    if total == 0:
        return []
    rows = []
    for gen in gens:
        s = M1.gen_shift(gen)
        for d in degs:
            out_rows = M2.dim(mx.mi_add(mx.mi_add(d, s), shift))
            in_cols = M1.dim(d)
            if out_rows * in_cols == 0:
                continue
            block = la.zeros(out_rows * in_cols, total)
            g1 = M1.block(gen, d)
            g2 = M2.block(gen, M1.wrap(mx.mi_add(d, shift)))
            dmid = M1.wrap(mx.mi_add(d, s))
            off1, r1, c1 = offsets[dmid]
            for a in range(out_rows):
                for b in range(in_cols):
                    row = block[a * in_cols + b]
                    for c in range(c1):
                        row[off1 + a * c1 + c] = (row[off1 + a * c1 + c] + g1[c, b]) % p
            off0, r0, c0 = offsets[d]
            for a in range(out_rows):
                for b in range(in_cols):
                    row = block[a * in_cols + b]
                    for c in range(r0):
                        row[off0 + c * c0 + b] = (row[off0 + c * c0 + b] - g2[a, c]) % p
            rows.append(block)
    if rows:
        big = np.concatenate(rows, axis=0) % p
        basis_mat = la.nullspace(big, p)
    else:
        basis_mat = la.eye(total)
    out = []
    for col in range(basis_mat.shape[1]):
        vec = basis_mat[:, col]
        blocks = {}
        for d in degs:
            off, nr, nc = offsets[d]
            blocks[d] = vec[off:off + nr * nc].reshape(nr, nc) % p
        out.append(Morphism(M1, M2, shift, blocks))
    return out


def combine(basis, coeffs, p):
    blocks = {}
    for b, c in zip(basis, coeffs):
        for d, m in b.blocks.items():
            blocks[d] = (blocks.get(d, 0) + c * m) % p
    return Morphism(basis[0].src, basis[0].dst, basis[0].shift, blocks)


def find_iso(M1, M2, gens, seed=7, tries=60):
    """Search the shift-0 equivariant Hom-space for an invertible element."""
    if any(M1.dim(d) != M2.dim(d) for d in M1.degrees()):
        return None
    basis = hom_space(M1, M2, gens, (0,) * M1.ring.r)
    if not basis:
        return None
    p = M1.ring.p
    rng = random.Random(seed)
    candidates = list(basis)
    candidates.append(combine(basis, [1] * len(basis), p))
    for _ in range(tries):
        coeffs = [rng.randrange(p) for _ in basis]
        if any(coeffs):
            candidates.append(combine(basis, coeffs, p))
    for cand in candidates:
        if cand.is_iso():
            return cand
    return None


# ---------------------------------------------------------------------------
# descent to invariants and induction

def module_gens(kind, ring, trunc=None):
    """Generator keys a module of the given kind carries."""
    ring = _as_ring(ring)
    gens = []
    r = ring.r
    if kind in ("mic", "mic_pd"):
        for i in range(r):
            gens += [("th", i), ("th_inv", i), ("u", i)]
        for s in range(ring.level + 1):
            for i in range(r):
                gens.append(("d", s, i))
    elif kind in ("mic0", "mic0_pd"):
        for i in range(r):
            gens += [("th", i), ("th_inv", i), ("h", i), ("d", 0, i)]
    elif kind in ("b", "higgs"):
        for i in range(r):
            gens += [("t", i), ("t_inv", i), ("h", i)]
    else:
        raise KeyError(kind)
    if kind in ("mic_pd", "mic0_pd", "higgs"):
        for b in mx.iter_box_r(trunc, r):
            if 0 < mx.mi_total(b) <= trunc:
                gens.append(("g", b))
    return gens


def nabla_invariants(E):
    """Joint kernel of all d-generators with its descended-algebra structure."""
    if not E.curvature_is_zero():
        raise NonzeroCurvature("module has nonzero curvature action")
    p = E.ring.p
    kernels = {}
    for deg in E.degrees():
        nloc = E.dim(deg)
        if nloc == 0:
            kernels[deg] = la.zeros(0, 0)
            continue
        mats = [E.block(("d", s, i), deg)
                for s in range(E.ring.level + 1) for i in range(E.ring.r)]
        kernels[deg] = la.nullspace(np.concatenate(mats, axis=0), p)
    q = E.ring.plevel1
    dims = {d: k.shape[1] for d, k in kernels.items()}
    ops = {}
    recipes = []
    for i in range(E.ring.r):
        recipes.append(((("t", i)), [("th", i)] * q))
        recipes.append(((("t_inv", i)), [("th_inv", i)] * q))
        recipes.append(((("h", i)), [("th_inv", i), ("u", i)]))
    for new_gen, seq in recipes:
        shift_total = (0,) * E.ring.r
        for g in seq:
            shift_total = mx.mi_add(shift_total, E.gen_shift(g))
        tables = {}
        for deg in E.degrees():
            K = kernels[deg]
            dst = E.wrap(mx.mi_add(deg, shift_total))
            Kdst = kernels[dst]
            if K.shape[1] == 0:
                tables[deg] = la.zeros(Kdst.shape[1], 0)
                continue
            img = (E.compose(seq, deg) @ K) % p
            if Kdst.shape[1] == 0:
                if img.any():
                    raise ValidationFailure("invariants", f"image leaves the kernel at {deg}")
                tables[deg] = la.zeros(0, K.shape[1])
                continue
            sol = la.solve(Kdst, img, p)
            if sol is None or ((Kdst @ sol) % p != img).any():
                raise ValidationFailure("invariants", f"image leaves the kernel at {deg}")
            tables[deg] = sol
        ops[new_gen] = tables
    out = IndexedModule(E.ring, "b", dims, ops)
    out._kernels = kernels
    return out


def induce(Eb):
    """A^gp (x)_{B^(m+1)} E': free induction with the diagonal operator action."""
    ring = Eb.ring
    ctx = ring.ctx
    p = ring.p
    q = ring.plevel1
    box = residue_box(ring)
    dims, layout = {}, {}
    for d in mx.iter_box_r(Eb.modulus - 1, ring.r):
        off, lay = 0, []
        for t in box:
            src = Eb.wrap(mx.mi_sub(d, mx.mi_scale(ring.scale, t)))
            nd = Eb.dims.get(src, 0)
            lay.append((t, src, off, nd))
            off += nd
        dims[d] = off
        layout[d] = lay

    def locate(d, t):
        for (tt, src, off, nd) in layout[d]:
            if tt == t:
                return src, off, nd
        raise KeyError(t)

    ops = {}
    for i in range(ring.r):
        e = ctx.eps(i)
        sc_e = mx.mi_scale(ring.scale, e)
        th_tab, thinv_tab, u_tab = {}, {}, {}
        for d in dims:
            dst = tuple((a + b) % Eb.modulus for a, b in zip(d, sc_e))
            mat_th = la.zeros(dims[dst], dims[d])
            mat_u = la.zeros(dims[d], dims[d])
            for (t, src, off, nd) in layout[d]:
                if nd == 0:
                    continue
                t2 = mx.mi_add(t, e)
                if t2[i] < q:
                    _, off2, nd2 = locate(dst, t2)
                    mat_th[off2:off2 + nd2, off:off + nd] = la.eye(nd)
                else:
                    t2c = mx.mi_sub(t2, mx.mi_scale(q, e))
                    _, off2, nd2 = locate(dst, t2c)
                    mat_th[off2:off2 + nd2, off:off + nd] = Eb.block(("t", i), src)
                h_blk = Eb.block(("h", i), src)
                if h_blk.any():
                    carry = t2[i] >= q
                    t_u = mx.mi_sub(t2, mx.mi_scale(q, e)) if carry else t2
                    _, off_u, _ = locate(d, t_u)
                    blk = h_blk
                    if carry:
                        blk = (Eb.block(("t", i), Eb.wrap(mx.mi_sub(src, e))) @ blk) % p
                    mat_u[off_u:off_u + blk.shape[0], off:off + nd] = blk
            th_tab[d] = mat_th
            u_tab[d] = mat_u
        for d in dims:
            dst = tuple((a - b) % Eb.modulus for a, b in zip(d, sc_e))
            mat = la.zeros(dims[dst], dims[d])
            for (t, src, off, nd) in layout[d]:
                if nd == 0:
                    continue
                t2 = mx.mi_sub(t, e)
                if t2[i] >= 0:
                    _, off2, nd2 = locate(dst, t2)
                    mat[off2:off2 + nd2, off:off + nd] = la.eye(nd)
                else:
                    t2c = mx.mi_add(t2, mx.mi_scale(q, e))
                    _, off2, nd2 = locate(dst, t2c)
                    mat[off2:off2 + nd2, off:off + nd] = Eb.block(("t_inv", i), src)
            thinv_tab[d] = mat
        ops[("th", i)] = th_tab
        ops[("th_inv", i)] = thinv_tab
        ops[("u", i)] = u_tab
    for s in range(ring.level + 1):
        for i in range(ring.r):
            tab = {}
            ps = p ** s
            for d in dims:
                mat = la.zeros(dims[d], dims[d])
                for (t, src, off, nd) in layout[d]:
                    if nd == 0:
                        continue
                    lam = ring.eigenvalue(mx.mi_scale(ps, ctx.eps(i)),
                                          AMonomial((0,) * ring.r, mx.mi_scale(ring.scale, t)))
                    if lam:
                        mat[off:off + nd, off:off + nd] = lam * la.eye(nd)
                tab[d] = mat
            ops[("d", s, i)] = tab
    out = IndexedModule(ring, "mic", dims, ops)
    out._layout = layout
    return out


def descent_unit(Eb, E_ind):
    """The natural map E' -> (induce E')^nabla; returns (invariants, morphism)."""
    inv = nabla_invariants(E_ind)
    p = Eb.ring.p
    zero_t = (0,) * Eb.ring.r
    blocks = {}
    for d in Eb.degrees():
        nd = Eb.dims.get(d, 0)
        K = inv._kernels[d]
        emb = la.zeros(E_ind.dim(d), nd)
        for (t, src, off, n) in E_ind._layout[d]:
            if t == zero_t and nd:
                emb[off:off + n, :] = la.eye(nd)
        if K.shape[1] == 0:
            if emb.any():
                raise ValidationFailure("descent-unit", f"embedding not flat at {d}")
            blocks[d] = la.zeros(0, nd)
            continue
        sol = la.solve(K, emb, p)
        if sol is None or ((K @ sol) % p != emb).any():
            raise ValidationFailure("descent-unit", f"theta^0-embedding not flat at {d}")
        blocks[d] = sol
    return inv, Morphism(Eb, inv, zero_t, blocks)


def descent_counit(E):
    """The natural evaluation induce(E^nabla) -> E; returns (inv, ind, morphism)."""
    inv = nabla_invariants(E)
    ind = induce(inv)
    p = E.ring.p
    blocks = {}
    for d in ind.degrees():
        mat = la.zeros(E.dim(d), ind.dim(d))
        for (t, src, off, nd) in ind._layout[d]:
            if nd == 0:
                continue
            K = inv._kernels[src]
            theta_path = []
            for i in range(E.ring.r):
                theta_path += [("th", i)] * t[i]
            comp = E.compose(theta_path, src)
            mat[:, off:off + nd] = (comp @ K) % p
        blocks[d] = mat
    return inv, ind, Morphism(ind, E, (0,) * E.ring.r, blocks)


# ---------------------------------------------------------------------------
# seeded corpora

def random_b_module(ring_or_ctx, seed, max_dim=2, trivial_t=False):
    """Seeded module over the descended coefficient algebra (theta fiber)."""
    ring = _as_ring(ring_or_ctx)
    p = ring.p
    rng = random.Random(seed)
    degs = list(mx.iter_box_r(ring.ctx.pm1 - 1, ring.r))
    dims = {d: rng.randrange(max_dim + 1) for d in degs}
    if sum(dims.values()) == 0:
        dims[degs[rng.randrange(len(degs))]] = 1
    base_t = {}
    for d in degs:
        n = dims[d]
        if trivial_t:
            base_t[d] = la.eye(n)
            continue
        while True:
            g = np.array([[rng.randrange(p) for _ in range(n)] for _ in range(n)], dtype=np.int64)
            if la.inverse(g, p) is not None:
                break
        base_t[d] = g
    ops = {}
    for i in range(ring.r):
        # commuting invertibles: powers of a shared block per degree
        power = rng.randrange(1, p + 1) if (ring.r > 1 and not trivial_t) else 1
        t_tab, ti_tab = {}, {}
        for d in degs:
            g = base_t[d]
            acc = la.eye(dims[d])
            for _ in range(power):
                acc = (acc @ g) % p
            t_tab[d] = acc
            ti_tab[d] = la.inverse(acc, p)
        ops[("t", i)] = t_tab
        ops[("t_inv", i)] = ti_tab
        ops[("h", i)] = {d: la.zeros(dims[d], dims[d]) for d in degs}
    return IndexedModule(ring, "b", dims, ops)


def b_unit_module(ring_or_ctx):
    """The free rank-one module over the descended algebra, at degree zero."""
    ring = _as_ring(ring_or_ctx)
    zero = (0,) * ring.r
    dims = {zero: 1}
    ops = {}
    for i in range(ring.r):
        ops[("t", i)] = {zero: la.eye(1)}
        ops[("t_inv", i)] = {zero: la.eye(1)}
        ops[("h", i)] = {zero: la.zeros(1, 1)}
    return IndexedModule(ring, "b", dims, ops)


# ---------------------------------------------------------------------------
# Morita round-trip at desk scale

def a_cyc_as_b(ring):
    """A^gp on the cyclic fiber, viewed as a rank-one-per-degree b-module."""
    ring = _as_ring(ring)
    degs = list(mx.iter_box_r(ring.ctx.pm1 - 1, ring.r))
    dims = {d: 1 for d in degs}
    ops = {}
    for i in range(ring.r):
        ops[("t", i)] = {d: la.eye(1) for d in degs}
        ops[("t_inv", i)] = {d: la.eye(1) for d in degs}
        ops[("h", i)] = {d: la.zeros(1, 1) for d in degs}
    return IndexedModule(ring, "b", dims, ops)


def morita_roundtrip(ring_or_ctx, seed=11, n_modules=6, max_dim=2):
    """Desk checks of the Morita equivalence for M = A^gp over the descended base.

    For seeded E' and F := M (x) E' (realized by induce): the space of
    End(M)-linear maps M -> F of each index shift delta has dimension
    dim E'_delta, the natural units x -> x (x) e' realize it, and evaluation
    M (x) Hom(M, F) -> F is onto.  End(M)-linearity = equivariance for the
    theta-shifts plus the degree projections of M.  Returns failures.
    """
    ring = _as_ring(ring_or_ctx)
    p = ring.p
    rng = random.Random(seed)
    failures = []
    degs = list(mx.iter_box_r(ring.ctx.pm1 - 1, ring.r))
    theta_gens = [("th", i) for i in range(ring.r)] + [("th_inv", i) for i in range(ring.r)]
    Mi = induce(b_unit_module(ring))  # the free rank-one A-module, dim 1 per degree

    def unit_morphism(F, shift, idx):
        """The End(M)-linear map x -> x (x) e', e' the idx-th vector of E'_shift."""
        blocks = {}
        for d in degs:
            dst = F.wrap(mx.mi_add(d, shift))
            col = la.zeros(F.dim(dst), 1)
            for (t, src, off, nd) in F._layout[dst]:
                if t == d and idx < nd:
                    col[off + idx, 0] = 1
            blocks[d] = col
        return Morphism(Mi, F, shift, blocks)

    for case in range(n_modules):
        Eb = random_b_module(ring, rng.randrange(1 << 30), max_dim, trivial_t=True)
        F = induce(Eb)
        for shift in degs:
            expected = Eb.dims.get(shift, 0)
            # Hom_{End(M)}(M, F): theta-equivariant maps whose theta^d-image is
            # supported in the t = d slot (equivariance for the degree projections)
            basis = hom_space(Mi, F, theta_gens, shift)
            mask = []
            for d in degs:
                dst = F.wrap(mx.mi_add(d, shift))
                for (t, src, off, nd) in F._layout[dst]:
                    mask.extend([t != d] * nd)
            mask = np.array(mask, dtype=bool)
            vecs = [np.concatenate([bmor.block(d).reshape(-1) for d in degs]) for bmor in basis]
            if vecs:
                mat_all = np.stack(vecs, axis=1) % p
                bad = mat_all[mask]
                hom_dim = la.nullspace(bad, p).shape[1] if bad.size else mat_all.shape[1]
            else:
                hom_dim = 0
            if hom_dim != expected:
                failures.append({"input": f"case {case} shift {shift}",
                                 "expected": f"dim Hom = {expected}", "got": str(hom_dim)})
                continue
            for idx in range(expected):
                um = unit_morphism(F, shift, idx)
                defect = equivariance_defect(um, theta_gens)
                if defect is not None:
                    failures.append({"input": f"case {case} unit {shift}/{idx}",
                                     "expected": "equivariant", "got": str(defect)})
        # evaluation M (x) Hom(M, F) -> F: the images u_{e'}(theta^d) over all
        # units and degrees must be a basis of F
        offsets, total_f = {}, 0
        for d in degs:
            offsets[d] = total_f
            total_f += F.dim(d)
        ev_cols = []
        for shift in degs:
            for idx in range(Eb.dims.get(shift, 0)):
                um = unit_morphism(F, shift, idx)
                for d in degs:
                    vec = la.zeros(total_f, 1)
                    dst = F.wrap(mx.mi_add(d, shift))
                    vec[offsets[dst]:offsets[dst] + F.dim(dst)] = um.block(d)
                    ev_cols.append(vec[:, 0])
        if ev_cols:
            ev_mat = np.stack(ev_cols, axis=1) % p
            if len(ev_cols) != total_f or la.rank(ev_mat, p) != total_f:
                failures.append({"input": f"case {case} evaluation", "expected": "bijective",
                                 "got": f"{la.rank(ev_mat, p)}/{total_f}"})
        if total_f != len(degs) * sum(Eb.dims.values()):
            failures.append({"input": f"case {case} tensor dims", "expected": "|J| * dim E'",
                             "got": str(total_f)})
    # rank-1 base case: both functors are the identity on a free rank-1 module
    solo = b_unit_module(ring)
    F1 = induce(solo)
    inv, phi = descent_unit(solo, F1)
    if not phi.is_iso():
        failures.append({"input": "rank-1 unit", "expected": "isomorphism", "got": "not iso"})
    return failures
