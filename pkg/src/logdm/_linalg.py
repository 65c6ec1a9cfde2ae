"""Small dense linear algebra over GF(p), numpy-backed.

Matrices are numpy int64 arrays with entries in [0, p).  Everything here is
exact; there are no tolerances.
"""

import numpy as np


def zeros(rows, cols):
    return np.zeros((rows, cols), dtype=np.int64)


def eye(n):
    return np.eye(n, dtype=np.int64)


def mat(rows, p):
    return np.array(rows, dtype=np.int64) % p


def mul(a, b, p):
    return (a @ b) % p


def add(a, b, p):
    return (a + b) % p


def scale(c, a, p):
    return (c * a) % p


def rref(a, p):
    """Row-reduce a copy of a mod p; returns (rref, pivot_columns)."""
    m = a % p
    m = m.copy()
    rows, cols = m.shape
    pivots = []
    r = 0
    for c in range(cols):
        if r >= rows:
            break
        sel = None
        for rr in range(r, rows):
            if m[rr, c] % p:
                sel = rr
                break
        if sel is None:
            continue
        if sel != r:
            m[[r, sel]] = m[[sel, r]]
        inv = pow(int(m[r, c]), -1, p)
        m[r] = (m[r] * inv) % p
        for rr in range(rows):
            if rr != r and m[rr, c]:
                m[rr] = (m[rr] - m[rr, c] * m[r]) % p
        pivots.append(c)
        r += 1
    return m, pivots


def rank(a, p):
    if a.size == 0:
        return 0
    _, piv = rref(a, p)
    return len(piv)


def nullspace(a, p):
    """Basis of the right nullspace as columns of a matrix."""
    rows, cols = a.shape
    if cols == 0:
        return zeros(0, 0)
    red, piv = rref(a, p)
    free = [c for c in range(cols) if c not in piv]
    basis = zeros(cols, len(free))
    for idx, fc in enumerate(free):
        basis[fc, idx] = 1
        for r, pc in enumerate(piv):
            basis[pc, idx] = (-red[r, fc]) % p
    return basis


def solve(a, b, p):
    """One solution x of a x = b, or None. b may be a vector or matrix."""
    rows, cols = a.shape
    vec = b.ndim == 1
    bb = b.reshape(rows, -1) % p
    aug = np.concatenate([a % p, bb], axis=1)
    red, piv = rref(aug, p)
    # inconsistency: pivot in the augmented part
    for c in piv:
        if c >= cols:
            return None
    x = zeros(cols, bb.shape[1])
    for r, c in enumerate(piv):
        x[c] = red[r, cols:]
    return x.reshape(-1) if vec else x


def inverse(a, p):
    """Inverse of a square matrix, or None if singular."""
    n = a.shape[0]
    if n == 0:
        return a.copy()
    x = solve(a, eye(n), p)
    if x is None:
        return None
    if ((a @ x) % p != eye(n)).any():
        return None
    return x


def is_invertible(a, p):
    return a.shape[0] == a.shape[1] and rank(a, p) == a.shape[0]
