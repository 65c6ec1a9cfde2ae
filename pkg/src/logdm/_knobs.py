"""Fault-injection knobs for sensitivity (negative-control) checks.

Each knob perturbs exactly one structure constant somewhere in the core.
All knobs are off in normal operation; the verification suites must detect
every single-knob perturbation by failing.
"""

from contextlib import contextmanager

KNOBS = {
    "perturb_brace": False,        # brace{k,k'} += 1 at k'=1
    "perturb_angle": False,        # angle<k,k'> += 1 at k'=p^m
    "perturb_mul_coeff": False,    # top term of d_<k1>*d_<k2> += 1
    "drop_leibniz_term": False,    # drop the principal term of the Leibniz rewrite
    "perturb_pd_conversion": False,  # scale one divided-power basis coefficient by 2
    "perturb_gamma": False,        # gamma^[b]*gamma^[b'] constant += 1 at b=b'=e_1
    "perturb_ck": False,           # c_1 += 1 in the canonical-lift constants
    "perturb_bbasis": False,       # wrong monomial in the B^(m)-over-B^(m+1) basis
}


def knob(name):
    return KNOBS[name]


@contextmanager
def perturbed(name):
    """Temporarily switch one fault-injection knob on."""
    if name not in KNOBS:
        raise KeyError(name)
    KNOBS[name] = True
    try:
        yield
    finally:
        KNOBS[name] = False
