"""Exact arithmetic for indexed rings of log differential operators of higher
level on monomial charts over F_p, with executable verification suites."""

from .mindex import LevelContext
from .chart import AElement, AMonomial, ChartRing, base_ring, target_ring
from .diffops import TDOperator, PDJet

__version__ = "0.1.0"

__all__ = [
    "LevelContext", "AElement", "AMonomial", "ChartRing", "base_ring",
    "target_ring", "TDOperator", "PDJet", "__version__",
]
