"""Shared exception types."""


class LogdmError(Exception):
    """Base class for all library errors."""


class UnsupportedContext(LogdmError):
    """Parameters outside the supported (p, m, r) grid."""


class IntegralityViolation(LogdmError):
    """An exact rational that should be p-integral (or integral) is not.

    This always signals a bug or a misuse of a coefficient formula outside
    its range of validity, never a data error.
    """


class ContextMismatch(LogdmError):
    """Operands built over different contexts/rings were combined."""


class NotInIdeal(LogdmError):
    """Divided power of an element with nonzero constant term."""


class TruncationTooLow(LogdmError):
    """Jet truncation order too small for the requested pairing."""


class DegreeOverflow(LogdmError):
    """Central z-degree exceeds the requested truncation bound."""


class NonzeroCurvature(LogdmError):
    """Module passed to a flat-only functor has nonzero curvature action."""


class ValidationFailure(LogdmError):
    """A structural validation of a module/action table failed."""

    def __init__(self, relation, detail=""):
        self.relation = relation
        self.detail = detail
        super().__init__(f"validation failed: {relation}" + (f" ({detail})" if detail else ""))


class UnknownSuite(LogdmError):
    """Suite name not in the registry."""


class ArityError(LogdmError):
    """Exponent vector length does not match the chart dimension r."""


class ExprSyntaxError(LogdmError):
    """Expression syntax error with position information."""

    def __init__(self, position, expected, text=""):
        self.position = position
        self.expected = expected
        super().__init__(f"syntax error at position {position}: expected {expected}")
