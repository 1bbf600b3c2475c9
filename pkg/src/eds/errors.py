"""Exception hierarchy shared by all modules."""


class EDSError(Exception):
    """Base class for all toolkit errors."""


class ExprSyntaxError(EDSError):
    """Raised by the expression parser; carries the offending position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownSymbolError(EDSError):
    """An identifier not in the declared symbol set (strict parsing mode)."""


class DegenerateDivisionError(EDSError):
    """A denominator normalized to zero; never silently swallowed."""


class RankInstabilityError(EDSError):
    """Symbolic rank disagrees with the rank sampled at rational points."""


class UnsupportedSpectrumError(EDSError):
    """matrix_exp_closed cannot handle this spectrum; supply R manually."""


class SingularCoframeError(EDSError):
    """A coframe's coefficient matrix is not invertible."""


class VerificationError(EDSError):
    """A structure-equation or identity check failed.

    ``name`` identifies the failing check for reports and negative controls.
    """

    def __init__(self, name, message=""):
        super().__init__(f"{name}: {message}" if message else name)
        self.name = name


class InputError(EDSError):
    """Malformed problem file or ill-posed input data."""


class UnsupportedCaseError(EDSError):
    """Input falls outside the implemented closed-form class (exit code 3)."""
