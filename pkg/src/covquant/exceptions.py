"""Exception types shared across the package."""


class CovquantError(Exception):
    """Base class for all package errors."""


class GridMismatchError(CovquantError, ValueError):
    """Operands live on different mode grids, or array shapes disagree with the grid."""


class RealityError(CovquantError, ValueError):
    """A real field was requested from mode amplitudes that are not real."""


class NotInvertibleError(CovquantError, ValueError):
    """A formal series is not invertible at linear order."""


class ResonanceError(CovquantError, ArithmeticError):
    """A homological equation hit a (near-)zero denominator with a nonzero right-hand side.

    Attributes
    ----------
    degree : int
        Degree at which the resonance occurred.
    tuples : list of tuple
        Offending ``(out, sorted_inputs, denominator, rhs)`` entries.
    """

    def __init__(self, message, degree=None, tuples=()):
        super().__init__(message)
        self.degree = degree
        self.tuples = list(tuples)


class CoefficientOverflowError(CovquantError, OverflowError):
    """Coefficient magnitudes exceeded the configured bound."""


class BlowUpError(CovquantError, FloatingPointError):
    """Non-finite values appeared during time integration.

    Attributes
    ----------
    time : float
        Integration time at which the failure was detected.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ConvergenceError(CovquantError, RuntimeError):
    """A horizon sequence failed to show decreasing drift."""


class ConfigError(CovquantError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
