"""Exception types raised by the numerical core."""


class JkoLabError(Exception):
    """Base class. ``step`` is filled in when raised from inside a trajectory."""

    step: int | None = None


class GridMismatchError(JkoLabError, ValueError):
    pass


class UnbalancedError(JkoLabError, ValueError):
    pass


class InstanceTooLargeError(JkoLabError, ValueError):
    pass


class ConvergenceError(JkoLabError, RuntimeError):
    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class KernelUnderflowError(JkoLabError, RuntimeError):
    pass


class DegenerateMapError(JkoLabError, RuntimeError):
    pass


class DegeneratePotentialError(JkoLabError, RuntimeError):
    pass


class PositivityLostError(JkoLabError, RuntimeError):
    pass


class PosViolatedError(JkoLabError, RuntimeError):
    """``1 + tau * a_k <= 0`` on a trajectory; the whole run is invalid."""


class ThresholdUndefinedError(JkoLabError, ValueError):
    pass


class NoAdmissiblePairsError(JkoLabError, ValueError):
    pass
