"""Exception types raised across the toolkit."""


class InvalidStateError(ValueError):
    """Covariance violates the uncertainty relation or is not positive."""


class DivergenceError(ValueError):
    """A closed form diverges because the measurement carries no information."""


class ConvergenceError(RuntimeError):
    """An iterative solver did not reach its tolerance."""


class IllConditionedError(ValueError):
    """A least-squares design matrix is (numerically) rank deficient."""


class CalibrationError(ValueError):
    """The decoherence-based calibration cannot be formed."""


class OutOfRangeError(ValueError):
    """The quantity of interest lies outside the scanned grid."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
