"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class ConfigError(ValueError):
    """A configuration or precondition was violated."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or incompatible."""


class CorrectnessError(RuntimeError):
    """Two computation paths that must agree produced different results."""


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite during optimization."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
