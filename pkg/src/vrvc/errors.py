"""Exception types shared across the pipeline."""


class DimensionError(ValueError):
    """Shapes or channel counts do not line up."""


class StateError(RuntimeError):
    """Operation requires state (e.g. a recorded forward pass) that is absent."""


class NonFiniteError(ValueError):
    """A value that must be finite is NaN or infinite."""


class OptimizerError(RuntimeError):
    """Optimizer update rejected; carries the offending parameter name."""

    def __init__(self, message: str, param_name: str = ""):
        super().__init__(message)
        self.param_name = param_name


class ProbeError(RuntimeError):
    """Finite-difference probe evaluated to a non-finite value."""


class TrainingError(RuntimeError):
    """Training diverged; carries the iteration index."""

    def __init__(self, message: str, iteration: int = -1):
        super().__init__(message)
        self.iteration = iteration


class CorruptionError(ValueError):
    """Bitstream cannot be parsed; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Invalid run or training configuration."""


class EvaluationError(ValueError):
    """Metric cannot be computed from the given inputs."""
