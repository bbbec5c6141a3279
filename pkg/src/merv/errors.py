"""Exception hierarchy shared by every pipeline stage."""


class MervError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MervError, ValueError):
    """Tensor extents do not fit the operation."""


class AlignmentError(MervError, ValueError):
    """An encoder cannot be brought to the requested temporal grid."""


class FormatError(MervError, ValueError):
    """A serialized tensor or config could not be decoded."""


class ConfigError(MervError, ValueError):
    """A run configuration failed validation."""


class TrainingError(MervError, RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
