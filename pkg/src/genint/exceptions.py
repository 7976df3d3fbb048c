"""Exception hierarchy shared across the package."""


class GenIntError(Exception):
    """Base class for all package errors."""


class DimensionError(GenIntError, ValueError):
    pass


class ValidationError(GenIntError, ValueError):
    pass


class FormatError(GenIntError, ValueError):
    pass


class NonFiniteError(GenIntError, FloatingPointError):
    pass


class ConfigurationError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class IdentifiabilityError(ValidationError):
    pass


class WeakInstrumentError(ValidationError):
    pass


class TrainingDivergedError(GenIntError, RuntimeError):
    def __init__(self, epoch, batch, value=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch} (loss={value})"
        )


class DependencyError(GenIntError, RuntimeError):
    def __init__(self, stage, missing, producer):
        self.stage = stage
        self.producer = producer
        super().__init__(
            f"stage {stage!r} needs {missing}, produced by stage {producer!r}; "
            f"run {producer!r} first"
        )
