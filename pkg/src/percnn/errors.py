"""Exception types shared across the package."""


class PercnnError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PercnnError):
    """Invalid experiment configuration (unknown key, bad value, missing file)."""


class BlowUpError(PercnnError):
    """Numerical blow-up during time integration or rollout."""

    def __init__(self, message, step=None, stage=None):
        super().__init__(message)
        self.step = step
        self.stage = stage


class TrainingDivergedError(PercnnError):
    """Training loss stayed non-finite; carries the history collected so far."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class UninterpretableModelError(PercnnError):
    """Model contains layers that cannot be expanded symbolically."""

    def __init__(self, message, layers=()):
        super().__init__(message)
        self.layers = tuple(layers)


class FileFormatError(PercnnError):
    """Base class for binary file problems."""


class UnrecognizedFormatError(FileFormatError):
    """Magic bytes or version do not match any known format."""


class CorruptFileError(FileFormatError):
    """File has the right magic but truncated or inconsistent contents."""
