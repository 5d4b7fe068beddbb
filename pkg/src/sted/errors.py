"""Exception types shared across the package."""


class StedError(Exception):
    """Base class for package-specific failures."""


class ConfigurationError(StedError):
    """A config file or CLI flag combination is invalid."""


class DataFormatError(StedError):
    """A dataset blob or manifest does not match its declared layout."""


class LineageError(ConfigurationError):
    """An evaluation was asked to reuse a network from the training side."""


class TrainingAborted(StedError):
    """Training hit a non-finite loss and stopped at the last good step."""

    def __init__(self, message: str, step: int, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path
