"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.  Plain ValueError is treated as a configuration
problem (bad parameter values).
"""


class ClaadError(Exception):
    """Base class for package-specific failures."""


class ConfigError(ClaadError):
    """Invalid or inconsistent run configuration."""


class DataError(ClaadError):
    """Dataset cannot be read or violates its declared layout."""


class CorruptFileError(DataError):
    """On-disk record whose header does not match its payload."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class MissingChannelError(ClaadError):
    """A referenced channel name does not exist in the recording."""


class InsufficientClassesError(ClaadError):
    """Spatial-filter fitting needs examples of both classes."""


class IllConditionedError(ClaadError):
    """A covariance matrix is numerically singular."""


class NumericalError(ClaadError):
    """A loss or gradient evaluated to a non-finite value."""

    def __init__(self, tensor_name, message=None):
        super().__init__(message or f"non-finite values in '{tensor_name}'")
        self.tensor_name = tensor_name
