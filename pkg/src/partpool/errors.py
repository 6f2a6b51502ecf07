"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data and checkpoint problems exit 3, numeric aborts exit 4.
"""


class PartPoolError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PartPoolError):
    """A configuration value or combination of values is invalid."""


class DataError(PartPoolError):
    """A dataset, manifest, or descriptor input is unusable."""


class ParseError(DataError):
    """A filename or file does not follow the declared convention."""


class CheckpointError(DataError):
    """A checkpoint is missing, of the wrong version, or fails shape validation."""


class NumericAbortError(PartPoolError):
    """Training or inference produced non-finite values.

    Carries a small diagnostic dict so the caller can snapshot state.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
