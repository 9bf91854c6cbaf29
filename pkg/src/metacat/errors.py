"""Exception types shared by every module in the package.

Two families matter to callers: ValidationError covers bad inputs, bad
configuration and malformed files (the CLI maps these to exit code 2),
while the remaining MetacatError subclasses are runtime failures such as
numeric blowups (exit code 1).
"""


class MetacatError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MetacatError):
    """Invalid input, configuration, or file content."""


class IngestError(ValidationError):
    """Malformed CSV row or header; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class DatasetEmptyError(ValidationError):
    """Preprocessing removed every record."""


class PartitionError(ValidationError):
    """Not enough students or responses to build the requested split."""


class ConfigError(ValidationError):
    """Unknown key, wrong type, or out-of-range value in a config."""


class DimensionError(ValidationError):
    """Array shapes do not line up with the declared sizes."""


class CheckpointError(ValidationError):
    """Checkpoint file is corrupt or has an unsupported format version."""


class NumericError(MetacatError):
    """Non-finite values or an iterative solver that failed to converge."""


class NoAvailableQuestionError(MetacatError):
    """A selection step was asked for but no question remains available."""
