"""Exception categories.

Every error the pipeline raises deliberately derives from :class:`VQFillError`;
the CLI maps each category to its own exit status.
"""


class VQFillError(Exception):
    exit_code = 1


class ConfigError(VQFillError, ValueError):
    exit_code = 3


class DataFormatError(VQFillError):
    exit_code = 4


class MagicError(DataFormatError):
    """File does not start with the container magic bytes."""


class VersionError(DataFormatError):
    """Container written by an unsupported format version."""


class TruncatedError(DataFormatError):
    """Payload shorter than its metadata declares."""


class ChecksumError(DataFormatError):
    """Payload digest does not match the recorded checksum."""


class AlignmentError(DataFormatError):
    """Baseline frames do not line up with the test frames."""


class InstabilityError(VQFillError, FloatingPointError):
    exit_code = 5


class StageMismatchError(VQFillError):
    exit_code = 6


class MetricError(VQFillError, ValueError):
    """Metric undefined for the given input (e.g. empty mask)."""

    exit_code = 7
