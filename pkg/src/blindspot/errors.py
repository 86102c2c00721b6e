"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/configuration problems exit 1,
data problems (bad images, bad checkpoint files) exit 2, numerical aborts
exit 3.
"""


class BlindspotError(Exception):
    """Base class for all package errors."""


class DimensionError(BlindspotError, ValueError):
    """Tensor or map shapes do not line up."""


class ParameterError(BlindspotError, ValueError):
    """A numeric argument is out of its valid range."""


class ConfigError(BlindspotError, ValueError):
    """A configuration field is missing, unknown, or malformed."""


class UsageError(BlindspotError):
    """Command-line arguments cannot be interpreted."""


class InputError(BlindspotError):
    """Input data (images, datasets) is unusable."""


class CheckpointError(BlindspotError):
    """Base for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """File carries an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload is complete."""


class CheckpointChecksumError(CheckpointError):
    """Payload bytes do not match the stored checksum."""


class NumericalAbort(BlindspotError):
    """Training produced a non-finite loss."""
