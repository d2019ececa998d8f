"""Typed error hierarchy shared across the package.

Errors are split by what the caller can do about them: fix the wiring
(ConfigError), fix the inputs (PreconditionError), shrink the problem
(CapacityError / UnsupportedSizeError), or investigate numerics and I/O.
"""


class FastthinkError(Exception):
    """Base class for all package errors."""


class ConfigError(FastthinkError):
    """Inconsistent shapes, sizes, or configuration values."""


class PreconditionError(FastthinkError):
    """An operation was called with inputs that violate its contract."""


class NumericError(FastthinkError):
    """Non-finite values or degenerate numerics (zero norms, NaN losses)."""


class CapacityError(FastthinkError):
    """Sequence does not fit the model's maximum length."""


class UnsupportedSizeError(FastthinkError):
    """Input size outside the supported range (e.g. fewer than 10 prototypes)."""


class CorruptionError(FastthinkError):
    """Checkpoint file is truncated, has a bad magic, or fails its checksum."""


class VersionError(FastthinkError):
    """Checkpoint format version is not supported."""


class DigestMismatchError(FastthinkError):
    """Checkpoint was written under a different configuration."""


class TransportError(FastthinkError):
    """Remote teacher endpoint unreachable after transport retries."""
