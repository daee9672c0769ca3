"""Exception types shared across the package.

The CLI maps these onto its stable exit codes; library users can catch
them individually or via ``QuatnetError``.
"""


class QuatnetError(Exception):
    """Base class for all quatnet errors."""


class ShapeError(QuatnetError, ValueError):
    """Incompatible tensor shapes, kernel extents, or channel counts."""


class ConfigError(QuatnetError, ValueError):
    """Run configuration could not be parsed or is inconsistent."""


class DatasetError(QuatnetError, ValueError):
    """Dataset directory, manifest, or sample files are unusable."""


class NumericError(QuatnetError, ArithmeticError):
    """A numerical routine failed (e.g. covariance factorization)."""


class CheckpointMismatchError(QuatnetError, ValueError):
    """Checkpoint parameters do not match the configured model."""


class CheckpointCorruptError(QuatnetError, ValueError):
    """Checkpoint or tensor file is malformed."""
