"""Exception types shared across the package.

Every error carries a ``category`` string; the CLI prints it and maps it to
a stable exit code.
"""


class VoxMAEError(Exception):
    category = "error"
    exit_code = 1


class InvalidInputError(VoxMAEError, ValueError):
    category = "invalid-input"
    exit_code = 3


class InvalidConfigError(VoxMAEError, ValueError):
    category = "invalid-config"
    exit_code = 4


class DegenerateVolumeError(VoxMAEError, ValueError):
    category = "degenerate-volume"
    exit_code = 5


class InvalidLayoutError(VoxMAEError, ValueError):
    category = "invalid-layout"
    exit_code = 6


class NumericInputError(VoxMAEError, ValueError):
    category = "numeric-input"
    exit_code = 7


class UndefinedMetricError(VoxMAEError, ValueError):
    category = "undefined-metric"
    exit_code = 8


class NonFiniteLossError(VoxMAEError, RuntimeError):
    """Raised when training produces a NaN/inf loss.

    ``checkpoint_path`` points at the state written just before aborting.
    """

    category = "non-finite-loss"
    exit_code = 9

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class GeometryError(VoxMAEError, RuntimeError):
    category = "geometry"
    exit_code = 10


class DegenerateMetricWarning(UserWarning):
    """A metric hit a documented convention (e.g. both-empty Dice)."""
