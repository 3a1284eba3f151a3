"""Error types shared across the package.

Every error carries a short machine-readable code so the CLI can print
``ERROR <code>: <message>`` lines without pattern-matching messages.
"""


class CamoDiffError(Exception):
    """Base class for package errors."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ConfigError(CamoDiffError):
    """Invalid configuration value, key, or combination."""

    code = "config"


class ShapeError(CamoDiffError):
    """Tensor shape or dtype does not satisfy an interface contract."""

    code = "shape"


class DataError(CamoDiffError):
    """Dataset layout problem: missing files, size mismatches, bad pixels."""

    code = "data"


class CheckpointError(CamoDiffError):
    """Unreadable, incompatible, or version-mismatched checkpoint."""

    code = "checkpoint"


class DivergenceError(CamoDiffError):
    """Training produced a non-finite loss."""

    code = "divergence"

    def __init__(self, message: str, step: int | None = None, batch_index: int | None = None):
        super().__init__(message)
        self.step = step
        self.batch_index = batch_index
