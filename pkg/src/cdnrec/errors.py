"""Exception types shared across the package.

Each carries a short ``category`` used by the CLI for its exit status.
"""


class CDNError(Exception):
    category = "error"


class ConfigError(CDNError, ValueError):
    category = "config"


class DataFormatError(CDNError, ValueError):
    category = "data"


class ShapeError(CDNError, ValueError):
    category = "shape"


class NonFiniteError(CDNError, FloatingPointError):
    category = "numeric"


class TrainingDiverged(NonFiniteError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic
