"""Exception types raised across LightTBNet."""

from typing import Any, Dict, Optional

from .utils import logger


class LightTBNetError(Exception):
    """Base exception for every error raised by the package."""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(message)

        # Log error details
        logger.error(f"{type(self).__name__}: {message}")
        if self.details:
            logger.debug(f"Error details: {self.details}")

    def to_dict(self) -> Dict[str, Any]:
        """Structured form used by JSON tool responses."""
        return {"error": self.message, "kind": type(self).__name__, "details": self.details}


class ShapeError(LightTBNetError, ValueError):
    """Operand or layer shapes are incompatible."""


class ConfigError(LightTBNetError, ValueError):
    """A configuration object failed validation."""


class ImageError(LightTBNetError, ValueError):
    """An image could not be decoded or is degenerate."""


class ManifestError(LightTBNetError, ValueError):
    """A manifest file is malformed."""
    def __init__(self, message: str, line: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, details)


class SplitError(LightTBNetError, ValueError):
    """Splitting or fold selection is impossible."""


class MetricsError(LightTBNetError, ValueError):
    """A metric is undefined for the given inputs."""


class ExplainError(LightTBNetError, ValueError):
    """An explanation cannot be produced for the requested target."""


class CheckpointError(LightTBNetError, IOError):
    """Base class for checkpoint read/write failures."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class VersionMismatchError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class TruncatedCheckpointError(CheckpointError):
    """The file ended before the declared content was read."""


class CheckpointStructureError(CheckpointError):
    """The tensor table does not match the embedded model configuration."""


class NonFiniteLossError(LightTBNetError, FloatingPointError):
    """Training produced a NaN or infinite loss."""
    def __init__(self, loss: float, lr: float, epoch: int, batch_index: int):
        self.loss = loss
        self.lr = lr
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch}, batch {batch_index} (lr={lr})",
            {"loss": loss, "lr": lr, "epoch": epoch, "batch_index": batch_index},
        )


class MissingCheckpointError(LightTBNetError, FileNotFoundError):
    """One or more fold checkpoints are not where the run expects them."""
