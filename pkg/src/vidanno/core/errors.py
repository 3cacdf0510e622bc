"""Error types for annotation stages."""

from dataclasses import dataclass
from enum import Enum, auto
from pathlib import Path


class AnnotationError(Exception):
    """Base class for all annotation pipeline errors."""


class FormatError(AnnotationError, ValueError):
    """A file does not conform to its expected format."""

    def __init__(self, message: str, path: Path | None = None, line: int | None = None) -> None:
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")


class ShapeError(AnnotationError, ValueError):
    """A response map or mask has the wrong shape."""

    def __init__(self, message: str, frame_idx: int | None = None) -> None:
        self.frame_idx = frame_idx
        prefix = f"frame {frame_idx}: " if frame_idx is not None else ""
        super().__init__(f"{prefix}{message}")


class CoverageError(AnnotationError, ValueError):
    """Frames are missing, duplicated or out of range."""

    def __init__(self, message: str, frame_idx: int | None = None) -> None:
        self.frame_idx = frame_idx
        super().__init__(message)


class RegionError(AnnotationError, ValueError):
    """A search region lies entirely outside the frame."""


class ConfigError(AnnotationError, ValueError):
    """Configuration is invalid."""


class MissingArtifactError(AnnotationError, FileNotFoundError):
    """An upstream artifact (dump, checkpoint, sequence) is missing."""

    def __init__(self, path: Path, what: str = "artifact") -> None:
        self.path = path
        super().__init__(f"Missing {what}: {path}")


class FailureKind(Enum):
    """Category of a stage failure."""

    MISSING_INPUT = auto()  # Upstream artifact not found
    INVALID_INPUT = auto()  # Malformed file, shape or coverage problem
    CONFIG = auto()  # Invalid configuration
    UNKNOWN = auto()  # Anything else


@dataclass
class StageFailure:
    """Represents a failed CLI stage.

    Attributes:
        stage: Name of the stage ("annotate", "train-assess", ...)
        kind: Category of the failure
        message: Human-readable one-line cause
    """

    stage: str
    kind: FailureKind
    message: str = ""

    @classmethod
    def from_exception(cls, stage: str, exception: BaseException) -> "StageFailure":
        """Create a StageFailure from an exception.

        Args:
            stage: Stage that was running
            exception: The exception that was raised

        Returns:
            StageFailure with the matching kind and a single-line message
        """
        message = " ".join(str(exception).split()) or type(exception).__name__

        if isinstance(exception, ConfigError):
            kind = FailureKind.CONFIG
        elif isinstance(exception, FileNotFoundError):
            kind = FailureKind.MISSING_INPUT
        elif isinstance(exception, AnnotationError | ValueError):
            kind = FailureKind.INVALID_INPUT
        else:
            kind = FailureKind.UNKNOWN

        return cls(stage=stage, kind=kind, message=message)

    @property
    def exit_code(self) -> int:
        """Process exit status for this failure."""
        return 2 if self.kind == FailureKind.CONFIG else 1

    def __str__(self) -> str:
        """Return human-readable string representation."""
        kind_str = {
            FailureKind.MISSING_INPUT: "missing input",
            FailureKind.INVALID_INPUT: "invalid input",
            FailureKind.CONFIG: "configuration error",
            FailureKind.UNKNOWN: "error",
        }.get(self.kind, "error")
        return f"{self.stage} failed ({kind_str}): {self.message}"
