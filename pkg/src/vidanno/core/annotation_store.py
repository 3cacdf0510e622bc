"""Data model and persistence for boxes, tracker outputs and annotations.

Two line-oriented file formats are defined here, both starting with a
magic/version field:

Annotation file::

    VANN1,<video_id>,<frame_count>,<width>,<height>,<anchor_interval>
    <frame_idx>,<source>,<x_min>,<y_min>,<x_max>,<y_max>,<quality>
    ...

Tracker dump (a directory)::

    index.txt   VTRK1,<direction>,<map_size>
                <frame_idx>,<x_min>,<y_min>,<x_max>,<y_max>,<confidence>
    maps/<frame_idx:06d>.f32   row-major little-endian float32 response map

Coordinates are frame pixels stored as reals with repr(), so files
round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from vidanno.core.errors import CoverageError, FormatError, MissingArtifactError, ShapeError

logger = logging.getLogger(__name__)

ANNOTATION_MAGIC = "VANN1"
DUMP_MAGIC = "VTRK1"
DUMP_INDEX = "index.txt"
DUMP_MAPS = "maps"


class Direction(str, Enum):
    """Tracking direction."""

    FORWARD = "forward"
    BACKWARD = "backward"

    @property
    def opposite(self) -> Direction:
        """The other tracking direction."""
        return Direction.BACKWARD if self is Direction.FORWARD else Direction.FORWARD


class Source(str, Enum):
    """Provenance of an annotation record."""

    MANUAL = "manual"
    FORWARD = "forward"
    BACKWARD = "backward"
    FAILURE = "failure"

    @classmethod
    def from_direction(cls, direction: Direction) -> Source:
        """Source matching a tracking direction."""
        return cls.FORWARD if direction is Direction.FORWARD else cls.BACKWARD


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in frame pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Box coordinates must be finite: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"Degenerate box: {coords}")

    @classmethod
    def from_center(cls, cx: float, cy: float, width: float, height: float) -> BBox:
        """Create a box from its centre and size."""
        return cls(cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clip(self, width: float, height: float) -> BBox | None:
        """Clip to [0, width] x [0, height]; None if nothing is left."""
        x_min, y_min = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x_max, y_max = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x_min >= x_max or y_min >= y_max:
            return None
        return BBox(x_min, y_min, x_max, y_max)


@dataclass(frozen=True)
class VideoMeta:
    """Per-video metadata."""

    video_id: str
    frame_count: int
    frame_width: int
    frame_height: int
    anchor_interval: int = 30

    def __post_init__(self) -> None:
        if not self.video_id or "\n" in self.video_id:
            raise ValueError(f"Invalid video id: {self.video_id!r}")
        # frame_count 0 is accepted only so an empty annotation file can be written
        if self.frame_count < 0:
            raise ValueError(f"frame_count must be non-negative, got {self.frame_count}")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValueError(f"Frame size must be positive: {self.frame_width}x{self.frame_height}")
        if self.anchor_interval <= 0:
            raise ValueError(f"anchor_interval must be positive, got {self.anchor_interval}")

    def contains(self, frame_idx: int) -> bool:
        """Whether frame_idx is a valid index into this video."""
        return 0 <= frame_idx < self.frame_count


@dataclass(frozen=True, eq=False)
class TrackedFrame:
    """One tracker output: box, confidence and response map.

    The response map is stored as a read-only float32 copy.
    """

    frame_idx: int
    direction: Direction
    box: BBox
    confidence: float
    response_map: np.ndarray

    def __post_init__(self) -> None:
        if self.frame_idx < 0:
            raise ValueError(f"frame_idx must be non-negative, got {self.frame_idx}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"frame {self.frame_idx}: confidence {self.confidence} not in [0, 1]")
        response = np.array(self.response_map, dtype=np.float32)
        if response.ndim != 2:
            raise ShapeError(f"response map must be 2-D, got {response.shape}", self.frame_idx)
        response.flags.writeable = False
        object.__setattr__(self, "response_map", response)


@dataclass(frozen=True)
class AnnotationRecord:
    """Final annotation of one frame."""

    frame_idx: int
    source: Source
    box: BBox | None = None
    quality: float | None = None

    def __post_init__(self) -> None:
        if self.frame_idx < 0:
            raise ValueError(f"frame_idx must be non-negative, got {self.frame_idx}")
        if (self.source is Source.FAILURE) != (self.box is None):
            raise ValueError(f"frame {self.frame_idx}: FAILURE records, and only those, lack a box")
        if self.source in (Source.FORWARD, Source.BACKWARD):
            if self.quality is None or not self.quality > 0:
                raise ValueError(
                    f"frame {self.frame_idx}: {self.source.value} record needs quality > 0, "
                    f"got {self.quality}"
                )
        elif self.quality is not None:
            raise ValueError(f"frame {self.frame_idx}: {self.source.value} record has no quality")


@dataclass(frozen=True)
class AnnotationSet:
    """An annotation file's contents."""

    meta: VideoMeta
    records: tuple[AnnotationRecord, ...] = field(default_factory=tuple)

    def by_frame(self) -> dict[int, AnnotationRecord]:
        return {record.frame_idx: record for record in self.records}

    @property
    def is_complete(self) -> bool:
        """Whether every frame of the video has exactly one record."""
        return [r.frame_idx for r in self.records] == list(range(self.meta.frame_count))

    @property
    def failure_frames(self) -> list[int]:
        return [r.frame_idx for r in self.records if r.source is Source.FAILURE]

    def boxes(self) -> dict[int, BBox]:
        """Frame index to box, for records that carry one."""
        return {r.frame_idx: r.box for r in self.records if r.box is not None}


class FrameSource(Protocol):
    """Per-frame grayscale images in [0, 1]."""

    def frame(self, frame_idx: int) -> np.ndarray:
        """Return the image of one frame as a (H, W) float32 array."""
        ...


class ImageDirectory:
    """Frames stored as `<frame_idx:06d>.png` files in one directory."""

    def __init__(self, path: Path) -> None:
        self._path = path

    @property
    def path(self) -> Path:
        return self._path

    def frame_path(self, frame_idx: int) -> Path:
        return self._path / f"{frame_idx:06d}.png"

    def frame(self, frame_idx: int) -> np.ndarray:
        return read_frame(self.frame_path(frame_idx))


def validate_records(
    records: Sequence[AnnotationRecord], meta: VideoMeta, complete: bool = False
) -> None:
    """Check ordering, uniqueness and range of record frame indices.

    Raises:
        CoverageError: On a duplicate, out-of-range or unsorted index, or a
            missing frame when `complete` is set.
    """
    seen: set[int] = set()
    previous = -1
    for record in records:
        idx = record.frame_idx
        if idx in seen:
            raise CoverageError(f"Duplicate frame index {idx}", idx)
        if not meta.contains(idx):
            raise CoverageError(f"Frame index {idx} out of range [0, {meta.frame_count})", idx)
        if idx < previous:
            raise CoverageError(f"Records not sorted by frame index at frame {idx}", idx)
        seen.add(idx)
        previous = idx

    if complete and len(seen) != meta.frame_count:
        missing = next(i for i in range(meta.frame_count) if i not in seen)
        raise CoverageError(f"No record for frame {missing}", missing)


def write_annotations(
    records: Sequence[AnnotationRecord], meta: VideoMeta, path: Path
) -> None:
    """Write an annotation file.

    Raises:
        CoverageError: On duplicate or out-of-range frame indices.
    """
    validate_records(records, meta)
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            [
                ANNOTATION_MAGIC,
                meta.video_id,
                meta.frame_count,
                meta.frame_width,
                meta.frame_height,
                meta.anchor_interval,
            ]
        )
        for record in records:
            coords = ["", "", "", ""]
            if record.box is not None:
                coords = [repr(c) for c in record.box.as_tuple()]
            quality = "" if record.quality is None else repr(record.quality)
            writer.writerow([record.frame_idx, record.source.value, *coords, quality])


def read_annotations(path: Path) -> AnnotationSet:
    """Read an annotation file written by write_annotations.

    Raises:
        MissingArtifactError: If the file does not exist.
        FormatError: On a malformed line (line number reported).
        CoverageError: On duplicate or out-of-range frame indices.
    """
    if not path.exists():
        raise MissingArtifactError(path, "annotation file")

    with path.open("r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))

    if not rows:
        raise FormatError("empty file", path, 1)
    meta = _parse_annotation_header(rows[0], path)

    records: list[AnnotationRecord] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        records.append(_parse_annotation_row(row, path, line_no))

    validate_records(records, meta)
    return AnnotationSet(meta=meta, records=tuple(records))


def _parse_annotation_header(row: list[str], path: Path) -> VideoMeta:
    if len(row) != 6 or row[0] != ANNOTATION_MAGIC:
        raise FormatError(f"expected '{ANNOTATION_MAGIC}' header with 6 fields", path, 1)
    try:
        return VideoMeta(
            video_id=row[1],
            frame_count=int(row[2]),
            frame_width=int(row[3]),
            frame_height=int(row[4]),
            anchor_interval=int(row[5]),
        )
    except ValueError as e:
        raise FormatError(f"invalid header: {e}", path, 1) from e


def _parse_annotation_row(row: list[str], path: Path, line_no: int) -> AnnotationRecord:
    if len(row) != 7:
        raise FormatError(f"expected 7 fields, got {len(row)}", path, line_no)
    try:
        frame_idx = int(row[0])
        source = Source(row[1])
        box = None if all(v == "" for v in row[2:6]) else BBox(*(float(v) for v in row[2:6]))
        quality = None if row[6] == "" else float(row[6])
        return AnnotationRecord(frame_idx=frame_idx, source=source, box=box, quality=quality)
    except ValueError as e:
        raise FormatError(str(e), path, line_no) from e


def write_tracker_dump(frames: Sequence[TrackedFrame], path: Path, direction: Direction) -> None:
    """Write tracker outputs of one direction as a dump directory."""
    sizes = {frame.response_map.shape for frame in frames}
    if len(sizes) > 1:
        raise ShapeError(f"mixed response map shapes in dump: {sorted(sizes)}")
    map_size = next(iter(sizes))[0] if sizes else 0

    maps_dir = path / DUMP_MAPS
    maps_dir.mkdir(parents=True, exist_ok=True)

    with (path / DUMP_INDEX).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([DUMP_MAGIC, direction.value, map_size])
        for frame in sorted(frames, key=lambda fr: fr.frame_idx):
            if frame.direction is not direction:
                raise ValueError(
                    f"frame {frame.frame_idx} is {frame.direction.value}, dump is {direction.value}"
                )
            writer.writerow(
                [frame.frame_idx, *(repr(c) for c in frame.box.as_tuple()), repr(frame.confidence)]
            )
            frame.response_map.astype("<f4").tofile(maps_dir / f"{frame.frame_idx:06d}.f32")


def read_tracker_dump(
    path: Path,
    direction: Direction,
    response_size: int = 32,
    resize: bool = False,
) -> list[TrackedFrame]:
    """Read a tracker dump directory.

    Confidences outside [0, 1] are clipped with a warning. Response maps must
    be response_size x response_size unless `resize` is set, in which case
    they are bilinearly resized.

    Returns:
        TrackedFrames sorted by frame index.

    Raises:
        MissingArtifactError: If the dump or one of its maps is missing.
        FormatError: On a malformed index line (line number reported).
        ShapeError: On a response map of the wrong shape (frame reported).
    """
    index_path = path / DUMP_INDEX
    if not index_path.exists():
        raise MissingArtifactError(index_path, "tracker dump")

    with index_path.open("r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))

    if not rows or len(rows[0]) != 3 or rows[0][0] != DUMP_MAGIC:
        raise FormatError(f"expected '{DUMP_MAGIC}' header with 3 fields", index_path, 1)
    if rows[0][1] != direction.value:
        raise FormatError(
            f"dump direction is {rows[0][1]!r}, expected {direction.value!r}", index_path, 1
        )

    frames: list[TrackedFrame] = []
    seen: set[int] = set()
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        frame_idx, box, confidence = _parse_dump_row(row, index_path, line_no)
        if frame_idx in seen:
            raise FormatError(f"duplicate frame index {frame_idx}", index_path, line_no)
        seen.add(frame_idx)

        if not 0.0 <= confidence <= 1.0:
            clipped = min(max(confidence, 0.0), 1.0)
            logger.warning(
                f"{path}: frame {frame_idx} confidence {confidence} clipped to {clipped}"
            )
            confidence = clipped

        response = _read_response_map(path / DUMP_MAPS / f"{frame_idx:06d}.f32", frame_idx)
        if response.shape != (response_size, response_size):
            if not resize:
                raise ShapeError(
                    f"response map is {response.shape[0]}x{response.shape[1]}, "
                    f"expected {response_size}x{response_size}",
                    frame_idx,
                )
            logger.warning(
                f"{path}: frame {frame_idx} response map resized "
                f"{response.shape[0]}->{response_size}"
            )
            response = resize_response_map(response, response_size)

        frames.append(
            TrackedFrame(
                frame_idx=frame_idx,
                direction=direction,
                box=box,
                confidence=confidence,
                response_map=response,
            )
        )

    frames.sort(key=lambda fr: fr.frame_idx)
    return frames


def _parse_dump_row(row: list[str], path: Path, line_no: int) -> tuple[int, BBox, float]:
    if len(row) != 6:
        raise FormatError(f"expected 6 fields, got {len(row)}", path, line_no)
    try:
        frame_idx = int(row[0])
        box = BBox(*(float(v) for v in row[1:5]))
        confidence = float(row[5])
    except ValueError as e:
        raise FormatError(str(e), path, line_no) from e
    if frame_idx < 0 or not math.isfinite(confidence):
        raise FormatError("negative frame index or non-finite confidence", path, line_no)
    return frame_idx, box, confidence


def _read_response_map(path: Path, frame_idx: int) -> np.ndarray:
    if not path.exists():
        raise MissingArtifactError(path, f"response map of frame {frame_idx}")
    values = np.fromfile(path, dtype="<f4")
    side = math.isqrt(values.size)
    if side == 0 or side * side != values.size:
        raise ShapeError(f"response map with {values.size} values is not square", frame_idx)
    return values.reshape(side, side).astype(np.float32)


def resize_response_map(response: np.ndarray, size: int) -> np.ndarray:
    """Bilinearly resize a square response map to size x size."""
    image = Image.fromarray(np.asarray(response, dtype=np.float32))
    resized = image.resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float32)


def read_frame(path: Path) -> np.ndarray:
    """Read a frame image as a grayscale float32 array in [0, 1]."""
    if not path.exists():
        raise MissingArtifactError(path, "frame image")
    with Image.open(path) as image:
        return np.asarray(image.convert("L"), dtype=np.float32) / 255.0


def write_frame(image: np.ndarray, path: Path) -> None:
    """Write a [0, 1] grayscale array as an 8-bit PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def write_failure_list(frames: Iterable[int], path: Path) -> None:
    """Write failure frame indices, one per line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{idx}\n" for idx in sorted(frames)), encoding="utf-8")


def read_failure_list(path: Path) -> list[int]:
    """Read a failure frame list."""
    if not path.exists():
        raise MissingArtifactError(path, "failure list")
    frames: list[int] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            frames.append(int(line))
        except ValueError as e:
            raise FormatError(f"not a frame index: {line!r}", path, line_no) from e
    return frames
