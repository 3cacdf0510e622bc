"""Sequence directories and the window banks both networks train on.

A sequence directory holds one video's artifacts::

    <seq>/groundtruth.txt        annotation file, every record MANUAL
    <seq>/forward/               tracker dump, forward direction
    <seq>/backward/              tracker dump, backward direction
    <seq>/frames/<idx:06d>.png   grayscale frames (optional)
    <seq>/drift.txt              drifted snippets, `direction,start,end` (synthetic only)
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from vidanno.config.settings import QualityMapParams, WindowConfig
from vidanno.core.annotation_store import (
    AnnotationRecord,
    BBox,
    Direction,
    FrameSource,
    ImageDirectory,
    Source,
    TrackedFrame,
    VideoMeta,
    read_annotations,
    read_tracker_dump,
    write_annotations,
    write_frame,
    write_tracker_dump,
)
from vidanno.core.errors import CoverageError, FormatError, MissingArtifactError
from vidanno.core.metrics import iou, quality_from_iou
from vidanno.core.snippets import (
    Snippet,
    Span,
    build_snippets,
    default_anchors,
    snippet_windows,
    split_video,
)

logger = logging.getLogger(__name__)

GROUND_TRUTH_FILE = "groundtruth.txt"
FRAMES_DIR = "frames"
DRIFT_FILE = "drift.txt"


@dataclass
class SequenceData:
    """Everything known about one video: boxes, tracker outputs, frames."""

    meta: VideoMeta
    ground_truth: dict[int, BBox]
    forward: list[TrackedFrame]
    backward: list[TrackedFrame]
    frames: FrameSource | None = None
    drift: dict[Direction, list[Span]] = field(default_factory=dict)

    @property
    def video_id(self) -> str:
        return self.meta.video_id

    def anchors(self) -> list[int]:
        return default_anchors(self.meta)

    def manual_boxes(self) -> dict[int, BBox]:
        """Ground-truth boxes of the anchor frames.

        Raises:
            CoverageError: If an anchor frame has no box.
        """
        boxes: dict[int, BBox] = {}
        for idx in self.anchors():
            if idx not in self.ground_truth:
                raise CoverageError(f"{self.video_id}: no manual box for anchor frame {idx}", idx)
            boxes[idx] = self.ground_truth[idx]
        return boxes

    def snippets(self) -> list[Snippet]:
        return build_snippets(split_video(self.meta, self.anchors()), self.forward, self.backward)

    def drifted_frames(self, direction: Direction) -> set[int]:
        """Frames tracked inside a drifted snippet of one direction."""
        frames: set[int] = set()
        for start, end in self.drift.get(direction, []):
            if direction is Direction.FORWARD:
                frames.update(range(start + 1, end + 1))
            else:
                frames.update(range(start, end))
        return frames

    def tracked(self, direction: Direction) -> list[TrackedFrame]:
        return self.forward if direction is Direction.FORWARD else self.backward


def save_sequence(sequence: SequenceData, path: Path, write_frames: bool = True) -> None:
    """Write a sequence directory."""
    path.mkdir(parents=True, exist_ok=True)
    records = [
        AnnotationRecord(frame_idx=idx, source=Source.MANUAL, box=box)
        for idx, box in sorted(sequence.ground_truth.items())
    ]
    write_annotations(records, sequence.meta, path / GROUND_TRUTH_FILE)
    for direction in Direction:
        write_tracker_dump(sequence.tracked(direction), path / direction.value, direction)

    if write_frames and sequence.frames is not None:
        for idx in range(sequence.meta.frame_count):
            write_frame(sequence.frames.frame(idx), path / FRAMES_DIR / f"{idx:06d}.png")

    if sequence.drift:
        with (path / DRIFT_FILE).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            for direction in Direction:
                for start, end in sequence.drift.get(direction, []):
                    writer.writerow([direction.value, start, end])
    logger.debug(f"Saved sequence {sequence.video_id} to {path}")


def load_sequence(path: Path, response_size: int = 32, resize: bool = False) -> SequenceData:
    """Read a sequence directory written by save_sequence (or by hand).

    Raises:
        MissingArtifactError: If the ground truth or a tracker dump is missing.
    """
    if not path.is_dir():
        raise MissingArtifactError(path, "sequence directory")
    annotations = read_annotations(path / GROUND_TRUTH_FILE)
    tracked = {
        direction: read_tracker_dump(path / direction.value, direction, response_size, resize)
        for direction in Direction
    }
    frames_dir = path / FRAMES_DIR
    return SequenceData(
        meta=annotations.meta,
        ground_truth=annotations.boxes(),
        forward=tracked[Direction.FORWARD],
        backward=tracked[Direction.BACKWARD],
        frames=ImageDirectory(frames_dir) if frames_dir.is_dir() else None,
        drift=_read_drift(path / DRIFT_FILE),
    )


def _read_drift(path: Path) -> dict[Direction, list[Span]]:
    drift: dict[Direction, list[Span]] = {}
    if not path.exists():
        return drift
    with path.open("r", encoding="utf-8", newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                direction, start, end = Direction(row[0]), int(row[1]), int(row[2])
            except (ValueError, IndexError) as e:
                raise FormatError(f"expected direction,start,end: {e}", path, line_no) from e
            drift.setdefault(direction, []).append((start, end))
    return drift


def list_sequences(data_dir: Path) -> list[Path]:
    """Sequence directories under data_dir, sorted by name."""
    if not data_dir.is_dir():
        raise MissingArtifactError(data_dir, "data directory")
    return sorted(p for p in data_dir.iterdir() if (p / GROUND_TRUTH_FILE).exists())


def frame_tail(frame: TrackedFrame, meta: VideoMeta) -> np.ndarray:
    """Normalized box and confidence: (x_min/W, y_min/H, x_max/W, y_max/H, o)."""
    box = frame.box
    return np.array(
        [
            box.x_min / meta.frame_width,
            box.y_min / meta.frame_height,
            box.x_max / meta.frame_width,
            box.y_max / meta.frame_height,
            frame.confidence,
        ],
        dtype=np.float32,
    )


def checked_map(frame: TrackedFrame) -> np.ndarray:
    """The frame's response map.

    Raises:
        ValueError: If the map holds NaN or infinite values.
    """
    if not np.isfinite(frame.response_map).all():
        raise ValueError(f"frame {frame.frame_idx}: response map has non-finite values")
    return frame.response_map


MaskFn = Callable[[SequenceData, TrackedFrame], tuple[np.ndarray, tuple[int, int, int, int]]]
"""Per tracked frame: initial P x Q mask and box-mask cell bounds (row0, row1, col0, col1)."""


@dataclass(frozen=True)
class WindowBank:
    """Windows stored as index tensors into a bank of unique tracked frames.

    Attributes:
        maps: (F, r, r) response maps
        tails: (F, 5) normalized boxes and confidences
        targets: (F,) quality targets (zeros without ground truth)
        slots: (N, L) bank row of every window slot
        valid: (N, L) False on padded slots
        backward: (N,) True for backward windows
        masks: (F, P, Q) initial segmentation masks, refinement banks only
        cells: (F, 4) box-mask cell bounds, refinement banks only
    """

    maps: Tensor
    tails: Tensor
    targets: Tensor
    slots: Tensor
    valid: Tensor
    backward: Tensor
    masks: Tensor | None = None
    cells: Tensor | None = None

    def __len__(self) -> int:
        return int(self.slots.shape[0])

    @property
    def frame_rows(self) -> int:
        return int(self.maps.shape[0])

    def batch(self, index: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Gather windows: (maps (B,L,r,r), tails (B,L,5), backward (B,), valid (B,L))."""
        slots = self.slots[index]
        return self.maps[slots], self.tails[slots], self.backward[index], self.valid[index]

    def to(self, dtype: torch.dtype) -> WindowBank:
        """Copy with floating tensors converted to dtype."""
        return replace(
            self,
            maps=self.maps.to(dtype),
            tails=self.tails.to(dtype),
            targets=self.targets.to(dtype),
            masks=None if self.masks is None else self.masks.to(dtype),
        )


def build_window_bank(
    sequences: Sequence[SequenceData],
    window: WindowConfig,
    quality: QualityMapParams | None = None,
    mask_fn: MaskFn | None = None,
    max_frames: int | None = None,
) -> WindowBank:
    """Cut every sequence into windows and gather their frames into a bank.

    Args:
        sequences: Sequences with complete tracker outputs
        window: Window length and stride
        quality: When given, targets are quality_from_iou of tracker box vs
            ground truth (every tracked frame then needs a ground-truth box)
        mask_fn: When given, initial masks and box cells are stored per frame
        max_frames: Stop adding windows once the bank would exceed this many rows

    Raises:
        ValueError: If no window could be built.
        CoverageError: If a target needs a missing ground-truth box.
    """
    row_of: dict[tuple[int, Direction, int], int] = {}
    maps: list[np.ndarray] = []
    tails: list[np.ndarray] = []
    targets: list[float] = []
    masks: list[np.ndarray] = []
    cells: list[tuple[int, int, int, int]] = []
    slots: list[list[int]] = []
    valid: list[tuple[bool, ...]] = []
    backward: list[bool] = []
    full = False

    for seq_no, sequence in enumerate(sequences):
        for win in snippet_windows(sequence.snippets(), window.length, window.stride):
            new = [
                f
                for f in dict.fromkeys(win.frames)
                if (seq_no, f.direction, f.frame_idx) not in row_of
            ]
            if max_frames is not None and len(maps) + len(new) > max_frames:
                full = True
                break
            for frame in new:
                row_of[(seq_no, frame.direction, frame.frame_idx)] = len(maps)
                maps.append(checked_map(frame))
                tails.append(frame_tail(frame, sequence.meta))
                targets.append(_quality_target(sequence, frame, quality))
                if mask_fn is not None:
                    mask, bounds = mask_fn(sequence, frame)
                    masks.append(mask.astype(np.float16))
                    cells.append(bounds)
            slots.append([row_of[(seq_no, f.direction, f.frame_idx)] for f in win.frames])
            valid.append(win.valid_mask)
            backward.append(win.direction is Direction.BACKWARD)
        if full:
            logger.info(f"Window bank capped at {len(maps)} frames ({len(slots)} windows)")
            break

    if not slots:
        raise ValueError("No training windows could be built")

    return WindowBank(
        maps=torch.from_numpy(np.stack(maps)),
        tails=torch.from_numpy(np.stack(tails)),
        targets=torch.tensor(targets, dtype=torch.float32),
        slots=torch.tensor(slots, dtype=torch.long),
        valid=torch.tensor(valid, dtype=torch.bool),
        backward=torch.tensor(backward, dtype=torch.bool),
        masks=torch.from_numpy(np.stack(masks)) if masks else None,
        cells=torch.tensor(cells, dtype=torch.long) if cells else None,
    )


def _quality_target(
    sequence: SequenceData, frame: TrackedFrame, quality: QualityMapParams | None
) -> float:
    if quality is None:
        return 0.0
    gt = sequence.ground_truth.get(frame.frame_idx)
    if gt is None:
        raise CoverageError(
            f"{sequence.video_id}: no ground truth for frame {frame.frame_idx}", frame.frame_idx
        )
    return quality_from_iou(iou(frame.box, gt), quality)
