"""Snippet splitting, forward/backward merging and fixed-length windowing."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vidanno.core.annotation_store import BBox, Direction, TrackedFrame, VideoMeta
from vidanno.core.errors import CoverageError

WINDOW_INDEX_MAGIC = "VWIN1"

Span = tuple[int, int]


@dataclass(frozen=True)
class Snippet:
    """Frames between two manual anchors, tracked in both directions.

    frames_fwd runs over (start_idx, end_idx] in ascending order and
    frames_bwd over [start_idx, end_idx) in descending (tracking) order.
    """

    start_idx: int
    end_idx: int
    frames_fwd: tuple[TrackedFrame, ...] = ()
    frames_bwd: tuple[TrackedFrame, ...] = ()

    def __post_init__(self) -> None:
        if self.start_idx >= self.end_idx:
            raise ValueError(f"Empty snippet span ({self.start_idx}, {self.end_idx})")
        _check_run(self.frames_fwd, Direction.FORWARD, self.start_idx + 1, self.end_idx, 1)
        _check_run(self.frames_bwd, Direction.BACKWARD, self.start_idx, self.end_idx - 1, -1)

    @property
    def span(self) -> Span:
        return (self.start_idx, self.end_idx)

    def frames(self, direction: Direction) -> tuple[TrackedFrame, ...]:
        return self.frames_fwd if direction is Direction.FORWARD else self.frames_bwd


def _check_run(
    frames: Sequence[TrackedFrame], direction: Direction, low: int, high: int, step: int
) -> None:
    previous: int | None = None
    for frame in frames:
        if frame.direction is not direction:
            raise ValueError(f"frame {frame.frame_idx} is not a {direction.value} result")
        if not low <= frame.frame_idx <= high:
            raise CoverageError(
                f"{direction.value} frame {frame.frame_idx} outside snippet range [{low}, {high}]",
                frame.frame_idx,
            )
        if previous is not None and (frame.frame_idx - previous) * step <= 0:
            raise ValueError(f"{direction.value} frames out of tracking order at {frame.frame_idx}")
        previous = frame.frame_idx


@dataclass(frozen=True)
class MergedTracks:
    """Per-frame forward/backward results for a whole video."""

    pairs: dict[int, tuple[TrackedFrame, TrackedFrame]]
    anchor_frames: tuple[int, ...]
    anchors: dict[int, BBox]  # manual boxes, when supplied

    def result(self, frame_idx: int, direction: Direction) -> TrackedFrame:
        forward, backward = self.pairs[frame_idx]
        return forward if direction is Direction.FORWARD else backward


@dataclass(frozen=True)
class Window:
    """Fixed-length run of tracked frames fed to the sequential models.

    Padded slots duplicate the nearest real frame and are flagged invalid.
    """

    direction: Direction
    frames: tuple[TrackedFrame, ...]
    valid_mask: tuple[bool, ...]
    span: Span = (0, 0)
    offset: int = 0

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.valid_mask) or not self.frames:
            raise ValueError("Window frames and valid_mask must have the same non-zero length")
        if not any(self.valid_mask):
            raise ValueError("Window has no valid slot")

    @property
    def length(self) -> int:
        return len(self.frames)

    @property
    def frame_indices(self) -> list[int]:
        return [frame.frame_idx for frame in self.frames]


def split_video(meta: VideoMeta, manual_frames: Iterable[int]) -> list[Span]:
    """Split a video into snippet spans bounded by consecutive anchors.

    Raises:
        CoverageError: If fewer than two anchors are given, an anchor is out of
            range, or the first/last frame is not an anchor.
    """
    anchors = sorted(set(manual_frames))
    if len(anchors) < 2:
        raise CoverageError(f"At least 2 manual anchors are required, got {len(anchors)}")
    for idx in anchors:
        if not meta.contains(idx):
            raise CoverageError(f"Anchor {idx} out of range [0, {meta.frame_count})", idx)
    if anchors[0] != 0 or anchors[-1] != meta.frame_count - 1:
        raise CoverageError(
            f"Frames 0 and {meta.frame_count - 1} must both be manual anchors "
            f"(got {anchors[0]} .. {anchors[-1]})"
        )
    return list(zip(anchors[:-1], anchors[1:], strict=True))


def default_anchors(meta: VideoMeta) -> list[int]:
    """Anchor every anchor_interval frames plus the last frame."""
    if meta.frame_count == 0:
        return []
    anchors = list(range(0, meta.frame_count, meta.anchor_interval))
    if anchors[-1] != meta.frame_count - 1:
        anchors.append(meta.frame_count - 1)
    return anchors


def build_snippets(
    spans: Sequence[Span],
    forward: Iterable[TrackedFrame],
    backward: Iterable[TrackedFrame],
) -> list[Snippet]:
    """Cut whole-video forward/backward results into per-span snippets.

    Raises:
        CoverageError: If a span is missing a tracked frame in either direction.
    """
    by_direction = {
        Direction.FORWARD: {frame.frame_idx: frame for frame in forward},
        Direction.BACKWARD: {frame.frame_idx: frame for frame in backward},
    }

    snippets: list[Snippet] = []
    for start, end in spans:
        runs: dict[Direction, list[TrackedFrame]] = {}
        for direction, indices in (
            (Direction.FORWARD, range(start + 1, end + 1)),
            (Direction.BACKWARD, range(end - 1, start - 1, -1)),
        ):
            frames = by_direction[direction]
            missing = [idx for idx in indices if idx not in frames]
            if missing:
                raise CoverageError(
                    f"No {direction.value} result for frame {missing[0]} in span ({start}, {end})",
                    missing[0],
                )
            runs[direction] = [frames[idx] for idx in indices]
        snippets.append(
            Snippet(
                start_idx=start,
                end_idx=end,
                frames_fwd=tuple(runs[Direction.FORWARD]),
                frames_bwd=tuple(runs[Direction.BACKWARD]),
            )
        )
    return snippets


def merge_directions(
    snippets: Sequence[Snippet], manual_boxes: Mapping[int, BBox] | None = None
) -> MergedTracks:
    """Merge snippet results into one forward/backward pair per frame.

    Anchor frames (snippet endpoints) map to their manual boxes; every other
    frame maps to exactly one forward and one backward result.

    Raises:
        CoverageError: If a non-anchor frame lacks a result in one direction
            or is tracked twice in one direction.
    """
    anchor_indices = sorted({idx for s in snippets for idx in s.span})
    anchor_set = set(anchor_indices)
    anchors: dict[int, BBox] = {}
    if manual_boxes is not None:
        for idx in anchor_indices:
            if idx not in manual_boxes:
                raise CoverageError(f"No manual box for anchor frame {idx}", idx)
            anchors[idx] = manual_boxes[idx]

    results: dict[Direction, dict[int, TrackedFrame]] = {
        Direction.FORWARD: {},
        Direction.BACKWARD: {},
    }
    for snippet in snippets:
        for direction in Direction:
            for frame in snippet.frames(direction):
                if frame.frame_idx in anchor_set:
                    continue
                if frame.frame_idx in results[direction]:
                    raise CoverageError(
                        f"Frame {frame.frame_idx} tracked twice {direction.value}", frame.frame_idx
                    )
                results[direction][frame.frame_idx] = frame

    interior = sorted({idx for s in snippets for idx in range(s.start_idx + 1, s.end_idx)})
    pairs: dict[int, tuple[TrackedFrame, TrackedFrame]] = {}
    for idx in interior:
        for direction in Direction:
            if idx not in results[direction]:
                raise CoverageError(f"Frame {idx} has no {direction.value} result", idx)
        pairs[idx] = (results[Direction.FORWARD][idx], results[Direction.BACKWARD][idx])

    return MergedTracks(pairs=pairs, anchor_frames=tuple(anchor_indices), anchors=anchors)


def make_windows(
    frames: Sequence[TrackedFrame], length: int, stride: int, span: Span = (0, 0)
) -> list[Window]:
    """Cut one span's frames (in tracking order) into fixed-length windows.

    Windows start at offsets 0, stride, 2*stride, ...; a final window is
    right-aligned to the span end when the stride does not land there.
    Spans shorter than `length` become one window edge-padded with copies of
    the last frame, flagged invalid.
    """
    if length < 2:
        raise ValueError(f"Window length must be >= 2, got {length}")
    if stride < 1:
        raise ValueError(f"Window stride must be >= 1, got {stride}")
    if not frames:
        return []

    direction = frames[0].direction
    n = len(frames)

    if n <= length:
        padded = tuple(frames) + (frames[-1],) * (length - n)
        valid = (True,) * n + (False,) * (length - n)
        return [Window(direction=direction, frames=padded, valid_mask=valid, span=span, offset=0)]

    offsets = list(range(0, n - length + 1, stride))
    if offsets[-1] != n - length:
        offsets.append(n - length)
    return [
        Window(
            direction=direction,
            frames=tuple(frames[offset : offset + length]),
            valid_mask=(True,) * length,
            span=span,
            offset=offset,
        )
        for offset in offsets
    ]


def snippet_windows(snippets: Sequence[Snippet], length: int, stride: int) -> list[Window]:
    """Windows of every snippet in both directions, forward first."""
    windows: list[Window] = []
    for direction in Direction:
        for snippet in snippets:
            windows.extend(make_windows(snippet.frames(direction), length, stride, snippet.span))
    return windows


def scatter_window_outputs(
    windows: Sequence[Window], values: Sequence[Sequence[float]] | np.ndarray
) -> dict[int, float]:
    """Average per-slot scalar predictions back onto frames.

    Padded slots are ignored; a frame covered by several windows gets the
    mean of its valid-slot values.

    Raises:
        CoverageError: If a frame appears in windows only on invalid slots.
    """
    merged = scatter_window_vectors(windows, [np.asarray(v)[:, None] for v in values])
    return {idx: float(value[0]) for idx, value in merged.items()}


def scatter_window_vectors(
    windows: Sequence[Window], values: Sequence[np.ndarray] | np.ndarray
) -> dict[int, np.ndarray]:
    """Like scatter_window_outputs for (L, k) per-window vectors.

    Sums run in a fixed order (frame index, then window offset, then window
    order) so the result does not depend on how windows were scheduled.
    """
    if len(windows) != len(values):
        raise ValueError(f"{len(windows)} windows but {len(values)} value rows")
    if len({window.direction for window in windows}) > 1:
        raise ValueError("Cannot scatter windows of both directions together")

    contributions: dict[int, list[np.ndarray]] = defaultdict(list)
    seen: set[int] = set()
    for window, row in zip(windows, values, strict=True):
        row = np.asarray(row, dtype=np.float64)
        if row.shape[0] != window.length:
            raise ValueError(f"Window of length {window.length} got {row.shape[0]} values")
        for slot, (frame, valid) in enumerate(zip(window.frames, window.valid_mask, strict=True)):
            seen.add(frame.frame_idx)
            if valid:
                contributions[frame.frame_idx].append(row[slot])

    uncovered = sorted(seen - contributions.keys())
    if uncovered:
        raise CoverageError(f"Frame {uncovered[0]} lies on no valid window slot", uncovered[0])

    # fsum is exactly rounded, so the mean is independent of window order
    merged: dict[int, np.ndarray] = {}
    for idx in sorted(contributions):
        stacked = np.stack(contributions[idx])
        merged[idx] = np.array([math.fsum(column) for column in stacked.T]) / len(stacked)
    return merged


def write_window_index(windows: Sequence[Window], path: Path) -> None:
    """Write the window index: one line per window with span, offset, direction."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([WINDOW_INDEX_MAGIC, len(windows)])
        for i, window in enumerate(windows):
            first, last = window.frame_indices[0], window.frame_indices[-1]
            writer.writerow(
                [
                    i,
                    window.span[0],
                    window.span[1],
                    window.offset,
                    window.direction.value,
                    first,
                    last,
                    sum(window.valid_mask),
                ]
            )
