"""Synthetic videos and trackers, plus brute-force oracles.

A synthetic video shows one bright rectangle moving over smooth textured
noise, with same-looking distractor rectangles beside it. Two simulated
trackers run over every snippet, forward from its start anchor and
backward from its end anchor. Their boxes jitter with correlated noise that
grows away from the anchor; a drifted snippet walks away from the target
from a random onset frame on. Response maps carry a bump whose amplitude
follows the true IoU and which flattens once the tracker drifts.

Every output is a pure function of the config (seed included).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from vidanno.config.settings import SynthConfig
from vidanno.core.annotation_store import BBox, Direction, Source, TrackedFrame, VideoMeta
from vidanno.core.dataset import SequenceData
from vidanno.core.errors import CoverageError
from vidanno.core.metrics import DEFAULT_THRESHOLDS, iou
from vidanno.core.snippets import Span, default_anchors, split_video

logger = logging.getLogger(__name__)

TARGET_LEVEL = 0.92
PIXEL_NOISE = 0.02
ERROR_CORRELATION = 0.8
DRIFT_CAP = 2.0  # box sizes


@dataclass(frozen=True)
class Distractor:
    """Target-looking rectangle at a fixed offset from the target.

    Offsets are in target widths/heights, scale is relative to the target size.
    """

    dx: float
    dy: float
    scale: float


class SyntheticFrames:
    """Renders frames on demand; frame i depends only on the scene, seed and i."""

    def __init__(
        self,
        background: np.ndarray,
        centers: np.ndarray,
        sizes: np.ndarray,
        distractors: Sequence[Distractor],
        seed: int,
    ) -> None:
        self._background = background
        self._centers = centers
        self._sizes = sizes
        self._distractors = tuple(distractors)
        self._seed = seed

    @property
    def distractors(self) -> tuple[Distractor, ...]:
        return self._distractors

    def frame(self, frame_idx: int) -> np.ndarray:
        if not 0 <= frame_idx < len(self._centers):
            raise CoverageError(f"No synthetic frame {frame_idx}", frame_idx)
        image = self._background.copy()
        (cx, cy), (w, h) = self._centers[frame_idx], self._sizes[frame_idx]
        for d in self._distractors:
            _fill(image, cx + d.dx * w, cy + d.dy * h, d.scale * w, d.scale * h)
        _fill(image, cx, cy, w, h)
        rng = np.random.default_rng([self._seed, frame_idx])
        image += rng.normal(0.0, PIXEL_NOISE, image.shape)
        return np.clip(image, 0.0, 1.0).astype(np.float32)


def _fill(image: np.ndarray, cx: float, cy: float, w: float, h: float) -> None:
    height, width = image.shape
    x0, x1 = max(0, round(cx - w / 2)), min(width, round(cx + w / 2))
    y0, y1 = max(0, round(cy - h / 2)), min(height, round(cy + h / 2))
    if x0 < x1 and y0 < y1:
        image[y0:y1, x0:x1] = TARGET_LEVEL


def generate_sequence(config: SynthConfig, video_id: str | None = None) -> SequenceData:
    """Generate one synthetic video with both tracker dumps and drift labels."""
    rng = np.random.default_rng(config.seed)
    meta = VideoMeta(
        video_id=video_id or f"synth-{config.seed:04d}",
        frame_count=config.frame_count,
        frame_width=config.width,
        frame_height=config.height,
        anchor_interval=config.anchor_interval,
    )
    centers, sizes = _target_track(config, rng)
    ground_truth = {
        t: _frame_box(meta, centers[t, 0], centers[t, 1], sizes[t, 0], sizes[t, 1])
        for t in range(config.frame_count)
    }

    drift: dict[Direction, list[Span]] = {Direction.FORWARD: [], Direction.BACKWARD: []}
    tracked: dict[Direction, list[TrackedFrame]] = {Direction.FORWARD: [], Direction.BACKWARD: []}
    for start, end in split_video(meta, default_anchors(meta)):
        for direction in Direction:
            drifted = bool(rng.random() < config.p_drift)
            if drifted:
                drift[direction].append((start, end))
            indices = (
                range(start + 1, end + 1)
                if direction is Direction.FORWARD
                else range(end - 1, start - 1, -1)
            )
            tracked[direction].extend(
                _track(config, meta, ground_truth, centers, sizes, indices, direction, drifted, rng)
            )

    frames = SyntheticFrames(
        _background(config, rng), centers, sizes, _distractors(config, rng), config.seed
    )
    logger.debug(
        f"{meta.video_id}: {meta.frame_count} frames, drifted snippets "
        f"fwd={len(drift[Direction.FORWARD])} bwd={len(drift[Direction.BACKWARD])}"
    )
    return SequenceData(
        meta=meta,
        ground_truth=ground_truth,
        forward=tracked[Direction.FORWARD],
        backward=sorted(tracked[Direction.BACKWARD], key=lambda f: f.frame_idx),
        frames=frames,
        drift=drift,
    )


def generate_benchmark(config: SynthConfig, count: int, workers: int = 1) -> list[SequenceData]:
    """`count` sequences seeded config.seed, config.seed + 1, ..., in that order."""

    def one(i: int) -> SequenceData:
        seeded = config.model_copy(update={"seed": config.seed + i})
        return generate_sequence(seeded, f"synth-{i:04d}")

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(count)))


def _target_track(config: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = config.frame_count
    frame = np.array([config.width, config.height], dtype=np.float64)
    size = rng.uniform(config.min_box, config.max_box, 2)
    center = rng.uniform(size / 2, frame - size / 2)
    velocity = np.zeros(2)

    centers = np.empty((n, 2))
    sizes = np.empty((n, 2))
    for t in range(n):
        centers[t], sizes[t] = center, size
        velocity = np.clip(
            velocity + rng.normal(0.0, config.max_velocity / 4, 2),
            -config.max_velocity,
            config.max_velocity,
        )
        size = np.clip(
            size * np.exp(rng.normal(0.0, config.scale_drift, 2)), config.min_box, config.max_box
        )
        center = center + velocity
        low, high = size / 2, frame - size / 2
        bounced = (center < low) | (center > high)
        velocity = np.where(bounced, -velocity, velocity)
        center = np.clip(center, low, high)
    return centers, sizes


def _track(
    config: SynthConfig,
    meta: VideoMeta,
    ground_truth: dict[int, BBox],
    centers: np.ndarray,
    sizes: np.ndarray,
    indices: Iterable[int],
    direction: Direction,
    drifted: bool,
    rng: np.random.Generator,
) -> list[TrackedFrame]:
    order = list(indices)
    onset = int(rng.integers(0, len(order))) if drifted else len(order)
    angle = rng.uniform(0.0, 2 * math.pi)
    heading = (math.cos(angle), math.sin(angle))
    error = np.zeros(4)
    innovation = math.sqrt(1 - ERROR_CORRELATION**2)

    frames: list[TrackedFrame] = []
    for k, idx in enumerate(order):
        error = ERROR_CORRELATION * error + innovation * rng.normal(size=4)
        spread = 0.5 + min(1.0, (k + 1) / meta.anchor_interval)
        shift = min(DRIFT_CAP, config.drift_magnitude * (k - onset + 1)) if k >= onset else 0.0

        (cx, cy), (w, h) = centers[idx], sizes[idx]
        tx = cx + w * (config.sigma_pos * spread * error[0] + shift * heading[0])
        ty = cy + h * (config.sigma_pos * spread * error[1] + shift * heading[1])
        tw = w * math.exp(config.sigma_scale * spread * error[2])
        th = h * math.exp(config.sigma_scale * spread * error[3])
        tx = min(max(float(tx), 0.0), float(meta.frame_width))
        ty = min(max(float(ty), 0.0), float(meta.frame_height))
        box = _frame_box(meta, tx, ty, tw, th)

        overlap = iou(box, ground_truth[idx])
        flat = k >= onset
        frames.append(
            TrackedFrame(
                frame_idx=idx,
                direction=direction,
                box=box,
                confidence=_confidence(config, overlap, rng),
                response_map=_response_map(config, overlap, flat, rng),
            )
        )
    return frames


def _frame_box(meta: VideoMeta, cx: float, cy: float, w: float, h: float) -> BBox:
    """Box clipped to the frame.

    Raises:
        ValueError: If the box lies entirely outside the frame.
    """
    box = BBox.from_center(float(cx), float(cy), float(w), float(h)).clip(
        meta.frame_width, meta.frame_height
    )
    if box is None:
        raise ValueError(f"Box centred at ({cx:.1f}, {cy:.1f}) lies outside the frame")
    return box


def _confidence(config: SynthConfig, overlap: float, rng: np.random.Generator) -> float:
    value = config.response_floor + (1 - config.response_floor) * overlap
    value += rng.normal(0.0, 2 * config.response_noise)
    return float(min(max(value, 0.0), 1.0))


def _response_map(
    config: SynthConfig, overlap: float, flat: bool, rng: np.random.Generator
) -> np.ndarray:
    r = config.response_size
    grid = (np.arange(r) + 0.5) / r - 0.5
    distance = grid[:, None] ** 2 + grid[None, :] ** 2
    amplitude = config.response_floor + (1 - config.response_floor) * overlap
    amplitude *= math.exp(rng.normal(0.0, 3 * config.response_noise))
    width = 0.08
    if flat:
        amplitude *= 0.5
        width = 0.25
    bump = amplitude * np.exp(-distance / (2 * width**2))
    return (bump + rng.normal(0.0, config.response_noise, (r, r))).astype(np.float32)


def _background(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.random((config.height // 16 + 2, config.width // 16 + 2)).astype(np.float32)
    smooth = Image.fromarray(coarse).resize(
        (config.width, config.height), Image.Resampling.BILINEAR
    )
    return 0.5 + config.texture_contrast * (2 * np.asarray(smooth, dtype=np.float64) - 1)


def _distractors(config: SynthConfig, rng: np.random.Generator) -> list[Distractor]:
    distractors: list[Distractor] = []
    for _ in range(config.distractor_count):
        along = float(rng.uniform(0.75, 1.0)) * float(rng.choice([-1.0, 1.0]))
        across = float(rng.uniform(-0.3, 0.3))
        scale = float(rng.uniform(0.35, 0.45))
        if rng.random() < 0.5:
            distractors.append(Distractor(dx=along, dy=across, scale=scale))
        else:
            distractors.append(Distractor(dx=across, dy=along, scale=scale))
    return distractors


def brute_force_box_from_mask(
    mask: Sequence[Sequence[float]] | np.ndarray, tau: float
) -> tuple[int, int, int, int] | None:
    """Grid extent (col_min, row_min, col_max, row_max) of above-tau profiles, by loops."""
    rows, cols = len(mask), len(mask[0])
    row_profile = []
    for i in range(rows):
        total = 0.0
        for j in range(cols):
            total += float(mask[i][j])
        row_profile.append(min(1.0, total))
    col_profile = []
    for j in range(cols):
        total = 0.0
        for i in range(rows):
            total += float(mask[i][j])
        col_profile.append(min(1.0, total))

    xs = [j for j in range(cols) if col_profile[j] > tau]
    ys = [i for i in range(rows) if row_profile[i] > tau]
    if not xs or not ys:
        return None
    return (min(xs), min(ys), max(xs), max(ys))


def brute_force_metrics(
    frames: Sequence[tuple[Source, float | None]],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    error_iou: float = 0.5,
) -> dict[str, float]:
    """Recompute report figures from (source, IoU) pairs, one per frame."""
    ious = [v for s, v in frames if s not in (Source.MANUAL, Source.FAILURE) and v is not None]
    manual = sum(1 for s, _ in frames if s is Source.MANUAL)
    failures = sum(1 for s, _ in frames if s is Source.FAILURE)
    n = len(ious)

    values: dict[str, float] = {"miou": math.fsum(ious) / n if n else 0.0}
    for t in sorted(thresholds):
        hits = 0
        for v in ious:
            if v > t:
                hits += 1
        values[f"acc@{t:g}"] = hits / n if n else 0.0
    errors = 0
    for v in ious:
        if v < error_iou:
            errors += 1
    manual_fraction = (manual + failures) / len(frames) if frames else 0.0
    values.update(
        err_rate=errors / n if n else 0.0,
        manual_fraction=manual_fraction,
        labor_reduction=1.0 - manual_fraction,
        evaluated_frames=n,
        failure_frames=failures,
        frame_count=len(frames),
    )
    return values
