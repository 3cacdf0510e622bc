"""Box decoding, forward/backward selection, failure flagging and assembly."""

from __future__ import annotations

import bisect
import logging
import math
from collections.abc import Collection, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from vidanno.config.settings import AggregationOperator, InferenceConfig, RunConfig
from vidanno.core.annotation_store import (
    AnnotationRecord,
    AnnotationSet,
    BBox,
    Direction,
    Source,
    TrackedFrame,
    VideoMeta,
)
from vidanno.core.assess import AssessModel, score_frames
from vidanno.core.dataset import SequenceData
from vidanno.core.errors import CoverageError, MissingArtifactError, RegionError
from vidanno.core.mask_predictors import FrameMasker, MaskPredictor
from vidanno.core.refine import (
    Axis,
    GaussianParams,
    GeometryModel,
    SearchRegion,
    aggregate,
    geometry_frames,
    interpolation_prior,
    weighted_mask,
)
from vidanno.core.snippets import merge_directions, snippet_windows

logger = logging.getLogger(__name__)

GridBox = tuple[int, int, int, int]
"""Inclusive mask-grid indices (col_min, row_min, col_max, row_max)."""


class SelectionMode(str, Enum):
    """How the per-frame tracking result is chosen."""

    FORWARD = "fwd"
    BACKWARD = "bwd"
    SELECT = "sel"  # higher quality score
    SELECT_FAIL = "sel-fail"  # higher score, failure frames flagged


class RefineMode(str, Enum):
    """How the chosen tracker box is refined."""

    NONE = "none"
    VISUAL = "visual"  # initial mask only
    INTERPOLATED = "interpolated"  # mask weighted by the anchor-interpolation prior
    GEOMETRIC = "geometric"  # mask weighted by the learned Gaussian


VISUAL_MODES = frozenset({RefineMode.VISUAL, RefineMode.INTERPOLATED, RefineMode.GEOMETRIC})


def mask_box_indices(
    mask: np.ndarray,
    tau: float,
    operator: AggregationOperator = AggregationOperator.RECTIFIED_ACCUMULATION,
) -> GridBox | None:
    """Grid extent of the above-tau columns and rows of a mask; None if either is empty."""
    values = torch.from_numpy(np.asarray(mask, dtype=np.float64))
    cols = torch.nonzero(aggregate(values, Axis.VERTICAL, operator) > tau).flatten()
    rows = torch.nonzero(aggregate(values, Axis.HORIZONTAL, operator) > tau).flatten()
    if len(cols) == 0 or len(rows) == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def refine_box(
    mask: np.ndarray,
    region: SearchRegion,
    config: InferenceConfig,
    operator: AggregationOperator = AggregationOperator.RECTIFIED_ACCUMULATION,
) -> BBox | None:
    """Decode a frame box from a mask over a search region.

    The first above-tau column/row gives the min corner, the last one + 1
    the max corner. The box is clipped to the frame.
    """
    indices = mask_box_indices(mask, config.tau, operator)
    if indices is None:
        return None
    rows, cols = mask.shape
    col0, row0, col1, row1 = indices
    x_min, y_min = region.to_frame(col0, row0, rows, cols)
    x_max, y_max = region.to_frame(col1 + 1, row1 + 1, rows, cols)
    return BBox(x_min, y_min, x_max, y_max).clip(region.frame_width, region.frame_height)


def select_direction(score_fwd: float, score_bwd: float) -> Direction:
    """Direction with the higher score; forward on ties."""
    return Direction.FORWARD if score_fwd >= score_bwd else Direction.BACKWARD


def select_and_flag(
    frame_idx: int,
    score_fwd: float,
    score_bwd: float,
    box_fwd: BBox | None,
    box_bwd: BBox | None,
    fallback_fwd: BBox,
    fallback_bwd: BBox,
    config: InferenceConfig,
) -> AnnotationRecord:
    """Pick the better-scored direction's box or flag the frame as a failure.

    The refined box of the winning direction is used, or its tracker box
    when refinement produced none.

    Raises:
        ValueError: If a score is not finite.
    """
    if not (math.isfinite(score_fwd) and math.isfinite(score_bwd)):
        raise ValueError(f"frame {frame_idx}: non-finite scores {score_fwd}, {score_bwd}")

    direction = select_direction(score_fwd, score_bwd)
    best = max(score_fwd, score_bwd)
    if not best > config.failure_threshold:
        return AnnotationRecord(frame_idx=frame_idx, source=Source.FAILURE)

    if direction is Direction.FORWARD:
        box = box_fwd if box_fwd is not None else fallback_fwd
    else:
        box = box_bwd if box_bwd is not None else fallback_bwd
    return AnnotationRecord(
        frame_idx=frame_idx, source=Source.from_direction(direction), box=box, quality=best
    )


@dataclass
class VideoPredictions:
    """Per-frame scores, tracker boxes and refined boxes of one video.

    `refined[mode][direction][idx]` is None where decoding found no box.
    """

    meta: VideoMeta
    manual_boxes: dict[int, BBox]
    scores: dict[Direction, dict[int, float]]
    tracker_boxes: dict[Direction, dict[int, BBox]]
    refined: dict[RefineMode, dict[Direction, dict[int, BBox | None]]] = field(
        default_factory=dict
    )
    geometry: dict[Direction, dict[int, GaussianParams]] = field(default_factory=dict)

    @property
    def interior_frames(self) -> list[int]:
        return sorted(self.tracker_boxes[Direction.FORWARD])

    def boxes(self, refinement: RefineMode, direction: Direction) -> Mapping[int, BBox | None]:
        if refinement is RefineMode.NONE:
            return self.tracker_boxes[direction]
        if refinement not in self.refined:
            raise KeyError(f"No {refinement.value} refinement was computed")
        return self.refined[refinement][direction]


def predict_video(
    sequence: SequenceData,
    assess_model: AssessModel,
    config: RunConfig,
    geometry_model: GeometryModel | None = None,
    mask_predictor: MaskPredictor | None = None,
    modes: Collection[RefineMode] = (RefineMode.NONE,),
) -> VideoPredictions:
    """Score both directions of every frame and compute the requested refinements.

    Raises:
        MissingArtifactError: If a visual mode lacks a mask predictor or
            frames, or the geometric mode lacks a geometry model.
        CoverageError: If tracker outputs do not cover the video.
        ShapeError: If the mask predictor emits a grid other than the configured one.
    """
    wanted = set(modes) & VISUAL_MODES
    if wanted and mask_predictor is None:
        raise MissingArtifactError(config.paths.checkpoint_dir, "mask predictor")
    if RefineMode.GEOMETRIC in wanted and geometry_model is None:
        raise MissingArtifactError(config.paths.checkpoint_dir / "geometry.pt", "geometry model")

    meta = sequence.meta
    manual = sequence.manual_boxes()
    snippets = sequence.snippets()
    merged = merge_directions(snippets, manual)
    windows = snippet_windows(snippets, config.window.length, config.window.stride)

    scores = score_frames(windows, meta, assess_model)
    for direction in Direction:
        missing = sorted(set(merged.pairs) - set(scores[direction]))
        if missing:
            raise CoverageError(f"Frame {missing[0]} has no {direction.value} score", missing[0])

    predictions = VideoPredictions(
        meta=meta,
        manual_boxes=manual,
        scores={d: {idx: scores[d][idx] for idx in merged.pairs} for d in Direction},
        tracker_boxes={
            d: {idx: merged.result(idx, d).box for idx in merged.pairs} for d in Direction
        },
    )
    if not wanted:
        return predictions

    if RefineMode.GEOMETRIC in wanted:
        assert geometry_model is not None
        predictions.geometry = geometry_frames(windows, meta, geometry_model)

    masker = FrameMasker(mask_predictor, config.refine)
    anchors = list(merged.anchor_frames)
    frames = [merged.result(idx, d) for idx in merged.pairs for d in Direction]

    def refine_frame(frame: TrackedFrame) -> dict[RefineMode, BBox | None]:
        return _refine_frame(
            sequence, frame, masker, anchors, manual, predictions.geometry, wanted, config
        )

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(refine_frame, frames))

    predictions.refined = {mode: {d: {} for d in Direction} for mode in wanted}
    for frame, boxes in zip(frames, results, strict=True):
        for mode, box in boxes.items():
            predictions.refined[mode][frame.direction][frame.frame_idx] = box
    logger.info(
        f"{meta.video_id}: scored and refined {len(merged.pairs)} frames "
        f"({', '.join(sorted(m.value for m in wanted))})"
    )
    return predictions


def _refine_frame(
    sequence: SequenceData,
    frame: TrackedFrame,
    masker: FrameMasker,
    anchors: list[int],
    manual: dict[int, BBox],
    geometry: dict[Direction, dict[int, GaussianParams]],
    modes: set[RefineMode],
    config: RunConfig,
) -> dict[RefineMode, BBox | None]:
    try:
        region, initial = masker.initial_mask(sequence, frame)
    except RegionError as e:
        logger.debug(f"{sequence.video_id}: frame {frame.frame_idx} not refined: {e}")
        return dict.fromkeys(modes)

    operator = config.refine.aggregation
    inference = config.inference
    result: dict[RefineMode, BBox | None] = {}
    for mode in modes:
        if mode is RefineMode.VISUAL:
            mask = initial
        elif mode is RefineMode.INTERPOLATED:
            pos = bisect.bisect_right(anchors, frame.frame_idx)
            start, end = anchors[pos - 1], anchors[pos]
            prior = interpolation_prior(
                frame.frame_idx,
                (start, manual[start]),
                (end, manual[end]),
                region,
                config.refine.interpolation_alpha,
            )
            mask = weighted_mask(initial, prior)
        else:
            mask = weighted_mask(initial, geometry[frame.direction][frame.frame_idx])
        result[mode] = refine_box(mask, region, inference, operator)
    return result


def assemble_boxes(
    predictions: VideoPredictions,
    selection: SelectionMode,
    refinement: RefineMode,
    config: InferenceConfig,
) -> dict[int, BBox | None]:
    """Per interior frame box of one selection/refinement variant; None marks a failure."""
    fwd = predictions.boxes(refinement, Direction.FORWARD)
    bwd = predictions.boxes(refinement, Direction.BACKWARD)
    tracker = predictions.tracker_boxes
    scores = predictions.scores

    boxes: dict[int, BBox | None] = {}
    for idx in predictions.interior_frames:
        if selection is SelectionMode.SELECT_FAIL:
            boxes[idx] = _gated_record(predictions, idx, fwd, bwd, config).box
            continue
        if selection is SelectionMode.SELECT:
            direction = select_direction(
                scores[Direction.FORWARD][idx], scores[Direction.BACKWARD][idx]
            )
        elif selection is SelectionMode.FORWARD:
            direction = Direction.FORWARD
        else:
            direction = Direction.BACKWARD
        refined = (fwd if direction is Direction.FORWARD else bwd)[idx]
        boxes[idx] = refined if refined is not None else tracker[direction][idx]
    return boxes


def _gated_record(
    predictions: VideoPredictions,
    idx: int,
    fwd: Mapping[int, BBox | None],
    bwd: Mapping[int, BBox | None],
    config: InferenceConfig,
) -> AnnotationRecord:
    return select_and_flag(
        idx,
        predictions.scores[Direction.FORWARD][idx],
        predictions.scores[Direction.BACKWARD][idx],
        fwd[idx],
        bwd[idx],
        predictions.tracker_boxes[Direction.FORWARD][idx],
        predictions.tracker_boxes[Direction.BACKWARD][idx],
        config,
    )


def assemble_annotations(
    predictions: VideoPredictions, config: InferenceConfig, refinement: RefineMode
) -> list[AnnotationRecord]:
    """One record per frame: MANUAL on anchors, selected or FAILURE elsewhere."""
    fwd = predictions.boxes(refinement, Direction.FORWARD)
    bwd = predictions.boxes(refinement, Direction.BACKWARD)
    records = [
        AnnotationRecord(frame_idx=idx, source=Source.MANUAL, box=box)
        for idx, box in predictions.manual_boxes.items()
    ]
    records += [
        _gated_record(predictions, idx, fwd, bwd, config) for idx in predictions.interior_frames
    ]
    records.sort(key=lambda r: r.frame_idx)
    return records


def annotate_video(
    sequence: SequenceData,
    assess_model: AssessModel,
    config: RunConfig,
    geometry_model: GeometryModel | None = None,
    mask_predictor: MaskPredictor | None = None,
    refinement: RefineMode = RefineMode.GEOMETRIC,
) -> tuple[AnnotationSet, VideoPredictions]:
    """Finished annotation set of one video, plus the predictions behind it."""
    predictions = predict_video(
        sequence, assess_model, config, geometry_model, mask_predictor, modes={refinement}
    )
    records = assemble_annotations(predictions, config.inference, refinement)
    annotations = AnnotationSet(meta=sequence.meta, records=tuple(records))
    if not annotations.is_complete:
        raise CoverageError(f"{sequence.video_id}: annotation does not cover every frame")
    failures = len(annotations.failure_frames)
    logger.info(
        f"{sequence.video_id}: {len(records)} records, {len(predictions.manual_boxes)} manual, "
        f"{failures} failures"
    )
    return annotations, predictions
