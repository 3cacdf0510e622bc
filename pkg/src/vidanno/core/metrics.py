"""IoU, the IoU to quality-score mapping, and annotation accuracy metrics."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vidanno.config.settings import QualityMapParams
from vidanno.core.annotation_store import AnnotationRecord, BBox, Source
from vidanno.core.errors import CoverageError, FormatError, MissingArtifactError

DEFAULT_THRESHOLDS = (0.5, 0.7)


@dataclass(frozen=True)
class EvalReport:
    """Accuracy and labor figures of one annotation set.

    mIoU, Acc@t and err_rate cover accepted automatic frames only (neither
    MANUAL nor FAILURE). Acc@t counts IoU > t and err_rate counts IoU < 0.5,
    so a frame at exactly 0.5 counts toward neither.
    """

    miou: float
    acc_at: dict[float, float] = field(default_factory=dict)
    err_rate: float = 0.0
    manual_fraction: float = 0.0
    labor_reduction: float = 1.0
    evaluated_frames: int = 0
    failure_frames: int = 0
    frame_count: int = 0

    def as_dict(self) -> dict[str, float]:
        """Flat key-value view, keys as written to report files."""
        values: dict[str, float] = {"miou": self.miou}
        for threshold, accuracy in sorted(self.acc_at.items()):
            values[f"acc@{threshold:g}"] = accuracy
        values.update(
            err_rate=self.err_rate,
            manual_fraction=self.manual_fraction,
            labor_reduction=self.labor_reduction,
            evaluated_frames=self.evaluated_frames,
            failure_frames=self.failure_frames,
            frame_count=self.frame_count,
        )
        return values

    def to_text(self) -> str:
        lines = []
        for key, value in self.as_dict().items():
            text = str(int(value)) if key.endswith(("frames", "count")) else repr(float(value))
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    intersection = inter_w * inter_h
    union = a.area + b.area - intersection
    return min(1.0, intersection / union)


def quality_from_iou(value: float, params: QualityMapParams | None = None) -> float:
    """Map an IoU to a quality score.

    g = alpha^(1/beta) (iou - 0.5) / (1 + alpha (iou - 0.5)^beta)^(1/beta)

    Zero exactly at IoU 0.5, negative below, positive above. For even beta
    the map is odd about 0.5. |iou - 0.5| is used inside the power so that
    odd or fractional beta stays real.
    """
    p = params or QualityMapParams()
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"IoU must lie in [0, 1], got {value}")
    u = value - 0.5
    return p.alpha ** (1 / p.beta) * u / (1 + p.alpha * abs(u) ** p.beta) ** (1 / p.beta)


def quality_from_iou_array(
    values: np.ndarray, params: QualityMapParams | None = None
) -> np.ndarray:
    """Vectorized quality_from_iou."""
    p = params or QualityMapParams()
    u = np.asarray(values, dtype=np.float64) - 0.5
    return p.alpha ** (1 / p.beta) * u / (1 + p.alpha * np.abs(u) ** p.beta) ** (1 / p.beta)


def labor_reduction(manual_count: int, failure_count: int, frame_count: int) -> float:
    """Fraction of frames that need no human box: 1 - (manual + failure) / total."""
    if frame_count <= 0:
        raise ValueError(f"frame_count must be positive, got {frame_count}")
    return 1.0 - (manual_count + failure_count) / frame_count


def report_from_ious(
    ious: Sequence[float],
    manual_count: int,
    failure_count: int,
    frame_count: int,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    error_iou: float = 0.5,
) -> EvalReport:
    """Build an EvalReport from IoUs of the accepted automatic frames."""
    n = len(ious)
    acc_at = {t: (sum(1 for v in ious if v > t) / n if n else 0.0) for t in thresholds}
    manual_fraction = (manual_count + failure_count) / frame_count if frame_count else 0.0
    return EvalReport(
        miou=math.fsum(ious) / n if n else 0.0,
        acc_at=acc_at,
        err_rate=sum(1 for v in ious if v < error_iou) / n if n else 0.0,
        manual_fraction=manual_fraction,
        labor_reduction=1.0 - manual_fraction,
        evaluated_frames=n,
        failure_frames=failure_count,
        frame_count=frame_count,
    )


@dataclass
class FrameTally:
    """IoUs of accepted automatic frames plus manual and failure counts."""

    ious: list[float] = field(default_factory=list)
    manual: int = 0
    failures: int = 0
    frames: int = 0

    def add(self, other: FrameTally) -> None:
        self.ious.extend(other.ious)
        self.manual += other.manual
        self.failures += other.failures
        self.frames += other.frames

    def report(
        self, thresholds: Iterable[float] = DEFAULT_THRESHOLDS, error_iou: float = 0.5
    ) -> EvalReport:
        return report_from_ious(
            self.ious, self.manual, self.failures, self.frames, thresholds, error_iou
        )


def tally_boxes(
    boxes: Mapping[int, BBox | None],
    manual_frames: Iterable[int],
    ground_truth: Mapping[int, BBox],
) -> FrameTally:
    """Compare per-frame boxes to ground truth; a None box is a failure frame.

    Raises:
        CoverageError: If a frame has no ground truth box.
    """
    manual = set(manual_frames)
    frames = sorted(manual | set(boxes))
    tally = FrameTally(manual=len(manual), frames=len(frames))

    for idx in frames:
        if idx not in ground_truth:
            raise CoverageError(f"No ground truth for frame {idx}", idx)
        if idx in manual:
            continue
        box = boxes[idx]
        if box is None:
            tally.failures += 1
        else:
            tally.ious.append(iou(box, ground_truth[idx]))
    return tally


def evaluate_boxes(
    boxes: Mapping[int, BBox | None],
    manual_frames: Iterable[int],
    ground_truth: Mapping[int, BBox],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    error_iou: float = 0.5,
) -> EvalReport:
    """Evaluate per-frame boxes; a None box is a failure frame.

    Frames in `manual_frames` count as manual labor and are excluded from
    the accuracy figures.

    Raises:
        CoverageError: If a frame has no ground truth box.
    """
    return tally_boxes(boxes, manual_frames, ground_truth).report(thresholds, error_iou)


def evaluate(
    annotations: Sequence[AnnotationRecord],
    ground_truth: Mapping[int, BBox],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    error_iou: float = 0.5,
) -> EvalReport:
    """Evaluate a finished annotation set against ground truth.

    Raises:
        CoverageError: If an annotated frame has no ground truth box.
    """
    return tally_annotations(annotations, ground_truth).report(thresholds, error_iou)


def tally_annotations(
    annotations: Sequence[AnnotationRecord], ground_truth: Mapping[int, BBox]
) -> FrameTally:
    manual = [r.frame_idx for r in annotations if r.source is Source.MANUAL]
    boxes = {r.frame_idx: r.box for r in annotations if r.source is not Source.MANUAL}
    return tally_boxes(boxes, manual, ground_truth)


def write_report(report: EvalReport, path: Path) -> None:
    """Write an EvalReport as key=value lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_text(), encoding="utf-8")


def read_report(path: Path) -> dict[str, float]:
    """Read a key=value report file."""
    if not path.exists():
        raise MissingArtifactError(path, "report")
    values: dict[str, float] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"expected key=value, got {line!r}", path, line_no)
        try:
            values[key.strip()] = float(value)
        except ValueError as e:
            raise FormatError(str(e), path, line_no) from e
    return values
