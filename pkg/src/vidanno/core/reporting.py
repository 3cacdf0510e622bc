"""Ablation tables and diagnostic plots."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from matplotlib.figure import Figure
from rich.table import Table

from vidanno.config.settings import EvaluationConfig, InferenceConfig, QualityMapParams
from vidanno.core.annotation_store import BBox, Direction
from vidanno.core.errors import FormatError, MissingArtifactError
from vidanno.core.inference import (
    RefineMode,
    SelectionMode,
    VideoPredictions,
    assemble_boxes,
)
from vidanno.core.metrics import (
    EvalReport,
    FrameTally,
    iou,
    quality_from_iou,
    tally_boxes,
)

logger = logging.getLogger(__name__)

ABLATION_FILE = "ablation.txt"


@dataclass(frozen=True)
class Variant:
    """One row of the ablation: a selection mode combined with a refinement mode."""

    group: str
    label: str
    selection: SelectionMode
    refinement: RefineMode


SELECTION_VARIANTS = (
    Variant("selection", "Fwd", SelectionMode.FORWARD, RefineMode.NONE),
    Variant("selection", "Bwd", SelectionMode.BACKWARD, RefineMode.NONE),
    Variant("selection", "Sel", SelectionMode.SELECT, RefineMode.NONE),
    Variant("selection", "Sel-fail", SelectionMode.SELECT_FAIL, RefineMode.NONE),
)
REFINEMENT_VARIANTS = (
    Variant("refinement", "w/o-Refine", SelectionMode.SELECT, RefineMode.NONE),
    Variant("refinement", "V-Refine", SelectionMode.SELECT, RefineMode.VISUAL),
    Variant("refinement", "VI-Refine", SelectionMode.SELECT, RefineMode.INTERPOLATED),
    Variant("refinement", "VG-Refine", SelectionMode.SELECT, RefineMode.GEOMETRIC),
)
ALL_VARIANTS = SELECTION_VARIANTS + REFINEMENT_VARIANTS


@dataclass
class AblationRow:
    variant: Variant
    tally: FrameTally = field(default_factory=FrameTally)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @property
    def report(self) -> EvalReport:
        return self.tally.report(self.evaluation.acc_thresholds, self.evaluation.error_iou)


def ablation_rows(
    runs: Iterable[tuple[VideoPredictions, Mapping[int, BBox]]],
    inference: InferenceConfig,
    evaluation: EvaluationConfig | None = None,
    variants: Sequence[Variant] = ALL_VARIANTS,
) -> list[AblationRow]:
    """Evaluate every variant over all videos, pooling frames across videos.

    Variants whose refinement was not computed for a video are skipped.
    """
    evaluation = evaluation or EvaluationConfig()
    rows = {v: AblationRow(v, evaluation=evaluation) for v in variants}
    skipped: set[Variant] = set()
    for predictions, ground_truth in runs:
        for variant in variants:
            try:
                boxes = assemble_boxes(
                    predictions, variant.selection, variant.refinement, inference
                )
            except KeyError:
                skipped.add(variant)
                continue
            rows[variant].tally.add(
                tally_boxes(boxes, predictions.manual_boxes, ground_truth)
            )
    for variant in skipped:
        logger.warning(f"Skipping {variant.label}: {variant.refinement.value} refinement missing")
    return [rows[v] for v in variants if v not in skipped]


def write_ablation(rows: Sequence[AblationRow], path: Path) -> None:
    """Write ablation rows as CSV with a header line."""
    if not rows:
        raise ValueError("No ablation rows to write")
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].report.as_dict())
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["group", "variant", *keys])
        for row in rows:
            values = row.report.as_dict()
            writer.writerow(
                [row.variant.group, row.variant.label, *(_format(k, values[k]) for k in keys)]
            )


def read_ablation(path: Path) -> dict[str, dict[str, float]]:
    """Variant label -> metric values from an ablation file."""
    if not path.exists():
        raise MissingArtifactError(path, "ablation table")
    table: dict[str, dict[str, float]] = {}
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:2] != ["group", "variant"]:
            raise FormatError("missing group,variant header", path, 1)
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(row)}", path, line_no)
            try:
                table[row[1]] = {k: float(v) for k, v in zip(header[2:], row[2:], strict=True)}
            except ValueError as e:
                raise FormatError(str(e), path, line_no) from e
    return table


def _format(key: str, value: float) -> str:
    return str(int(value)) if key.endswith(("frames", "count")) else f"{value:.6f}"


def ablation_table(rows: Sequence[AblationRow], title: str = "Ablation") -> Table:
    """Rich table of ablation rows, one section per group."""
    table = Table(title=title)
    table.add_column("Variant", style="cyan")
    table.add_column("mIoU", justify="right")
    thresholds = sorted(rows[0].report.acc_at) if rows else []
    for t in thresholds:
        table.add_column(f"Acc@{t:g}", justify="right")
    table.add_column("err", justify="right")
    table.add_column("failures", justify="right")
    table.add_column("labor red.", justify="right")

    group = None
    for row in rows:
        if group is not None and row.variant.group != group:
            table.add_section()
        group = row.variant.group
        report = row.report
        table.add_row(
            row.variant.label,
            f"{report.miou:.3f}",
            *(f"{report.acc_at[t]:.3f}" for t in thresholds),
            f"{report.err_rate:.2%}",
            str(report.failure_frames),
            f"{report.labor_reduction:.1%}",
        )
    return table


def report_table(report: EvalReport, title: str = "Evaluation") -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in report.as_dict().items():
        counted = key.endswith(("frames", "count"))
        table.add_row(key, str(int(value)) if counted else f"{value:.3f}")
    return table


def _save(fig: Figure, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    logger.debug(f"Wrote plot {path}")


def plot_quality_traces(
    predictions: VideoPredictions,
    ground_truth: Mapping[int, BBox],
    path: Path,
    params: QualityMapParams | None = None,
) -> None:
    """Predicted scores against quality targets of the tracker boxes, per direction."""
    frames = predictions.interior_frames
    fig = Figure(figsize=(10, 5))
    axes = fig.subplots(2, 1, sharex=True)
    for ax, direction in zip(axes, Direction, strict=True):
        boxes = predictions.tracker_boxes[direction]
        target = [quality_from_iou(iou(boxes[i], ground_truth[i]), params) for i in frames]
        ax.plot(frames, target, color="0.6", linewidth=1, label="target")
        ax.plot(
            frames,
            [predictions.scores[direction][i] for i in frames],
            linewidth=1,
            label="predicted",
        )
        ax.axhline(0.0, color="k", linewidth=0.5)
        ax.set_ylabel(f"{direction.value} score")
        ax.legend(loc="lower right", fontsize="small")
    axes[-1].set_xlabel("frame")
    fig.suptitle(predictions.meta.video_id)
    _save(fig, path)


def plot_iou_histograms(rows: Sequence[AblationRow], path: Path, bins: int = 20) -> None:
    """One IoU histogram per ablation row."""
    if not rows:
        raise ValueError("No ablation rows to plot")
    cols = min(4, len(rows))
    n_rows = (len(rows) + cols - 1) // cols
    fig = Figure(figsize=(3 * cols, 2.5 * n_rows), layout="tight")
    axes = fig.subplots(n_rows, cols, squeeze=False).flatten()
    for ax, row in zip(axes, rows, strict=False):
        ax.hist(row.tally.ious, bins=bins, range=(0.0, 1.0))
        ax.set_title(f"{row.variant.label} (mIoU {row.report.miou:.3f})", fontsize="small")
    for ax in axes[len(rows) :]:
        ax.set_visible(False)
    _save(fig, path)


def plot_report(report: EvalReport, path: Path) -> None:
    """Bar chart of the fraction-valued report figures."""
    values = {k: v for k, v in report.as_dict().items() if not k.endswith(("frames", "count"))}
    fig = Figure(figsize=(6, 3), layout="tight")
    ax = fig.subplots()
    ax.bar(list(values), list(values.values()))
    ax.set_ylim(0.0, 1.0)
    ax.tick_params(axis="x", labelrotation=30)
    _save(fig, path)
