"""Annotation, evaluation and ablation-report commands."""

import logging
from typing import Annotated

import typer
from rich.table import Table

from vidanno.cli.common import (
    ArtifactPaths,
    ConfigOption,
    SetOption,
    console,
    load_config,
    load_sequences,
    stage,
)
from vidanno.config.settings import MaskPredictorKind, RunConfig
from vidanno.core.annotation_store import read_annotations, write_annotations, write_failure_list
from vidanno.core.assess import load_assess_model
from vidanno.core.dataset import GROUND_TRUTH_FILE, list_sequences
from vidanno.core.inference import VISUAL_MODES, RefineMode, annotate_video, predict_video
from vidanno.core.mask_predictors import MaskPredictor, build_mask_predictor
from vidanno.core.metrics import FrameTally, tally_annotations, write_report
from vidanno.core.refine import GeometryModel, load_geometry_model
from vidanno.core.reporting import (
    ABLATION_FILE,
    ablation_rows,
    ablation_table,
    plot_iou_histograms,
    plot_quality_traces,
    plot_report,
    report_table,
    write_ablation,
)

logger = logging.getLogger(__name__)

ANNOTATION_FILE = "annotations.txt"
FAILURE_FILE = "failures.txt"
REPORT_FILE = "report.txt"
PLOTS_DIR = "plots"


def _mask_predictor(config: RunConfig, paths: ArtifactPaths) -> MaskPredictor:
    conv = config.refine.mask_predictor is MaskPredictorKind.CONV
    return build_mask_predictor(config.refine, paths.mask_checkpoint if conv else None)


def annotate(
    refine: Annotated[
        RefineMode, typer.Option("--refine", "-r", help="Box refinement applied before output")
    ] = RefineMode.GEOMETRIC,
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Annotate every sequence: one record per frame, failures listed separately."""
    with stage("annotate") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)
        assess_model = load_assess_model(paths.assess_checkpoint)
        geometry_model: GeometryModel | None = None
        if refine is RefineMode.GEOMETRIC:
            geometry_model = load_geometry_model(paths.geometry_checkpoint)
        predictor = _mask_predictor(config, paths) if refine in VISUAL_MODES else None

        table = Table(title=f"Annotations ({refine.value} refinement)")
        table.add_column("Sequence", style="cyan")
        table.add_column("Frames", justify="right")
        table.add_column("Manual", justify="right")
        table.add_column("Failures", justify="right")

        for sequence in load_sequences(config, paths):
            annotations, predictions = annotate_video(
                sequence, assess_model, config, geometry_model, predictor, refine
            )
            out_dir = outputs.track(paths.sequence_output(sequence.video_id))
            write_annotations(
                annotations.records, annotations.meta, outputs.track(out_dir / ANNOTATION_FILE)
            )
            write_failure_list(annotations.failure_frames, outputs.track(out_dir / FAILURE_FILE))
            table.add_row(
                sequence.video_id,
                str(sequence.meta.frame_count),
                str(len(predictions.manual_boxes)),
                str(len(annotations.failure_frames)),
            )
        console.print(table)


def evaluate(
    plot: Annotated[bool, typer.Option("--plot", help="Write a bar chart of the report")] = False,
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Evaluate written annotations against ground truth, per sequence and pooled."""
    with stage("eval") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)
        thresholds = config.evaluation.acc_thresholds
        error_iou = config.evaluation.error_iou

        total = FrameTally()
        for seq_dir in list_sequences(paths.data_dir):
            ground_truth = read_annotations(seq_dir / GROUND_TRUTH_FILE).boxes()
            out_dir = paths.sequence_output(seq_dir.name)
            annotations = read_annotations(out_dir / ANNOTATION_FILE)
            tally = tally_annotations(annotations.records, ground_truth)
            write_report(
                tally.report(thresholds, error_iou), outputs.track(out_dir / REPORT_FILE)
            )
            total.add(tally)

        if total.frames == 0:
            raise ValueError(f"No sequences found in {paths.data_dir}")
        report = total.report(thresholds, error_iou)
        console.print(report_table(report))
        console.print(f"mIoU {report.miou:.3f}")
        if plot:
            plot_path = outputs.track(paths.output_dir / PLOTS_DIR / "eval.png")
            plot_report(report, plot_path)
            console.print(f"[dim]Plot: {plot_path}[/dim]")


def report(
    plots: Annotated[
        bool, typer.Option("--plots/--no-plots", help="Write quality traces and IoU histograms")
    ] = True,
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Compare selection and refinement variants over all sequences."""
    with stage("report") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)
        assess_model = load_assess_model(paths.assess_checkpoint)
        sequences = load_sequences(config, paths)

        modes = {RefineMode.NONE}
        predictor: MaskPredictor | None = None
        geometry_model: GeometryModel | None = None
        if all(s.frames is not None for s in sequences):
            predictor = _mask_predictor(config, paths)
            modes |= {RefineMode.VISUAL, RefineMode.INTERPOLATED}
            if paths.geometry_checkpoint.exists():
                geometry_model = load_geometry_model(paths.geometry_checkpoint)
                modes.add(RefineMode.GEOMETRIC)
            else:
                logger.warning(f"No geometry model at {paths.geometry_checkpoint}")
        else:
            logger.warning("Frames missing; reporting without refinement variants")

        plots_dir = paths.output_dir / PLOTS_DIR
        if plots:
            outputs.track(plots_dir)
        runs = []
        for sequence in sequences:
            predictions = predict_video(
                sequence, assess_model, config, geometry_model, predictor, modes
            )
            runs.append((predictions, sequence.ground_truth))
            if plots:
                plot_quality_traces(
                    predictions,
                    sequence.ground_truth,
                    plots_dir / f"{sequence.video_id}_quality.png",
                    config.quality,
                )

        rows = ablation_rows(runs, config.inference, config.evaluation)
        write_ablation(rows, outputs.track(paths.output_dir / ABLATION_FILE))
        if plots:
            plot_iou_histograms(rows, plots_dir / "iou_histograms.png")
        console.print(ablation_table(rows))
        console.print(f"[dim]Table: {paths.output_dir / ABLATION_FILE}[/dim]")
