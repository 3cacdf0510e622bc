"""Training commands for the assessment, mask and geometry networks."""

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path

from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
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
from vidanno.config.settings import MaskPredictorKind, RunConfig, TrainConfig
from vidanno.core.assess import save_assess_model, train_assess
from vidanno.core.dataset import SequenceData, build_window_bank
from vidanno.core.mask_predictors import (
    FrameMasker,
    build_mask_predictor,
    mask_training_samples,
    save_mask_predictor,
    train_mask_predictor,
)
from vidanno.core.refine import save_geometry_model, train_refine
from vidanno.core.training import TrainResult, split_by_group, write_curve

logger = logging.getLogger(__name__)


def _expected_steps(n_samples: int, config: TrainConfig) -> int:
    steps = config.epochs * math.ceil(n_samples / config.batch_size)
    return steps if config.max_steps is None else min(steps, config.max_steps)


@contextmanager
def training_progress(name: str, total: int) -> Iterator[Callable[[int, float], None]]:
    """Progress bar driven by the on_step callback of a training run."""
    with Progress(
        TextColumn("[cyan]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("loss {task.fields[loss]:.5f}"),
        TimeElapsedColumn(),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task(name, total=total, loss=float("nan"))

        def on_step(step: int, loss: float) -> None:
            progress.update(task, completed=step, loss=loss)

        yield on_step


def _split(
    sequences: Sequence[SequenceData], config: RunConfig
) -> tuple[list[SequenceData], list[SequenceData]]:
    train_ids, val_ids = split_by_group(
        [s.video_id for s in sequences], config.train.val_fraction, config.seed
    )
    logger.info(f"{len(train_ids)} training and {len(val_ids)} validation sequences")
    return (
        [s for s in sequences if s.video_id in train_ids],
        [s for s in sequences if s.video_id in val_ids],
    )


def _print_result(kind: str, result: TrainResult, path: Path) -> None:
    table = Table(title=f"{kind} training")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", justify="right")
    for key, value in result.metrics().items():
        table.add_row(key, str(int(value)) if key == "steps" else f"{value:.6f}")
    console.print(table)
    console.print(f"[green]Saved[/green] {path}")


def train_assess_cmd(
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Train the temporal quality-assessment network."""
    with stage("train-assess") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)
        train_seqs, val_seqs = _split(load_sequences(config, paths), config)

        train_bank = build_window_bank(train_seqs, config.window, config.quality)
        val_bank = build_window_bank(val_seqs, config.window, config.quality) if val_seqs else None

        outputs.track(paths.checkpoint_dir)
        total = _expected_steps(len(train_bank), config.train)
        with training_progress("assess", total) as on_step:
            model, result = train_assess(
                train_bank,
                config.assess,
                config.train,
                config.window.length,
                val=val_bank,
                seed=config.seed,
                on_step=on_step,
            )
        save_assess_model(model, outputs.track(paths.assess_checkpoint), result)
        write_curve(result.curve, outputs.track(paths.curve("assess")))
        _print_result("Assessment", result, paths.assess_checkpoint)


def train_mask_cmd(
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Train the convolutional mask predictor (used with refine.mask_predictor = "conv")."""
    with stage("train-mask") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)
        train_seqs, _ = _split(load_sequences(config, paths), config)

        masker = FrameMasker(None, config.refine)
        inputs, cells = mask_training_samples(
            train_seqs, masker, config.refine.mask_train_frames, config.seed
        )

        outputs.track(paths.checkpoint_dir)
        with training_progress("mask", _expected_steps(len(inputs), config.train)) as on_step:
            model, result = train_mask_predictor(
                inputs, cells, config.refine, config.train, seed=config.seed, on_step=on_step
            )
        save_mask_predictor(model, outputs.track(paths.mask_checkpoint), result)
        write_curve(result.curve, outputs.track(paths.curve("mask")))
        _print_result("Mask predictor", result, paths.mask_checkpoint)


def train_refine_cmd(
    config_path: ConfigOption = None,
    overrides: SetOption = None,
) -> None:
    """Train the geometry network on initial masks of the configured mask predictor."""
    with stage("train-refine") as outputs:
        config = load_config(config_path, overrides)
        paths = ArtifactPaths.from_config(config)
        checkpoint = (
            paths.mask_checkpoint
            if config.refine.mask_predictor is MaskPredictorKind.CONV
            else None
        )
        masker = FrameMasker(build_mask_predictor(config.refine, checkpoint), config.refine)
        train_seqs, val_seqs = _split(load_sequences(config, paths), config)

        cap = config.refine.max_train_frames
        train_bank = build_window_bank(
            train_seqs, config.window, mask_fn=masker.training_pair, max_frames=cap
        )
        val_bank = (
            build_window_bank(val_seqs, config.window, mask_fn=masker.training_pair, max_frames=cap)
            if val_seqs
            else None
        )

        outputs.track(paths.checkpoint_dir)
        total = _expected_steps(len(train_bank), config.train)
        with training_progress("geometry", total) as on_step:
            model, result = train_refine(
                train_bank,
                config.refine,
                config.train,
                config.window.length,
                val=val_bank,
                seed=config.seed,
                on_step=on_step,
            )
        save_geometry_model(model, outputs.track(paths.geometry_checkpoint), result)
        write_curve(result.curve, outputs.track(paths.curve("geometry")))
        _print_result("Geometry", result, paths.geometry_checkpoint)
