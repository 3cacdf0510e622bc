#!/usr/bin/env python3
"""Run the full selection/refinement ablation on synthetic sequences.

Generates a synthetic benchmark, trains the assessment network (recurrent
and feed-forward variants) and the geometry network, then compares all
selection and refinement variants on held-out sequences. The exit status
is 0 when the expected orderings hold:

    mIoU(Sel) > mIoU(Fwd)
    mIoU(Sel-fail) > mIoU(Sel)
    mIoU(VG-Refine) >= mIoU(V-Refine) + margin
    recurrent assessment beats feed-forward on validation loss and err_rate

Usage:
    python scripts/run-synthetic-ablation.py [--sequences N] [--frames N]
        [--output DIR] [--set section.key=value ...]
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

from vidanno.config.settings import RunConfig, apply_overrides
from vidanno.core.assess import AssessModel, train_assess
from vidanno.core.dataset import SequenceData, build_window_bank
from vidanno.core.inference import RefineMode, SelectionMode, predict_video
from vidanno.core.mask_predictors import FrameMasker, build_mask_predictor
from vidanno.core.refine import train_refine
from vidanno.core.reporting import (
    Variant,
    ablation_rows,
    ablation_table,
    write_ablation,
)
from vidanno.core.synth import generate_benchmark
from vidanno.core.training import TrainResult, split_by_group

console = Console()

MARGIN = 0.005


def build_config(args: argparse.Namespace) -> RunConfig:
    return apply_overrides(
        RunConfig(),
        [
            f"synth.frame_count={args.frames}",
            f"synth.anchor_interval={args.anchor_interval}",
            f"synth.p_drift={args.p_drift}",
            f"workers={args.workers}",
            *args.overrides,
        ],
    )


def train_assessor(
    config: RunConfig, train: list[SequenceData], val: list[SequenceData], sequential: bool
) -> tuple[AssessModel, TrainResult]:
    model_config = config.assess.model_copy(update={"sequential": sequential})
    train_bank = build_window_bank(train, config.window, config.quality)
    val_bank = build_window_bank(val, config.window, config.quality)
    return train_assess(
        train_bank, model_config, config.train, config.window.length, val_bank, config.seed
    )


def err_rate(config: RunConfig, model: AssessModel, sequences: list[SequenceData]) -> float:
    """err_rate of the score-selected tracker boxes."""
    runs = [(predict_video(s, model, config), s.ground_truth) for s in sequences]
    variant = Variant("selection", "Sel", SelectionMode.SELECT, RefineMode.NONE)
    rows = ablation_rows(runs, config.inference, config.evaluation, [variant])
    return rows[0].report.err_rate


def _val_loss(result: TrainResult) -> float:
    return float("inf") if result.best_val_loss is None else result.best_val_loss


def main() -> int:
    """Main entry point."""
    parser = argparse.ArgumentParser(description="Synthetic selection/refinement ablation")
    parser.add_argument("--sequences", type=int, default=50, help="Number of sequences")
    parser.add_argument("--frames", type=int, default=900, help="Frames per sequence")
    parser.add_argument("--anchor-interval", type=int, default=30, help="Manual label interval")
    parser.add_argument("--p-drift", type=float, default=0.05, help="Drift probability")
    parser.add_argument("--workers", type=int, default=4, help="Worker threads")
    parser.add_argument("--output", type=Path, default=Path("outputs/ablation"))
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], help="section.key=value"
    )
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
    )
    config = build_config(args)
    started = time.monotonic()

    sequences = generate_benchmark(config.synth, args.sequences, config.workers)
    train_ids, val_ids = split_by_group(
        [s.video_id for s in sequences], max(config.train.val_fraction, 0.1), config.seed
    )
    train = [s for s in sequences if s.video_id in train_ids]
    held_out = [s for s in sequences if s.video_id in val_ids]
    console.print(f"{len(train)} training / {len(held_out)} held-out sequences")

    recurrent, recurrent_result = train_assessor(config, train, held_out, sequential=True)
    feed_forward, feed_forward_result = train_assessor(config, train, held_out, sequential=False)

    masker = FrameMasker(build_mask_predictor(config.refine), config.refine)
    cap = config.refine.max_train_frames
    geometry, _ = train_refine(
        build_window_bank(train, config.window, mask_fn=masker.training_pair, max_frames=cap),
        config.refine,
        config.train,
        config.window.length,
        build_window_bank(held_out, config.window, mask_fn=masker.training_pair, max_frames=cap),
        config.seed,
    )

    runs = [
        (
            predict_video(
                s,
                recurrent,
                config,
                geometry,
                masker.predictor,
                modes=set(RefineMode),
            ),
            s.ground_truth,
        )
        for s in held_out
    ]
    rows = ablation_rows(runs, config.inference, config.evaluation)
    write_ablation(rows, args.output / "ablation.txt")
    console.print(ablation_table(rows, title="Synthetic ablation (held-out sequences)"))

    miou = {row.variant.label: row.report.miou for row in rows}
    checks = {
        "Sel > Fwd": miou["Sel"] > miou["Fwd"],
        "Sel-fail > Sel": miou["Sel-fail"] > miou["Sel"],
        f"VG-Refine >= V-Refine + {MARGIN}": miou["VG-Refine"] >= miou["V-Refine"] + MARGIN,
    }

    recurrent_loss = _val_loss(recurrent_result)
    feed_forward_loss = _val_loss(feed_forward_result)
    recurrent_err = err_rate(config, recurrent, held_out)
    feed_forward_err = err_rate(config, feed_forward, held_out)
    console.print(
        f"assessment val loss: recurrent {recurrent_loss:.5f}, "
        f"feed-forward {feed_forward_loss:.5f}"
    )
    console.print(
        f"Sel err_rate: recurrent {recurrent_err:.4%}, feed-forward {feed_forward_err:.4%}"
    )
    checks["recurrent val loss < feed-forward"] = recurrent_loss < feed_forward_loss
    checks["recurrent err_rate < feed-forward"] = recurrent_err < feed_forward_err

    for name, passed in checks.items():
        mark = "[green]PASS[/green]" if passed else "[red]FAIL[/red]"
        console.print(f"{mark} {name}")
    console.print(f"[dim]Finished in {time.monotonic() - started:.0f}s[/dim]")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
