"""Temporal quality assessment.

Predicts one quality score per frame and direction from a window of
tracking results. A score above zero means the tracker box is expected to
overlap the target with IoU above 0.5.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from vidanno.config.settings import AssessConfig, TrainConfig
from vidanno.core.annotation_store import Direction, TrackedFrame, VideoMeta
from vidanno.core.dataset import WindowBank, checked_map, frame_tail
from vidanno.core.networks import DirectionalSequenceModel
from vidanno.core.snippets import Window, scatter_window_outputs
from vidanno.core.training import (
    TrainResult,
    fit,
    load_checkpoint,
    restore_state,
    save_checkpoint,
    set_seeds,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "assess"


class AssessModel(DirectionalSequenceModel):
    """Response-map encoder plus one sequential score predictor per direction."""

    def __init__(self, config: AssessConfig, window_length: int) -> None:
        super().__init__(
            feature_dim=config.feature_dim,
            conv_channels=config.conv_channels,
            hidden_size=config.hidden_size,
            num_layers=config.num_layers,
            out_dim=1,
            window_length=window_length,
            sequential=config.sequential,
            shared_predictor=config.shared_predictor,
        )
        self.config = config

    def scores(self, maps: Tensor, tails: Tensor, backward: Tensor) -> Tensor:
        """(B, L) quality scores."""
        return self(maps, tails, backward)[..., 0]


def window_inputs(
    windows: Sequence[Window], meta: VideoMeta, dtype: torch.dtype = torch.float32
) -> tuple[Tensor, Tensor, Tensor]:
    """Stack windows into (maps (N,L,r,r), tails (N,L,5), backward (N,)) tensors."""
    maps = np.stack([np.stack([checked_map(f) for f in w.frames]) for w in windows])
    tails = np.stack([np.stack([frame_tail(f, meta) for f in w.frames]) for w in windows])
    backward = torch.tensor([w.direction is Direction.BACKWARD for w in windows])
    return (
        torch.from_numpy(maps).to(dtype),
        torch.from_numpy(tails).to(dtype),
        backward,
    )


def extract_feature(frame: TrackedFrame, meta: VideoMeta, model: AssessModel) -> np.ndarray:
    """c+5 feature of one tracked frame: encoded response map, normalized box, confidence.

    Raises:
        ValueError: If the response map holds non-finite values.
    """
    response = torch.from_numpy(np.array(checked_map(frame)))[None, None]
    tail = torch.from_numpy(frame_tail(frame, meta))[None, None]
    model.eval()
    with torch.no_grad():
        feature = model.features(response, tail)
    return feature[0, 0].numpy().copy()


def predict_scores(window: Window, meta: VideoMeta, model: AssessModel) -> list[float]:
    """Quality score of every slot of one window.

    Raises:
        ValueError: If the window length differs from the model's.
    """
    return predict_window_scores([window], meta, model)[0].tolist()


def predict_window_scores(
    windows: Sequence[Window], meta: VideoMeta, model: AssessModel, batch_size: int = 256
) -> np.ndarray:
    """(N, L) quality scores of many windows."""
    rows: list[np.ndarray] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            maps, tails, backward = window_inputs(windows[start : start + batch_size], meta)
            rows.append(model.scores(maps, tails, backward).numpy())
    if not rows:
        return np.zeros((0, model.window_length), dtype=np.float32)
    return np.concatenate(rows)


def score_frames(
    windows: Sequence[Window], meta: VideoMeta, model: AssessModel
) -> dict[Direction, dict[int, float]]:
    """Per-frame scores of each direction, averaged over covering windows."""
    scores = predict_window_scores(windows, meta, model)
    result: dict[Direction, dict[int, float]] = {}
    for direction in Direction:
        picked = [i for i, w in enumerate(windows) if w.direction is direction]
        result[direction] = scatter_window_outputs([windows[i] for i in picked], scores[picked])
    return result


def loss_conf(pred: Tensor, target: Tensor, valid: Tensor | None = None) -> Tensor:
    """Sum of squared score errors over valid slots.

    Raises:
        ValueError: If the shapes of pred, target and valid differ.
    """
    if pred.shape != target.shape or (valid is not None and valid.shape != pred.shape):
        raise ValueError(
            f"Misaligned scores: pred {tuple(pred.shape)}, target {tuple(target.shape)}"
            + ("" if valid is None else f", valid {tuple(valid.shape)}")
        )
    squared = (pred - target) ** 2
    if valid is not None:
        squared = torch.where(valid, squared, torch.zeros_like(squared))
    return squared.sum()


def bank_loss(model: AssessModel, bank: WindowBank) -> Callable[[Tensor], Tensor]:
    """Per-window mean L_conf of a batch of bank windows."""

    def loss(index: Tensor) -> Tensor:
        maps, tails, backward, valid = bank.batch(index)
        targets = bank.targets[bank.slots[index]]
        return loss_conf(model.scores(maps, tails, backward), targets, valid) / len(index)

    return loss


def evaluate_loss(model: AssessModel, bank: WindowBank, batch_size: int = 256) -> float:
    """Mean per-window L_conf over a whole bank."""
    loss = bank_loss(model, bank)
    total = 0.0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(bank), batch_size):
            index = torch.arange(start, min(start + batch_size, len(bank)))
            total += float(loss(index)) * len(index)
    return total / len(bank)


def train_assess(
    train: WindowBank,
    model_config: AssessConfig,
    train_config: TrainConfig,
    window_length: int,
    val: WindowBank | None = None,
    seed: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[AssessModel, TrainResult]:
    """Train an assessment model on windows with quality targets.

    Raises:
        ValueError: If the training bank is empty.
    """
    if len(train) == 0:
        raise ValueError("Cannot train on an empty dataset")
    set_seeds(seed)
    model = AssessModel(model_config, window_length)
    logger.info(
        f"Training assessment model on {len(train)} windows"
        + (f", validating on {len(val)}" if val is not None else "")
    )
    result = fit(
        model,
        bank_loss(model, train),
        len(train),
        train_config,
        seed=seed,
        val_loss=(lambda: evaluate_loss(model, val)) if val is not None else None,
        on_step=on_step,
    )
    return model, result


def save_assess_model(model: AssessModel, path: Path, result: TrainResult | None = None) -> None:
    save_checkpoint(
        model,
        path,
        CHECKPOINT_KIND,
        {"model": model.config.model_dump(mode="json"), "window_length": model.window_length},
        result.metrics() if result is not None else None,
    )


def load_assess_model(path: Path) -> AssessModel:
    """Rebuild an assessment model from its checkpoint.

    Raises:
        MissingArtifactError: If the checkpoint does not exist.
        FormatError: If it is not a matching assessment checkpoint.
    """
    payload = load_checkpoint(path, CHECKPOINT_KIND)
    config = payload["config"]
    model = AssessModel(AssessConfig.model_validate(config["model"]), int(config["window_length"]))
    restore_state(model, payload, path)
    return model
