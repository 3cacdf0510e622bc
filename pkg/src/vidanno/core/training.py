"""Optimization loop, seeding and checkpoint files shared by both networks.

Checkpoints are torch files holding a self-describing dict::

    {"format": "vidanno-<kind>", "version": 1, "config": {...},
     "manifest": {param_name: shape}, "state_dict": {...}, "metrics": {...}}
"""

from __future__ import annotations

import copy
import logging
import math
import random
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor, nn

from vidanno.config.settings import TrainConfig
from vidanno.core.errors import FormatError, MissingArtifactError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

BatchLoss = Callable[[Tensor], Tensor]
"""Maps a 1-D tensor of sample indices to a scalar loss per sample (mean)."""


@dataclass
class TrainResult:
    """Outcome of one optimization run."""

    curve: list[tuple[int, float]] = field(default_factory=list)
    steps: int = 0
    initial_val_loss: float | None = None
    best_val_loss: float | None = None
    final_train_loss: float | None = None

    def metrics(self) -> dict[str, float]:
        values: dict[str, float] = {"steps": float(self.steps)}
        for name in ("initial_val_loss", "best_val_loss", "final_train_loss"):
            value = getattr(self, name)
            if value is not None:
                values[name] = float(value)
        return values


def set_seeds(seed: int) -> None:
    """Seed python, numpy and torch."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def split_by_group(groups: list[str], val_fraction: float, seed: int) -> tuple[set[str], set[str]]:
    """Split group names (sequence ids) into train and validation sets.

    At least one group stays in training; validation is empty when
    val_fraction is 0 or there is a single group.
    """
    names = sorted(set(groups))
    rng = random.Random(seed)
    rng.shuffle(names)
    n_val = min(len(names) - 1, round(len(names) * val_fraction)) if names else 0
    if val_fraction > 0 and len(names) > 1:
        n_val = max(n_val, 1)
    return set(names[n_val:]), set(names[:n_val])


def fit(
    model: nn.Module,
    batch_loss: BatchLoss,
    n_samples: int,
    config: TrainConfig,
    seed: int = 0,
    val_loss: Callable[[], float] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minimize batch_loss with Adam over shuffled mini-batches.

    When `val_loss` is given, it is evaluated before training and after each
    epoch; the parameters with the lowest validation loss are restored at
    the end.

    Raises:
        ValueError: If there are no samples.
    """
    if n_samples <= 0:
        raise ValueError("Cannot train on an empty dataset")

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    generator = torch.Generator().manual_seed(seed)
    result = TrainResult()

    best_state: dict[str, Any] | None = None
    if val_loss is not None:
        result.initial_val_loss = result.best_val_loss = _evaluate(model, val_loss)
        best_state = copy.deepcopy(model.state_dict())
        logger.info(f"Initial validation loss {result.initial_val_loss:.6f}")

    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n_samples, generator=generator)
        for start in range(0, n_samples, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            loss = batch_loss(order[start : start + config.batch_size])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            step += 1
            value = float(loss.detach())
            result.curve.append((step, value))
            result.final_train_loss = value
            if on_step is not None:
                on_step(step, value)
            if step % config.log_every == 0:
                logger.info(f"step {step}: loss {value:.6f}")

        if val_loss is not None:
            current = _evaluate(model, val_loss)
            logger.info(f"epoch {epoch + 1}: validation loss {current:.6f}")
            if result.best_val_loss is None or current < result.best_val_loss:
                result.best_val_loss = current
                best_state = copy.deepcopy(model.state_dict())

        if config.max_steps is not None and step >= config.max_steps:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result.steps = step
    return result


def _evaluate(model: nn.Module, val_loss: Callable[[], float]) -> float:
    model.eval()
    with torch.no_grad():
        value = float(val_loss())
    if not math.isfinite(value):
        raise ValueError(f"Validation loss is not finite: {value}")
    return value


def manifest(model: nn.Module) -> dict[str, list[int]]:
    """Parameter name to shape."""
    return {name: list(tensor.shape) for name, tensor in model.state_dict().items()}


def save_checkpoint(
    model: nn.Module,
    path: Path,
    kind: str,
    config: dict[str, Any],
    metrics: dict[str, float] | None = None,
) -> None:
    """Write a versioned, self-describing checkpoint."""
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": f"vidanno-{kind}",
            "version": CHECKPOINT_VERSION,
            "config": config,
            "manifest": manifest(model),
            "state_dict": model.state_dict(),
            "metrics": dict(metrics or {}),
        },
        path,
    )
    logger.info(f"Saved {kind} checkpoint to {path}")


def load_checkpoint(path: Path, kind: str) -> dict[str, Any]:
    """Read a checkpoint and validate its format and version.

    Raises:
        MissingArtifactError: If the file does not exist.
        FormatError: If the file is not a checkpoint of this kind/version.
    """
    if not path.exists():
        raise MissingArtifactError(path, f"{kind} checkpoint")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise FormatError(f"unreadable checkpoint: {e}", path) from e

    if not isinstance(payload, dict) or payload.get("format") != f"vidanno-{kind}":
        raise FormatError(f"not a {kind} checkpoint", path)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}", path
        )
    return payload


def restore_state(model: nn.Module, payload: dict[str, Any], path: Path) -> None:
    """Load checkpoint parameters after checking them against the model's manifest.

    Raises:
        FormatError: If parameter names or shapes differ.
    """
    expected = manifest(model)
    stored = {name: list(shape) for name, shape in payload["manifest"].items()}
    if stored != expected:
        missing = sorted(set(expected) ^ set(stored))
        detail = f"parameters differ: {missing[:3]}" if missing else "parameter shapes differ"
        raise FormatError(f"checkpoint does not match model ({detail})", path)
    model.load_state_dict(payload["state_dict"])
    model.eval()


def write_curve(curve: list[tuple[int, float]], path: Path) -> None:
    """Write a training curve as `step,loss` lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{step},{loss!r}\n" for step, loss in curve), encoding="utf-8")


def read_curve(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        raise MissingArtifactError(path, "training curve")
    curve: list[tuple[int, float]] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        step, sep, loss = line.partition(",")
        try:
            if not sep:
                raise ValueError(f"expected step,loss, got {line!r}")
            curve.append((int(step), float(loss)))
        except ValueError as e:
            raise FormatError(str(e), path, line_no) from e
    return curve
