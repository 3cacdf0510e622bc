"""Pytest configuration and fixtures."""

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import Tensor, nn

from vidanno.config.settings import (
    AssessConfig,
    DataConfig,
    PathsConfig,
    RefineConfig,
    RunConfig,
    SynthConfig,
    TrainConfig,
    WindowConfig,
)
from vidanno.core.annotation_store import BBox, Direction, TrackedFrame, VideoMeta
from vidanno.core.assess import AssessModel, train_assess
from vidanno.core.dataset import SequenceData, build_window_bank
from vidanno.core.synth import generate_sequence


def make_frame(
    frame_idx: int,
    direction: Direction,
    box: BBox | None = None,
    confidence: float = 0.5,
    map_size: int = 8,
    fill: float = 0.0,
) -> TrackedFrame:
    """TrackedFrame with a constant response map."""
    return TrackedFrame(
        frame_idx=frame_idx,
        direction=direction,
        box=box or BBox(10.0, 10.0, 30.0, 40.0),
        confidence=confidence,
        response_map=np.full((map_size, map_size), fill, dtype=np.float32),
    )


def make_tracks(
    meta: VideoMeta, map_size: int = 8
) -> tuple[list[TrackedFrame], list[TrackedFrame]]:
    """Complete forward and backward tracker outputs for default anchors."""
    forward = [
        make_frame(i, Direction.FORWARD, map_size=map_size) for i in range(1, meta.frame_count)
    ]
    backward = [
        make_frame(i, Direction.BACKWARD, map_size=map_size) for i in range(meta.frame_count - 1)
    ]
    return forward, backward


def constant_assess_model(config: RunConfig, score: float) -> AssessModel:
    """Assessment model whose every score is `score`."""
    model = AssessModel(config.assess, config.window.length)
    with torch.no_grad():
        for direction in Direction:
            head = model.predictor(direction).head
            head.weight.zero_()
            head.bias.fill_(score)
    return model.eval()


def gradcheck_parameters(
    model: nn.Module,
    loss: Callable[[dict[str, Tensor]], Tensor],
    conv_stages: bool = False,
) -> bool:
    """Compare analytic and central-difference gradients of a loss in the model parameters.

    By default the convolution stages stay fixed, since finite differences
    straddle their ReLU kinks; with `conv_stages` only they are checked and
    every other parameter stays fixed. Callers checking the convolution
    stages must keep every ReLU input away from zero.
    """
    names = [
        name
        for name, _ in model.named_parameters()
        if name.startswith("encoder.conv") == conv_stages
    ]
    fixed = {name: p.detach() for name, p in model.named_parameters() if name not in names}
    values = tuple(model.get_parameter(n).detach().clone().requires_grad_(True) for n in names)

    def fn(*params: Tensor) -> Tensor:
        return loss({**fixed, **dict(zip(names, params, strict=True))})

    return torch.autograd.gradcheck(fn, values, eps=1e-6, atol=1e-7, rtol=1e-4)


def trained_assess_model(
    config: RunConfig, sequences: list[SequenceData], steps: int = 300
) -> AssessModel:
    """Assessment model trained for a few hundred steps on the quality targets of sequences."""
    bank = build_window_bank(sequences, config.window, config.quality)
    train = TrainConfig(learning_rate=3e-3, batch_size=8, epochs=100, max_steps=steps)
    model, _ = train_assess(bank, config.assess, train, config.window.length, seed=config.seed)
    return model.eval()


@pytest.fixture
def tiny_synth_config() -> SynthConfig:
    """Small synthetic video: 61 frames, anchors every 10."""
    return SynthConfig(
        seed=3,
        frame_count=61,
        width=96,
        height=96,
        anchor_interval=10,
        min_box=16.0,
        max_box=24.0,
        max_velocity=1.5,
        response_size=16,
        distractor_count=2,
    )


@pytest.fixture
def noiseless_synth_config(tiny_synth_config: SynthConfig) -> SynthConfig:
    """Synthetic config whose trackers reproduce the ground truth exactly."""
    return tiny_synth_config.model_copy(
        update={"sigma_pos": 0.0, "sigma_scale": 0.0, "p_drift": 0.0}
    )


@pytest.fixture
def tiny_sequence(tiny_synth_config: SynthConfig) -> SequenceData:
    return generate_sequence(tiny_synth_config, "tiny")


@pytest.fixture
def noiseless_sequence(noiseless_synth_config: SynthConfig) -> SequenceData:
    return generate_sequence(noiseless_synth_config, "still")


@pytest.fixture
def tiny_run_config(tiny_synth_config: SynthConfig, tmp_path: Path) -> RunConfig:
    """Run config with tiny networks and a few training steps, rooted in tmp_path."""
    return RunConfig(
        seed=0,
        paths=PathsConfig(
            data_dir=tmp_path / "data",
            checkpoint_dir=tmp_path / "checkpoints",
            output_dir=tmp_path / "outputs",
        ),
        data=DataConfig(anchor_interval=10, response_size=16),
        window=WindowConfig(length=5, stride=3),
        assess=AssessConfig(feature_dim=8, conv_channels=[4, 8], hidden_size=8, num_layers=1),
        refine=RefineConfig(
            mask_height=16,
            mask_width=16,
            crop_size=32,
            feature_dim=8,
            conv_channels=[4, 8],
            hidden_size=8,
            num_layers=1,
            max_train_frames=400,
            mask_train_frames=16,
        ),
        train=TrainConfig(batch_size=8, epochs=1, max_steps=3, val_fraction=0.0),
        synth=tiny_synth_config,
    )


@pytest.fixture
def heavy_drift_synth_config(tiny_synth_config: SynthConfig) -> SynthConfig:
    """Twelve snippets per video, most of them drifting fast in one or both directions."""
    return tiny_synth_config.model_copy(
        update={"frame_count": 121, "p_drift": 0.8, "drift_magnitude": 0.3}
    )
