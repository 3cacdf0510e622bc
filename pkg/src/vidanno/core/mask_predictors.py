"""Initial target masks inside search regions.

Two predictors are available:

- SimilarityMaskOracle: per-pixel appearance similarity to the template's
  intensity. On synthetic frames this recovers the target rectangle plus
  every same-looking distractor in the region.
- ConvMaskPredictor: a small encoder-decoder over (search crop, template)
  trained with the same box-supervised loss as the geometry model.
"""

from __future__ import annotations

import bisect
import logging
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import Tensor, nn

from vidanno.config.settings import MaskPredictorKind, RefineConfig, TrainConfig
from vidanno.core.annotation_store import BBox, Direction, FrameSource, TrackedFrame
from vidanno.core.dataset import SequenceData
from vidanno.core.errors import MissingArtifactError, ShapeError
from vidanno.core.refine import (
    SearchRegion,
    box_mask,
    box_mask_tensor,
    crop_box,
    crop_search_region,
    loss_reg,
    resample,
)
from vidanno.core.training import (
    TrainResult,
    fit,
    load_checkpoint,
    restore_state,
    save_checkpoint,
    set_seeds,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "mask"


class MaskPredictor(Protocol):
    """Segments the target in a search crop given a template crop."""

    rows: int
    cols: int

    def predict(self, template: np.ndarray, crop: np.ndarray) -> np.ndarray:
        """Return a (rows, cols) mask with values in [0, 1]."""
        ...


class SimilarityMaskOracle:
    """Gaussian similarity between crop pixels and the template's central intensity."""

    def __init__(self, rows: int, cols: int, width: float = 0.12) -> None:
        self.rows = rows
        self.cols = cols
        self.width = width

    def predict(self, template: np.ndarray, crop: np.ndarray) -> np.ndarray:
        h, w = template.shape
        centre = template[h // 4 : h - h // 4, w // 4 : w - w // 4]
        level = float(np.median(centre))
        small = resample(crop, self.rows, self.cols).astype(np.float64)
        return np.exp(-(((small - level) / self.width) ** 2))


def stack_inputs(template: np.ndarray, crop: np.ndarray, crop_size: int) -> np.ndarray:
    """(2, S, S) predictor input: the crop and the template resized to the crop's size."""
    if crop.shape != (crop_size, crop_size):
        raise ShapeError(f"crop is {crop.shape}, expected {crop_size}x{crop_size}")
    return np.stack([crop, resample(template, crop_size, crop_size)])


class ConvMaskPredictor(nn.Module):
    """Two-channel (crop, template) encoder-decoder emitting a sigmoid mask."""

    def __init__(self, rows: int, cols: int, crop_size: int = 128) -> None:
        super().__init__()
        self.rows = rows
        self.cols = cols
        self.crop_size = crop_size
        self.encoder = nn.Sequential(
            nn.Conv2d(2, 16, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(32, 16, kernel_size=2, stride=2),
            nn.ReLU(),
            nn.Conv2d(16, 1, kernel_size=3, padding=1),
        )

    def forward(self, inputs: Tensor) -> Tensor:
        """(B, 2, S, S) -> (B, rows, cols) masks in (0, 1)."""
        logits = self.decoder(self.encoder(inputs))
        logits = nn.functional.interpolate(
            logits, size=(self.rows, self.cols), mode="bilinear", align_corners=False
        )
        return torch.sigmoid(logits[:, 0])

    def predict(self, template: np.ndarray, crop: np.ndarray) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            x = torch.from_numpy(stack_inputs(template, crop, self.crop_size))[None]
            return self(x)[0].numpy().astype(np.float64)


class FrameMasker:
    """Computes per-frame search regions and initial masks for one predictor.

    The template of a tracked frame is the manual box of the anchor its
    tracking started from: the span start for forward frames, the span
    end for backward ones.
    """

    def __init__(self, predictor: MaskPredictor | None, config: RefineConfig) -> None:
        self.predictor = predictor
        self.config = config
        self._templates: dict[tuple[str, int], np.ndarray] = {}

    def template(self, sequence: SequenceData, frame: TrackedFrame) -> np.ndarray:
        anchor, box = origin_anchor(sequence, frame)
        key = (sequence.video_id, anchor)
        if key not in self._templates:
            self._templates[key] = crop_box(
                _frames(sequence).frame(anchor), box, max(8, self.config.crop_size // 2)
            )
        return self._templates[key]

    def region_and_crop(
        self, sequence: SequenceData, frame: TrackedFrame
    ) -> tuple[SearchRegion, np.ndarray]:
        image = _frames(sequence).frame(frame.frame_idx)
        return crop_search_region(image, frame.box, sequence.meta, self.config.crop_size)

    def initial_mask(
        self, sequence: SequenceData, frame: TrackedFrame
    ) -> tuple[SearchRegion, np.ndarray]:
        """Search region and (P, Q) initial mask of a tracked frame."""
        region, crop = self.region_and_crop(sequence, frame)
        if self.predictor is None:
            raise ValueError("No mask predictor configured")
        mask = self.predictor.predict(self.template(sequence, frame), crop)
        expected = (self.config.mask_height, self.config.mask_width)
        if mask.shape != expected:
            raise ShapeError(f"mask is {mask.shape}, expected {expected}", frame.frame_idx)
        return region, mask

    def training_pair(
        self, sequence: SequenceData, frame: TrackedFrame
    ) -> tuple[np.ndarray, tuple[int, int, int, int]]:
        """Initial mask and ground-truth box-mask cells of a tracked frame."""
        region, mask = self.initial_mask(sequence, frame)
        return mask, self.target_cells(sequence, frame, region)

    def target_cells(
        self, sequence: SequenceData, frame: TrackedFrame, region: SearchRegion
    ) -> tuple[int, int, int, int]:
        gt = sequence.ground_truth.get(frame.frame_idx)
        if gt is None:
            raise MissingArtifactError(
                Path(sequence.video_id), f"ground truth box of frame {frame.frame_idx}"
            )
        return box_mask(gt, region, self.config.mask_height, self.config.mask_width).cells


def origin_anchor(sequence: SequenceData, frame: TrackedFrame) -> tuple[int, BBox]:
    """Anchor frame and manual box the tracking of this frame started from."""
    anchors = sequence.anchors()
    if frame.direction is Direction.FORWARD:
        anchor = anchors[max(0, bisect.bisect_left(anchors, frame.frame_idx) - 1)]
    else:
        anchor = anchors[min(len(anchors) - 1, bisect.bisect_right(anchors, frame.frame_idx))]
    return anchor, sequence.manual_boxes()[anchor]


def _frames(sequence: SequenceData) -> FrameSource:
    if sequence.frames is None:
        raise MissingArtifactError(Path(sequence.video_id) / "frames", "frame images")
    return sequence.frames


def mask_training_samples(
    sequences: Sequence[SequenceData],
    masker: FrameMasker,
    max_samples: int,
    seed: int = 0,
) -> tuple[Tensor, Tensor]:
    """Sample tracked frames for mask training: (inputs (N,2,S,S), cells (N,4))."""
    candidates = [
        (s, frame)
        for s, sequence in enumerate(sequences)
        for direction in Direction
        for frame in sequence.tracked(direction)
    ]
    if not candidates:
        raise ValueError("Cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    picked = sorted(rng.permutation(len(candidates))[:max_samples].tolist())

    inputs: list[np.ndarray] = []
    cells: list[tuple[int, int, int, int]] = []
    for i in picked:
        s, frame = candidates[i]
        sequence = sequences[s]
        region, crop = masker.region_and_crop(sequence, frame)
        template = masker.template(sequence, frame)
        inputs.append(stack_inputs(template, crop, masker.config.crop_size))
        cells.append(masker.target_cells(sequence, frame, region))
    return torch.from_numpy(np.stack(inputs)), torch.tensor(cells, dtype=torch.long)


def train_mask_predictor(
    inputs: Tensor,
    cells: Tensor,
    config: RefineConfig,
    train_config: TrainConfig,
    seed: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[ConvMaskPredictor, TrainResult]:
    """Train a ConvMaskPredictor with the box-supervised profile loss."""
    if len(inputs) == 0:
        raise ValueError("Cannot train on an empty dataset")
    set_seeds(seed)
    model = ConvMaskPredictor(config.mask_height, config.mask_width, config.crop_size)

    def loss(index: Tensor) -> Tensor:
        masks = model(inputs[index])
        target = box_mask_tensor(cells[index], model.rows, model.cols, masks.dtype)
        return loss_reg(masks, target, operator=config.aggregation) / len(index)

    logger.info(f"Training mask predictor on {len(inputs)} crops")
    result = fit(model, loss, len(inputs), train_config, seed=seed, on_step=on_step)
    return model, result


def save_mask_predictor(
    model: ConvMaskPredictor, path: Path, result: TrainResult | None = None
) -> None:
    save_checkpoint(
        model,
        path,
        CHECKPOINT_KIND,
        {"rows": model.rows, "cols": model.cols, "crop_size": model.crop_size},
        result.metrics() if result is not None else None,
    )


def load_mask_predictor(path: Path) -> ConvMaskPredictor:
    payload = load_checkpoint(path, CHECKPOINT_KIND)
    config = payload["config"]
    model = ConvMaskPredictor(int(config["rows"]), int(config["cols"]), int(config["crop_size"]))
    restore_state(model, payload, path)
    return model


def build_mask_predictor(config: RefineConfig, checkpoint: Path | None = None) -> MaskPredictor:
    """Mask predictor selected by config.mask_predictor.

    Raises:
        MissingArtifactError: If the conv predictor's checkpoint is missing.
    """
    if config.mask_predictor is MaskPredictorKind.ORACLE:
        return SimilarityMaskOracle(config.mask_height, config.mask_width, config.similarity_width)
    if checkpoint is None:
        raise MissingArtifactError(Path("mask.pt"), "mask predictor checkpoint")
    model = load_mask_predictor(checkpoint)
    if (model.rows, model.cols) != (config.mask_height, config.mask_width):
        raise ShapeError(
            f"mask predictor emits {model.rows}x{model.cols}, "
            f"config expects {config.mask_height}x{config.mask_width}"
        )
    return model
