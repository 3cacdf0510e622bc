"""Visual-geometry box refinement.

A search region twice the size of a tracker box is cropped around it. A
mask predictor segments the target inside the region (the initial mask),
a Gaussian weight map predicted from the window of tracking results
suppresses off-target pixels, and the refined box is decoded from the
row/column profiles of the weighted mask.

Mask grid convention: cell (row i, col j) of a P x Q grid has normalized
centre ((j + 0.5) / Q, (i + 0.5) / P). x runs along columns (mu1, sigma1),
y along rows (mu2, sigma2).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from vidanno.config.settings import AggregationOperator, RefineConfig, TrainConfig
from vidanno.core.annotation_store import BBox, Direction, VideoMeta
from vidanno.core.assess import window_inputs
from vidanno.core.dataset import WindowBank
from vidanno.core.errors import RegionError, ShapeError
from vidanno.core.networks import DirectionalSequenceModel
from vidanno.core.snippets import Window, scatter_window_vectors
from vidanno.core.training import (
    TrainResult,
    fit,
    load_checkpoint,
    restore_state,
    save_checkpoint,
    set_seeds,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "geometry"
SIGMA_FLOOR = 1e-3


class Axis(str, Enum):
    """Aggregation direction: horizontal collapses columns (one value per row)."""

    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"


@dataclass(frozen=True)
class SearchRegion:
    """Box-centred region of twice the box size, in frame pixels.

    (x0, y0, x1, y1) is the unclipped extent the crop and mask grid cover;
    parts outside the frame are zero-filled in the crop.
    """

    source_box: BBox
    x0: float
    y0: float
    x1: float
    y1: float
    frame_width: int
    frame_height: int

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def clipped(self) -> BBox | None:
        """The part of the region inside the frame."""
        return BBox(self.x0, self.y0, self.x1, self.y1).clip(self.frame_width, self.frame_height)

    def to_grid(self, x: float, y: float, rows: int, cols: int) -> tuple[float, float]:
        """Frame pixel -> continuous (col, row) grid position."""
        return ((x - self.x0) / self.width * cols, (y - self.y0) / self.height * rows)

    def to_frame(self, col: float, row: float, rows: int, cols: int) -> tuple[float, float]:
        """Continuous (col, row) grid position -> frame pixel."""
        return (self.x0 + col / cols * self.width, self.y0 + row / rows * self.height)


def search_region(box: BBox, meta: VideoMeta) -> SearchRegion:
    """Region centred on box with twice its width and height.

    Raises:
        RegionError: If the region does not overlap the frame.
    """
    cx, cy = box.center
    region = SearchRegion(
        source_box=box,
        x0=cx - box.width,
        y0=cy - box.height,
        x1=cx + box.width,
        y1=cy + box.height,
        frame_width=meta.frame_width,
        frame_height=meta.frame_height,
    )
    if region.clipped is None:
        raise RegionError(f"Search region of {box.as_tuple()} lies outside the frame")
    return region


def crop_search_region(
    image: np.ndarray, box: BBox, meta: VideoMeta, crop_size: int = 128
) -> tuple[SearchRegion, np.ndarray]:
    """Cut the search region of box out of a grayscale frame.

    Returns:
        The region and a (crop_size, crop_size) float32 crop, bilinearly
        resampled, zero outside the frame.
    """
    region = search_region(box, meta)
    source = Image.fromarray(np.asarray(image, dtype=np.float32))
    crop = source.transform(
        (crop_size, crop_size),
        Image.Transform.EXTENT,
        (region.x0, region.y0, region.x1, region.y1),
        Image.Resampling.BILINEAR,
        fillcolor=0.0,
    )
    return region, np.asarray(crop, dtype=np.float32)


def crop_box(image: np.ndarray, box: BBox, size: int) -> np.ndarray:
    """Resample exactly the box area to size x size (template crops)."""
    source = Image.fromarray(np.asarray(image, dtype=np.float32))
    crop = source.transform(
        (size, size), Image.Transform.EXTENT, box.as_tuple(), Image.Resampling.BILINEAR
    )
    return np.asarray(crop, dtype=np.float32)


def resample(array: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinearly resize a 2-D float array to rows x cols."""
    image = Image.fromarray(np.asarray(array, dtype=np.float32))
    return np.asarray(image.resize((cols, rows), Image.Resampling.BILINEAR), dtype=np.float32)


@dataclass(frozen=True)
class GaussianParams:
    """Gaussian weight parameters in normalized mask coordinates.

    The centre (mu1, mu2) lies inside the mask grid, [0, 1] on both axes.
    """

    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    alpha: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.mu1 <= 1.0 and 0.0 <= self.mu2 <= 1.0):
            raise ValueError(f"mu must lie in [0, 1]: {self.mu1}, {self.mu2}")
        if not (self.sigma1 >= SIGMA_FLOOR and self.sigma2 >= SIGMA_FLOOR):
            raise ValueError(f"sigma must be >= {SIGMA_FLOOR}: {self.sigma1}, {self.sigma2}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    @classmethod
    def from_vector(cls, values: Sequence[float] | np.ndarray) -> GaussianParams:
        mu1, mu2, sigma1, sigma2, alpha = (float(v) for v in values)
        return cls(mu1, mu2, sigma1, sigma2, alpha)

    def as_vector(self) -> np.ndarray:
        return np.array([self.mu1, self.mu2, self.sigma1, self.sigma2, self.alpha])


def gaussian_weight(theta: GaussianParams, x: float, y: float) -> float:
    """W(x, y) = exp(-alpha ((x - mu1)^2 / sigma1^2 + (y - mu2)^2 / sigma2^2))."""
    dx = (x - theta.mu1) / theta.sigma1
    dy = (y - theta.mu2) / theta.sigma2
    return math.exp(-theta.alpha * (dx * dx + dy * dy))


def grid_coordinates(n: int, dtype: torch.dtype = torch.float64) -> Tensor:
    """Normalized cell centres (k + 0.5) / n."""
    return (torch.arange(n, dtype=dtype) + 0.5) / n


def weight_map(theta: Tensor, rows: int, cols: int) -> Tensor:
    """Gaussian weights of (..., 5) parameters on a rows x cols grid -> (..., rows, cols)."""
    mu1, mu2, sigma1, sigma2, alpha = theta.unbind(-1)
    x = grid_coordinates(cols, theta.dtype)
    y = grid_coordinates(rows, theta.dtype)
    dx = ((x - mu1[..., None]) / sigma1[..., None]) ** 2
    dy = ((y - mu2[..., None]) / sigma2[..., None]) ** 2
    return torch.exp(-alpha[..., None, None] * (dy[..., :, None] + dx[..., None, :]))


def gaussian_weight_map(theta: GaussianParams, rows: int, cols: int) -> np.ndarray:
    """(rows, cols) float64 weight grid W of one parameter set, values in (0, 1]."""
    vector = torch.tensor(theta.as_vector(), dtype=torch.float64)
    return weight_map(vector, rows, cols).numpy()


def apply_weight(initial: Tensor, weight: Tensor) -> Tensor:
    """Element-wise S = S~ * W.

    Raises:
        ShapeError: If the shapes differ.
    """
    if initial.shape != weight.shape:
        raise ShapeError(
            f"mask {tuple(initial.shape)} and weight map {tuple(weight.shape)} differ in shape"
        )
    return initial * weight


def aggregate(
    mask: Tensor,
    axis: Axis,
    operator: AggregationOperator = AggregationOperator.RECTIFIED_ACCUMULATION,
) -> Tensor:
    """Collapse a (..., P, Q) mask into a row profile (P) or a column profile (Q)."""
    dim = -1 if axis is Axis.HORIZONTAL else -2
    if operator is AggregationOperator.MAX_POOL:
        return mask.amax(dim=dim)
    if operator is AggregationOperator.AVERAGE:
        return mask.mean(dim=dim)

    total = mask.sum(dim=dim)
    ones = torch.ones_like(total)
    if operator is AggregationOperator.RECTIFIED_ACCUMULATION:
        # gradient 1 below the clip, 0 at and above it
        return torch.where(total < 1, total, ones)
    if operator is AggregationOperator.RECTIFIED_MAX:
        return torch.where(total > 1, total, ones)
    return total


@dataclass(frozen=True)
class BoxMask:
    """Binary P x Q mask that is 1 on rows [row0, row1) x cols [col0, col1)."""

    rows: int
    cols: int
    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def is_empty(self) -> bool:
        return self.row0 >= self.row1 or self.col0 >= self.col1

    @property
    def cells(self) -> tuple[int, int, int, int]:
        return (self.row0, self.row1, self.col0, self.col1)

    def to_array(self) -> np.ndarray:
        mask = np.zeros((self.rows, self.cols), dtype=bool)
        mask[self.row0 : self.row1, self.col0 : self.col1] = True
        return mask


def box_mask(box: BBox, region: SearchRegion, rows: int, cols: int) -> BoxMask:
    """Map a frame box into a region's mask grid; cells the box overlaps are 1."""
    g0x, g0y = region.to_grid(box.x_min, box.y_min, rows, cols)
    g1x, g1y = region.to_grid(box.x_max, box.y_max, rows, cols)
    row0, row1 = max(0, math.floor(g0y)), min(rows, math.ceil(g1y))
    col0, col1 = max(0, math.floor(g0x)), min(cols, math.ceil(g1x))
    if row0 >= row1 or col0 >= col1:
        return BoxMask(rows, cols, 0, 0, 0, 0)
    return BoxMask(rows, cols, row0, row1, col0, col1)


def box_mask_tensor(cells: Tensor, rows: int, cols: int, dtype: torch.dtype) -> Tensor:
    """(..., 4) cell bounds (row0, row1, col0, col1) -> (..., rows, cols) binary masks."""
    r = torch.arange(rows)
    c = torch.arange(cols)
    in_rows = (r >= cells[..., 0:1]) & (r < cells[..., 1:2])
    in_cols = (c >= cells[..., 2:3]) & (c < cells[..., 3:4])
    return (in_rows[..., :, None] & in_cols[..., None, :]).to(dtype)


def loss_reg(
    pred: Tensor,
    target: Tensor,
    valid: Tensor | None = None,
    operator: AggregationOperator = AggregationOperator.RECTIFIED_ACCUMULATION,
) -> Tensor:
    """Box-supervised loss: squared profile differences in both axes, summed.

    Args:
        pred: (..., P, Q) predicted masks
        target: (..., P, Q) box masks
        valid: (...) False excludes a mask pair (padded slots)

    Raises:
        ValueError: If shapes are misaligned.
    """
    if pred.shape != target.shape or (valid is not None and valid.shape != pred.shape[:-2]):
        raise ValueError(
            f"Misaligned masks: pred {tuple(pred.shape)}, target {tuple(target.shape)}"
        )
    per_mask = torch.zeros(pred.shape[:-2], dtype=pred.dtype)
    for axis in Axis:
        diff = aggregate(pred, axis, operator) - aggregate(target, axis, operator)
        per_mask = per_mask + (diff**2).sum(dim=-1)
    if valid is not None:
        per_mask = torch.where(valid, per_mask, torch.zeros_like(per_mask))
    return per_mask.sum()


def to_gaussian(raw: Tensor) -> Tensor:
    """Raw (..., 5) head outputs -> (mu1, mu2, sigma1, sigma2, alpha).

    mu through a sigmoid, sigma and alpha through softplus (sigma floored).
    """
    mu = torch.sigmoid(raw[..., 0:2])
    sigma = F.softplus(raw[..., 2:4]) + SIGMA_FLOOR
    alpha = F.softplus(raw[..., 4:5])
    return torch.cat([mu, sigma, alpha], dim=-1)


class GeometryModel(DirectionalSequenceModel):
    """Predicts Gaussian weight parameters per frame from a window of tracking results."""

    def __init__(self, config: RefineConfig, window_length: int) -> None:
        super().__init__(
            feature_dim=config.feature_dim,
            conv_channels=config.conv_channels,
            hidden_size=config.hidden_size,
            num_layers=config.num_layers,
            out_dim=5,
            window_length=window_length,
            sequential=config.sequential,
        )
        self.config = config

    def params(self, maps: Tensor, tails: Tensor, backward: Tensor) -> Tensor:
        """(B, L, 5) Gaussian parameters."""
        return to_gaussian(self(maps, tails, backward))


def predict_window_geometry(
    windows: Sequence[Window], meta: VideoMeta, model: GeometryModel, batch_size: int = 256
) -> np.ndarray:
    """(N, L, 5) Gaussian parameters of many windows."""
    rows: list[np.ndarray] = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            maps, tails, backward = window_inputs(windows[start : start + batch_size], meta)
            rows.append(model.params(maps, tails, backward).numpy())
    if not rows:
        return np.zeros((0, model.window_length, 5), dtype=np.float32)
    return np.concatenate(rows)


def predict_geometry(window: Window, meta: VideoMeta, model: GeometryModel) -> list[GaussianParams]:
    """Gaussian parameters of every slot of one window.

    Raises:
        ValueError: If the window length differs from the model's.
    """
    values = predict_window_geometry([window], meta, model)[0]
    return [GaussianParams.from_vector(v) for v in values]


def geometry_frames(
    windows: Sequence[Window], meta: VideoMeta, model: GeometryModel
) -> dict[Direction, dict[int, GaussianParams]]:
    """Per-frame parameters of each direction: mean over covering window slots."""
    values = predict_window_geometry(windows, meta, model)
    result: dict[Direction, dict[int, GaussianParams]] = {}
    for direction in Direction:
        picked = [i for i, w in enumerate(windows) if w.direction is direction]
        merged = scatter_window_vectors([windows[i] for i in picked], values[picked])
        result[direction] = {idx: GaussianParams.from_vector(v) for idx, v in merged.items()}
    return result


def interpolation_prior(
    frame_idx: int,
    start: tuple[int, BBox],
    end: tuple[int, BBox],
    region: SearchRegion,
    alpha: float = 1.0,
) -> GaussianParams:
    """Handcrafted prior centred on the box interpolated between two anchors.

    The spread is the interpolated half-extent, in normalized region units.
    A centre outside the region is moved onto its nearest edge.
    """
    (a, box_a), (b, box_b) = start, end
    t = (frame_idx - a) / (b - a) if b != a else 0.0
    coords = [(1 - t) * p + t * q for p, q in zip(box_a.as_tuple(), box_b.as_tuple(), strict=True)]
    x_min, y_min, x_max, y_max = coords
    mu1 = ((x_min + x_max) / 2 - region.x0) / region.width
    mu2 = ((y_min + y_max) / 2 - region.y0) / region.height
    return GaussianParams(
        mu1=min(max(mu1, 0.0), 1.0),
        mu2=min(max(mu2, 0.0), 1.0),
        sigma1=max(SIGMA_FLOOR, (x_max - x_min) / 2 / region.width),
        sigma2=max(SIGMA_FLOOR, (y_max - y_min) / 2 / region.height),
        alpha=alpha,
    )


def weighted_mask(initial: np.ndarray, theta: GaussianParams) -> np.ndarray:
    """S~ weighted by the Gaussian of theta, as a float64 array."""
    rows, cols = initial.shape
    weight = torch.from_numpy(gaussian_weight_map(theta, rows, cols))
    masked = apply_weight(torch.from_numpy(np.asarray(initial, dtype=np.float64)), weight)
    return masked.numpy()


def bank_loss(
    model: GeometryModel, bank: WindowBank, operator: AggregationOperator
) -> Callable[[Tensor], Tensor]:
    """Per-window mean loss_reg of a batch of bank windows."""
    if bank.masks is None or bank.cells is None:
        raise ValueError("Window bank carries no masks")
    masks, cells = bank.masks, bank.cells

    def loss(index: Tensor) -> Tensor:
        maps, tails, backward, valid = bank.batch(index)
        theta = model.params(maps, tails, backward)
        slots = bank.slots[index]
        initial = masks[slots].to(theta.dtype)
        rows, cols = initial.shape[-2:]
        weighted = apply_weight(initial, weight_map(theta, rows, cols))
        target = box_mask_tensor(cells[slots], rows, cols, theta.dtype)
        return loss_reg(weighted, target, valid, operator) / len(index)

    return loss


def evaluate_loss(
    model: GeometryModel, bank: WindowBank, operator: AggregationOperator, batch_size: int = 64
) -> float:
    """Mean per-window loss_reg over a whole bank."""
    loss = bank_loss(model, bank, operator)
    total = 0.0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(bank), batch_size):
            index = torch.arange(start, min(start + batch_size, len(bank)))
            total += float(loss(index)) * len(index)
    return total / len(bank)


def train_refine(
    train: WindowBank,
    model_config: RefineConfig,
    train_config: TrainConfig,
    window_length: int,
    val: WindowBank | None = None,
    seed: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[GeometryModel, TrainResult]:
    """Train the geometry model through the weighted-mask box loss.

    Raises:
        ValueError: If the training bank is empty or carries no masks.
    """
    if len(train) == 0:
        raise ValueError("Cannot train on an empty dataset")
    set_seeds(seed)
    model = GeometryModel(model_config, window_length)
    operator = model_config.aggregation
    logger.info(f"Training geometry model on {len(train)} windows ({operator.value})")
    result = fit(
        model,
        bank_loss(model, train, operator),
        len(train),
        train_config,
        seed=seed,
        val_loss=(lambda: evaluate_loss(model, val, operator)) if val is not None else None,
        on_step=on_step,
    )
    return model, result


def save_geometry_model(
    model: GeometryModel, path: Path, result: TrainResult | None = None
) -> None:
    save_checkpoint(
        model,
        path,
        CHECKPOINT_KIND,
        {"model": model.config.model_dump(mode="json"), "window_length": model.window_length},
        result.metrics() if result is not None else None,
    )


def load_geometry_model(path: Path) -> GeometryModel:
    """Rebuild a geometry model from its checkpoint."""
    payload = load_checkpoint(path, CHECKPOINT_KIND)
    config = payload["config"]
    model = GeometryModel(
        RefineConfig.model_validate(config["model"]), int(config["window_length"])
    )
    restore_state(model, payload, path)
    return model
