"""Tests for visual-geometry refinement."""

import math
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import Tensor
from torch.func import functional_call

from tests.conftest import gradcheck_parameters, make_frame
from vidanno.config.settings import AggregationOperator, RefineConfig, TrainConfig
from vidanno.core.annotation_store import BBox, Direction, VideoMeta
from vidanno.core.dataset import WindowBank
from vidanno.core.errors import MissingArtifactError, RegionError, ShapeError
from vidanno.core.inference import mask_box_indices
from vidanno.core.metrics import iou
from vidanno.core.refine import (
    Axis,
    GaussianParams,
    GeometryModel,
    aggregate,
    apply_weight,
    bank_loss,
    box_mask,
    box_mask_tensor,
    crop_search_region,
    gaussian_weight,
    gaussian_weight_map,
    interpolation_prior,
    load_geometry_model,
    loss_reg,
    predict_geometry,
    save_geometry_model,
    search_region,
    to_gaussian,
    train_refine,
    weight_map,
    weighted_mask,
)
from vidanno.core.snippets import make_windows
from vidanno.core.training import TrainResult

TINY = RefineConfig(
    mask_height=16,
    mask_width=16,
    crop_size=32,
    feature_dim=8,
    conv_channels=[4, 8],
    hidden_size=8,
    num_layers=1,
)
LENGTH = 5
MAP_SIZE = 16
META = VideoMeta("clip", 31, 200, 100, 30)


def geometry_bank(seed: int = 0, distractors: bool = False, centred: bool = False) -> WindowBank:
    """Two windows of random frames with box cells.

    Masks are small uniform noise, or with `distractors` the box itself plus
    one bright cell in a corner outside every box. `centred` puts every box
    in the middle of the grid, with bright cells in two opposite corners.
    """
    rng = np.random.default_rng(seed)
    rows = 2 * LENGTH
    starts = np.full((rows, 2), 4) if centred else rng.integers(2, 6, (rows, 2))
    cells = torch.from_numpy(
        np.concatenate([starts[:, :1], starts[:, :1] + 8, starts[:, 1:], starts[:, 1:] + 8], 1)
    ).long()
    if distractors:
        masks = box_mask_tensor(cells, 16, 16, torch.float64)
        if centred:
            masks[:, 0, 0] = 0.8
            masks[:, 15, 15] = 0.8
        else:
            corners = torch.from_numpy(rng.integers(0, 2, rows) * 15)
            masks[torch.arange(rows), corners, corners] = 0.8
    else:
        masks = torch.from_numpy(0.1 * rng.random((rows, 16, 16)))
    return WindowBank(
        maps=torch.from_numpy(rng.random((rows, MAP_SIZE, MAP_SIZE)).astype(np.float32)),
        tails=torch.from_numpy(rng.random((rows, 5)).astype(np.float32)),
        targets=torch.zeros(rows),
        slots=torch.arange(rows).reshape(2, LENGTH),
        valid=torch.ones(2, LENGTH, dtype=torch.bool),
        backward=torch.tensor([False, True]),
        masks=masks,
        cells=cells,
    )


class TestGaussianWeight:
    """Tests for the Gaussian weight map."""

    def test_peak_at_mean(self) -> None:
        """Test the weight is exactly 1 at (mu1, mu2)."""
        theta = GaussianParams(0.3, 0.6, 0.1, 0.2, 4.0)
        assert gaussian_weight(theta, 0.3, 0.6) == 1.0

    def test_spot_value(self) -> None:
        """Test one sigma along x with alpha 1 gives exp(-1)."""
        theta = GaussianParams(0.5, 0.5, 0.1, 0.1, 1.0)
        assert gaussian_weight(theta, 0.6, 0.5) == pytest.approx(math.exp(-1), abs=1e-9)

    def test_zero_alpha(self) -> None:
        """Test alpha 0 makes the weight identically 1."""
        theta = GaussianParams(0.2, 0.9, 0.05, 0.3, 0.0)
        np.testing.assert_array_equal(gaussian_weight_map(theta, 7, 9), np.ones((7, 9)))

    def test_separable(self) -> None:
        """Test W(x, y) = w1(x) w2(y) on the grid."""
        theta = GaussianParams(0.4, 0.55, 0.2, 0.15, 2.5)
        grid = gaussian_weight_map(theta, 12, 10)
        row = grid[0] / grid[0].max()
        col = grid[:, 0] / grid[:, 0].max()
        np.testing.assert_allclose(grid, grid.max() * np.outer(col, row), rtol=0, atol=1e-12)

    def test_grid_matches_scalar(self) -> None:
        """Test the grid uses normalized cell centres."""
        theta = GaussianParams(0.4, 0.55, 0.2, 0.15, 2.5)
        grid = gaussian_weight_map(theta, 4, 8)
        assert grid[1, 3] == pytest.approx(gaussian_weight(theta, 3.5 / 8, 1.5 / 4), abs=1e-12)

    def test_values_in_unit_interval(self) -> None:
        """Test weights lie in (0, 1]."""
        theta = GaussianParams(0.1, 0.9, 0.3, 0.3, 1.0)
        grid = gaussian_weight_map(theta, 16, 16)
        assert np.all(grid > 0)
        assert np.all(grid <= 1)

    def test_monotone_decay(self) -> None:
        """Test weights fall strictly away from the mean along both axes."""
        theta = GaussianParams(0.4, 0.55, 0.2, 0.15, 2.5)
        grid = gaussian_weight_map(theta, 20, 20)
        centres = (np.arange(20) + 0.5) / 20
        for profile, mu in ((grid[7], theta.mu1), (grid[:, 12], theta.mu2)):
            assert np.all(np.diff(profile[centres > mu]) < 0)
            assert np.all(np.diff(profile[centres < mu]) > 0)

    def test_apply_weight_never_increases(self) -> None:
        """Test weighting never raises a mask entry."""
        rng = np.random.default_rng(5)
        for _ in range(50):
            initial = torch.from_numpy(rng.random((8, 12)))
            theta = GaussianParams.from_vector(
                [*rng.random(2), *rng.uniform(0.01, 1.0, 2), rng.uniform(0.0, 5.0)]
            )
            weight = torch.from_numpy(gaussian_weight_map(theta, 8, 12))
            assert torch.all(apply_weight(initial, weight) <= initial)

    def test_invalid_params(self) -> None:
        """Test out-of-range parameters are rejected."""
        with pytest.raises(ValueError):
            GaussianParams(0.5, 0.5, 0.0, 0.1, 1.0)
        with pytest.raises(ValueError):
            GaussianParams(0.5, 0.5, 0.1, 0.1, -1.0)
        with pytest.raises(ValueError, match="mu"):
            GaussianParams(1.2, 0.5, 0.1, 0.1, 1.0)

    def test_to_gaussian_ranges(self) -> None:
        """Test raw head outputs map into valid parameter ranges."""
        theta = to_gaussian(torch.randn(3, 4, 5) * 10)
        assert torch.all((theta[..., :2] >= 0) & (theta[..., :2] <= 1))
        assert torch.all(theta[..., 2:4] > 0)
        assert torch.all(theta[..., 4] >= 0)

    def test_apply_weight_shape_mismatch(self) -> None:
        """Test masks and weight maps must agree in shape."""
        with pytest.raises(ShapeError):
            apply_weight(torch.ones(4, 4), torch.ones(4, 5))

    def test_weighted_mask(self) -> None:
        """Test the weighted mask is the element-wise product."""
        theta = GaussianParams(0.5, 0.5, 0.2, 0.2, 1.0)
        initial = np.full((6, 6), 0.5)
        expected = 0.5 * gaussian_weight_map(theta, 6, 6)
        np.testing.assert_allclose(weighted_mask(initial, theta), expected)


class TestAggregate:
    """Tests for row/column aggregation operators."""

    def setup_method(self) -> None:
        self.mask = torch.tensor([[0.2, 0.3, 0.0], [0.6, 0.7, 0.4]], dtype=torch.float64)

    def test_rectified_accumulation(self) -> None:
        """Test sums are clipped at 1."""
        rows = aggregate(self.mask, Axis.HORIZONTAL)
        cols = aggregate(self.mask, Axis.VERTICAL)
        torch.testing.assert_close(rows, torch.tensor([0.5, 1.0], dtype=torch.float64))
        torch.testing.assert_close(cols, torch.tensor([0.8, 1.0, 0.4], dtype=torch.float64))

    def test_rectified_max(self) -> None:
        """Test the max(1, sum) variant floors profiles at 1."""
        rows = aggregate(self.mask, Axis.HORIZONTAL, AggregationOperator.RECTIFIED_MAX)
        torch.testing.assert_close(rows, torch.tensor([1.0, 1.7], dtype=torch.float64))

    def test_other_operators(self) -> None:
        """Test max-pooling, averaging and plain sums."""
        cols_max = aggregate(self.mask, Axis.VERTICAL, AggregationOperator.MAX_POOL)
        rows_avg = aggregate(self.mask, Axis.HORIZONTAL, AggregationOperator.AVERAGE)
        rows_sum = aggregate(self.mask, Axis.HORIZONTAL, AggregationOperator.SUM)
        torch.testing.assert_close(cols_max, torch.tensor([0.6, 0.7, 0.4], dtype=torch.float64))
        torch.testing.assert_close(rows_avg, torch.tensor([0.5 / 3, 1.7 / 3], dtype=torch.float64))
        torch.testing.assert_close(rows_sum, torch.tensor([0.5, 1.7], dtype=torch.float64))

    def test_clip_gradient(self) -> None:
        """Test gradient 1 below the clip and 0 above it."""
        mask = self.mask.clone().requires_grad_(True)
        aggregate(mask, Axis.HORIZONTAL).sum().backward()
        assert mask.grad is not None
        torch.testing.assert_close(mask.grad[0], torch.ones(3, dtype=torch.float64))
        torch.testing.assert_close(mask.grad[1], torch.zeros(3, dtype=torch.float64))


class TestRegions:
    """Tests for search regions and box masks."""

    def test_search_region_doubles_box(self) -> None:
        """Test the region is centred on the box with twice its size."""
        region = search_region(BBox(40.0, 20.0, 60.0, 50.0), META)
        assert (region.x0, region.y0, region.x1, region.y1) == (30.0, 5.0, 70.0, 65.0)
        assert region.center == (50.0, 35.0)

    def test_box_in_centre_of_grid(self) -> None:
        """Test the source box covers the central half of the grid."""
        box = BBox(40.0, 20.0, 60.0, 50.0)
        mask = box_mask(box, search_region(box, META), 16, 16)
        assert mask.cells == (4, 12, 4, 12)
        assert mask.to_array().sum() == 64

    def test_box_outside_region(self) -> None:
        """Test a box outside the region gives an empty mask."""
        region = search_region(BBox(40.0, 20.0, 60.0, 50.0), META)
        assert box_mask(BBox(150.0, 20.0, 170.0, 50.0), region, 16, 16).is_empty

    def test_box_mask_tensor(self) -> None:
        """Test tensor box masks match the array form."""
        box = BBox(40.0, 20.0, 60.0, 50.0)
        mask = box_mask(box, search_region(box, META), 16, 16)
        tensor = box_mask_tensor(torch.tensor(mask.cells), 16, 16, torch.float64)
        np.testing.assert_array_equal(tensor.numpy().astype(bool), mask.to_array())

    def test_crop_zero_outside_frame(self) -> None:
        """Test crops are zero-filled where the region leaves the frame."""
        image = np.ones((META.frame_height, META.frame_width), dtype=np.float32)
        region, crop = crop_search_region(image, BBox(0.0, 0.0, 20.0, 20.0), META, 32)
        assert crop.shape == (32, 32)
        assert crop[0, 0] == 0.0
        assert crop[-4, -4] == pytest.approx(1.0)
        assert region.x0 == -10.0

    def test_region_outside_frame(self) -> None:
        """Test a box whose region misses the frame is rejected."""
        with pytest.raises(RegionError):
            search_region(BBox(500.0, 500.0, 510.0, 510.0), META)

    def test_crop_round_trip(self) -> None:
        """Test grid corners of the source box map back to its frame corners within half a pixel."""
        box = BBox(10.0, 10.0, 30.0, 30.0)
        image = np.zeros((META.frame_height, META.frame_width), dtype=np.float32)
        region, _ = crop_search_region(image, box, META, 32)
        assert region.center == (20.0, 20.0)
        assert (region.width, region.height) == (40.0, 40.0)
        for rows, cols in ((16, 16), (64, 64), (12, 20)):
            corners: list[float] = []
            for x, y in ((box.x_min, box.y_min), (box.x_max, box.y_max)):
                col, row = region.to_grid(x, y, rows, cols)
                corners.extend(region.to_frame(round(col), round(row), rows, cols))
            assert corners == pytest.approx(list(box.as_tuple()), abs=0.5)

    def test_interpolation_prior_outside_region(self) -> None:
        """Test an interpolated centre beyond the region is moved onto its edge."""
        region = search_region(BBox(40.0, 20.0, 60.0, 50.0), META)
        far = BBox(150.0, 20.0, 170.0, 50.0)
        prior = interpolation_prior(5, (0, far), (10, far), region)
        assert prior.mu1 == 1.0
        assert prior.mu2 == pytest.approx(0.5)

    def test_interpolation_prior(self) -> None:
        """Test the prior centres on the box interpolated between anchors."""
        box = BBox(40.0, 20.0, 60.0, 50.0)
        region = search_region(box, META)
        prior = interpolation_prior(
            5, (0, BBox(30.0, 20.0, 50.0, 50.0)), (10, BBox(50.0, 20.0, 70.0, 50.0)), region
        )
        assert prior.mu1 == pytest.approx(0.5)
        assert prior.mu2 == pytest.approx(0.5)
        assert prior.sigma1 == pytest.approx(0.25)
        assert prior.sigma2 == pytest.approx(0.25)


class TestLossReg:
    """Tests for the box-supervised regression loss."""

    def test_perfect_mask(self) -> None:
        """Test a mask equal to its box mask has zero loss."""
        target = box_mask_tensor(torch.tensor([2, 6, 3, 9]), 10, 12, torch.float64)
        assert float(loss_reg(target.clone(), target)) == 0.0

    def test_value(self) -> None:
        """Test squared profile differences in both axes."""
        pred = torch.zeros(2, 2, dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        # rows (1, 0) and columns (1, 0) each differ by one
        assert float(loss_reg(pred, target)) == 2.0

    def test_valid_excludes_pairs(self) -> None:
        """Test invalid slots contribute nothing."""
        pred = torch.zeros(2, 2, 2, dtype=torch.float64)
        target = torch.ones(2, 2, 2, dtype=torch.float64)
        assert float(loss_reg(pred, target, torch.tensor([True, False]))) == 4.0

    def test_misaligned(self) -> None:
        """Test shape mismatches are rejected."""
        with pytest.raises(ValueError, match="Misaligned"):
            loss_reg(torch.zeros(3, 4), torch.zeros(4, 3))

    def test_gradient_wrt_gaussian(self) -> None:
        """Test gradients through weight map and clipped profiles at float64."""
        torch.manual_seed(3)
        initial = 0.1 * torch.rand(2, LENGTH, 16, 16, dtype=torch.float64)
        cells = torch.tensor([3, 11, 4, 12]).expand(2, LENGTH, 4)
        target = box_mask_tensor(cells, 16, 16, torch.float64)
        raw = torch.randn(2, LENGTH, 5, dtype=torch.float64, requires_grad=True)

        def loss(values: Tensor) -> Tensor:
            weighted = apply_weight(initial, weight_map(to_gaussian(values), 16, 16))
            return loss_reg(weighted, target)

        assert torch.autograd.gradcheck(loss, (raw,), eps=1e-6, atol=1e-7, rtol=1e-4)

    def test_gradient_wrt_parameters(self) -> None:
        """Test gradients of the bank loss in the parameters outside the convolution stages."""
        torch.manual_seed(0)
        model = GeometryModel(TINY, LENGTH).double()
        bank = geometry_bank().to(torch.float64)
        assert bank.masks is not None and bank.cells is not None
        index = torch.arange(2)
        maps, tails, backward, valid = bank.batch(index)
        initial = bank.masks[bank.slots]
        target = box_mask_tensor(bank.cells[bank.slots], 16, 16, torch.float64)

        def loss(params: dict[str, Tensor]) -> Tensor:
            theta = to_gaussian(functional_call(model, params, (maps, tails, backward)))
            weighted = apply_weight(initial, weight_map(theta, 16, 16))
            return loss_reg(weighted, target, valid)

        assert gradcheck_parameters(model, loss)


@pytest.fixture(scope="module")
def distractor_training() -> tuple[GeometryModel, TrainResult, WindowBank]:
    """Geometry model trained for 3000 steps on the distractor bank."""
    bank = geometry_bank(distractors=True)
    config = TrainConfig(learning_rate=1e-2, batch_size=2, epochs=3000, log_every=1000)
    model, result = train_refine(bank, TINY, config, LENGTH, seed=0)
    return model.eval(), result, bank


def decoded_iou(masks: Tensor, cells: Tensor) -> float:
    """Mean IoU, in grid cells, between boxes decoded from masks and their target cells."""
    overlaps = []
    for mask, (row0, row1, col0, col1) in zip(
        masks.reshape(-1, 16, 16), cells.reshape(-1, 4).tolist(), strict=True
    ):
        found = mask_box_indices(mask.numpy(), 0.5)
        if found is None:
            overlaps.append(0.0)
            continue
        x0, y0, x1, y1 = found
        decoded = BBox(float(x0), float(y0), float(x1 + 1), float(y1 + 1))
        overlaps.append(iou(decoded, BBox(float(col0), float(row0), float(col1), float(row1))))
    return float(np.mean(overlaps))


class TestGeometryModel:
    """Tests for the geometry model and its training."""

    def test_params_shape_and_range(self) -> None:
        """Test five valid Gaussian parameters per slot."""
        model = GeometryModel(TINY, LENGTH)
        maps, tails, backward, _ = geometry_bank().batch(torch.arange(2))
        theta = model.params(maps, tails, backward)
        assert theta.shape == (2, LENGTH, 5)
        GaussianParams.from_vector(theta[0, 0].detach().numpy())

    def test_bank_without_masks(self) -> None:
        """Test training needs masks in the bank."""
        bank = geometry_bank()
        bare = WindowBank(
            bank.maps, bank.tails, bank.targets, bank.slots, bank.valid, bank.backward
        )
        with pytest.raises(ValueError, match="no masks"):
            bank_loss(GeometryModel(TINY, LENGTH), bare, TINY.aggregation)

    def test_overfit_single_batch(
        self, distractor_training: tuple[GeometryModel, TrainResult, WindowBank]
    ) -> None:
        """Test the weighting learns to suppress off-box cells: loss falls by 90%."""
        _, result, _ = distractor_training
        losses = [loss for _, loss in result.curve]
        assert len(losses) == 3000
        assert min(losses[-100:]) <= 0.1 * losses[0]
        assert np.mean(losses[-100:]) < np.mean(losses[:100])

    def test_weighting_beats_bare_mask(
        self, distractor_training: tuple[GeometryModel, TrainResult, WindowBank]
    ) -> None:
        """Test boxes decoded from trained weighted masks overlap the targets better."""
        model, _, bank = distractor_training
        assert bank.masks is not None and bank.cells is not None
        maps, tails, backward, _ = bank.batch(torch.arange(2))
        with torch.no_grad():
            theta = model.params(maps, tails, backward).double()
        initial = bank.masks[bank.slots]
        weighted = apply_weight(initial, weight_map(theta, 16, 16))
        cells = bank.cells[bank.slots]
        assert decoded_iou(weighted, cells) > decoded_iou(initial, cells)

    def test_zeroed_head_constant(self) -> None:
        """Test a zeroed raw head predicts the same parameters for every slot."""
        model = GeometryModel(TINY, LENGTH)
        with torch.no_grad():
            for direction in Direction:
                model.predictor(direction).head.weight.zero_()
                model.predictor(direction).head.bias.zero_()
        frames = [
            make_frame(i, Direction.FORWARD, confidence=0.1 * i, map_size=MAP_SIZE)
            for i in range(1, 6)
        ]
        window = make_windows(frames, LENGTH, 2)[0]
        thetas = predict_geometry(window, META, model)
        assert len(thetas) == LENGTH
        assert all(theta == thetas[0] for theta in thetas)
        softplus_zero = math.log(2.0)
        assert thetas[0].as_vector() == pytest.approx(
            [0.5, 0.5, softplus_zero + 1e-3, softplus_zero + 1e-3, softplus_zero], rel=1e-6
        )

    def test_centred_targets(self) -> None:
        """Test training on centred boxes keeps the mean predicted centre near the middle."""
        bank = geometry_bank(distractors=True, centred=True)
        config = TrainConfig(learning_rate=1e-2, batch_size=2, epochs=500)
        model, _ = train_refine(bank, TINY, config, LENGTH, seed=0)
        maps, tails, backward, _ = bank.batch(torch.arange(2))
        model.eval()
        with torch.no_grad():
            mu = model.params(maps, tails, backward)[..., :2].mean(dim=(0, 1))
        assert torch.all((mu - 0.5).abs() < 0.1)

    def test_zero_learning_rate(self) -> None:
        """Test a zero learning rate leaves the loss unchanged."""
        bank = geometry_bank()
        config = TrainConfig(learning_rate=0.0, batch_size=2, epochs=5)
        _, result = train_refine(bank, TINY, config, LENGTH, seed=0)
        losses = [loss for _, loss in result.curve]
        assert losses == pytest.approx([losses[0]] * 5, rel=1e-6)

    def test_checkpoint_round_trip(self, tmp_path: Path) -> None:
        """Test a saved model predicts identically after loading."""
        model = GeometryModel(TINY, LENGTH)
        model.eval()
        path = tmp_path / "geometry.pt"
        save_geometry_model(model, path)
        loaded = load_geometry_model(path)
        maps, tails, backward, _ = geometry_bank().batch(torch.arange(2))
        torch.testing.assert_close(
            loaded.params(maps, tails, backward), model.params(maps, tails, backward)
        )

    def test_missing_checkpoint(self, tmp_path: Path) -> None:
        """Test a missing checkpoint is reported."""
        with pytest.raises(MissingArtifactError):
            load_geometry_model(tmp_path / "geometry.pt")
