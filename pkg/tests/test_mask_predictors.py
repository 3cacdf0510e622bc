"""Tests for initial mask predictors."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from vidanno.config.settings import MaskPredictorKind, RefineConfig, TrainConfig
from vidanno.core.annotation_store import Direction
from vidanno.core.dataset import SequenceData
from vidanno.core.errors import MissingArtifactError, ShapeError
from vidanno.core.mask_predictors import (
    ConvMaskPredictor,
    FrameMasker,
    SimilarityMaskOracle,
    build_mask_predictor,
    load_mask_predictor,
    mask_training_samples,
    origin_anchor,
    save_mask_predictor,
    stack_inputs,
    train_mask_predictor,
)

TINY = RefineConfig(mask_height=16, mask_width=16, crop_size=32)


class TestSimilarityOracle:
    """Tests for the appearance-similarity oracle."""

    def test_matching_intensity(self) -> None:
        """Test crop pixels at the template's level score 1."""
        oracle = SimilarityMaskOracle(8, 6)
        mask = oracle.predict(np.full((10, 10), 0.9), np.full((32, 32), 0.9))
        assert mask.shape == (8, 6)
        np.testing.assert_allclose(mask, 1.0, atol=1e-6)

    def test_background_suppressed(self) -> None:
        """Test pixels far from the template level score near 0."""
        oracle = SimilarityMaskOracle(8, 8)
        mask = oracle.predict(np.full((10, 10), 0.92), np.full((32, 32), 0.4))
        assert mask.max() < 1e-6

    def test_target_found(self, noiseless_sequence: SequenceData) -> None:
        """Test the oracle mask is bright on the target's cells."""
        masker = FrameMasker(SimilarityMaskOracle(16, 16), TINY)
        frame = noiseless_sequence.forward[4]
        region, mask = masker.initial_mask(noiseless_sequence, frame)
        row0, row1, col0, col1 = masker.target_cells(noiseless_sequence, frame, region)
        inside = mask[row0 + 1 : row1 - 1, col0 + 1 : col1 - 1]
        assert inside.mean() > 0.8
        outside = np.ones_like(mask, dtype=bool)
        outside[row0:row1, col0:col1] = False
        assert mask[outside].mean() < 0.5


class TestConvPredictor:
    """Tests for the learned mask predictor."""

    def test_stack_inputs(self) -> None:
        """Test the crop and the resized template are stacked."""
        stacked = stack_inputs(np.zeros((7, 9), np.float32), np.ones((32, 32), np.float32), 32)
        assert stacked.shape == (2, 32, 32)
        assert stacked[0].min() == 1.0

    def test_stack_inputs_wrong_crop(self) -> None:
        """Test a crop of the wrong size is rejected."""
        with pytest.raises(ShapeError):
            stack_inputs(np.zeros((8, 8)), np.zeros((16, 16)), 32)

    def test_output_shape_and_range(self) -> None:
        """Test masks have the grid shape and sigmoid range."""
        model = ConvMaskPredictor(16, 12, crop_size=32)
        masks = model(torch.rand(3, 2, 32, 32))
        assert masks.shape == (3, 16, 12)
        assert torch.all((masks > 0) & (masks < 1))
        single = model.predict(np.zeros((8, 8), np.float32), np.zeros((32, 32), np.float32))
        assert single.shape == (16, 12)
        assert single.dtype == np.float64

    def test_checkpoint_round_trip(self, tmp_path: Path) -> None:
        """Test a saved predictor reproduces its masks."""
        model = ConvMaskPredictor(16, 16, crop_size=32)
        path = tmp_path / "mask.pt"
        save_mask_predictor(model, path)
        loaded = load_mask_predictor(path)
        inputs = torch.rand(2, 2, 32, 32)
        model.eval()
        with torch.no_grad():
            torch.testing.assert_close(loaded(inputs), model(inputs))

    def test_build_oracle(self) -> None:
        """Test the oracle needs no checkpoint."""
        predictor = build_mask_predictor(TINY)
        assert isinstance(predictor, SimilarityMaskOracle)
        assert (predictor.rows, predictor.cols) == (16, 16)

    def test_build_conv_without_checkpoint(self) -> None:
        """Test the conv predictor requires a checkpoint."""
        config = TINY.model_copy(update={"mask_predictor": MaskPredictorKind.CONV})
        with pytest.raises(MissingArtifactError, match="mask.pt"):
            build_mask_predictor(config)

    def test_build_conv_grid_mismatch(self, tmp_path: Path) -> None:
        """Test a checkpoint emitting another grid size is rejected."""
        path = tmp_path / "mask.pt"
        save_mask_predictor(ConvMaskPredictor(8, 8, crop_size=32), path)
        config = TINY.model_copy(update={"mask_predictor": MaskPredictorKind.CONV})
        with pytest.raises(ShapeError):
            build_mask_predictor(config, path)


class TestFrameMasker:
    """Tests for per-frame regions, templates and training samples."""

    def test_origin_anchor(self, tiny_sequence: SequenceData) -> None:
        """Test forward frames start from the span start, backward from its end."""
        by_idx = {d: {f.frame_idx: f for f in tiny_sequence.tracked(d)} for d in Direction}
        assert origin_anchor(tiny_sequence, by_idx[Direction.FORWARD][10])[0] == 0
        assert origin_anchor(tiny_sequence, by_idx[Direction.FORWARD][15])[0] == 10
        assert origin_anchor(tiny_sequence, by_idx[Direction.BACKWARD][10])[0] == 20
        assert origin_anchor(tiny_sequence, by_idx[Direction.BACKWARD][0])[0] == 10

    def test_template_cached(self, tiny_sequence: SequenceData) -> None:
        """Test frames of one snippet direction share a template."""
        masker = FrameMasker(SimilarityMaskOracle(16, 16), TINY)
        first = masker.template(tiny_sequence, tiny_sequence.forward[1])
        second = masker.template(tiny_sequence, tiny_sequence.forward[2])
        assert first is second
        assert first.shape == (16, 16)

    def test_initial_mask_shape(self, tiny_sequence: SequenceData) -> None:
        """Test initial masks have the configured grid shape."""
        masker = FrameMasker(SimilarityMaskOracle(16, 16), TINY)
        _, mask = masker.initial_mask(tiny_sequence, tiny_sequence.backward[7])
        assert mask.shape == (16, 16)

    def test_grid_mismatch(self, tiny_sequence: SequenceData) -> None:
        """Test a predictor emitting another grid size is rejected."""
        masker = FrameMasker(SimilarityMaskOracle(8, 8), TINY)
        with pytest.raises(ShapeError):
            masker.initial_mask(tiny_sequence, tiny_sequence.forward[0])

    def test_no_predictor(self, tiny_sequence: SequenceData) -> None:
        """Test asking for a mask without a predictor is an error."""
        with pytest.raises(ValueError, match="No mask predictor"):
            FrameMasker(None, TINY).initial_mask(tiny_sequence, tiny_sequence.forward[0])

    def test_missing_frames(self, tiny_sequence: SequenceData) -> None:
        """Test sequences without frame images cannot be masked."""
        blind = replace(tiny_sequence, frames=None)
        masker = FrameMasker(SimilarityMaskOracle(16, 16), TINY)
        with pytest.raises(MissingArtifactError):
            masker.initial_mask(blind, blind.forward[0])

    def test_training_samples(self, noiseless_sequence: SequenceData) -> None:
        """Test sampled crops and cells are deterministic for a seed."""
        masker = FrameMasker(None, TINY)
        inputs, cells = mask_training_samples([noiseless_sequence], masker, 6, seed=4)
        assert inputs.shape == (6, 2, 32, 32)
        assert cells.shape == (6, 4)
        assert torch.all(cells[:, 0] < cells[:, 1])
        again, _ = mask_training_samples([noiseless_sequence], masker, 6, seed=4)
        torch.testing.assert_close(again, inputs)

    def test_train_mask_predictor(self, noiseless_sequence: SequenceData) -> None:
        """Test a short training run yields a predictor of the configured grid."""
        masker = FrameMasker(None, TINY)
        inputs, cells = mask_training_samples([noiseless_sequence], masker, 8)
        config = TrainConfig(batch_size=4, epochs=1, max_steps=2)
        model, result = train_mask_predictor(inputs, cells, TINY, config)
        assert result.steps == 2
        assert (model.rows, model.cols) == (16, 16)

    def test_train_empty(self) -> None:
        """Test training on no crops is an error."""
        with pytest.raises(ValueError, match="empty"):
            train_mask_predictor(
                torch.zeros(0, 2, 32, 32), torch.zeros(0, 4, dtype=torch.long), TINY, TrainConfig()
            )
