"""Network building blocks shared by the assessment and geometry models.

Both models read a window of tracking results as a sequence of c+5 frame
features (response-map encoding, normalized box, confidence) and run one
sequence predictor per tracking direction.
"""

from __future__ import annotations

from collections.abc import Sequence

import torch
from torch import Tensor, nn

from vidanno.core.annotation_store import Direction

FEATURE_TAIL = 5  # x_min/W, y_min/H, x_max/W, y_max/H, confidence


class ResponseEncoder(nn.Module):
    """Stride-2 convolution stages, global average pooling, linear projection."""

    def __init__(self, feature_dim: int, channels: Sequence[int] = (16, 32, 32)) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        in_channels = 1
        for out_channels in channels:
            layers += [
                nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1),
                nn.ReLU(),
            ]
            in_channels = out_channels
        self.conv = nn.Sequential(*layers)
        self.project = nn.Linear(in_channels, feature_dim)

    def forward(self, maps: Tensor) -> Tensor:
        """(N, r, r) response maps -> (N, c) features."""
        x = self.conv(maps.unsqueeze(1))
        return self.project(x.mean(dim=(2, 3)))


class SequencePredictor(nn.Module):
    """Stacked LSTM (or per-slot fully connected) trunk with a linear head."""

    def __init__(
        self,
        input_dim: int,
        hidden_size: int,
        num_layers: int,
        out_dim: int,
        sequential: bool = True,
    ) -> None:
        super().__init__()
        self.sequential = sequential
        self.lstm: nn.LSTM | None = None
        self.mlp: nn.Sequential | None = None
        if sequential:
            self.lstm = nn.LSTM(input_dim, hidden_size, num_layers=num_layers, batch_first=True)
        else:
            layers: list[nn.Module] = []
            width = input_dim
            for _ in range(num_layers):
                layers += [nn.Linear(width, hidden_size), nn.ReLU()]
                width = hidden_size
            self.mlp = nn.Sequential(*layers)
        self.head = nn.Linear(hidden_size, out_dim)

    def forward(self, features: Tensor) -> Tensor:
        """(B, L, D) features -> (B, L, out_dim), processed in slot order."""
        if self.lstm is not None:
            hidden, _ = self.lstm(features)
        else:
            assert self.mlp is not None
            hidden = self.mlp(features)
        return self.head(hidden)


class DirectionalSequenceModel(nn.Module):
    """Response encoder plus one sequence predictor per tracking direction.

    With `shared_predictor` a single predictor serves both directions.
    """

    def __init__(
        self,
        feature_dim: int,
        conv_channels: Sequence[int],
        hidden_size: int,
        num_layers: int,
        out_dim: int,
        window_length: int,
        sequential: bool = True,
        shared_predictor: bool = False,
    ) -> None:
        super().__init__()
        self.feature_dim = feature_dim
        self.window_length = window_length
        self.out_dim = out_dim
        self.shared_predictor = shared_predictor
        self.encoder = ResponseEncoder(feature_dim, conv_channels)

        input_dim = feature_dim + FEATURE_TAIL
        keys = ["shared"] if shared_predictor else [d.value for d in Direction]
        self.predictors = nn.ModuleDict(
            {
                key: SequencePredictor(input_dim, hidden_size, num_layers, out_dim, sequential)
                for key in keys
            }
        )

    def predictor(self, direction: Direction) -> SequencePredictor:
        key = "shared" if self.shared_predictor else direction.value
        predictor = self.predictors[key]
        assert isinstance(predictor, SequencePredictor)
        return predictor

    def features(self, maps: Tensor, tails: Tensor) -> Tensor:
        """(B, L, r, r) maps and (B, L, 5) tails -> (B, L, c+5) frame features."""
        batch, length = maps.shape[:2]
        encoded = self.encoder(maps.reshape(batch * length, *maps.shape[2:]))
        return torch.cat([encoded.reshape(batch, length, -1), tails], dim=-1)

    def forward(self, maps: Tensor, tails: Tensor, backward: Tensor) -> Tensor:
        """Run each window through its direction's predictor.

        Args:
            maps: (B, L, r, r) response maps
            tails: (B, L, 5) normalized boxes and confidences
            backward: (B,) bool, True for backward windows

        Returns:
            (B, L, out_dim) raw outputs
        """
        if maps.shape[1] != self.window_length:
            raise ValueError(
                f"Window length {maps.shape[1]} does not match model length {self.window_length}"
            )
        features = self.features(maps, tails)
        out = features.new_zeros(features.shape[0], features.shape[1], self.out_dim)
        for direction, selector in (
            (Direction.FORWARD, ~backward),
            (Direction.BACKWARD, backward),
        ):
            if bool(selector.any()):
                out[selector] = self.predictor(direction)(features[selector])
        return out
