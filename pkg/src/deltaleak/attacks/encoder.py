"""Shared posterior-difference encoder: delta -> 64-dim latent code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import UsageError
from ..victims import DeltaVector

LATENT_WIDTH = 64


@dataclass
class LatentCode:
    """Encoder output feeding each attack's decoder."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (LATENT_WIDTH,):
            raise UsageError(f"latent code must have width {LATENT_WIDTH}")


class DeltaEncoder(nn.Module):
    """Two fully connected layers (input -> 128 -> 64), LeakyReLU activations,
    dropout on both layers."""

    def __init__(self, input_width: int, dropout: float = 0.5):
        super().__init__()
        self.input_width = int(input_width)
        self.fc1 = nn.Linear(self.input_width, 128)
        self.fc2 = nn.Linear(128, LATENT_WIDTH)
        self.act = nn.LeakyReLU(0.2)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.drop(self.act(self.fc1(x)))
        return self.drop(self.act(self.fc2(x)))


def _as_input(encoder: DeltaEncoder, delta: DeltaVector | np.ndarray) -> torch.Tensor:
    values = delta.values if isinstance(delta, DeltaVector) else np.asarray(delta, np.float32)
    if values.shape != (encoder.input_width,):
        raise UsageError(
            f"delta width {values.shape} does not match encoder input {encoder.input_width}")
    return torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32)).unsqueeze(0)


def encode(encoder: DeltaEncoder, delta: DeltaVector | np.ndarray) -> LatentCode:
    """Run the encoder in inference mode (dropout disabled) on one delta."""
    encoder.eval()
    with torch.no_grad():
        mu = encoder(_as_input(encoder, delta))[0].numpy()
    return LatentCode(values=mu)
