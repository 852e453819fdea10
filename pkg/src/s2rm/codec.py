"""Encoders and decoders for 11x11 binary crops."""
from __future__ import annotations

import torch
from torch import nn

from .errors import DimensionError

CROP = 11
CROP_PIXELS = CROP * CROP


def _seeded_linear(n_in, n_out, gen):
    layer = nn.Linear(n_in, n_out)
    bound = 1.0 / n_in ** 0.5
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)
    return layer


class CropEncoder(nn.Module):
    """MLP ``flatten(crop) [+ position embedding] -> hidden -> width``.

    With ``position_dim > 0`` the encoder expects the position embedding as a
    second argument and concatenates it to the flattened crop (baseline
    variant).
    """

    def __init__(self, width: int = 128, hidden: int = 256, position_dim: int = 0, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.width = width
        self.position_dim = position_dim
        self.fc1 = _seeded_linear(CROP_PIXELS + position_dim, hidden, gen)
        self.fc2 = _seeded_linear(hidden, width, gen)

    def forward(self, crops: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        if tuple(crops.shape[-2:]) != (CROP, CROP):
            raise DimensionError(f"crops must be {CROP}x{CROP}, got {tuple(crops.shape[-2:])}")
        x = crops.reshape(*crops.shape[:-2], CROP_PIXELS)
        if self.position_dim:
            if positions is None or positions.shape[-1] != self.position_dim:
                raise DimensionError(f"encoder expects position embeddings of width {self.position_dim}")
            x = torch.cat((x, positions), dim=-1)
        return self.fc2(torch.relu(self.fc1(x)))


class CropDecoder(nn.Module):
    """MLP ``representation -> hidden -> 121 logits``."""

    def __init__(self, in_dim: int, hidden: int = 256, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.in_dim = in_dim
        self.fc1 = _seeded_linear(in_dim, hidden, gen)
        self.fc2 = _seeded_linear(hidden, CROP_PIXELS, gen)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.in_dim:
            raise DimensionError(f"decoder expects width {self.in_dim}, got {z.shape[-1]}")
        return self.fc2(torch.relu(self.fc1(z)))


def zero_(module: nn.Module) -> nn.Module:
    """Zero every parameter of ``module`` in place; returns it."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
