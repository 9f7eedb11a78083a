"""Containers passed between the encoder, fusion and decoder stages.

Feature tensors carry a leading batch axis and are channels-last:
a pyramid level is ``(B, H_i, W_i, C_i)`` and token features are
``(B, length, D_l)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ShapeError


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple[torch.Tensor, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) != 4:
            raise ShapeError(f"a pyramid has exactly four levels, got {len(levels)}")
        for i, lvl in enumerate(levels):
            if lvl.dim() != 4:
                raise ShapeError(f"level {i + 1} must be (B, H, W, C), got {tuple(lvl.shape)}")
        for i in range(1, 4):
            prev, cur = levels[i - 1].shape, levels[i].shape
            if cur[0] != prev[0] or (cur[1] * 2, cur[2] * 2) != (prev[1], prev[2]):
                raise ShapeError(f"level {i + 1} {tuple(cur)} does not halve level {i} {tuple(prev)}")

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        """Per-level ``(H_i, W_i, C_i)`` without the batch axis."""
        return [tuple(lvl.shape[1:]) for lvl in self.levels]

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(lvl).all()) for lvl in self.levels)


@dataclass(frozen=True)
class TokenFeatures:
    values: torch.Tensor
    pad_mask: torch.Tensor  # True marks a real token
    cls_index: int = 0

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeError(f"token values must be (B, length, D), got {tuple(self.values.shape)}")
        if tuple(self.pad_mask.shape) != tuple(self.values.shape[:2]):
            raise ShapeError("pad_mask must match the (B, length) axes of values")
        if not bool(self.pad_mask[:, self.cls_index].all()):
            raise ShapeError("the summary position must be a real token")

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def replace_values(self, values: torch.Tensor) -> "TokenFeatures":
        return TokenFeatures(values, self.pad_mask, self.cls_index)


@dataclass
class Triplet:
    """One image / expression / mask sample."""

    image: np.ndarray  # (H, W, 3) float in [0, 1]
    expression: tuple[int, ...]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    text: str = ""
    category: str = ""
    source_id: str = ""
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ShapeError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")


def stack_images(triplets: Sequence[Triplet], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([t.image for t in triplets]), dtype=dtype)


def stack_masks(triplets: Sequence[Triplet], dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([t.mask for t in triplets]), dtype=dtype)
