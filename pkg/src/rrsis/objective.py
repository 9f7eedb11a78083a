"""Cross-entropy + Dice training objective on full-resolution logits."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class LossReport:
    total: torch.Tensor
    ce_term: torch.Tensor
    dice_term: torch.Tensor
    lam: float

    def as_floats(self) -> dict[str, float]:
        return {"total": self.total.item(), "ce": self.ce_term.item(), "dice": self.dice_term.item()}


def _check(logits, target):
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy of ``sigmoid(logits)``."""
    _check(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice loss ``1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)``.

    A leading batch axis is reduced per sample and averaged.
    """
    _check(logits, target)
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = torch.sigmoid(logits)
    y = target.to(logits.dtype)
    dims = tuple(range(1, p.dim())) if p.dim() > 2 else tuple(range(p.dim()))
    inter = (p * y).sum(dims)
    score = (2.0 * inter + eps) / (p.sum(dims) + y.sum(dims) + eps)
    return (1.0 - score).mean()


def combined_loss(logits: torch.Tensor, target: torch.Tensor, lam: float = 0.9, eps: float = 1.0) -> LossReport:
    ce = ce_loss(logits, target)
    dice = dice_loss(logits, target, eps)
    return LossReport(lam * ce + (1.0 - lam) * dice, ce, dice, lam)
