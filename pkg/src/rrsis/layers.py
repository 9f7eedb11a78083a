"""Small building blocks shared by the encoders, fusion and decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericalError(where)
    return x


def resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resampling of a channels-last map ``(B, H, W, C)``."""
    if tuple(x.shape[1:3]) == tuple(size):
        return x
    y = F.interpolate(x.permute(0, 3, 1, 2), size=size, mode="bilinear", align_corners=False)
    return y.permute(0, 2, 3, 1)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value widths.

    ``key_mask`` is ``(B, Lk)`` with True for keys that may be attended.
    Returns the output and the per-head weights ``(B, heads, Lq, Lk)``.
    """

    def __init__(self, query_dim, kv_dim, dim, heads=1, out_dim=None):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(query_dim, dim)
        self.k = nn.Linear(kv_dim, dim, bias=False)  # a key bias cancels in the softmax
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, out_dim or query_dim)

    def forward(self, query, key_value, key_mask=None, where="attention"):
        b, lq, _ = query.shape
        lk = key_value.shape[1]
        q = self.q(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(key_value).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(key_value).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        check_finite(scores.masked_fill(torch.isneginf(scores), 0.0), where)
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, lq, self.heads * self.head_dim)
        return self.o(out), weights


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Residual(nn.Module):
    """Wraps a sub-layer with a residual connection and layer norm.

    ``norm="post"`` computes ``LN(x + f(x))``; ``norm="pre"`` computes
    ``x + f(LN(x))``.
    """

    def __init__(self, dim, norm="post"):
        super().__init__()
        self.norm_mode = norm
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, fn):
        if self.norm_mode == "pre":
            return x + fn(self.norm(x))
        return self.norm(x + fn(x))


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table
