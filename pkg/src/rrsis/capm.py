"""Context-aware prompt modulation.

Learnable prompt vectors attend over globally pooled multi-scale visual
context; the modulated prompts are appended to the expression tokens before
text encoding so every token feature can see the image context.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .encoders import TextEncoder
from .errors import NumericalError
from .types import FeaturePyramid, TokenFeatures


class PromptBank(nn.Module):
    """Prompt matrix ``P`` plus the context and attention projections."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, ctot = config.text_dim, config.context_dim
        self.prompts = nn.Parameter(torch.randn(config.num_prompts, d) * 0.02)
        self.context_proj = nn.ModuleList([nn.Linear(c, ctot) for c in config.channels])
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(ctot, d, bias=False)
        self.w_v = nn.Linear(ctot, d, bias=False)


def pool_context(pyramid: FeaturePyramid, bank: PromptBank) -> torch.Tensor:
    """Multi-scale context embedding ``(B, 4 s^2, C_total)``.

    Each level is adaptively average-pooled to ``s x s`` and projected to
    ``C_total`` channels; the four levels are stacked along the row axis.
    With ``capm_mode="concat"`` the pooled levels are instead concatenated
    channel-wise, giving ``(B, s^2, C_total)``.
    """
    s = bank.config.pool_size
    pooled = []
    for level in pyramid:
        p = F.adaptive_avg_pool2d(level.permute(0, 3, 1, 2), (s, s))
        pooled.append(p.permute(0, 2, 3, 1).reshape(level.shape[0], s * s, level.shape[3]))
    if bank.config.capm_mode == "concat":
        return torch.cat(pooled, dim=2)
    return torch.cat([proj(p) for proj, p in zip(bank.context_proj, pooled)], dim=1)


def modulate_prompts(context: torch.Tensor, bank: PromptBank, return_weights: bool = False):
    """``P_v = softmax(P w_q (V_e w_k)^T) V_e w_v`` for every batch item."""
    q = bank.w_q(bank.prompts)  # (N_p, D_l)
    k = bank.w_k(context)  # (B, R, D_l)
    v = bank.w_v(context)
    scores = torch.einsum("pd,brd->bpr", q, k)
    if bank.config.capm_scale:
        scores = scores / math.sqrt(bank.config.text_dim)
    if not bool(torch.isfinite(scores).all()):
        raise NumericalError("capm/scores")
    weights = scores.softmax(dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def encode_with_prompts(
    tokens: Sequence[Sequence[int]], pyramid: FeaturePyramid, bank: PromptBank, encoder: TextEncoder
) -> TokenFeatures:
    """Encode tokens jointly with the context-modulated prompts.

    When ``use_capm`` is off the raw prompt matrix is appended instead.
    """
    if bank.config.use_capm:
        prompts = modulate_prompts(pool_context(pyramid, bank), bank)
    else:
        prompts = bank.prompts[None].expand(len(tokens), -1, -1)
    return encoder(tokens, prompts)
