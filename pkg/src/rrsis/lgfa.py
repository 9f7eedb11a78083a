"""Language-guided feature aggregation.

Each pyramid level is reweighted by a gated language attention map; the four
stages' attention maps are then compared on the coarsest grid, and the cells
where consecutive scales disagree most are refined by self-attention across
the four scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeError
from .layers import MultiHeadAttention, check_finite, resize
from .types import FeaturePyramid, TokenFeatures


class StageFusion(nn.Module):
    """Projections for one pyramid level.

    ``w_q`` maps the level's channels onto the token axis, ``w_k``/``w_v``
    act on token features, ``gate`` is the 1x1 convolution ahead of the GELU
    and ``reweight`` maps the gated activation back to the level's channels.
    """

    def __init__(self, channels: int, seq_len: int, text_dim: int):
        super().__init__()
        self.w_q = nn.Linear(channels, seq_len)
        self.w_k = nn.Linear(text_dim, text_dim)
        self.w_v = nn.Linear(text_dim, text_dim)
        self.gate = nn.Linear(seq_len, seq_len)
        self.reweight = nn.Linear(seq_len, channels)
        nn.init.ones_(self.reweight.bias)


def fuse_stage(level: torch.Tensor, text: TokenFeatures, params: StageFusion, stage: int = 0, mask_padding=False):
    """Gated cross-modal reweighting of one level.

    Returns ``(fused, scores)`` where ``fused`` has the shape of ``level``
    and ``scores`` is ``(B, H_i * W_i, D_l)``.
    """
    b, h, w, c = level.shape
    length = text.length
    if params.w_q.out_features != length:
        raise ShapeError(f"stage {stage + 1} expects {params.w_q.out_features} tokens, got {length}")
    where = f"lgfa/stage{stage + 1}"
    vq = params.w_q(level).reshape(b, h * w, length)
    lk, lv = params.w_k(text.values), params.w_v(text.values)
    if mask_padding:
        keep = text.pad_mask[..., None].to(lk.dtype)
        lk, lv = lk * keep, lv * keep
    scores = check_finite(vq @ lk, where)
    attn = (scores / math.sqrt(length)).softmax(dim=-1) @ lv.transpose(1, 2)
    gated = F.gelu(params.gate(attn.reshape(b, h, w, length)))
    fused = params.reweight(gated) * level
    return check_finite(fused, where), scores


def stage_saliency(scores: torch.Tensor, size: tuple[int, int], target: tuple[int, int], seq_len: int) -> torch.Tensor:
    """Spatial saliency map of one stage on the ``target`` grid.

    The score matrix is bilinearly resampled to ``target``, each text-feature
    channel is softmax-normalised over the grid cells, and the channels are
    averaged. The result is ``(B, H_4, W_4)`` and sums to one per sample.
    """
    b = scores.shape[0]
    grid = resize(scores.reshape(b, size[0], size[1], -1), target)
    probs = (grid.reshape(b, target[0] * target[1], -1) / math.sqrt(seq_len)).softmax(dim=1)
    return probs.mean(dim=-1).reshape(b, *target)


def attention_deficit(saliency: list[torch.Tensor]) -> torch.Tensor:
    """Sum of absolute differences between consecutive stages' saliency maps."""
    return sum((saliency[i] - saliency[i + 1]).abs() for i in range(len(saliency) - 1))


def deficit_map(scores: list[torch.Tensor], config: ModelConfig, seq_len: int | None = None):
    """Deficit map ``(B, H_4, W_4)`` and the per-stage saliency maps."""
    if len(scores) != 4:
        raise ShapeError(f"need four score matrices, got {len(scores)}")
    sizes = config.level_sizes
    seq_len = seq_len or config.seq_len
    saliency = [stage_saliency(s, sizes[i], sizes[3], seq_len) for i, s in enumerate(scores)]
    return attention_deficit(saliency), saliency


def topk_regions(deficit: torch.Tensor, k: int) -> list[tuple[int, int]]:
    """The ``k`` cells with the largest deficit; ties go to the lower row-major index."""
    h, w = deficit.shape
    if not 0 <= k <= h * w:
        raise ValueError(f"K={k} outside [0, {h * w}]")
    order = torch.sort(-deficit.detach().reshape(-1), stable=True).indices[:k]
    return [(int(i) // w, int(i) % w) for i in order]


def region_mask(deficit: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean ``(B, H_4, W_4)`` marking each sample's top-``k`` cells."""
    mask = torch.zeros(deficit.shape, dtype=torch.bool, device=deficit.device)
    for n in range(deficit.shape[0]):
        for r, c in topk_regions(deficit[n], k):
            mask[n, r, c] = True
    return mask


class Compensation(nn.Module):
    """Cross-scale refinement of selected cells."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        cv = config.comp_dim
        self.proj_in = nn.ModuleList([nn.Linear(c, cv) for c in config.channels])
        self.proj_out = nn.ModuleList([nn.Linear(cv, c) for c in config.channels])
        self.norm = nn.LayerNorm(cv)
        self.msa = MultiHeadAttention(cv, cv, cv, heads=config.comp_heads)


def compensate_regions(fused: list[torch.Tensor], regions: torch.Tensor, params: Compensation) -> list[torch.Tensor]:
    """Refine the cells flagged in ``regions`` (``(B, H_4, W_4)`` bool).

    For every cell the four levels are resampled to the coarsest grid,
    projected to a common width and treated as a four-token sequence that
    goes through ``MSA(LN(x)) + x``. The back-projected change is added to
    each level over the cell's aligned block; unflagged cells are untouched.
    """
    if not bool(regions.any()):
        return list(fused)
    b, h4, w4, _ = fused[3].shape
    if tuple(regions.shape) != (b, h4, w4):
        raise ShapeError(f"regions must be {(b, h4, w4)}, got {tuple(regions.shape)}")
    gathered = [resize(v, (h4, w4)) for v in fused]
    tokens = torch.stack([p(g) for p, g in zip(params.proj_in, gathered)], dim=3)
    seq = tokens.reshape(b * h4 * w4, 4, -1)
    refined = params.msa(params.norm(seq), params.norm(seq), where="lgfa/compensation")[0] + seq
    refined = refined.reshape(b, h4, w4, 4, -1)
    keep = regions[..., None]
    out = []
    for i, (v, g) in enumerate(zip(fused, gathered)):
        delta = torch.where(keep, params.proj_out[i](refined[..., i, :]) - g, torch.zeros_like(g))
        factor = v.shape[1] // h4
        delta = delta.repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2)
        out.append(v + delta)
    return out


@dataclass
class AggregationOutput:
    fused: list[torch.Tensor]
    scores: list[torch.Tensor]
    saliency: list[torch.Tensor]
    deficit: torch.Tensor
    regions: torch.Tensor


class LanguageGuidedAggregation(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.stages = nn.ModuleList([StageFusion(c, config.seq_len, config.text_dim) for c in config.channels])
        self.compensation = Compensation(config)

    def forward(self, pyramid: FeaturePyramid, text: TokenFeatures) -> AggregationOutput:
        fused, scores = [], []
        for i, (level, params) in enumerate(zip(pyramid, self.stages)):
            f, s = fuse_stage(level, text, params, stage=i, mask_padding=self.config.mask_padding)
            fused.append(f)
            scores.append(s)
        deficit, saliency = deficit_map(scores, self.config, seq_len=text.length)
        regions = region_mask(deficit, self.config.num_regions)
        fused = compensate_regions(fused, regions, self.compensation)
        return AggregationOutput(fused, scores, saliency, deficit, regions)
