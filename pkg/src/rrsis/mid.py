"""Mutual-interaction decoder.

Language tokens first gather visual evidence (cross-attention, self-attention,
FFN); the visual tokens then read the refined language features and are
refined by multiscale deformable attention. The mask logits are the per-pixel
dot product between a fused mask embedding and the summary token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeError
from .layers import FeedForward, MultiHeadAttention, Residual, check_finite, resize
from .types import TokenFeatures


@dataclass
class DecoderState:
    visual: torch.Tensor  # (B, N, D)
    level_sizes: list[tuple[int, int]]
    text: torch.Tensor  # (B, length, D)
    pad_mask: torch.Tensor
    cls_index: int = 0
    text_hat: torch.Tensor | None = None
    visual_hat: torch.Tensor | None = None
    attention: dict = field(default_factory=dict)

    @property
    def level_ranges(self) -> list[tuple[int, int]]:
        ranges, start = [], 0
        for h, w in self.level_sizes:
            ranges.append((start, start + h * w))
            start += h * w
        return ranges


def reference_points(level_sizes, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalised ``(x, y)`` cell centres of every token in its own level, ``(N, 2)``."""
    points = []
    for h, w in level_sizes:
        ys, xs = torch.meshgrid(
            (torch.arange(h, dtype=dtype, device=device) + 0.5) / h,
            (torch.arange(w, dtype=dtype, device=device) + 0.5) / w,
            indexing="ij",
        )
        points.append(torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1))
    return torch.cat(points, dim=0)


class MSDeformAttn(nn.Module):
    """Multiscale deformable attention over a flattened multi-level token map."""

    def __init__(self, dim: int, levels: int = 4, heads: int = 8, points: int = 4):
        super().__init__()
        self.dim, self.levels, self.heads, self.points = dim, levels, heads, points
        self.value_proj = nn.Linear(dim, dim)
        self.offsets = nn.Linear(dim, heads * levels * points * 2)
        self.weights = nn.Linear(dim, heads * levels * points)
        self.out_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.normal_(self.offsets.weight, std=0.01)
        theta = torch.arange(self.heads, dtype=torch.float32) * (2.0 * math.pi / self.heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid[:, None, None, :].repeat(1, self.levels, self.points, 1)
        for p in range(self.points):
            grid[:, :, p, :] *= p + 1
        with torch.no_grad():
            self.offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def forward(self, query, reference, value, level_sizes):
        """Returns ``(output, weights)``; weights are ``(B, N_q, heads, levels * points)``.

        ``reference`` holds normalised ``(x, y)`` locations ``(N_q, 2)`` or
        ``(B, N_q, 2)``. Offsets are in units of each level's cells;
        samples outside a map read zeros.
        """
        b, nq, _ = query.shape
        if len(level_sizes) != self.levels:
            raise ShapeError(f"expected {self.levels} levels, got {len(level_sizes)}")
        hd = self.dim // self.heads
        value = self.value_proj(value)
        offsets = self.offsets(query).view(b, nq, self.heads, self.levels, self.points, 2)
        logits = self.weights(query).view(b, nq, self.heads, self.levels * self.points)
        check_finite(logits, "mid/deform")
        weights = logits.softmax(-1)
        if reference.dim() == 2:
            reference = reference[None].expand(b, -1, -1)
        scale = torch.tensor([[w, h] for h, w in level_sizes], dtype=query.dtype, device=query.device)
        loc = reference[:, :, None, None, None, :] + offsets / scale[None, None, None, :, None, :]
        grid = 2.0 * loc - 1.0
        w_lvl = weights.view(b, nq, self.heads, self.levels, self.points)
        out = query.new_zeros(b * self.heads, hd, nq)
        start = 0
        for l, (h, w) in enumerate(level_sizes):
            v = value[:, start : start + h * w].reshape(b, h, w, self.heads, hd)
            v = v.permute(0, 3, 4, 1, 2).reshape(b * self.heads, hd, h, w)
            g = grid[:, :, :, l].permute(0, 2, 1, 3, 4).reshape(b * self.heads, nq, self.points, 2)
            sampled = F.grid_sample(v, g, mode="bilinear", padding_mode="zeros", align_corners=False)
            a = w_lvl[:, :, :, l].permute(0, 2, 1, 3).reshape(b * self.heads, 1, nq, self.points)
            out = out + (sampled * a).sum(-1)
            start += h * w
        out = out.view(b, self.heads, hd, nq).permute(0, 3, 1, 2).reshape(b, nq, self.dim)
        return self.out_proj(out), weights


def ms_deform_attn(queries: torch.Tensor, state: DecoderState, params: MSDeformAttn, value: torch.Tensor | None = None):
    """Deformable attention of ``queries`` over the state's visual token maps."""
    ref = reference_points(state.level_sizes, dtype=queries.dtype, device=queries.device)
    return params(queries, ref, state.visual if value is None else value, state.level_sizes)


class LanguageToVision(nn.Module):
    def __init__(self, dim, heads, ffn_dim, norm="post"):
        super().__init__()
        self.cross = MultiHeadAttention(dim, dim, dim, heads=heads)
        self.self_attn = MultiHeadAttention(dim, dim, dim, heads=heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.res = nn.ModuleList([Residual(dim, norm) for _ in range(3)])


class VisionToLanguage(nn.Module):
    def __init__(self, dim, heads, ffn_dim, msda_heads, msda_points, norm="post"):
        super().__init__()
        self.cross = MultiHeadAttention(dim, dim, dim, heads=heads)
        self.deform = MSDeformAttn(dim, levels=4, heads=msda_heads, points=msda_points)
        self.ffn = FeedForward(dim, ffn_dim)
        self.res = nn.ModuleList([Residual(dim, norm) for _ in range(3)])


def l2v_interact(state: DecoderState, params: LanguageToVision, mask_padding: bool = False) -> torch.Tensor:
    """Refine the language tokens with visual evidence; returns ``(B, length, D)``."""
    text = state.text if state.text_hat is None else state.text_hat
    key_mask = state.pad_mask if mask_padding else None
    rec = state.attention

    def cross(x):
        out, rec["l2v_cross"] = params.cross(x, state.visual, where="mid/l2v_cross")
        return out

    def self_attn(x):
        out, rec["l2v_self"] = params.self_attn(x, x, key_mask=key_mask, where="mid/l2v_self")
        return out

    x = params.res[0](text, cross)
    x = params.res[1](x, self_attn)
    x = params.res[2](x, params.ffn)
    return check_finite(x, "mid/l2v")


def v2l_interact(state: DecoderState, params: VisionToLanguage, mask_padding: bool = False) -> torch.Tensor:
    """Refine the visual tokens with the refined language; returns ``(B, N, D)``."""
    text = state.text if state.text_hat is None else state.text_hat
    key_mask = state.pad_mask if mask_padding else None
    visual = state.visual if state.visual_hat is None else state.visual_hat
    rec = state.attention

    def cross(x):
        out, rec["v2l_cross"] = params.cross(x, text, key_mask=key_mask, where="mid/v2l_cross")
        return out

    def deform(x):
        out, rec["deform"] = ms_deform_attn(x, state, params.deform, value=x)
        return out

    x = params.res[0](visual, cross)
    x = params.res[1](x, deform)
    x = params.res[2](x, params.ffn)
    return check_finite(x, "mid/v2l")


class MaskHead(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.out_conv = nn.Linear(dim, dim)


def predict_mask(state: DecoderState, head: MaskHead, image_size: int):
    """Logits at ``(H_1, W_1)`` and bilinearly upsampled to ``(H, W)``."""
    visual_hat = state.visual if state.visual_hat is None else state.visual_hat
    text_hat = state.text if state.text_hat is None else state.text_hat
    combined = visual_hat + state.visual
    b = combined.shape[0]
    size1 = state.level_sizes[0]
    embed = 0
    for (start, end), (h, w) in zip(state.level_ranges, state.level_sizes):
        embed = embed + resize(combined[:, start:end].reshape(b, h, w, -1), size1)
    embed = head.out_conv(embed)
    summary = text_hat[:, state.cls_index]
    logits = torch.einsum("bhwd,bd->bhw", embed, summary)
    up = F.interpolate(logits[:, None], size=(image_size, image_size), mode="bilinear", align_corners=False)
    return logits, up[:, 0]


class MutualInteractionDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.proj_v = nn.ModuleList([nn.Linear(c, d) for c in config.channels])
        self.proj_l = nn.Linear(config.text_dim, d)
        norm = config.decoder_norm
        self.l2v = LanguageToVision(d, config.attn_heads, config.ffn_dim, norm)
        self.v2l = VisionToLanguage(d, config.attn_heads, config.ffn_dim, config.msda_heads, config.msda_points, norm)
        self.head = MaskHead(d)

    def harmonize(self, fused: list[torch.Tensor], text: TokenFeatures) -> DecoderState:
        return harmonize(fused, text, self)

    def forward(self, fused: list[torch.Tensor], text: TokenFeatures):
        state = self.harmonize(fused, text)
        mask_padding = self.config.mask_padding
        for _ in range(self.config.decoder_rounds):
            if self.config.decoder == "mutual":
                state.text_hat = l2v_interact(state, self.l2v, mask_padding)
            state.visual_hat = v2l_interact(state, self.v2l, mask_padding)
        logits, up = predict_mask(state, self.head, self.config.image_size)
        return logits, up, state


def harmonize(fused: list[torch.Tensor], text: TokenFeatures, decoder: MutualInteractionDecoder) -> DecoderState:
    """Project every level and the language tokens to the hidden width."""
    if len(fused) != 4:
        raise ShapeError(f"need four levels, got {len(fused)}")
    b = fused[0].shape[0]
    tokens = [proj(v).reshape(b, -1, proj.out_features) for proj, v in zip(decoder.proj_v, fused)]
    sizes = [tuple(v.shape[1:3]) for v in fused]
    return DecoderState(
        visual=torch.cat(tokens, dim=1),
        level_sizes=sizes,
        text=decoder.proj_l(text.values),
        pad_mask=text.pad_mask,
        cls_index=text.cls_index,
    )
