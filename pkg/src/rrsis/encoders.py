"""Desk-scale stand-ins for the pretrained image and text backbones.

Both keep the interface of the real encoders: the image encoder returns four
feature maps at strides 4, 8, 16 and 32, and the text encoder returns one
feature vector per token position with the summary token at position 0.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeError
from .layers import FeedForward, MultiHeadAttention, Residual, check_finite, sinusoidal_positions
from .types import FeaturePyramid, TokenFeatures

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2


class _Stage(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, kernel_size=stride, stride=stride)
        self.mix = nn.Conv2d(cout, cout, kernel_size=3, padding=1)
        self.norm = nn.LayerNorm(cout)

    def forward(self, x):
        x = F.gelu(self.down(x))
        x = x + F.gelu(self.mix(x))
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ImageEncoder(nn.Module):
    """Strided-convolution pyramid: a stride-4 stem, then three stride-2 stages."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.stages = nn.ModuleList(
            [_Stage(3, c[0], 4), _Stage(c[0], c[1], 2), _Stage(c[1], c[2], 2), _Stage(c[2], c[3], 2)]
        )

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.dim() == 3:
            images = images[None]
        size = self.config.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (size, size, 3):
            raise ShapeError(f"expected images of shape (B, {size}, {size}, 3), got {tuple(images.shape)}")
        check_finite(images, "encoder/image")
        x = images.permute(0, 3, 1, 2)
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x.permute(0, 2, 3, 1))
        return FeaturePyramid(tuple(levels))


def pad_tokens(
    sequences: Sequence[Sequence[int]], max_tokens: int, vocab_size: int, truncate: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Prepend the summary id and pad each sequence to ``max_tokens``.

    Returns ``(ids, mask)`` of shape ``(B, max_tokens)``; mask is True on the
    summary token and the real tokens.
    """
    ids = torch.full((len(sequences), max_tokens), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(sequences), max_tokens), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        seq = list(seq)
        if not seq:
            raise ValueError(f"expression {row} is empty")
        if len(seq) + 1 > max_tokens:
            if not truncate:
                raise ValueError(
                    f"expression {row} has {len(seq)} tokens; at most {max_tokens - 1} fit beside the summary token"
                )
            seq = seq[: max_tokens - 1]
        if min(seq) < 0 or max(seq) >= vocab_size:
            raise ValueError(f"expression {row} has token ids outside [0, {vocab_size})")
        ids[row, 0] = CLS_ID
        ids[row, 1 : len(seq) + 1] = torch.tensor(seq, dtype=torch.long)
        mask[row, : len(seq) + 1] = True
    return ids, mask


class TextEncoder(nn.Module):
    """Token embedding, sinusoidal positions and one self-attention block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.text_dim
        self.embed = nn.Embedding(config.vocab_size, d)
        self.register_buffer("positions", sinusoidal_positions(config.seq_len, d).float(), persistent=False)
        self.attn = MultiHeadAttention(d, d, d, heads=config.attn_heads)
        self.ffn = FeedForward(d, 2 * d)
        self.attn_res = Residual(d, norm="pre")
        self.ffn_res = Residual(d, norm="pre")
        self.out_norm = nn.LayerNorm(d)

    def forward(self, tokens: Sequence[Sequence[int]], prompts: torch.Tensor | None = None) -> TokenFeatures:
        cfg = self.config
        ids, mask = pad_tokens(tokens, cfg.max_tokens, cfg.vocab_size, cfg.truncate)
        x = self.embed(ids.to(self.embed.weight.device))
        mask = mask.to(x.device)
        if prompts is not None:
            if prompts.dim() == 2:
                prompts = prompts[None].expand(len(ids), -1, -1)
            if tuple(prompts.shape) != (len(ids), cfg.num_prompts, cfg.text_dim):
                raise ShapeError(
                    f"prompts must be ({len(ids)}, {cfg.num_prompts}, {cfg.text_dim}), got {tuple(prompts.shape)}"
                )
            x = torch.cat([x, prompts.to(x.dtype)], dim=1)
            mask = torch.cat([mask, torch.ones(len(ids), cfg.num_prompts, dtype=torch.bool, device=x.device)], dim=1)
        x = x + self.positions[: x.shape[1]].to(x.dtype)
        x = self.attn_res(x, lambda h: self.attn(h, h, key_mask=mask, where="encoder/text")[0])
        x = self.ffn_res(x, self.ffn)
        x = check_finite(self.out_norm(x), "encoder/text")
        return TokenFeatures(x, mask, cls_index=0)
