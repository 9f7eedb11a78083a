"""Convert module parameters to the plain-array layout the oracles expect."""

from __future__ import annotations

import torch
import torch.nn as nn


def arr(t: torch.Tensor):
    return t.detach().cpu().double().numpy().copy()


def lin(m: nn.Linear):
    return arr(m.weight), None if m.bias is None else arr(m.bias)


def norm(m: nn.LayerNorm):
    return arr(m.weight), arr(m.bias)


def mha(m):
    return {"q": lin(m.q), "k": lin(m.k), "v": lin(m.v), "o": lin(m.o)}


def ffn(m):
    return {"fc1": lin(m.fc1), "fc2": lin(m.fc2)}


def stage(m):
    return {k: lin(getattr(m, k)) for k in ("w_q", "w_k", "w_v", "gate", "reweight")}


def compensation(m):
    return {
        "proj_in": [lin(p) for p in m.proj_in],
        "proj_out": [lin(p) for p in m.proj_out],
        "norm": norm(m.norm),
        "msa": mha(m.msa),
    }


def deform(m):
    return {k: lin(getattr(m, k)) for k in ("value_proj", "offsets", "weights", "out_proj")}


def l2v(m):
    out = {"cross": mha(m.cross), "self_attn": mha(m.self_attn), "ffn": ffn(m.ffn)}
    out.update({f"norm{i}": norm(r.norm) for i, r in enumerate(m.res)})
    return out


def v2l(m):
    out = {"cross": mha(m.cross), "deform": deform(m.deform), "ffn": ffn(m.ffn)}
    out.update({f"norm{i}": norm(r.norm) for i, r in enumerate(m.res)})
    return out


@torch.no_grad()
def perturb(module: nn.Module, std: float = 0.1, seed: int = 0) -> nn.Module:
    """Add Gaussian noise to every parameter so no path sits at a degenerate init."""
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        p.add_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return module
