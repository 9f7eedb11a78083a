"""Training, evaluation and inference loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig
from .errors import NumericalError
from .metrics import MetricAccumulator, binarize, finalize, merge
from .model import ReferringSegmenter, build_model
from .objective import combined_loss
from .types import Triplet, stack_images, stack_masks

log = logging.getLogger(__name__)

LOSS_LOG = "loss_log.tsv"


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    return base * (1.0 - min(step, total) / total) ** power


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Sample indices for ``step``: fixed-seed reshuffles every epoch."""
    out = []
    for j in range(batch_size):
        pos = step * batch_size + j
        perm = np.random.default_rng([seed, pos // n]).permutation(n)
        out.append(int(perm[pos % n]))
    return out


def make_optimizer(model, cfg: RunConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _optimizer_arrays(model, optim) -> dict[str, torch.Tensor]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, state in optim.state.items():
        name = names[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            out[f"optim/{key}/{name}"] = state[key]
        out[f"optim/step/{name}"] = torch.as_tensor(float(state["step"]))
    return out


def _restore_optimizer(model, optim, arrays):
    for name, p in model.named_parameters():
        key = f"optim/step/{name}"
        if key not in arrays:
            continue
        optim.state[p] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"optim/exp_avg/{name}"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim/exp_avg_sq/{name}"]).to(p.dtype),
        }


def save_training_state(path, model, optim, cfg: RunConfig, step: int) -> Path:
    arrays = ckpt.model_arrays(model)
    arrays.update(_optimizer_arrays(model, optim))
    return ckpt.save_checkpoint(path, arrays, cfg, step)


def load_model(path, cfg: RunConfig | None = None) -> tuple[ReferringSegmenter, RunConfig, dict]:
    header, arrays = ckpt.load_checkpoint(path)
    saved = ckpt.config_from_header(header)
    if cfg is not None:
        ckpt.check_compatible(cfg.model, header)
    else:
        cfg = saved
    model = build_model(cfg.model)
    ckpt.load_model_state(model, arrays)
    return model, cfg, header


@dataclass
class TrainResult:
    model: ReferringSegmenter
    losses: list[dict]
    last_checkpoint: Path | None
    aborted: bool = False


def train(
    cfg: RunConfig,
    data: Sequence[Triplet],
    out_dir: str | Path,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Optimise the combined loss on ``data``.

    Writes ``loss_log.tsv`` and periodic checkpoints into ``out_dir``.
    ``stop_after`` ends the run early at that step (used to test resuming);
    the learning-rate schedule still spans ``cfg.steps``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model)
    optim = make_optimizer(model, cfg)
    start = 0
    log_path = out_dir / LOSS_LOG
    losses: list[dict] = []
    if resume is not None:
        header, arrays = ckpt.load_checkpoint(resume)
        ckpt.check_compatible(cfg.model, header)
        ckpt.load_model_state(model, arrays)
        _restore_optimizer(model, optim, arrays)
        start = header["step"]
        if log_path.exists():
            losses = [row for row in read_loss_log(log_path) if row["step"] < start]
    _write_loss_log(log_path, losses)

    images = stack_images(data)
    masks = stack_masks(data)
    tokens = [t.expression for t in data]
    end = cfg.steps if stop_after is None else min(stop_after, cfg.steps)
    last_ckpt = Path(resume) if resume is not None else None
    model.train()
    for step in range(start, end):
        lr = poly_lr(cfg.lr, step, cfg.steps, cfg.lr_power)
        for group in optim.param_groups:
            group["lr"] = lr
        idx = batch_indices(step, len(data), cfg.batch_size, cfg.model.seed)
        try:
            out = model(images[idx], [tokens[i] for i in idx])
            report = combined_loss(out.logits_up, masks[idx], cfg.model.lambda_ce, cfg.model.dice_eps)
        except NumericalError as exc:
            log.error("step %d: %s", step, exc)
            return TrainResult(model, losses, last_ckpt, aborted=True)
        if not math.isfinite(float(report.total.detach())):
            log.error("step %d: non-finite loss; keeping %s", step, last_ckpt)
            return TrainResult(model, losses, last_ckpt, aborted=True)
        optim.zero_grad(set_to_none=True)
        report.total.backward()
        optim.step()
        row = {"step": step, "lr": lr, **report.as_floats()}
        losses.append(row)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(_format_row(row))
        done = step + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 or done == end:
            last_ckpt = save_training_state(out_dir / f"step{done:06d}.ckpt", model, optim, cfg, done)
    if last_ckpt is not None and end == cfg.steps:
        final = out_dir / "model.ckpt"
        final.write_bytes(Path(last_ckpt).read_bytes())
        last_ckpt = final
    return TrainResult(model, losses, last_ckpt)


def _format_row(row: dict) -> str:
    return f"{row['step']}\t{row['lr']!r}\t{row['total']!r}\t{row['ce']!r}\t{row['dice']!r}\n"


def _write_loss_log(path: Path, rows: list[dict]):
    path.write_text("step\tlr\ttotal\tce\tdice\n" + "".join(_format_row(r) for r in rows), encoding="utf-8")


def read_loss_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        step, lr, total, ce, dice = line.split("\t")
        rows.append({"step": int(step), "lr": float(lr), "total": float(total), "ce": float(ce), "dice": float(dice)})
    return rows


@torch.no_grad()
def predict_logits(model: ReferringSegmenter, images: torch.Tensor, tokens, batch_size: int = 8):
    model.eval()
    outs = []
    for i in range(0, len(tokens), batch_size):
        outs.append(model(images[i : i + batch_size], tokens[i : i + batch_size]).logits_up)
    return torch.cat(outs)


def evaluate(model: ReferringSegmenter, data: Sequence[Triplet], threshold=0.5, batch_size=8, shards=1) -> dict:
    """Binarize predictions and accumulate metrics, optionally in independent shards."""
    if not data:
        raise ValueError("no samples to evaluate")
    logits = predict_logits(model, stack_images(data), [t.expression for t in data], batch_size).numpy()
    accs = []
    for shard in np.array_split(np.arange(len(data)), max(1, shards)):
        acc = MetricAccumulator()
        for i in shard:
            acc.add(binarize(logits[i], threshold), data[i].mask)
        accs.append(acc)
    total = MetricAccumulator()
    for acc in accs:
        total = merge(total, acc)
    return finalize(total)
