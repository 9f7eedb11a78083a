"""Gradient and oracle-equivalence checks over small random instances.

Every ``grad_*`` function returns a list of :class:`GradCheckReport`; every
``oracle_*_trial`` function returns the max absolute difference between the
module and its scalar-loop oracle for one random instance. ``run_suite``
strings them together for the ``verify`` command.
"""

from __future__ import annotations

import numpy as np
import torch

from .. import capm, lgfa, mid, objective
from ..config import ModelConfig
from ..model import build_model
from ..types import FeaturePyramid, TokenFeatures
from . import oracles as O
from . import params as P
from .gradcheck import GradCheckReport, finite_difference_check

F64 = torch.float64

TOY = ModelConfig(
    image_size=64,
    channels=(4, 6, 8, 10),
    text_dim=8,
    max_tokens=5,
    num_prompts=2,
    hidden_dim=8,
    attn_heads=2,
    ffn_dim=16,
    comp_dim=8,
    comp_heads=2,
    msda_heads=2,
    msda_points=2,
    vocab_size=16,
    topk_fraction=0.5,
)


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _build(factory, seed, std=0.1):
    """Construct a float64 module from a private RNG stream, then perturb it.

    Keeps every check independent of the global torch RNG state, so a report
    does not depend on what ran before it.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory().to(F64)
    return P.perturb(module, std=std, seed=seed)


def random_pyramid(cfg: ModelConfig, batch=1, seed=0, sizes=None) -> FeaturePyramid:
    gen = _gen(seed)
    sizes = sizes or cfg.level_sizes
    return FeaturePyramid(
        tuple(torch.randn(batch, h, w, c, generator=gen, dtype=F64) for (h, w), c in zip(sizes, cfg.channels))
    )


def random_text(cfg: ModelConfig, batch=1, seed=0, length=None, dim=None) -> TokenFeatures:
    gen = _gen(seed + 7919)
    length = length or cfg.seq_len
    values = torch.randn(batch, length, dim or cfg.text_dim, generator=gen, dtype=F64)
    mask = torch.ones(batch, length, dtype=torch.bool)
    if length > 2:
        real = torch.randint(1, length, (batch,), generator=gen)
        for b in range(batch):
            mask[b, int(real[b]) :] = False
    return TokenFeatures(values, mask, 0)


def _weights_like(tensors, seed):
    gen = _gen(seed + 104729)
    return [torch.randn(t.shape, generator=gen, dtype=F64) for t in tensors]


def _dot(outputs, weights):
    return sum((o * w).sum() for o, w in zip(outputs, weights))


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.detach().clone().requires_grad_(True)


# ------------------------------------------------------------------ gradients


def grad_capm(cfg=TOY, seed=0, **kw):
    bank = _build(lambda: capm.PromptBank(cfg), seed)
    levels = [_leaf(v) for v in random_pyramid(cfg, 2, seed)]
    probe = _weights_like([torch.empty(2, cfg.num_prompts, cfg.text_dim)], seed)

    def f():
        out = capm.modulate_prompts(capm.pool_context(FeaturePyramid(tuple(levels)), bank), bank)
        return _dot([out], probe)

    params = dict(bank.named_parameters())
    params.update({f"V{i + 1}": v for i, v in enumerate(levels)})
    return finite_difference_check(f, params, prefix="capm/", seed=seed, **kw)


def grad_lgfa_stage(stage: int, cfg=TOY, seed=0, **kw):
    params_mod = _build(lambda: lgfa.StageFusion(cfg.channels[stage], cfg.seq_len, cfg.text_dim), seed)
    level = _leaf(random_pyramid(cfg, 2, seed)[stage])
    text = random_text(cfg, 2, seed)
    values = _leaf(text.values)
    h, w = cfg.level_sizes[stage]
    probe = _weights_like([level, torch.empty(2, h * w, cfg.text_dim)], seed)

    def f():
        fused, scores = lgfa.fuse_stage(level, text.replace_values(values), params_mod, stage)
        return _dot([fused, scores], probe)

    params = dict(params_mod.named_parameters())
    params.update(level=level, text=values)
    return finite_difference_check(f, params, prefix=f"lgfa/stage{stage + 1}/", seed=seed, **kw)


def grad_compensation(cfg=TOY, seed=0, **kw):
    comp = _build(lambda: lgfa.Compensation(cfg), seed)
    levels = [_leaf(v) for v in random_pyramid(cfg, 2, seed)]
    h4, w4 = cfg.level_sizes[3]
    regions = torch.rand(2, h4, w4, generator=_gen(seed)) < 0.6
    regions[:, 0, 0] = True
    probe = _weights_like(levels, seed)

    def f():
        return _dot(lgfa.compensate_regions(levels, regions, comp), probe)

    params = dict(comp.named_parameters())
    params.update({f"V{i + 1}": v for i, v in enumerate(levels)})
    return finite_difference_check(f, params, prefix="lgfa/compensation/", seed=seed, **kw)


def _decoder_state(cfg, seed, batch=2):
    dec = _build(lambda: mid.MutualInteractionDecoder(cfg), seed)
    gen = _gen(seed)
    visual = torch.randn(batch, cfg.num_visual_tokens, cfg.hidden_dim, generator=gen, dtype=F64)
    text = random_text(cfg, batch, seed, dim=cfg.hidden_dim)
    state = mid.DecoderState(visual, cfg.level_sizes, text.values, text.pad_mask, 0)
    return dec, state


def grad_l2v(cfg=TOY, seed=0, **kw):
    dec, state = _decoder_state(cfg, seed)
    visual, text = _leaf(state.visual), _leaf(state.text)
    probe = _weights_like([text], seed)

    def f():
        st = mid.DecoderState(visual, state.level_sizes, text, state.pad_mask, 0)
        return _dot([mid.l2v_interact(st, dec.l2v, cfg.mask_padding)], probe)

    params = dict(dec.l2v.named_parameters())
    params.update(visual=visual, text=text)
    return finite_difference_check(f, params, prefix="mid/l2v/", seed=seed, **kw)


def grad_v2l(cfg=TOY, seed=0, **kw):
    dec, state = _decoder_state(cfg, seed)
    visual, text = _leaf(state.visual), _leaf(state.text)
    probe = _weights_like([visual], seed)

    def f():
        st = mid.DecoderState(visual, state.level_sizes, state.text, state.pad_mask, 0, text_hat=text)
        return _dot([mid.v2l_interact(st, dec.v2l, cfg.mask_padding)], probe)

    params = {k: v for k, v in dec.v2l.named_parameters() if not k.startswith("deform.")}
    params.update(visual=visual, text_hat=text)
    return finite_difference_check(f, params, prefix="mid/v2l/", seed=seed, **kw)


def grad_deform(cfg=TOY, seed=0, **kw):
    dec, state = _decoder_state(cfg, seed)
    module = P.perturb(dec.v2l.deform, std=0.3, seed=seed + 1)
    values = torch.randn(state.visual.shape, generator=_gen(seed + 1), dtype=F64)
    queries, values = _leaf(state.visual), _leaf(values)
    probe = _weights_like([queries], seed)

    def f():
        out, _ = mid.ms_deform_attn(queries, state, module, value=values)
        return _dot([out], probe)

    params = dict(module.named_parameters())
    params.update(queries=queries, values=values)
    return finite_difference_check(f, params, prefix="mid/deform/", seed=seed, **kw)


def grad_losses(seed=0, **kw):
    gen = _gen(seed)
    logits = _leaf(torch.randn(2, 8, 8, generator=gen, dtype=F64) * 2)
    target = (torch.rand(2, 8, 8, generator=gen) < 0.4).to(F64)
    reports = finite_difference_check(lambda: objective.ce_loss(logits, target), {"logits": logits}, prefix="loss/ce/", seed=seed, **kw)
    reports += finite_difference_check(lambda: objective.dice_loss(logits, target), {"logits": logits}, prefix="loss/dice/", seed=seed, **kw)
    return reports


def grad_full_model(cfg: ModelConfig | None = None, seed=0, probes=2, **kw):
    """Loss of the complete network on a two-sample batch."""
    from ..dataio import synth_generate
    from ..types import stack_images, stack_masks

    cfg = cfg or ModelConfig()
    model = P.perturb(build_model(cfg, dtype=F64), std=0.02, seed=seed)
    data = synth_generate(2, cfg.image_size, seed)
    images, masks = stack_images(data, F64), stack_masks(data, F64)
    tokens = [t.expression for t in data]

    def f():
        out = model(images, tokens)
        return objective.combined_loss(out.logits_up, masks, cfg.lambda_ce, cfg.dice_eps).total

    return finite_difference_check(f, dict(model.named_parameters()), prefix="model/", seed=seed, probes=probes, **kw)


GRADIENT_CHECKS = {
    "capm": grad_capm,
    "lgfa/stage1": lambda **kw: grad_lgfa_stage(0, **kw),
    "lgfa/stage2": lambda **kw: grad_lgfa_stage(1, **kw),
    "lgfa/stage3": lambda **kw: grad_lgfa_stage(2, **kw),
    "lgfa/stage4": lambda **kw: grad_lgfa_stage(3, **kw),
    "lgfa/compensation": grad_compensation,
    "mid/l2v": grad_l2v,
    "mid/v2l": grad_v2l,
    "mid/deform": grad_deform,
    "losses": grad_losses,
}


# ------------------------------------------------------------------ oracles


def _np(t):
    return t.detach().double().numpy()


def oracle_fuse_stage_trial(seed: int) -> float:
    rng = np.random.default_rng(seed)
    h = w = int(rng.integers(1, 4))
    length, dl, c = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    params_mod = _build(lambda: lgfa.StageFusion(c, length, dl), seed, std=0.3)
    gen = _gen(seed)
    level = torch.randn(1, h, w, c, generator=gen, dtype=F64)
    values = torch.randn(1, length, dl, generator=gen, dtype=F64)
    mask = torch.ones(1, length, dtype=torch.bool)
    mask[0, int(rng.integers(1, length + 1)) :] = False
    mask_padding = bool(seed % 2)
    fused, scores = lgfa.fuse_stage(level, TokenFeatures(values, mask), params_mod, mask_padding=mask_padding)
    ref_fused, ref_scores = O.oracle_fuse_stage(_np(level[0]), _np(values[0]), mask[0].numpy(), P.stage(params_mod), mask_padding)
    return float(max(np.abs(_np(fused[0]) - ref_fused).max(), np.abs(_np(scores[0]) - ref_scores).max()))


def oracle_deficit_trial(seed: int) -> float:
    rng = np.random.default_rng(seed)
    h4 = int(rng.integers(1, 4))
    size = 32 * h4
    cfg = ModelConfig(image_size=size, text_dim=int(rng.integers(2, 6)) * 2, attn_heads=2)
    gen = _gen(seed)
    seq_len = int(rng.integers(2, 8))
    scores = [torch.randn(1, h * w, cfg.text_dim, generator=gen, dtype=F64) * 3 for h, w in cfg.level_sizes]
    m, sal = lgfa.deficit_map(scores, cfg, seq_len=seq_len)
    ref_sal = [O.oracle_saliency(_np(s[0]), cfg.level_sizes[i], cfg.level_sizes[3], seq_len) for i, s in enumerate(scores)]
    ref_m = O.oracle_deficit(ref_sal)
    return float(np.abs(_np(m[0]) - ref_m).max())


def oracle_topk_trial(seed: int) -> float:
    """Returns 0.0 when the selected cells agree, 1.0 otherwise."""
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    m = rng.integers(0, 4, size=(h, w)).astype(np.float64) if seed % 2 else rng.normal(size=(h, w))
    k = int(rng.integers(0, h * w + 1))
    got = lgfa.topk_regions(torch.as_tensor(m), k)
    return 0.0 if got == O.oracle_topk(m, k) else 1.0


def oracle_compensate_trial(seed: int, cfg=TOY) -> float:
    comp = _build(lambda: lgfa.Compensation(cfg), seed, std=0.2)
    levels = list(random_pyramid(cfg, 1, seed))
    rng = np.random.default_rng(seed)
    h4, w4 = cfg.level_sizes[3]
    k = int(rng.integers(1, h4 * w4 + 1))
    cells = [(int(i) // w4, int(i) % w4) for i in rng.choice(h4 * w4, size=k, replace=False)]
    regions = torch.zeros(1, h4, w4, dtype=torch.bool)
    for r, c in cells:
        regions[0, r, c] = True
    got = lgfa.compensate_regions(levels, regions, comp)
    ref = O.oracle_compensate([_np(v[0]) for v in levels], cells, P.compensation(comp), cfg.comp_heads)
    return float(max(np.abs(_np(g[0]) - r).max() for g, r in zip(got, ref)))


def oracle_deform_trial(seed: int) -> float:
    rng = np.random.default_rng(seed)
    levels = int(rng.integers(1, 4))
    top = 2 ** (levels - 1)
    sizes = [(top // 2**i, top // 2**i) for i in range(levels)]
    heads, points = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    dim = heads * int(rng.integers(1, 4))
    module = _build(lambda: mid.MSDeformAttn(dim, levels, heads, points), seed, std=0.5)
    gen = _gen(seed)
    n = sum(h * w for h, w in sizes)
    query = torch.randn(1, n, dim, generator=gen, dtype=F64)
    value = torch.randn(1, n, dim, generator=gen, dtype=F64)
    ref = mid.reference_points(sizes, dtype=F64)
    got, _ = module(query, ref, value, sizes)
    expected = O.oracle_ms_deform_attn(_np(query[0]), O.oracle_reference_points(sizes), _np(value[0]), sizes, P.deform(module), heads, points)
    return float(np.abs(_np(got[0]) - expected).max())


def _small_decoder(seed):
    cfg = TOY.replace(image_size=32, mask_padding=bool(seed % 2))
    dec, state = _decoder_state(cfg, seed, batch=1)
    return cfg, dec, state


def oracle_l2v_trial(seed: int) -> float:
    cfg, dec, state = _small_decoder(seed)
    got = mid.l2v_interact(state, dec.l2v, cfg.mask_padding)
    key_mask = state.pad_mask[0].numpy() if cfg.mask_padding else None
    ref = O.oracle_l2v(_np(state.text[0]), _np(state.visual[0]), P.l2v(dec.l2v), cfg.attn_heads, key_mask)
    return float(np.abs(_np(got[0]) - ref).max())


def oracle_v2l_trial(seed: int) -> float:
    cfg, dec, state = _small_decoder(seed)
    P.perturb(dec.v2l.deform, std=0.3, seed=seed + 1)
    got = mid.v2l_interact(state, dec.v2l, cfg.mask_padding)
    key_mask = state.pad_mask[0].numpy() if cfg.mask_padding else None
    ref = O.oracle_v2l(
        _np(state.visual[0]), _np(state.text[0]), cfg.level_sizes, P.v2l(dec.v2l),
        cfg.attn_heads, cfg.msda_heads, cfg.msda_points, key_mask,
    )
    return float(np.abs(_np(got[0]) - ref).max())


def oracle_loss_trial(seed: int) -> float:
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    logits = rng.normal(0, 3, size=(h, w))
    target = (rng.random((h, w)) < 0.5).astype(np.float64)
    lt, tt = torch.as_tensor(logits), torch.as_tensor(target)
    return max(
        abs(float(objective.ce_loss(lt, tt)) - O.oracle_ce(logits, target)),
        abs(float(objective.dice_loss(lt, tt)) - O.oracle_dice(logits, target)),
    )


ORACLE_CHECKS = {
    "fuse_stage": oracle_fuse_stage_trial,
    "deficit_map": oracle_deficit_trial,
    "topk_regions": oracle_topk_trial,
    "compensate_regions": oracle_compensate_trial,
    "ms_deform_attn": oracle_deform_trial,
    "l2v_interact": oracle_l2v_trial,
    "v2l_interact": oracle_v2l_trial,
    "losses": oracle_loss_trial,
}


def oracle_report(name, trial, trials=3, tol=1e-10) -> GradCheckReport:
    worst = max(trial(seed) for seed in range(trials))
    return GradCheckReport(f"oracle/{name}", worst, tol, worst < tol, trials, measure="max_abs_diff")


def run_suite(
    gradient_checks=None, oracle_checks=None, full_model=True, oracle_trials=3, probes=6, full_model_config=None
) -> list[GradCheckReport]:
    """Run every gradient and oracle check; returns the aggregate report table."""
    gradient_checks = GRADIENT_CHECKS if gradient_checks is None else gradient_checks
    oracle_checks = ORACLE_CHECKS if oracle_checks is None else oracle_checks
    reports = []
    for fn in gradient_checks.values():
        reports += fn(probes=probes)
    if full_model:
        reports += grad_full_model(full_model_config)
    for name, trial in oracle_checks.items():
        reports.append(oracle_report(name, trial, trials=oracle_trials))
    return reports
