"""Command-line entry points: ``train``, ``eval``, ``predict``, ``stats``, ``verify``.

Configuration comes from an optional ``key = value`` file (``--config``)
plus ``--set key=value`` overrides. ``RRSIS_OUTPUT_DIR`` overrides the
configured output directory; ``--out`` overrides both.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import dumps
from .config import OUTPUT_DIR_ENV, RunConfig, dump_config, load_config
from .dataio import (
    Vocabulary,
    load_manifest,
    manifest_stats,
    plot_stats,
    read_image,
    synth_generate,
    write_mask,
)
from .errors import ConfigError, ManifestError, NumericalError
from .metrics import MetricAccumulator, binarize, finalize, merge, write_report
from .train import evaluate, load_model, train

log = logging.getLogger("rrsis")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict[str, str]:
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if getattr(args, "no_capm", False):
        values["use_capm"] = "false"
    if getattr(args, "no_compensation", False):
        values["use_compensation"] = "false"
    if getattr(args, "single_decoder", False):
        values["decoder"] = "single"
    return values


def _run_config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _output_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def load_split(cfg: RunConfig, split: str):
    """Triplets for ``split`` from the manifest, or the synthetic sets."""
    if cfg.manifest:
        return load_manifest(cfg.manifest, split=split)
    if split == "train":
        return synth_generate(cfg.synth_train, cfg.model.image_size, cfg.synth_seed)
    if cfg.synth_val < 1:
        return []
    return synth_generate(cfg.synth_val, cfg.model.image_size, cfg.synth_seed + 1)


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out_dir = _output_dir(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    train_set = load_split(cfg, "train")
    if not train_set:
        raise ConfigError("training split is empty")
    torch.manual_seed(cfg.model.seed)
    result = train(cfg, train_set, out_dir, resume=args.resume, stop_after=args.stop_after)
    if result.aborted:
        log.error("training aborted; last good checkpoint: %s", result.last_checkpoint)
        return EXIT_NUMERICAL
    if result.losses:
        log.info("final loss %.5f after %d steps", result.losses[-1]["total"], result.losses[-1]["step"] + 1)
    if args.stop_after is None or args.stop_after >= cfg.steps:
        report = evaluate(result.model, train_set, cfg.threshold)
        write_report(report, out_dir / "metrics_train")
        log.info("train metrics: %s", json.dumps(report))
        val_set = load_split(cfg, "val")
        if val_set:
            report = evaluate(result.model, val_set, cfg.threshold)
            write_report(report, out_dir / "metrics_val")
            log.info("val metrics: %s", json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args) if args.config or args.set else None
    model, cfg, _ = load_model(args.checkpoint, cfg)
    data = load_split(cfg, args.split)
    if not data:
        raise ConfigError(f"split {args.split!r} is empty")
    if args.predictor == "model":
        report = evaluate(model, data, cfg.threshold, shards=args.shards)
    else:
        accs = []
        for shard in np.array_split(np.arange(len(data)), max(1, args.shards)):
            acc = MetricAccumulator()
            for i in shard:
                pred = data[i].mask if args.predictor == "gt" else np.zeros_like(data[i].mask)
                acc.add(pred, data[i].mask)
            accs.append(acc)
        total = MetricAccumulator()
        for acc in accs:
            total = merge(total, acc)
        report = finalize(total)
    out_dir = _output_dir(args, cfg)
    write_report(report, out_dir / f"metrics_{args.split}")
    print(json.dumps(report))
    return EXIT_OK


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    from PIL import Image

    if image.shape[:2] == (size, size):
        return image
    im = Image.fromarray((image * 255).round().astype(np.uint8)).resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64) / 255.0


def cmd_predict(args) -> int:
    from PIL import Image

    model, cfg, _ = load_model(args.checkpoint)
    image = read_image(args.image)
    tokens = Vocabulary(size=cfg.model.vocab_size).encode(args.expression)
    if not tokens:
        raise ConfigError("expression has no words")
    x = torch.as_tensor(_resize_image(image, cfg.model.image_size), dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        out = model(x[None], [tokens])
    logits = out.logits_up[0]
    h, w = image.shape[:2]
    if (h, w) != tuple(logits.shape):
        logits = torch.nn.functional.interpolate(logits[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    mask = binarize(logits.numpy(), cfg.threshold)
    out_dir = _output_dir(args, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_mask(mask, out_dir / "mask.png")
    overlay = image.copy()
    overlay[mask > 0] = 0.5 * overlay[mask > 0] + 0.5 * np.array([1.0, 0.1, 0.1])
    Image.fromarray((np.clip(overlay, 0, 1) * 255).round().astype(np.uint8)).save(out_dir / "overlay.png")
    if args.dump or cfg.dump_attention:
        arrays = dumps.attention_arrays(out, 0)
        dumps.write_dump(out_dir / "attention", arrays)
        dumps.render_heatmaps(arrays, cfg.model.level_sizes, out_dir / "attention")
    print(json.dumps({"mask": str(out_dir / "mask.png"), "pixels": int(mask.sum())}))
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = manifest_stats(args.manifest, split=args.split, top_k=args.top_k)
    out_dir = Path(args.out or os.environ.get(OUTPUT_DIR_ENV) or "stats")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    if not args.no_plots:
        plot_stats(stats, out_dir)
    print(json.dumps({"count": stats.count, "average_length": stats.average_length, "vocabulary_size": stats.vocabulary_size}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify.suite import run_suite

    cfg = _run_config(args)
    torch.set_default_dtype(torch.float64)
    try:
        reports = run_suite(
            full_model=not args.quick,
            oracle_trials=args.trials,
            probes=args.probes,
            full_model_config=cfg.model,
        )
    finally:
        torch.set_default_dtype(torch.float32)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rrsis", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train on a manifest or synthetic data")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, help="stop at this step (schedule still spans all steps)")
    p.add_argument("--no-capm", action="store_true", help="append raw prompts instead of modulated ones")
    p.add_argument("--no-compensation", action="store_true", help="disable deficit compensation (K=0)")
    p.add_argument("--single-decoder", action="store_true", help="skip the language-to-vision stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--predictor", default="model", choices=("model", "gt", "zeros"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--expression", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump", action="store_true", help="write attention arrays and heat maps")
    p.set_defaults(func=cmd_predict, config=None, set=None)

    p = sub.add_parser("stats", help="dataset statistics for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("verify", help="gradient and oracle checks")
    common(p)
    p.add_argument("--quick", action="store_true", help="skip the full-network gradient check")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--probes", type=int, default=6)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
