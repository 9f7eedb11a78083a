"""oIoU, mIoU and precision-at-threshold evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError

THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    """1 where ``sigmoid(logit) >= threshold``."""
    z = np.asarray(logits, dtype=np.float64)
    if threshold == 0.5:
        return (z >= 0).astype(np.uint8)
    with np.errstate(over="ignore"):
        return (1.0 / (1.0 + np.exp(-z)) >= threshold).astype(np.uint8)


@dataclass
class MetricAccumulator:
    sum_i: int = 0
    sum_u: int = 0
    per_sample_iou: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.per_sample_iou)

    def add(self, pred, gt) -> "MetricAccumulator":
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        inter = int(np.count_nonzero(pred & gt))
        union = int(np.count_nonzero(pred | gt))
        self.sum_i += inter
        self.sum_u += union
        # an empty prediction of an empty mask is perfect
        self.per_sample_iou.append(inter / union if union else 1.0)
        return self


def accumulate(acc: MetricAccumulator, pred, gt) -> MetricAccumulator:
    return acc.add(pred, gt)


def merge(a: MetricAccumulator, b: MetricAccumulator) -> MetricAccumulator:
    return MetricAccumulator(a.sum_i + b.sum_i, a.sum_u + b.sum_u, a.per_sample_iou + b.per_sample_iou)


def finalize(acc: MetricAccumulator) -> dict[str, float]:
    if acc.count == 0:
        raise ValueError("cannot finalize an empty accumulator")
    ious = np.asarray(acc.per_sample_iou, dtype=np.float64)
    report = {
        "oIoU": acc.sum_i / acc.sum_u if acc.sum_u else 1.0,
        # fsum is correctly rounded, so shard order cannot change the mean
        "mIoU": math.fsum(acc.per_sample_iou) / acc.count,
    }
    for x in THRESHOLDS:
        report[f"Pr@{x}"] = float(np.count_nonzero(ious >= x) / acc.count)
    report["count"] = acc.count
    return report


def write_report(report: dict, path_stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (``key value`` lines) and ``<stem>.json``."""
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
    txt.write_text("".join(f"{k} {v}\n" for k, v in report.items()), encoding="utf-8")
    js.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return txt, js


def read_report(path: str | Path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, value = line.split(" ", 1)
        out[key] = int(value) if key == "count" else float(value)
    return out
