"""Central finite-difference gradient checking against autograd."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch

from ..errors import NumericalError


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    probes: int
    measure: str = "max_rel_err"  # oracle comparisons report an absolute difference

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<48s} {self.measure}={self.max_rel_error:.3e} tol={self.tolerance:.0e} probes={self.probes}"


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _scalar(f):
    value = f()
    value = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(value):
        raise NumericalError("verify", "objective is not finite")
    return value


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    probes: int = 8,
    seed: int = 0,
    prefix: str = "",
) -> list[GradCheckReport]:
    """Compare autograd gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the tensors in ``params``, which are
    perturbed in place one coordinate at a time. Returns one report per
    parameter tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(params)
    tensors = [params[n] for n in names]
    value = f()
    if not bool(torch.isfinite(value)):
        raise NumericalError("verify", "objective is not finite")
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    reports = []
    for name, tensor, grad in zip(names, tensors, grads):
        flat = tensor.data.view(-1)
        analytic = torch.zeros_like(flat) if grad is None else grad.reshape(-1)
        picks = rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False)
        worst = 0.0
        for idx in picks:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                plus = _scalar(f)
                flat[idx] = orig - eps
                minus = _scalar(f)
                flat[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[idx]), numeric))
        reports.append(GradCheckReport(prefix + name, worst, tol, worst < tol, len(picks)))
    return reports
