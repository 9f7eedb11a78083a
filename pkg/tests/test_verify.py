import math

import numpy as np
import pytest
import torch

from rrsis.errors import NumericalError
from rrsis.verify import GradCheckReport, finite_difference_check, oracle_attention, oracle_iou, relative_error
from rrsis.verify import suite
from rrsis.verify.oracles import bilinear_resize

F64 = torch.float64


class _WrongSquare(torch.autograd.Function):
    """x**2 whose backward pass is off by 10 percent: the corrupted-gradient fixture."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 2.2 * x


def test_square_at_three():
    theta = torch.tensor([3.0], dtype=F64, requires_grad=True)
    (report,) = finite_difference_check(lambda: (theta**2).sum(), {"theta": theta}, eps=1e-5)
    assert report.passed and report.max_rel_error < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_linear_exact(seed):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(6, generator=gen, dtype=F64).requires_grad_(True)
    c = torch.randn(6, generator=gen, dtype=F64)
    eps, u, n = 1e-6, 2.0**-53, 6
    (report,) = finite_difference_check(lambda: (w * c).sum(), {"w": w}, eps=eps, probes=n)
    # no truncation error for a linear f; what is left is rounding in the two sums
    # and in forming w +- eps, which is the worst case over the probed coordinates
    wd = w.detach()
    total = float((wd * c).abs().sum())
    bound = max(((n + 1) * u * total + 2 * u * abs(float(wi)) * abs(float(ci))) / eps / abs(float(ci)) for wi, ci in zip(wd, c))
    assert report.max_rel_error <= bound


def test_corrupted_gradient_fails():
    x = torch.randn(5, dtype=F64, requires_grad=True)
    (report,) = finite_difference_check(lambda: _WrongSquare.apply(x).sum(), {"x": x}, probes=5)
    assert not report.passed
    assert abs(report.max_rel_error - 0.2 / 2.2) < 1e-6


def test_pass_iff_below_tolerance():
    x = torch.randn(4, dtype=F64, requires_grad=True)
    for tol in (1e-12, 1e-4, 1.0):
        (r,) = finite_difference_check(lambda: (x.sin()).sum(), {"x": x}, tol=tol)
        assert r.passed == (r.max_rel_error < tol)
        assert r.tolerance == tol and r.probes == 4


def test_non_finite_objective():
    x = torch.ones(2, dtype=F64, requires_grad=True)
    with pytest.raises(NumericalError):
        finite_difference_check(lambda: (x / 0).sum(), {"x": x})


def test_bad_eps():
    x = torch.ones(2, dtype=F64, requires_grad=True)
    with pytest.raises(ValueError):
        finite_difference_check(lambda: x.sum(), {"x": x}, eps=0)


def test_unused_parameter_has_zero_gradient():
    x = torch.ones(2, dtype=F64, requires_grad=True)
    y = torch.ones(2, dtype=F64, requires_grad=True)
    reports = finite_difference_check(lambda: (x**2).sum(), {"x": x, "y": y})
    assert [r.name for r in reports] == ["x", "y"] and all(r.passed for r in reports)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-10, 0.0) == 1e-10 / 1e-8
    assert relative_error(2.0, 1.0) == 0.5


def test_report_string():
    line = str(GradCheckReport("capm/prompts", 1e-6, 1e-4, True, 8))
    assert line.startswith("PASS capm/prompts") and "probes=8" in line


def test_oracle_attention_examples():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 3))
    out, w = oracle_attention(rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), v, 0.5)
    assert np.array_equal(w, np.ones((2, 1))) and np.allclose(out, np.repeat(v, 2, 0), atol=0)
    values = rng.normal(size=(4, 3))
    out, _ = oracle_attention(rng.normal(size=(2, 5)), np.zeros((4, 5)), values, 1.0)
    assert np.allclose(out, values.mean(0), atol=1e-15)


def test_oracle_attention_matches_torch():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    out, _ = oracle_attention(q, k, v, 0.5)
    ref = torch.softmax(torch.as_tensor(q @ k.T * 0.5), -1) @ torch.as_tensor(v)
    assert np.abs(out - ref.numpy()).max() < 1e-14


def test_oracle_iou_examples():
    m = np.ones((3, 3), int)
    assert oracle_iou(m, m) == (9, 9)
    assert oracle_iou(m, 0 * m) == (0, 9)


def test_bilinear_oracle_matches_interpolate():
    x = np.random.default_rng(2).normal(size=(8, 8, 3))
    for size in ((2, 2), (4, 4), (16, 16), (3, 5)):
        ref = torch.nn.functional.interpolate(
            torch.as_tensor(x).permute(2, 0, 1)[None], size=size, mode="bilinear", align_corners=False
        )[0].permute(1, 2, 0)
        assert np.abs(bilinear_resize(x, size) - ref.numpy()).max() < 1e-13


def test_suite_reports_every_group():
    torch.set_default_dtype(F64)
    try:
        reports = suite.run_suite(full_model=False, oracle_trials=2, probes=3)
    finally:
        torch.set_default_dtype(torch.float32)
    names = {r.name for r in reports}
    for group in ("capm/", "lgfa/stage1/", "lgfa/stage4/", "lgfa/compensation/", "mid/l2v/", "mid/v2l/", "mid/deform/", "loss/ce/", "loss/dice/"):
        assert any(n.startswith(group) for n in names), group
    for name in suite.ORACLE_CHECKS:
        assert f"oracle/{name}" in names
    bad = [str(r) for r in reports if not r.passed]
    assert not bad, bad


def test_checks_ignore_global_rng_state():
    torch.set_default_dtype(F64)
    try:
        runs = []
        for global_seed in (0, 17):
            torch.manual_seed(global_seed)
            runs.append([str(r) for r in suite.grad_deform(probes=3) + suite.grad_l2v(probes=3)])
            runs[-1].append(suite.oracle_v2l_trial(4))
    finally:
        torch.set_default_dtype(torch.float32)
    assert runs[0] == runs[1]
