import numpy as np
import pytest
import torch

import rrsis.train as T
from rrsis import checkpoint as ckpt
from rrsis.config import RunConfig, load_config
from rrsis.dataio import synth_generate
from rrsis.errors import CheckpointMismatchError, ConfigError
from rrsis.model import build_model


@pytest.fixture(scope="module")
def data():
    return synth_generate(4, seed=0)


def _cfg(**kw):
    values = {"steps": "6", "batch_size": "2", "checkpoint_every": "2"}
    values.update({k: str(v) for k, v in kw.items()})
    return load_config(None, values)


def test_poly_lr():
    assert T.poly_lr(1e-3, 0, 10) == 1e-3
    assert T.poly_lr(1e-3, 10, 10) == 0.0
    assert abs(T.poly_lr(1.0, 5, 10, 0.9) - 0.5**0.9) < 1e-15
    lrs = [T.poly_lr(1.0, s, 20) for s in range(21)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_batch_indices_cover_each_epoch():
    seen = [i for s in range(4) for i in T.batch_indices(s, 8, 2, seed=3)]
    assert sorted(seen) == list(range(8))
    assert T.batch_indices(5, 8, 2, 3) == T.batch_indices(5, 8, 2, 3)


def test_checkpoint_round_trip(tmp_path):
    cfg = _cfg()
    model = build_model(cfg.model)
    path = ckpt.save_checkpoint(tmp_path / "a.ckpt", ckpt.model_arrays(model), cfg, 7, extra={"note": 1})
    header, arrays = ckpt.load_checkpoint(path)
    assert header["step"] == 7 and header["format_version"] == 1 and header["extra"] == {"note": 1}
    assert ckpt.config_from_header(header) == cfg
    other = build_model(cfg.model.replace(seed=9))
    ckpt.load_model_state(other, arrays)
    for (n, a), (_, b) in zip(model.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), n
    raw = path.read_bytes()
    assert raw[:8] == b"RRSISCKP"


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage-bytes")
    with pytest.raises(ConfigError):
        ckpt.load_checkpoint(tmp_path / "x.ckpt")


def test_mismatch_lists_offenders(tmp_path):
    cfg = _cfg()
    path = ckpt.save_checkpoint(tmp_path / "a.ckpt", ckpt.model_arrays(build_model(cfg.model)), cfg, 0)
    wide = cfg.model.replace(hidden_dim=32, text_dim=16)
    with pytest.raises(CheckpointMismatchError) as info:
        ckpt.check_compatible(wide, ckpt.load_checkpoint(path)[0])
    assert {m[0] for m in info.value.mismatches} == {"hidden_dim", "text_dim"}
    with pytest.raises(CheckpointMismatchError) as info:
        ckpt.load_model_state(build_model(wide), ckpt.load_checkpoint(path)[1])
    names = {m[0] for m in info.value.mismatches}
    assert "decoder.proj_l.weight" in names and "text_encoder.embed.weight" in names


def test_train_writes_artifacts(tmp_path, data):
    result = T.train(_cfg(), data, tmp_path)
    assert not result.aborted
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["model.ckpt", "step000002.ckpt", "step000004.ckpt", "step000006.ckpt"]
    rows = T.read_loss_log(tmp_path / "loss_log.tsv")
    assert [r["step"] for r in rows] == list(range(6))
    assert all(np.isfinite(r["total"]) for r in rows)
    assert rows == result.losses


def test_resume_is_bitwise(tmp_path, data):
    full, part = tmp_path / "full", tmp_path / "part"
    T.train(_cfg(), data, full)
    T.train(_cfg(), data, part, stop_after=3)
    assert not (part / "model.ckpt").exists()
    T.train(_cfg(), data, part, resume=part / "step000002.ckpt")
    assert (full / "loss_log.tsv").read_bytes() == (part / "loss_log.tsv").read_bytes()
    assert (full / "model.ckpt").read_bytes() == (part / "model.ckpt").read_bytes()


def test_identical_runs_identical_metrics(tmp_path, data):
    a = T.train(_cfg(), data, tmp_path / "a")
    b = T.train(_cfg(), data, tmp_path / "b")
    assert T.evaluate(a.model, data) == T.evaluate(b.model, data)


def test_lambda_changes_loss_log(tmp_path, data):
    T.train(_cfg(steps=2), data, tmp_path / "a")
    T.train(_cfg(steps=2, lambda_ce=1.0), data, tmp_path / "b")
    assert (tmp_path / "a" / "loss_log.tsv").read_text() != (tmp_path / "b" / "loss_log.tsv").read_text()


def test_non_finite_loss_aborts(tmp_path, data, monkeypatch):
    real = T.combined_loss
    calls = {"n": 0}

    def poisoned(*args, **kw):
        report = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 5:
            report.total = report.total * float("nan")
        return report

    monkeypatch.setattr(T, "combined_loss", poisoned)
    result = T.train(_cfg(), data, tmp_path)
    assert result.aborted
    assert result.last_checkpoint.name == "step000004.ckpt" and result.last_checkpoint.exists()
    assert not (tmp_path / "model.ckpt").exists()
    assert len(T.read_loss_log(tmp_path / "loss_log.tsv")) == 4


def test_evaluate_shards_agree(data):
    model = build_model(RunConfig().model)
    assert T.evaluate(model, data, shards=1) == T.evaluate(model, data, shards=3)


def test_load_model_restores(tmp_path, data):
    result = T.train(_cfg(steps=2), data, tmp_path)
    model, cfg, header = T.load_model(tmp_path / "model.ckpt")
    assert header["step"] == 2 and cfg == _cfg(steps=2)
    images = torch.as_tensor(np.stack([t.image for t in data]), dtype=torch.float32)
    tokens = [t.expression for t in data]
    assert torch.equal(T.predict_logits(model, images, tokens), T.predict_logits(result.model, images, tokens))
