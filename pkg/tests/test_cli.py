import json

import numpy as np
import pytest
from PIL import Image

from rrsis import cli
from rrsis.dataio import save_dataset, synth_generate, write_image
from rrsis.verify import suite

FAST = ["--set", "steps=4", "--set", "checkpoint_every=2", "--set", "synth_train=4", "--set", "synth_val=2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--out", str(out)] + FAST) == 0
    return out


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"config.txt", "loss_log.tsv", "model.ckpt", "metrics_train.json", "metrics_val.json", "metrics_val.txt"} <= names
    assert json.loads((trained / "metrics_val.json").read_text())["count"] == 2


def test_output_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("RRSIS_OUTPUT_DIR", str(tmp_path / "env"))
    assert cli.main(["train", "--set", "steps=1", "--set", "synth_train=2", "--set", "synth_val=0"]) == 0
    assert (tmp_path / "env" / "model.ckpt").exists()


def test_eval_predictors(trained, tmp_path, capsys):
    ck = str(trained / "model.ckpt")
    assert cli.main(["eval", "--checkpoint", ck, "--predictor", "gt", "--out", str(tmp_path)]) == 0
    gt = json.loads(capsys.readouterr().out)
    assert all(gt[k] == 1.0 for k in gt if k != "count")
    assert cli.main(["eval", "--checkpoint", ck, "--predictor", "zeros", "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["oIoU"] == 0.0
    assert (tmp_path / "metrics_val.json").exists()


def test_eval_shards_match(trained, tmp_path, capsys):
    ck = str(trained / "model.ckpt")
    cli.main(["eval", "--checkpoint", ck, "--split", "train", "--out", str(tmp_path)])
    one = capsys.readouterr().out
    cli.main(["eval", "--checkpoint", ck, "--split", "train", "--shards", "3", "--out", str(tmp_path)])
    assert capsys.readouterr().out == one


def test_eval_config_mismatch(trained, tmp_path, capsys):
    code = cli.main(["eval", "--checkpoint", str(trained / "model.ckpt"), "--set", "hidden_dim=32", "--out", str(tmp_path)])
    assert code == 1
    assert "hidden_dim" in capsys.readouterr().err


def test_eval_manifest(trained, tmp_path, capsys):
    save_dataset(synth_generate(3, seed=5), tmp_path / "data", split="test")
    code = cli.main(
        ["eval", "--checkpoint", str(trained / "model.ckpt"), "--split", "test", "--set", f"manifest={tmp_path / 'data' / 'manifest.tsv'}", "--out", str(tmp_path)]
    )
    assert code == 0 and json.loads(capsys.readouterr().out)["count"] == 3


def test_predict(trained, tmp_path, capsys):
    image = synth_generate(1, 96, seed=3)[0].image[:, :80]
    write_image(image, tmp_path / "in.png")
    args = ["predict", "--checkpoint", str(trained / "model.ckpt"), "--image", str(tmp_path / "in.png"), "--expression", "large red circle tank"]
    assert cli.main(args + ["--out", str(tmp_path / "a"), "--dump"]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    mask = np.asarray(Image.open(tmp_path / "a" / "mask.png"))
    assert mask.shape == (96, 80) and set(np.unique(mask)) <= {0, 255}
    assert (tmp_path / "a" / "mask.png").read_bytes() == (tmp_path / "b" / "mask.png").read_bytes()
    assert (tmp_path / "a" / "overlay.png").exists()
    dump = {p.name for p in (tmp_path / "a" / "attention").iterdir()}
    assert {"index.json", "S1.f32", "S4.f32", "M.f32", "dec_cls_attn.f32", "S1.png", "M.png"} <= dump
    assert not (tmp_path / "b" / "attention").exists()


def test_predict_rejects_empty_expression(trained, tmp_path):
    write_image(np.zeros((64, 64, 3)), tmp_path / "in.png")
    code = cli.main(["predict", "--checkpoint", str(trained / "model.ckpt"), "--image", str(tmp_path / "in.png"), "--expression", "  ", "--out", str(tmp_path)])
    assert code == 1


def test_stats(tmp_path, capsys):
    from pathlib import Path

    manifest = Path(__file__).parent / "fixtures" / "stats20" / "manifest.tsv"
    assert cli.main(["stats", "--manifest", str(manifest), "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"count": 20, "average_length": 4.45, "vocabulary_size": 38}
    assert {"stats.json", "word_length.png", "categories.png", "object_size.png"} <= {p.name for p in tmp_path.iterdir()}


def test_verify_quick(capsys):
    assert cli.main(["verify", "--quick", "--trials", "1", "--probes", "2"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_verify_detects_corruption(monkeypatch, capsys):
    from test_verify import _WrongSquare
    import torch

    def corrupt(**kw):
        x = torch.randn(3, dtype=torch.float64, requires_grad=True)
        return suite.finite_difference_check(lambda: _WrongSquare.apply(x).sum(), {"x": x}, prefix="corrupt/", **kw)

    monkeypatch.setattr(suite, "GRADIENT_CHECKS", {"corrupt": corrupt})
    monkeypatch.setattr(suite, "ORACLE_CHECKS", {})
    assert cli.main(["verify", "--quick"]) == 3
    assert "FAIL corrupt/x" in capsys.readouterr().out


def test_numerical_failure_exit(tmp_path, monkeypatch):
    import rrsis.train as T

    real = T.combined_loss

    def poisoned(*a, **kw):
        r = real(*a, **kw)
        r.total = r.total * float("nan")
        return r

    monkeypatch.setattr(T, "combined_loss", poisoned)
    assert cli.main(["train", "--out", str(tmp_path)] + FAST) == 2


@pytest.mark.parametrize(
    "argv",
    [[], ["bogus"], ["eval"], ["train", "--set", "nokey=1"], ["train", "--set", "steps"], ["train", "--config", "/no/such/file"]],
)
def test_usage_errors(argv, tmp_path, capsys):
    try:
        code = cli.main(argv + (["--out", str(tmp_path)] if argv[:1] == ["train"] else []))
    except SystemExit as exc:
        code = exc.code
    assert code == 1
