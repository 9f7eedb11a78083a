import numpy as np
import pytest
import torch

from rrsis import dumps
from rrsis.config import ModelConfig
from rrsis.dataio import synth_generate
from rrsis.model import build_model
from rrsis.types import stack_images


def test_array_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7
    path = dumps.write_array(tmp_path / "a.f32", a)
    raw = path.read_bytes()
    assert raw[:4] == b"RSAD" and len(raw) == 4 + 8 + 12 + 24 * 4
    assert np.array_equal(dumps.read_array(path), a.astype(np.float32))


def test_bad_magic(tmp_path):
    (tmp_path / "x.f32").write_bytes(b"nope" + bytes(8))
    with pytest.raises(ValueError):
        dumps.read_array(tmp_path / "x.f32")


@pytest.fixture(scope="module")
def forward():
    cfg = ModelConfig()
    data = synth_generate(2, seed=0)
    with torch.no_grad():
        return cfg, build_model(cfg)(stack_images(data), [t.expression for t in data])


def test_attention_arrays(forward, tmp_path):
    cfg, out = forward
    arrays = dumps.attention_arrays(out, 1)
    for name in ("S1", "S2", "S3", "S4", "s1", "s4", "M", "regions", "dec_cls_attn", "dec_v2l_attn", "dec_deform_weights"):
        assert name in arrays, name
    assert arrays["S1"].shape == (256, cfg.text_dim)
    assert arrays["M"].shape == (2, 2)
    assert arrays["regions"].shape == (cfg.num_regions, 2)
    assert arrays["dec_cls_attn"].shape == (cfg.num_visual_tokens,)
    back = dumps.read_dump(dumps.write_dump(tmp_path, arrays))
    assert set(back) == set(arrays)
    assert np.array_equal(back["M"], arrays["M"].astype(np.float32))


def test_heatmaps_rendered(forward, tmp_path):
    cfg, out = forward
    arrays = dumps.attention_arrays(out, 0)
    maps = dumps.heatmaps(arrays, cfg.level_sizes)
    assert maps["S2"].shape == (8, 8) and maps["dec_cls_attn_level1"].shape == (16, 16)
    paths = dumps.render_heatmaps(arrays, cfg.level_sizes, tmp_path)
    assert {p.stem for p in paths} >= {"S1", "S2", "S3", "S4", "M"}
    blended = dumps.render_heatmaps(arrays, cfg.level_sizes, tmp_path / "over", image=np.zeros((64, 64, 3)))
    assert len(blended) == len(paths)
