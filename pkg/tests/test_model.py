import pytest
import torch

from rrsis.config import ModelConfig
from rrsis.dataio import synth_generate
from rrsis.errors import NumericalError, ShapeError
from rrsis.model import build_model
from rrsis.types import stack_images


def _batch(size=64, n=2):
    data = synth_generate(n, size, seed=1)
    return stack_images(data), [t.expression for t in data]


@pytest.mark.parametrize("size", [64, 128])
def test_forward_shapes(size):
    cfg = ModelConfig(image_size=size)
    model = build_model(cfg)
    images, tokens = _batch(size)
    with torch.no_grad():
        out = model(images, tokens)
    assert tuple(out.logits.shape) == (2, size // 4, size // 4)
    assert tuple(out.logits_up.shape) == (2, size, size)
    assert tuple(out.decoder.visual.shape) == (2, cfg.num_visual_tokens, cfg.hidden_dim)
    assert out.text.length == cfg.seq_len


def test_build_is_seeded_and_side_effect_free():
    state = torch.random.get_rng_state()
    a, b = build_model(ModelConfig(seed=3)), build_model(ModelConfig(seed=3))
    assert torch.equal(torch.random.get_rng_state(), state)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    c = build_model(ModelConfig(seed=4))
    assert not torch.equal(a.prompts.prompts, c.prompts.prompts)


def test_forward_deterministic():
    model = build_model(ModelConfig())
    images, tokens = _batch()
    with torch.no_grad():
        assert torch.equal(model(images, tokens).logits, model(images, tokens).logits)


@pytest.mark.parametrize(
    "change", [dict(use_capm=False), dict(use_compensation=False), dict(decoder="single"), dict(decoder_norm="pre", decoder_rounds=2)]
)
def test_variants_run(change):
    model = build_model(ModelConfig(**change))
    images, tokens = _batch()
    out = model(images, tokens)
    out.logits_up.sum().backward()
    assert torch.isfinite(out.logits_up).all()


def test_wrong_image_size():
    with pytest.raises(ShapeError):
        build_model(ModelConfig())(torch.zeros(1, 32, 32, 3), [[4]])


def test_non_finite_image():
    images, tokens = _batch(n=1)
    images[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalError):
        build_model(ModelConfig())(images, tokens)
