import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import zero_biases
from rrsis.config import ModelConfig
from rrsis.encoders import CLS_ID, PAD_ID, ImageEncoder, TextEncoder, pad_tokens
from rrsis.errors import ShapeError
from rrsis.types import FeaturePyramid, TokenFeatures


def _encoder(cfg, seed=0):
    torch.manual_seed(seed)
    return ImageEncoder(cfg)


def test_desk_pyramid_shapes():
    pyr = _encoder(ModelConfig())(torch.rand(64, 64, 3))
    assert pyr.shapes == [(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 128)]
    assert pyr.is_finite()


@settings(max_examples=6, deadline=None)
@given(k=st.integers(1, 5))
def test_pyramid_shape_law(k):
    size = 32 * k
    cfg = ModelConfig(image_size=size, channels=(2, 2, 2, 2))
    pyr = _encoder(cfg)(torch.rand(1, size, size, 3))
    assert pyr.shapes == [(size // 2 ** (i + 2), size // 2 ** (i + 2), 2) for i in range(4)]


def test_zero_image_zero_biases():
    enc = zero_biases(_encoder(ModelConfig()))
    for level in enc(torch.zeros(2, 64, 64, 3)):
        assert torch.count_nonzero(level) == 0


def test_image_encoder_deterministic():
    image = torch.rand(64, 64, 3, generator=torch.Generator().manual_seed(3))
    a = _encoder(ModelConfig(), 5)(image)
    b = _encoder(ModelConfig(), 5)(image)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_image_size_mismatch():
    with pytest.raises(ShapeError):
        _encoder(ModelConfig())(torch.rand(1, 32, 32, 3))


def test_pyramid_validation():
    ok = [torch.zeros(1, 8 >> i, 8 >> i, 2) for i in range(4)]
    FeaturePyramid(tuple(ok))
    with pytest.raises(ShapeError):
        FeaturePyramid(tuple(ok[:3]))
    with pytest.raises(ShapeError):
        FeaturePyramid((ok[0], ok[0], ok[2], ok[3]))


def test_token_features_validation():
    values = torch.zeros(1, 3, 4)
    with pytest.raises(ShapeError):
        TokenFeatures(values, torch.tensor([[False, True, True]]))
    with pytest.raises(ShapeError):
        TokenFeatures(values, torch.ones(1, 2, dtype=torch.bool))


def test_encode_text_padding():
    cfg = ModelConfig()
    torch.manual_seed(0)
    enc = TextEncoder(cfg)
    out = enc([[5, 6, 7, 8, 9]])
    assert tuple(out.values.shape) == (1, 12, cfg.text_dim)
    assert int(out.pad_mask.sum()) == 6
    assert out.cls_index == 0
    prompts = torch.randn(cfg.num_prompts, cfg.text_dim)
    out = enc([[5, 6, 7, 8, 9]], prompts)
    assert tuple(out.values.shape) == (1, 16, cfg.text_dim)
    assert bool(out.pad_mask[0, 12:].all())


def test_prompts_influence_tokens():
    cfg = ModelConfig()
    torch.manual_seed(0)
    enc = TextEncoder(cfg)
    a = enc([[5, 6]], torch.zeros(cfg.num_prompts, cfg.text_dim)).values
    b = enc([[5, 6]], torch.randn(cfg.num_prompts, cfg.text_dim)).values
    assert not torch.allclose(a[:, 0], b[:, 0])


def test_wrong_prompt_count():
    cfg = ModelConfig()
    with pytest.raises(ShapeError):
        TextEncoder(cfg)([[5]], torch.zeros(cfg.num_prompts + 1, cfg.text_dim))


def test_pad_tokens_layout():
    ids, mask = pad_tokens([[4, 5], [6]], 4, 10)
    assert ids.tolist() == [[CLS_ID, 4, 5, PAD_ID], [CLS_ID, 6, PAD_ID, PAD_ID]]
    assert mask.tolist() == [[True, True, True, False], [True, True, False, False]]


def test_empty_expression():
    with pytest.raises(ValueError):
        pad_tokens([[]], 4, 10)


def test_over_length_by_flag():
    with pytest.raises(ValueError):
        pad_tokens([[3, 4, 5, 6]], 4, 10, truncate=False)
    ids, mask = pad_tokens([[3, 4, 5, 6]], 4, 10, truncate=True)
    assert ids.tolist() == [[CLS_ID, 3, 4, 5]]
    assert bool(mask.all())


def test_token_id_range():
    with pytest.raises(ValueError):
        pad_tokens([[10]], 4, 10)
