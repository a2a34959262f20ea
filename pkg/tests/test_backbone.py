import pytest
import torch

from mtdaflow.backbone import (
    BackboneLoadError,
    HybridExtractor,
    ShapeContractError,
    SmallConvExtractor,
    build_extractor,
    count_parameters,
    extract,
)
from mtdaflow.config import BackboneSpec


def test_small_conv_output_shape(spec):
    f = build_extractor(spec, in_channels=3, image_size=16)
    assert isinstance(f, SmallConvExtractor)
    out = extract(f, torch.rand(4, 3, 16, 16))
    assert out.shape == (4, 32)


def test_hybrid_output_shape_and_attention():
    spec = BackboneSpec(kind="hybrid_conv_attention", d_f=24, stem_channels=8, embed_dim=16, depth=2, num_heads=2)
    f = build_extractor(spec, in_channels=3, image_size=16)
    assert isinstance(f, HybridExtractor)
    f.eval()
    x = torch.rand(2, 3, 16, 16)
    assert extract(f, x).shape == (2, 24)
    maps = f.attention_maps(x)
    assert len(maps) == 2
    assert maps[0].shape == (2, 2, 16, 16)
    assert torch.allclose(maps[0].sum(dim=-1), torch.ones(2, 2, 16), atol=1e-5)


def test_hybrid_parameter_count_is_analytic():
    c, stem, e, d_f, tokens = 3, 8, 16, 8, 16
    half = stem // 2
    stem_params = c * half * 9 + 2 * half + half * stem * 9 + 2 * stem
    patch = stem * e + e
    pos = tokens * e
    block = 2 * e + (e * 3 * e + 3 * e) + (e * e + e) + 2 * e + (e * 2 * e + 2 * e) + (2 * e * e + e)
    head = 2 * e + (e * d_f + d_f) + 2 * d_f
    expected = stem_params + patch + pos + block + head
    f = HybridExtractor(3, 16, d_f=d_f, stem_channels=stem, embed_dim=e, depth=1, num_heads=2)
    assert count_parameters(f) == expected == 3228


@pytest.mark.parametrize(
    "shape",
    [(0, 3, 16, 16), (2, 1, 16, 16), (2, 3, 32, 32), (3, 16, 16)],
)
def test_shape_contract(spec, shape):
    f = build_extractor(spec, in_channels=3, image_size=16)
    with pytest.raises(ShapeContractError):
        extract(f, torch.zeros(shape))


def test_missing_pretrained_weights(tmp_path):
    spec = BackboneSpec(pretrained_weights=str(tmp_path / "nope.pt"))
    with pytest.raises(BackboneLoadError):
        build_extractor(spec)


def test_pretrained_weights_are_loaded(tmp_path, spec):
    torch.manual_seed(1)
    src = build_extractor(spec, 3, 16)
    path = tmp_path / "w.pt"
    torch.save(src.state_dict(), path)
    torch.manual_seed(2)
    loaded = build_extractor(BackboneSpec(**{**spec.__dict__, "pretrained_weights": str(path)}), 3, 16)
    for a, b in zip(src.parameters(), loaded.parameters()):
        assert torch.equal(a, b)


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_extractor(BackboneSpec(kind="resnet"))


def test_small_conv_gradient_matches_finite_differences():
    torch.manual_seed(0)
    f = SmallConvExtractor(3, 16, d_f=8, channels=(4, 4, 4)).double().eval()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    w = torch.randn(2, 8, dtype=torch.float64)

    def loss() -> torch.Tensor:
        return (extract(f, x) * w).sum()

    loss().backward()
    h = 1e-6
    for param, idx in [
        (f.features[0].weight, (0, 0, 1, 1)),
        (f.features[4].weight, (1, 2, 0, 2)),
        (f.bottleneck[0].weight, (3, 1)),
    ]:
        analytic = param.grad[idx].item()
        with torch.no_grad():
            orig = param[idx].item()
            param[idx] = orig + h
            up = loss().item()
            param[idx] = orig - h
            down = loss().item()
            param[idx] = orig
        assert analytic == pytest.approx((up - down) / (2 * h), rel=1e-3, abs=1e-8)


@pytest.mark.parametrize(
    "backbone",
    [
        BackboneSpec(d_f=16, conv_channels=[8, 8, 8]),
        BackboneSpec(kind="hybrid_conv_attention", d_f=16, stem_channels=8, embed_dim=16, depth=1, num_heads=2),
    ],
)
def test_extract_is_deterministic_per_sample(backbone):
    torch.manual_seed(0)
    f = build_extractor(backbone, in_channels=3, image_size=16).eval()
    x = torch.rand(3, 3, 16, 16)
    assert torch.equal(extract(f, x), extract(f, x))
    twin = torch.cat([x[:1], x[:1], x[1:]])
    out = extract(f, twin)
    assert torch.allclose(out[0], out[1], rtol=0.0, atol=1e-6)
