import numpy as np
import pytest

from pcn import tensor as T
from pcn.backbone import TAPS, BackboneConfig, FeatureBank, extract_features, forward_taps, freeze, init_backbone, is_frozen
from pcn.errors import ConfigError, DimensionError


def test_default_feature_shape():
    cfg = BackboneConfig()
    params = init_backbone(cfg, np.random.default_rng(0))
    f = extract_features(T.Tensor(np.zeros((3, 32, 32))), cfg, params)
    assert f.shape == (32, 16, 16)
    assert cfg.hw == 256


def test_every_tap_on_latent_grid(tiny_bcfg):
    params = init_backbone(tiny_bcfg, np.random.default_rng(1))
    taps = forward_taps(T.Tensor(np.random.default_rng(2).normal(size=(2, 3, 32, 32))), tiny_bcfg, params)
    assert set(taps) == set(TAPS)
    for name, t in taps.items():
        assert t.shape == (2, tiny_bcfg.tap_channels(name), 16, 16)


def test_zero_input_gives_relu_of_biases_only(tiny_bcfg):
    params = init_backbone(tiny_bcfg, np.random.default_rng(0))  # biases start at zero
    f = extract_features(T.Tensor(np.zeros((3, 32, 32))), tiny_bcfg, params)
    assert np.all(f.data == 0.0)


def test_deterministic_init_and_forward(tiny_bcfg):
    a = init_backbone(tiny_bcfg, np.random.default_rng(5))
    b = init_backbone(tiny_bcfg, np.random.default_rng(5))
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    x = T.Tensor(np.random.default_rng(0).normal(size=(3, 32, 32)))
    assert extract_features(x, tiny_bcfg, a).data.tobytes() == extract_features(x, tiny_bcfg, b).data.tobytes()


def test_freeze_stops_tracking(tiny_bcfg):
    params = init_backbone(tiny_bcfg, np.random.default_rng(0))
    assert not is_frozen(params)
    freeze(params)
    assert is_frozen(params)
    f = extract_features(T.Tensor(np.ones((3, 32, 32))), tiny_bcfg, params)
    assert not f.requires_grad


def test_bank_matches_per_image_forward(small_ds, tiny_bcfg):
    cfg = BackboneConfig(**{**tiny_bcfg.__dict__, "feature_tap": "layer3"})
    params = init_backbone(cfg, np.random.default_rng(0))
    bank = FeatureBank.build(small_ds.images[:5], cfg, params, batch=2)
    assert bank.fused.shape == (5, 6, 16, 16) and bank.tap.shape == (5, 4, 16, 16)
    single = forward_taps(T.Tensor(small_ds.image_tensor(3)), cfg, params)
    np.testing.assert_allclose(bank.fused[3], single["layer4+high"].data, atol=1e-12)
    np.testing.assert_allclose(bank.tap[3], single["layer3"].data, atol=1e-12)


def test_bad_inputs():
    with pytest.raises(ConfigError):
        BackboneConfig(feature_tap="layer5").validate()
    with pytest.raises(ConfigError):
        BackboneConfig(ppm_bins=(3,)).validate()
    cfg = BackboneConfig()
    with pytest.raises(DimensionError):
        extract_features(T.Tensor(np.zeros((3, 16, 16))), cfg, init_backbone(cfg, np.random.default_rng(0)))
