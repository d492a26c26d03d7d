"""Small conv trunk with a pooled-context branch standing in for ResNet+PPM.

    stem     conv3x3 s1   (H x W)    -> tap "layer2" after 2x2 mean pooling
    down     conv3x3 s2   (h x w)    -> tap "layer3"
    stage3   conv3x3 s1   (h x w)    -> tap "layer4"
    context  per bin: adaptive pool -> 1x1 conv -> relu -> upsample, concat -> tap "high"
    fuse     1x1 conv over [layer4, high] -> relu     -> tap "layer4+high" (= F(x))

All taps share the latent grid (h, w); only the channel count differs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

TAPS = ("layer2", "layer3", "layer4", "high", "layer4+high")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    trunk_channels: tuple[int, ...] = (16, 16, 32)
    fused_channels: int = 32
    input_size: int = 32
    ppm_bins: tuple[int, ...] = (1, 2)
    ppm_channels: int = 8
    feature_tap: str = "layer4+high"

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(self.trunk_channels))
        object.__setattr__(self, "ppm_bins", tuple(self.ppm_bins))

    def validate(self) -> None:
        if len(self.trunk_channels) != 3:
            raise ConfigError("trunk_channels needs exactly three stages")
        if self.input_size % 2:
            raise ConfigError("input_size must be even (one stride-2 stage)")
        if self.feature_tap not in TAPS:
            raise ConfigError(f"feature_tap must be one of {TAPS}, got {self.feature_tap!r}")
        for b in self.ppm_bins:
            if b < 1 or self.latent_size % b:
                raise ConfigError(f"ppm bin {b} does not divide latent size {self.latent_size}")

    @property
    def latent_size(self) -> int:
        return self.input_size // 2

    @property
    def hw(self) -> int:
        return self.latent_size**2

    def tap_channels(self, tap: str | None = None) -> int:
        tap = tap or self.feature_tap
        t0, t1, t2 = self.trunk_channels
        high = self.ppm_channels * len(self.ppm_bins)
        return {"layer2": t0, "layer3": t1, "layer4": t2, "high": high, "layer4+high": self.fused_channels}[tap]


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg.validate()
    t0, t1, t2 = cfg.trunk_channels
    p: dict[str, Tensor] = {}

    def conv(name, cout, cin, k):
        p[f"{name}.w"] = T.parameter(kaiming(rng, (cout, cin, k, k), cin * k * k), f"{name}.w")
        p[f"{name}.b"] = T.parameter(np.zeros(cout), f"{name}.b")

    conv("stem", t0, cfg.in_channels, 3)
    conv("down", t1, t0, 3)
    conv("stage3", t2, t1, 3)
    for b in cfg.ppm_bins:
        conv(f"ppm{b}", cfg.ppm_channels, t2, 1)
    conv("fuse", cfg.fused_channels, t2 + cfg.ppm_channels * len(cfg.ppm_bins), 1)
    return p


def forward_taps(x: Tensor, cfg: BackboneConfig, params: dict[str, Tensor]) -> dict[str, Tensor]:
    """All feature taps for ``x`` of shape (3, H, W) or (N, 3, H, W)."""
    if x.ndim not in (3, 4) or x.shape[-3:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise DimensionError(
            f"backbone expects (.., {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
        )
    p = params
    stem = T.relu(T.conv2d(x, p["stem.w"], p["stem.b"], padding=1))
    down = T.relu(T.conv2d(stem, p["down.w"], p["down.b"], padding=1, stride=2))
    layer4 = T.relu(T.conv2d(down, p["stage3.w"], p["stage3.b"], padding=1))
    branches = []
    for b in cfg.ppm_bins:
        pooled = T.adaptive_avg_pool(layer4, b)
        ctx = T.relu(T.conv2d(pooled, p[f"ppm{b}.w"], p[f"ppm{b}.b"]))
        branches.append(T.upsample_nearest(ctx, cfg.latent_size // b))
    high = T.concat(branches, axis=-3)
    fused = T.relu(T.conv2d(T.concat([layer4, high], axis=-3), p["fuse.w"], p["fuse.b"]))
    return {
        "layer2": T.avg_pool2(stem),
        "layer3": down,
        "layer4": layer4,
        "high": high,
        "layer4+high": fused,
    }


def extract_features(x: Tensor, cfg: BackboneConfig, params: dict[str, Tensor], tap: str | None = None) -> Tensor:
    return forward_taps(x, cfg, params)[tap or cfg.feature_tap]


def freeze(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.requires_grad = False
        t.grad = None


def is_frozen(params: dict[str, Tensor]) -> bool:
    return not any(t.requires_grad for t in params.values())


@dataclass
class FeatureBank:
    """Frozen-backbone features for every image of a dataset, computed once.

    ``fused`` feeds the classifiers; ``tap`` feeds the calibration transformer
    (identical arrays when the configured tap is the fused map).
    """

    fused: np.ndarray  # (N, m, h, w)
    tap: np.ndarray  # (N, m_tap, h, w)
    tap_name: str = field(default="layer4+high")

    @classmethod
    def build(cls, images: np.ndarray, cfg: BackboneConfig, params: dict[str, Tensor], batch: int = 64) -> FeatureBank:
        from .data import image_to_array

        fused, tap = [], []
        with T.no_grad():
            for s in range(0, len(images), batch):
                x = Tensor(np.stack([image_to_array(im) for im in images[s : s + batch]]))
                taps = forward_taps(x, cfg, params)
                fused.append(taps["layer4+high"].data)
                tap.append(taps[cfg.feature_tap].data)
        return cls(np.concatenate(fused), np.concatenate(tap), cfg.feature_tap)
