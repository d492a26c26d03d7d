"""Tape gradients against central finite differences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

Builder = Callable[[np.random.Generator], tuple[Sequence[Tensor], Callable[[], Tensor]]]


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_entries: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero entries from dominating."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def grad_check(
    builder: Builder,
    tolerance: float = 1e-4,
    seed: int = 0,
    eps: float = 1e-5,
    name: str = "",
) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    params, loss_fn = builder(rng)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst_rel = worst_abs = 0.0
    n = 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = numeric_grad(loss_fn, p, eps)
        worst_rel = max(worst_rel, float(relative_error(analytic, numeric).max()))
        worst_abs = max(worst_abs, float(np.abs(analytic - numeric).max()))
        n += p.data.size
    return GradCheckReport(name, worst_rel, worst_abs, n, tolerance)


# -- standard op graphs ---------------------------------------------------------

def _p(rng, *shape, low=-1.0, high=1.0):
    return T.parameter(rng.uniform(low, high, size=shape))


def _away_from_zero(rng, *shape):
    mag = rng.uniform(0.2, 1.0, size=shape)
    return T.parameter(mag * rng.choice([-1.0, 1.0], size=shape))


def _weighted_sum(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: T.sum(T.mul(y, w))


def _readout(build_out):
    """Wrap ``build_out()`` into a scalar loss with fixed random readout weights."""

    def builder(rng):
        params, fn = build_out(rng)
        with T.no_grad():
            probe = fn()
        head = _weighted_sum(probe, rng)
        return params, lambda: head(fn())

    return builder


def _matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    return [a, b], lambda: T.matmul(a, b)


def _linear(rng):
    x, w, b = _p(rng, 5, 4), _p(rng, 4, 3), _p(rng, 3)
    return [x, w, b], lambda: T.linear(x, w, b)


def _conv(rng):
    x, k, b = _p(rng, 2, 5, 5), _p(rng, 3, 2, 3, 3), _p(rng, 3)
    return [x, k, b], lambda: T.conv2d(x, k, b, padding=1, stride=1)


def _conv_strided(rng):
    x, k = _p(rng, 2, 2, 6, 6), _p(rng, 3, 2, 3, 3)
    return [x, k], lambda: T.conv2d(x, k, padding=1, stride=2)


def _conv1x1(rng):
    x, k = _p(rng, 3, 4, 4), _p(rng, 2, 3, 1, 1)
    return [x, k], lambda: T.conv2d(x, k)


def _softmax(rng):
    x = _p(rng, 3, 5, low=-3, high=3)
    return [x], lambda: T.softmax(x, axis=0)


def _log_softmax(rng):
    x = _p(rng, 4, 3, low=-3, high=3)
    return [x], lambda: T.log_softmax(x, axis=1)


def _relu(rng):
    x = _away_from_zero(rng, 4, 5)
    return [x], lambda: T.relu(x)


def _shape_ops(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 1, 3, 4)

    def fn():
        y = T.concat([a, b], axis=0)
        y = T.transpose(y, (2, 0, 1))
        y = T.reshape(y, (4, 9))
        return T.take_rows(y, [3, 0, 3])

    return [a, b], fn


def _pool_upsample(rng):
    x = _p(rng, 2, 6, 6)

    def fn():
        pooled = T.adaptive_avg_pool(x, 3)
        return T.add(T.upsample_nearest(pooled, 2), T.scale(x, 0.5))

    return [x], fn


def _adaptive_uneven(rng):
    x = _p(rng, 2, 5, 7)
    return [x], lambda: T.adaptive_avg_pool(x, 2)


def _avg_pool2(rng):
    x = _p(rng, 2, 4, 4)
    return [x], lambda: T.avg_pool2(x)


def _bias_mul(rng):
    x, b, s = _p(rng, 3, 4), _p(rng, 4), _p(rng)
    return [x, b, s], lambda: T.mul(T.add_bias(x, b, axis=1), s)


def _exp_log(rng):
    x = _p(rng, 3, 3, low=0.5, high=2.0)
    return [x], lambda: T.log(T.exp(x))


def _sum_axis(rng):
    x = _p(rng, 3, 4)
    return [x], lambda: T.sum(x, axis=1)


def _softmax_ce(rng):
    s = _p(rng, 4, 7, low=-2, high=2)
    target = rng.integers(0, 4, size=7)
    weights = rng.uniform(0.5, 2.0, size=4)
    return [s], lambda: T.cross_entropy(T.softmax(s, axis=0), target, weights)


def _ce(rng):
    s = _p(rng, 3, 6, low=-2, high=2)
    target = rng.integers(0, 3, size=6)
    target[0] = 255
    return [s], lambda: T.cross_entropy(s, target, ignore_id=255)


OP_GRAPHS: dict[str, Builder] = {
    "matmul": _readout(_matmul),
    "linear": _readout(_linear),
    "conv2d_3x3": _readout(_conv),
    "conv2d_stride2": _readout(_conv_strided),
    "conv2d_1x1": _readout(_conv1x1),
    "softmax": _readout(_softmax),
    "log_softmax": _readout(_log_softmax),
    "relu": _readout(_relu),
    "shape_ops": _readout(_shape_ops),
    "pool_upsample": _readout(_pool_upsample),
    "adaptive_pool_uneven": _readout(_adaptive_uneven),
    "avg_pool2": _readout(_avg_pool2),
    "bias_mul": _readout(_bias_mul),
    "exp_log": _readout(_exp_log),
    "sum_axis": _readout(_sum_axis),
    "softmax_cross_entropy": _softmax_ce,
    "cross_entropy_ignore": _ce,
}


def run_suite(
    seeds: Sequence[int] = range(20),
    tolerance: float = 1e-4,
    extra: dict[str, Builder] | None = None,
) -> list[GradCheckReport]:
    """Worst case per graph over ``seeds``."""
    graphs = dict(OP_GRAPHS)
    if extra:
        graphs.update(extra)
    reports = []
    for name, builder in graphs.items():
        per_seed = [grad_check(builder, tolerance, seed=s, name=name) for s in seeds]
        reports.append(max(per_seed, key=lambda r: r.max_rel_error))
    return reports


# -- calibration composites ---------------------------------------------------------

def _calib_episode(keys_from: str = "features", scale_position: str = "post", c: int = 4, m: int = 6, hw: int = 9, d: int = 3):
    """Fusion -> cross-covariance -> value transform -> offset -> query loss on a tiny episode."""
    from .fusion import CalibTransformer, calibrate, fuse_nsf

    def builder(rng):
        n_base_rows = c - 1  # background + base rows; the novel block adds one class
        base_logits = Tensor(rng.normal(size=(n_base_rows, hw)))
        novel_logits = Tensor(rng.normal(size=(2, hw)))
        f = T.parameter(rng.normal(size=(m, hw)))
        t = CalibTransformer.init(hw, d, rng, scale_position, keys_from)
        for p in t.params.values():
            p.data = rng.normal(scale=0.5, size=p.shape)
        target = rng.integers(0, c, size=hw)

        def loss():
            stack = calibrate(fuse_nsf(base_logits, novel_logits), f, t)
            return T.cross_entropy(stack.y_calib, target)

        return list(t.params.values()) + ([f] if keys_from == "features" else []), loss

    return builder


def _linear_calib(residual: bool):
    from .fusion import LinearCalibrator, calibrate_linear, fuse_nsf

    def builder(rng):
        base_logits, novel_logits = Tensor(rng.normal(size=(3, 9))), Tensor(rng.normal(size=(2, 9)))
        lin = LinearCalibrator.init(5, 3, residual)
        lin.weight.data = rng.normal(size=(5, 5))
        lin.bias.data = rng.normal(size=5)
        target = rng.integers(0, 4, size=9)

        def loss():
            return T.cross_entropy(calibrate_linear(fuse_nsf(base_logits, novel_logits), lin).y_calib, target)

        return [lin.weight, lin.bias], loss

    return builder


def _backbone_graph(rng):
    from .backbone import BackboneConfig, forward_taps, init_backbone

    cfg = BackboneConfig(trunk_channels=(2, 2, 3), fused_channels=3, input_size=8, ppm_bins=(1, 2), ppm_channels=2)
    params = init_backbone(cfg, rng)
    for p in params.values():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    x = Tensor(rng.normal(size=(3, 8, 8)))
    w = {k: Tensor(rng.normal(size=v.shape)) for k, v in forward_taps(x, cfg, params).items()}

    def loss():
        taps = forward_taps(x, cfg, params)
        total = None
        for k, v in taps.items():
            term = T.sum(T.mul(v, w[k]))
            total = term if total is None else T.add(total, term)
        return total

    return list(params.values()), loss


def composite_builders() -> dict[str, Builder]:
    return {
        "calib_pcn_episode": _calib_episode(),
        "calib_pcn_prescale": _calib_episode(scale_position="pre"),
        "calib_selfattn": _calib_episode(keys_from="scores"),
        "calib_linear_residual": _linear_calib(True),
        "calib_linear_no_residual": _linear_calib(False),
        "backbone_all_taps": _backbone_graph,
    }
