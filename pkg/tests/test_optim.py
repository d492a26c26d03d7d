import math

import numpy as np
import pytest

from pcn import tensor as T
from pcn.errors import ConfigError, ContractError
from pcn.optim import SGD, SgdConfig, sgd_step


def test_momentum_update_hand_values():
    p = T.parameter([1.0])
    opt = SGD([p], SgdConfig(0.1, momentum=0.5))
    for step, expected in enumerate([0.8, 0.5]):
        p.grad = np.array([2.0])
        opt.step(step)
        assert p.data[0] == pytest.approx(expected)
        assert p.grad is None
    # v1 = 2, v2 = 0.5 * 2 + 2 = 3 -> 0.8 - 0.3


def test_cosine_schedule_endpoints():
    cfg = SgdConfig(0.2, schedule="cosine", total_steps=10)
    assert cfg.lr_at(0) == pytest.approx(0.2)
    assert cfg.lr_at(5) == pytest.approx(0.1)
    assert cfg.lr_at(10) == pytest.approx(0.0, abs=1e-15)
    assert cfg.lr_at(99) == cfg.lr_at(10)
    assert cfg.lr_at(3) == pytest.approx(0.1 * (1 + math.cos(math.pi * 0.3)))


def test_zero_learning_rate_leaves_params_bit_identical():
    p = T.parameter([0.3, -0.7])
    before = p.data.copy()
    p.grad = np.array([5.0, 5.0])
    sgd_step([p], SgdConfig(0.0), 0)
    assert p.data.tobytes() == before.tobytes()


def test_frozen_params_skipped_missing_grad_rejected():
    frozen = T.Tensor([1.0])
    live = T.parameter([1.0])
    with pytest.raises(ContractError):
        SGD([frozen, live], SgdConfig(0.1)).step(0)
    live.grad = np.array([1.0])
    SGD([frozen, live], SgdConfig(0.1)).step(0)
    assert frozen.data[0] == 1.0 and live.data[0] == pytest.approx(0.9)


@pytest.mark.parametrize("kw", [dict(learning_rate=-1.0), dict(learning_rate=0.1, momentum=1.0),
                                dict(learning_rate=0.1, schedule="step"), dict(learning_rate=0.1, schedule="cosine")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SgdConfig(**kw)


def test_quadratic_converges():
    p = T.parameter([4.0, -3.0])
    opt = SGD([p], SgdConfig(0.1, momentum=0.5))
    for i in range(200):
        T.sum(T.mul(p, p)).backward()
        opt.step(i)
    np.testing.assert_allclose(p.data, 0.0, atol=1e-6)
