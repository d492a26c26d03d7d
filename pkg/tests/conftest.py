import numpy as np
import pytest

from pcn.backbone import BackboneConfig, FeatureBank, freeze, init_backbone
from pcn.classifiers import BaseClassifier
from pcn.data import SynthConfig, generate_dataset
from pcn.model import ModelBundle

SMALL = SynthConfig(n_train=160, n_val=40)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(SMALL, seed=0)


@pytest.fixture(scope="session")
def tiny_bcfg():
    return BackboneConfig(trunk_channels=(4, 4, 6), fused_channels=6, ppm_channels=2)


@pytest.fixture
def random_bundle(small_ds, tiny_bcfg):
    """Untrained but frozen backbone + base classifier; enough for plumbing tests."""
    rng = np.random.default_rng(0)
    bb = init_backbone(tiny_bcfg, rng)
    base = BaseClassifier.init(tiny_bcfg.fused_channels, small_ds.base_ids, rng)
    freeze(bb)
    freeze(base.params())
    return ModelBundle(tiny_bcfg, bb, base, FeatureBank.build(small_ds.images, tiny_bcfg, bb))


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_report():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
