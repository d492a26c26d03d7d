import numpy as np
import pytest

from pcn import tensor as T
from pcn.backbone import is_frozen
from pcn.classifiers import (
    BaseClassifier,
    BaseTrainConfig,
    ClassSplit,
    NovelClassifier,
    novel_support_loss,
    relabel,
    support_class_weights,
    train_base,
    train_novel,
)
from pcn.data import SynthConfig, generate_dataset
from pcn.errors import ConfigError, ContractError, DimensionError, LabelError


def test_class_split_rules():
    s = ClassSplit((3, 4, 5), (1, 2)).with_fake_novel([4])
    assert s.remaining_base_ids == (3, 5)
    with pytest.raises(ConfigError):
        ClassSplit((1, 3), (1, 2))
    with pytest.raises(ConfigError):
        ClassSplit((3,), (1,), fake_novel_ids=(1,))


def test_relabel_strict_and_lenient():
    mask = np.array([[0, 4], [7, 4]])
    np.testing.assert_array_equal(relabel(mask, (0, 4, 7)), [[0, 1], [2, 1]])
    with pytest.raises(LabelError):
        relabel(mask, (0, 4))
    np.testing.assert_array_equal(relabel(mask, (0, 4), strict=False), [[0, 1], [0, 1]])


def test_support_weights_hand_case():
    # 6 background pixels, 2 of class 1, class 2 absent
    t = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    w = support_class_weights(t, 3)
    # inverse freqs 8/6, 8/2 -> normalised to mean 1 over present: 0.5, 1.5
    np.testing.assert_allclose(w, [0.5, 1.5, 1.0])
    w2 = support_class_weights(np.array([0] * 999 + [1]), 2)
    assert w2.min() >= 0.1 and w2.max() <= 10.0


def test_activated_logits_select_rows():
    rng = np.random.default_rng(0)
    clf = BaseClassifier.init(5, [3, 4, 5], rng)
    clf.bias.data = rng.normal(size=4)
    f = T.Tensor(rng.normal(size=(5, 2, 2)))
    full = clf.logits(f).data
    sub = clf.activated_logits(f, (0, 5, 3)).data
    np.testing.assert_array_equal(sub, full[[0, 3, 1]])
    with pytest.raises(LabelError):
        clf.rows_for((0, 9))


def test_train_novel_fits_support_and_freezes(small_ds):
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(2, 4, 8, 8))
    targets = np.zeros((2, 16, 16), dtype=np.int64)
    targets[0, :8, :8] = 1
    fit = train_novel(feats, targets, (0, 1), np.random.default_rng(1), iters=50, lr=0.1)
    assert len(fit.losses) == 50
    assert fit.losses[-1] < fit.losses[0]
    assert is_frozen(fit.classifier.params())
    assert novel_support_loss(fit, feats, targets) == pytest.approx(
        T.cross_entropy(
            T.reshape(T.transpose(T.upsample_nearest(fit.classifier.logits(T.Tensor(feats)), 2), (1, 0, 2, 3)), (2, -1)),
            targets.ravel(),
            support_class_weights(targets, 2),
        ).item()
    )


def test_train_novel_is_deterministic_and_checks_inputs():
    feats = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    targets = np.zeros((1, 8, 8), dtype=np.int64)
    targets[0, 2:6, 2:6] = 1
    a = train_novel(feats, targets, (0, 1), np.random.default_rng(7), iters=5)
    b = train_novel(feats, targets, (0, 1), np.random.default_rng(7), iters=5)
    assert all(a.classifier.p[k].data.tobytes() == b.classifier.p[k].data.tobytes() for k in a.classifier.p)
    with pytest.raises(ContractError):
        train_novel(feats[:0], targets[:0], (0, 1), np.random.default_rng(0))
    with pytest.raises(DimensionError):
        train_novel(feats, targets[:, :7, :7], (0, 1), np.random.default_rng(0))


def test_novel_runs_under_no_grad():
    feats = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    targets = np.zeros((1, 8, 8), dtype=np.int64)
    targets[0, :3] = 1
    with T.no_grad():
        fit = train_novel(feats, targets, (0, 1), np.random.default_rng(0), iters=3)
    assert fit.losses[-1] < fit.losses[0]
    assert isinstance(fit.classifier, NovelClassifier)


def test_base_training_reduces_loss_and_freezes(tiny_bcfg):
    ds = generate_dataset(SynthConfig(n_train=24, n_val=8), 0)
    res = train_base(ds, tiny_bcfg, BaseTrainConfig(epochs=3, batch_size=8, learning_rate=0.05), np.random.default_rng(0))
    assert len(res.losses) == 9 and len(res.lrs) == 9
    assert res.lrs[0] == pytest.approx(0.05)
    assert np.mean(res.losses[-3:]) < np.mean(res.losses[:3])
    assert is_frozen(res.backbone) and is_frozen(res.classifier.params())
    assert res.classifier.class_ids == (0, 3, 4, 5, 6, 7, 8)
