"""Per-pixel base and novel classifiers and their training loops."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, forward_taps, freeze, kaiming
from .data import Dataset, image_to_array
from .errors import ConfigError, ContractError, DimensionError, LabelError
from .optim import SGD, SgdConfig
from .tensor import Tensor


@dataclass(frozen=True)
class ClassSplit:
    """Label spaces.  Background (id 0) is never counted in either set."""

    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...]
    fake_novel_ids: tuple[int, ...] = ()
    background_id: int = 0

    def __post_init__(self):
        for name in ("base_ids", "novel_ids", "fake_novel_ids"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        if set(self.base_ids) & set(self.novel_ids):
            raise ConfigError("base and novel classes overlap")
        if self.background_id in self.base_ids or self.background_id in self.novel_ids:
            raise ConfigError("background id cannot be a base or novel class")
        if not set(self.fake_novel_ids) <= set(self.base_ids):
            raise ConfigError("fake-novel classes must be drawn from the base classes")

    @property
    def remaining_base_ids(self) -> tuple[int, ...]:
        fn = set(self.fake_novel_ids)
        return tuple(c for c in self.base_ids if c not in fn)

    def with_fake_novel(self, ids: Sequence[int]) -> ClassSplit:
        return ClassSplit(self.base_ids, self.novel_ids, tuple(ids), self.background_id)


def label_map(class_ids: Sequence[int], num_ids: int = 256) -> np.ndarray:
    """Lookup table global id -> row index; unmapped ids get -1."""
    lut = np.full(num_ids, -1, dtype=np.int64)
    for row, cid in enumerate(class_ids):
        lut[cid] = row
    return lut


def relabel(mask: np.ndarray, class_ids: Sequence[int], strict: bool = True) -> np.ndarray:
    """Map a global-id mask to row indices of ``class_ids`` (row 0 is background).

    With ``strict`` an unmapped id is a :class:`LabelError`; otherwise it
    becomes background.
    """
    lut = label_map(class_ids)
    out = lut[mask.astype(np.int64)]
    if (out < 0).any():
        if strict:
            bad = int(mask[out < 0].ravel()[0])
            raise LabelError(f"mask id {bad} is not in label space {list(class_ids)}")
        out[out < 0] = 0
    return out


class BaseClassifier:
    """1x1 convolution with rows ``[background, *base_ids]``."""

    def __init__(self, weight: Tensor, bias: Tensor, base_ids: Sequence[int]):
        if weight.shape[0] != len(base_ids) + 1 or weight.shape[2:] != (1, 1):
            raise DimensionError(f"base weight {weight.shape} does not fit {len(base_ids)} base classes")
        self.weight, self.bias = weight, bias
        self.base_ids = tuple(base_ids)

    @classmethod
    def init(cls, m: int, base_ids: Sequence[int], rng: np.random.Generator) -> BaseClassifier:
        n = len(base_ids) + 1
        return cls(T.parameter(kaiming(rng, (n, m, 1, 1), m), "base.w"), T.parameter(np.zeros(n), "base.b"), base_ids)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return (0,) + self.base_ids

    def params(self) -> dict[str, Tensor]:
        return {"base.w": self.weight, "base.b": self.bias}

    def logits(self, features: Tensor) -> Tensor:
        return T.conv2d(features, self.weight, self.bias)

    def rows_for(self, class_ids: Sequence[int]) -> list[int]:
        lut = label_map(self.class_ids)
        rows = [int(lut[c]) for c in class_ids]
        if min(rows) < 0:
            raise LabelError(f"classes {list(class_ids)} not all known to the base classifier")
        return rows

    def activated_logits(self, features: Tensor, class_ids: Sequence[int]) -> Tensor:
        """Logits of the sub-classifier over ``class_ids``: exact row selection."""
        full = self.logits(features)
        if full.ndim == 3:
            return T.take_rows(full, self.rows_for(class_ids))
        return T.transpose(T.take_rows(T.transpose(full, (1, 0, 2, 3)), self.rows_for(class_ids)), (1, 0, 2, 3))


class NovelClassifier:
    """conv3x3 (m->m) -> relu -> conv1x1 (m -> n_out); row 0 is background."""

    def __init__(self, params: dict[str, Tensor], class_ids: Sequence[int]):
        self.p = params
        self.class_ids = tuple(class_ids)
        if params["novel.head.w"].shape[0] != len(self.class_ids):
            raise DimensionError("novel head rows do not match class_ids")

    @classmethod
    def init(cls, m: int, class_ids: Sequence[int], rng: np.random.Generator) -> NovelClassifier:
        n = len(class_ids)
        p = {
            "novel.conv.w": T.parameter(kaiming(rng, (m, m, 3, 3), m * 9), "novel.conv.w"),
            "novel.conv.b": T.parameter(np.zeros(m), "novel.conv.b"),
            "novel.head.w": T.parameter(kaiming(rng, (n, m, 1, 1), m), "novel.head.w"),
            "novel.head.b": T.parameter(np.zeros(n), "novel.head.b"),
        }
        return cls(p, class_ids)

    @property
    def weight(self) -> Tensor:
        return self.p["novel.head.w"]

    @property
    def bias(self) -> Tensor:
        return self.p["novel.head.b"]

    def params(self) -> dict[str, Tensor]:
        return self.p

    def hidden(self, features: Tensor) -> Tensor:
        return T.relu(T.conv2d(features, self.p["novel.conv.w"], self.p["novel.conv.b"], padding=1))

    def logits(self, features: Tensor) -> Tensor:
        return T.conv2d(self.hidden(features), self.weight, self.bias)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.p.items()}


def predict_scores(clf: BaseClassifier | NovelClassifier, features: Tensor) -> Tensor:
    """Pre-softmax logits ``(c', h, w)`` (or batched ``(n, c', h, w)``)."""
    return clf.logits(features)


def _flatten_pixels(logits: Tensor, factor: int = 1) -> Tensor:
    """(n, c, h, w) or (c, h, w) -> (c, n*H*W), nearest-upsampled by ``factor`` first."""
    if factor != 1:
        logits = T.upsample_nearest(logits, factor)
    if logits.ndim == 3:
        c = logits.shape[0]
        return T.reshape(logits, (c, -1))
    n, c = logits.shape[:2]
    return T.reshape(T.transpose(logits, (1, 0, 2, 3)), (c, -1))


def support_class_weights(targets: np.ndarray, num_classes: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """Inverse pixel frequency over the classes present, mean 1, clipped to [lo, hi].

    Absent classes get weight 1 (they contribute no pixels anyway).
    """
    counts = np.bincount(targets.ravel(), minlength=num_classes).astype(np.float64)[:num_classes]
    present = counts > 0
    w = np.ones(num_classes)
    inv = counts.sum() / counts[present]
    w[present] = inv / inv.mean()
    return np.clip(w, lo, hi)


@dataclass
class NovelFit:
    classifier: NovelClassifier
    losses: list[float] = field(default_factory=list)


def train_novel(
    features: np.ndarray,
    targets: np.ndarray,
    class_ids: Sequence[int],
    rng: np.random.Generator,
    iters: int = 50,
    lr: float = 0.1,
    weighted: bool = True,
) -> NovelFit:
    """Fit a fresh novel classifier on support features.

    ``features`` is ``(K, m, h, w)`` from the frozen backbone, ``targets`` the
    ``(K, h, w)`` row indices into ``class_ids``.  Every iteration uses the
    full support batch; the learning rate is fixed.
    """
    if features.shape[0] == 0:
        raise ContractError("empty support set")
    factor = targets.shape[-1] // features.shape[-1]
    if factor < 1 or targets.shape != (features.shape[0],) + tuple(d * factor for d in features.shape[2:]):
        raise DimensionError(f"support targets {targets.shape} do not match features {features.shape}")
    n_out = len(class_ids)
    clf = NovelClassifier.init(features.shape[1], class_ids, rng)
    x = Tensor(features)
    tflat = targets.reshape(targets.shape[0], -1).ravel()
    weights = support_class_weights(targets, n_out) if weighted else None
    opt = SGD(list(clf.p.values()), SgdConfig(lr, 0.0, "fixed"))
    losses = []
    with T.enable_grad():
        for it in range(iters):
            loss = T.cross_entropy(_flatten_pixels(clf.logits(x), factor), tflat, weights)
            loss.backward()
            opt.step(it)
            losses.append(loss.item())
    for p in clf.p.values():
        p.requires_grad = False
    return NovelFit(clf, losses)


def novel_support_loss(fit: NovelFit, features: np.ndarray, targets: np.ndarray, weighted: bool = True) -> float:
    n_out = len(fit.classifier.class_ids)
    w = support_class_weights(targets, n_out) if weighted else None
    with T.no_grad():
        factor = targets.shape[-1] // features.shape[-1]
        lg = _flatten_pixels(fit.classifier.logits(Tensor(features)), factor)
        return T.cross_entropy(lg, targets.ravel(), w).item()


# -- base training ----------------------------------------------------------------

@dataclass(frozen=True)
class BaseTrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass
class BaseTrainResult:
    backbone: dict[str, Tensor]
    classifier: BaseClassifier
    losses: list[float]
    lrs: list[float]


def train_base(
    dataset: Dataset,
    backbone_cfg: BackboneConfig,
    cfg: BaseTrainConfig,
    rng: np.random.Generator,
    backbone_params: dict[str, Tensor] | None = None,
) -> BaseTrainResult:
    """Jointly fit backbone and base classifier on the training split, then freeze both."""
    from .backbone import init_backbone

    cfg.validate()
    base_ids = dataset.base_ids
    train = np.asarray(dataset.train_idx)
    targets = np.stack([relabel(dataset.masks[i], [0] + base_ids) for i in train])
    images = np.stack([image_to_array(dataset.images[i]) for i in train])
    init_rng, order_rng = rng.spawn(2)
    params = backbone_params if backbone_params is not None else init_backbone(backbone_cfg, init_rng)
    clf = BaseClassifier.init(backbone_cfg.fused_channels, base_ids, init_rng)
    all_params = list(params.values()) + [clf.weight, clf.bias]
    steps_per_epoch = int(np.ceil(len(train) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    opt = SGD(all_params, SgdConfig(cfg.learning_rate, cfg.momentum, "cosine", total))
    losses, lrs = [], []
    step = 0
    for _ in range(cfg.epochs):
        perm = order_rng.permutation(len(train))
        for s in range(0, len(train), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            feats = forward_taps(Tensor(images[idx]), backbone_cfg, params)["layer4+high"]
            logits = _flatten_pixels(clf.logits(feats), backbone_cfg.input_size // backbone_cfg.latent_size)
            loss = T.cross_entropy(logits, targets[idx].ravel())
            loss.backward()
            lrs.append(opt.step(step))
            losses.append(loss.item())
            step += 1
    freeze(params)
    freeze(clf.params())
    return BaseTrainResult(params, clf, losses, lrs)


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    return float((pred == gt).mean())
