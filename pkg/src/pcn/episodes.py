"""Episodic meta-training of the calibration module on fake-novel tasks.

Each episode samples fake-novel classes from the base set, fits a fresh
novel classifier on their support, then takes one SGD step on the
calibrator using the query loss.  Backbone, base classifier and the
episode's novel classifier are all held fixed during that step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .classifiers import relabel, support_class_weights, train_novel
from .data import Dataset
from .errors import ConfigError, SamplingError
from .fusion import CalibTransformer, LinearCalibrator
from .model import VARIANTS, Calibrator, ModelBundle, score_stack
from .optim import SGD, SgdConfig
from .tensor import Tensor

# Independent RNG streams derived from the master seed.
STREAM_SAMPLE, STREAM_NOVEL_INIT, STREAM_CALIB_INIT = 1, 2, 3


@dataclass(frozen=True)
class MetaTrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-2
    momentum: float = 0.9
    n_fake_novel: int = 1
    shots: int = 1
    queries: int = 1
    inner_iters: int = 50
    inner_lr: float = 0.1
    episodes_per_step: int = 1
    d: int = 16
    scale_position: str = "post"
    weighted: bool = True  # inverse-frequency class weights in the query loss

    def validate(self, n_base: int | None = None) -> None:
        if self.iterations < 1 or self.episodes_per_step < 1:
            raise ConfigError("iterations and episodes_per_step must be positive")
        if self.n_fake_novel < 1 or self.shots < 1 or self.queries < 1:
            raise ConfigError("n_fake_novel, shots and queries must be >= 1")
        if n_base is not None and self.n_fake_novel >= n_base:
            raise ConfigError("need at least one remaining base class besides the fake-novel ones")
        if self.learning_rate < 0 or self.inner_lr < 0:
            raise ConfigError("learning rates must be >= 0")


@dataclass
class Episode:
    support: list[int]
    query: list[int]
    fake_novel_ids: tuple[int, ...]
    remaining_base_ids: tuple[int, ...]
    shots: int
    queries: int
    seed: tuple[int, ...] = ()

    @property
    def base_class_ids(self) -> tuple[int, ...]:
        return (0,) + self.remaining_base_ids

    @property
    def novel_class_ids(self) -> tuple[int, ...]:
        return (0,) + self.fake_novel_ids

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self.base_class_ids + self.fake_novel_ids


def _pick(rng, pool: Sequence[int], k: int, what: str) -> list[int]:
    if len(pool) < k:
        raise SamplingError(f"need {k} images for {what}, only {len(pool)} available")
    return [int(i) for i in rng.choice(np.asarray(pool), size=k, replace=False)]


def sample_episode(dataset: Dataset, cfg: MetaTrainConfig, rng: np.random.Generator, seed=()) -> Episode:
    """Fake-novel classes, K supports and Q queries each, plus as many queries of the remaining classes.

    Support images contain only their fake-novel class (plus background).
    """
    base_ids = dataset.base_ids
    cfg.validate(len(base_ids))
    fake = tuple(sorted(int(c) for c in rng.choice(base_ids, size=cfg.n_fake_novel, replace=False)))
    remaining = tuple(c for c in base_ids if c not in fake)
    train = dataset.train_idx
    used: set[int] = set()
    support, query = [], []
    for f in fake:
        present = dataset.images_with(f, train)
        pure = [i for i in present if set(np.unique(dataset.masks[i])) <= {0, f}]
        sup = _pick(rng, pure, cfg.shots, f"support of class {f}")
        used.update(sup)
        q = _pick(rng, [i for i in present if i not in used], cfg.queries, f"queries of class {f}")
        used.update(q)
        support += sup
        query += q
    for _ in range(cfg.n_fake_novel * cfg.queries):
        c = int(rng.choice(remaining))
        q = _pick(rng, [i for i in dataset.images_with(c, train) if i not in used], 1, f"queries of class {c}")
        used.update(q)
        query += q
    return Episode(support, query, fake, remaining, cfg.shots, cfg.queries, tuple(seed))


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def init_calibrator(variant: str, hw: int, n_base: int, n_novel: int, cfg: MetaTrainConfig, seed: int) -> Calibrator:
    rng = np.random.default_rng([seed, STREAM_CALIB_INIT])
    if variant == "pcn":
        return CalibTransformer.init(hw, cfg.d, rng, cfg.scale_position, "features")
    if variant == "selfattn":
        return CalibTransformer.init(hw, cfg.d, rng, cfg.scale_position, "scores")
    if variant in ("linear", "linear_nores"):
        return LinearCalibrator.init(1 + n_base + n_novel, 1 + n_base, residual=variant == "linear")
    raise ConfigError(f"unknown calibration variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class EpisodeResult:
    meta_loss: float
    inner_final_loss: float
    lr: float


def episode_loss(ep: Episode, dataset: Dataset, bundle: ModelBundle, calib: Calibrator, cfg: MetaTrainConfig, rng) -> tuple[T.Tensor, float]:
    """Query loss of one episode (on the tape w.r.t. the calibrator only)."""
    bank = bundle.bank
    sup_targets = np.stack([relabel(dataset.masks[i], ep.novel_class_ids, strict=False) for i in ep.support])
    fit = train_novel(bank.fused[ep.support], sup_targets, ep.novel_class_ids, rng, cfg.inner_iters, cfg.inner_lr)
    factor = dataset.masks.shape[-1] // bank.fused.shape[-1]
    targets = [relabel(dataset.masks[i], ep.class_ids) for i in ep.query]
    weights = support_class_weights(np.stack(targets), len(ep.class_ids)) if cfg.weighted else None
    losses = []
    for i, target in zip(ep.query, targets):
        stack = score_stack(bundle, fit.classifier, bank.fused[i], bank.tap[i], ep.base_class_ids, "pcn", calib)
        h, w = bank.fused.shape[-2:]
        scores = T.upsample_nearest(T.reshape(stack.y_calib, (stack.c, h, w)), factor)
        losses.append(T.cross_entropy(T.reshape(scores, (stack.c, -1)), target.ravel(), weights))
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses)), fit.losses[-1] if fit.losses else float("nan")


def run_episode(
    ep: Episode,
    dataset: Dataset,
    bundle: ModelBundle,
    calib: Calibrator,
    opt: SGD,
    step: int,
    cfg: MetaTrainConfig,
    rng: np.random.Generator,
) -> EpisodeResult:
    """One update of the calibrator from one episode."""
    bundle.check_frozen()
    loss, inner = episode_loss(ep, dataset, bundle, calib, cfg, rng)
    loss.backward()
    lr = opt.step(step)
    return EpisodeResult(loss.item(), inner, lr)


@dataclass
class MetaTrainLog:
    rows: list[dict] = field(default_factory=list)

    def meta_losses(self) -> np.ndarray:
        return np.array([r["meta_loss"] for r in self.rows])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "fake_novel_ids", "inner_final_loss", "meta_loss", "lr"])
            for r in self.rows:
                w.writerow([
                    r["episode"],
                    " ".join(str(c) for c in r["fake_novel_ids"]),
                    repr(r["inner_final_loss"]),
                    repr(r["meta_loss"]),
                    repr(r["lr"]),
                ])
        return path


def meta_train(
    dataset: Dataset,
    bundle: ModelBundle,
    cfg: MetaTrainConfig,
    variant: str = "pcn",
    seed: int = 0,
    progress=None,
) -> tuple[Calibrator, MetaTrainLog]:
    """Loop sample_episode + run_episode; ``cfg.iterations`` rows in the log.

    With ``episodes_per_step > 1`` the step gradient is the mean over that
    many episodes and each log row reports the mean losses of its batch.
    """
    cfg.validate(len(dataset.base_ids))
    bundle.check_frozen()
    if bundle.bank is None:
        raise ConfigError("bundle has no feature bank")
    hw = int(np.prod(bundle.bank.fused.shape[-2:]))
    calib = init_calibrator(variant, hw, len(dataset.base_ids), len(dataset.novel_ids), cfg, seed)
    sched = SgdConfig(cfg.learning_rate, cfg.momentum, "cosine", cfg.iterations)
    opt = SGD(list(calib.params.values()), sched)
    log = MetaTrainLog()
    for it in range(cfg.iterations):
        metas, inners, fakes = [], [], []
        for b in range(cfg.episodes_per_step):
            idx = it * cfg.episodes_per_step + b
            ep = sample_episode(dataset, cfg, episode_rng(seed, STREAM_SAMPLE, idx), seed=(seed, idx))
            loss, inner = episode_loss(ep, dataset, bundle, calib, cfg, episode_rng(seed, STREAM_NOVEL_INIT, idx))
            T.scale(loss, 1.0 / cfg.episodes_per_step).backward()
            metas.append(loss.item())
            inners.append(inner)
            fakes.extend(ep.fake_novel_ids)
        lr = opt.step(it)
        row = {
            "episode": it,
            "fake_novel_ids": fakes,
            "inner_final_loss": float(np.mean(inners)),
            "meta_loss": float(np.mean(metas)),
            "lr": lr,
        }
        log.rows.append(row)
        if progress is not None:
            progress(row)
    for p in calib.params.values():
        p.requires_grad = False
    return calib, log
