"""Stage-level glue shared by the command line and the demo scripts.

Every artifact written here embeds the config hash and master seed.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, FeatureBank, freeze, is_frozen
from .checkpoint import load_checkpoint, save_checkpoint
from .classifiers import BaseClassifier, train_base
from .config import ExperimentConfig, dump_config
from .data import Dataset, generate_dataset, load_dataset
from .episodes import meta_train
from .errors import ContractError, DataError
from .evaluation import evaluate_gfss
from .model import ModelBundle, load_calibrator, save_calibrator

STREAM_BASE_TRAIN = 20


def write_resolved_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    (out / "run.json").write_text(json.dumps({"config_hash": cfg.hash(), "seed": cfg.seed}, indent=2) + "\n")


def get_dataset(cfg: ExperimentConfig, path=None) -> Dataset:
    path = path or cfg.dataset_path
    return load_dataset(path) if path else generate_dataset(cfg.dataset, cfg.seed)


def check_split(ds: Dataset) -> None:
    """Refuse datasets whose training masks contain novel ids."""
    novel = set(ds.novel_ids)
    for i in ds.train_idx:
        present = set(int(c) for c in np.unique(ds.masks[i])) & novel
        if present:
            raise DataError(f"training image {i} contains novel class(es) {sorted(present)}")


def base_stage(cfg: ExperimentConfig, ds: Dataset):
    check_split(ds)
    rng = np.random.default_rng([cfg.seed, STREAM_BASE_TRAIN])
    return train_base(ds, cfg.backbone, cfg.base_training, rng)


def save_base(path, result, cfg: ExperimentConfig) -> Path:
    tensors = {**result.backbone, **result.classifier.params()}
    meta = {
        "stage": "base",
        "frozen": is_frozen(result.backbone) and is_frozen(result.classifier.params()),
        "base_ids": list(result.classifier.base_ids),
        "backbone": cfg.to_dict()["backbone"],
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    }
    return save_checkpoint(path, tensors, meta)


def write_loss_csv(path, losses, lrs) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for i, (l, lr) in enumerate(zip(losses, lrs)):
            w.writerow([i, repr(l), repr(lr)])
    return Path(path)


def load_bundle(path, cfg: ExperimentConfig, ds: Dataset, tap: str | None = None) -> ModelBundle:
    """Frozen bundle from a base checkpoint, with features precomputed for ``ds``."""
    tensors, meta = load_checkpoint(path)
    if meta.get("stage") != "base" or not meta.get("frozen"):
        raise ContractError(f"{path}: not a frozen base checkpoint")
    stored = dict(meta.get("backbone", {}))
    wanted = cfg.to_dict()["backbone"]
    stored.pop("feature_tap", None)
    if {k: v for k, v in wanted.items() if k != "feature_tap"} != stored:
        raise ContractError(f"{path}: backbone architecture differs from the config")
    bcfg = cfg.backbone if tap is None else BackboneConfig(**{**cfg.to_dict()["backbone"], "feature_tap": tap})
    backbone = {k: T.Tensor(v) for k, v in tensors.items() if not k.startswith("base.")}
    base = BaseClassifier(T.Tensor(tensors["base.w"]), T.Tensor(tensors["base.b"]), meta["base_ids"])
    if list(base.base_ids) != ds.base_ids:
        raise ContractError("checkpoint base classes differ from the dataset's base split")
    freeze(backbone)
    freeze(base.params())
    return ModelBundle(bcfg, backbone, base, FeatureBank.build(ds.images, bcfg, backbone))


def meta_stage(cfg: ExperimentConfig, ds: Dataset, bundle: ModelBundle, variant: str | None = None, progress=None):
    return meta_train(ds, bundle, cfg.meta_training, variant or cfg.variant, cfg.seed, progress)


def save_meta(out: Path, variant: str, calib, log, cfg: ExperimentConfig, tap: str) -> Path:
    ckpt = save_calibrator(
        out / f"calib_{variant}.ckpt",
        calib,
        {"stage": "meta", "variant": variant, "feature_tap": tap, "config_hash": cfg.hash(), "seed": cfg.seed},
    )
    log.write_csv(out / f"meta_log_{variant}.csv")
    return ckpt


def attach_calibrator(bundle: ModelBundle, path) -> str:
    calib, meta = load_calibrator(path)
    variant = meta.get("variant")
    if variant is None:
        raise ContractError(f"{path}: calibrator checkpoint without a variant")
    bundle.calibrators[variant] = calib
    return variant


def eval_stage(cfg: ExperimentConfig, ds: Dataset, bundle: ModelBundle, modes, threads: int = 1):
    e = cfg.evaluation
    return evaluate_gfss(
        bundle,
        ds,
        modes,
        num_tasks=e.num_tasks,
        shots=e.shots,
        seed=cfg.seed,
        inner_iters=e.inner_iters,
        inner_lr=e.inner_lr,
        include_background=e.include_background,
        global_accumulate=e.global_accumulate,
        threads=threads,
    )
