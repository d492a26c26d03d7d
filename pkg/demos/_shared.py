"""Helpers shared by the demo scripts: one cached base model under demo_out/."""
from pathlib import Path

import numpy as np

from pcn.config import ExperimentConfig
from pcn.pipeline import base_stage, get_dataset, load_bundle, save_base

OUT = Path("demo_out")


def base_bundle(cfg: ExperimentConfig | None = None):
    """Dataset and frozen bundle; trains the base model once and reuses the checkpoint."""
    cfg = cfg or ExperimentConfig()
    ds = get_dataset(cfg)
    ckpt = OUT / f"base-{cfg.hash()}.ckpt"
    if not ckpt.exists():
        OUT.mkdir(exist_ok=True)
        print("training backbone + base classifier (under a minute) ...")
        res = base_stage(cfg, ds)
        print(f"  loss {np.mean(res.losses[:10]):.3f} -> {np.mean(res.losses[-10:]):.3f}")
        save_base(ckpt, res, cfg)
    return cfg, ds, load_bundle(ckpt, cfg, ds)
