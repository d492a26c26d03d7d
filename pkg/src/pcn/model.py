"""Frozen backbone + base classifier + optional calibrator, and the scoring path shared
by episodic training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, FeatureBank, is_frozen
from .checkpoint import load_checkpoint, save_checkpoint
from .classifiers import BaseClassifier, NovelClassifier
from .errors import ConfigError, ContractError
from .fusion import (
    CalibTransformer,
    LinearCalibrator,
    ScoreStack,
    calibrate,
    calibrate_linear,
    fuse_nsf,
    fuse_npf,
    fuse_plain,
)
from .tensor import Tensor

Calibrator = Union[CalibTransformer, LinearCalibrator]

VARIANTS = ("pcn", "selfattn", "linear", "linear_nores")
MODES = ("plain", "npf", "nsf", "pcn", "selfattn", "linear", "linear_nores", "oracle", "background")


@dataclass
class ModelBundle:
    backbone_cfg: BackboneConfig
    backbone: dict[str, Tensor]
    base: BaseClassifier
    bank: FeatureBank | None = None
    calibrators: dict[str, Calibrator] = field(default_factory=dict)

    def check_frozen(self) -> None:
        if not is_frozen(self.backbone) or not is_frozen(self.base.params()):
            raise ContractError("backbone and base classifier must be frozen")

    def frozen_state(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.backbone.items()}
        out.update({k: v.data.copy() for k, v in self.base.params().items()})
        return out


def apply_calibrator(stack: ScoreStack, tap: Tensor, calib: Calibrator) -> ScoreStack:
    if isinstance(calib, LinearCalibrator):
        return calibrate_linear(stack, calib)
    return calibrate(stack, tap, calib)


def score_stack(
    bundle: ModelBundle,
    novel: NovelClassifier,
    fused: np.ndarray,
    tap: np.ndarray,
    base_class_ids: Sequence[int],
    mode: str,
    calib: Calibrator | None = None,
) -> ScoreStack:
    """Fused (and optionally calibrated) scores for one image's features.

    ``base_class_ids`` is the activated base label space, background first.
    """
    f = Tensor(fused)
    ids = tuple(base_class_ids) + novel.class_ids[1:]
    rows = bundle.base.rows_for(base_class_ids)
    if mode == "npf":
        return fuse_npf(bundle.base, novel, f, rows)
    base_logits = bundle.base.activated_logits(f, base_class_ids)
    novel_logits = novel.logits(f)
    if mode == "plain":
        return fuse_plain(base_logits, novel_logits, ids)
    stack = fuse_nsf(base_logits, novel_logits, ids)
    if mode == "nsf":
        return stack
    if calib is None:
        raise ConfigError(f"mode {mode!r} needs a trained calibrator")
    return apply_calibrator(stack, Tensor(tap.reshape(tap.shape[0], -1)), calib)


def calibrator_params(calib: Calibrator) -> dict[str, Tensor]:
    return calib.params


def calibrator_meta(calib: Calibrator) -> dict:
    if isinstance(calib, LinearCalibrator):
        return {"kind": "linear", "residual": calib.residual, "n_base_rows": calib.n_base_rows}
    return {
        "kind": "transformer",
        "hw": calib.hw,
        "d": calib.d,
        "scale_position": calib.scale_position,
        "keys_from": calib.keys_from,
    }


def save_calibrator(path, calib: Calibrator, meta: dict | None = None):
    m = dict(meta or {})
    m["calibrator"] = calibrator_meta(calib)
    return save_checkpoint(path, calib.params, m)


def load_calibrator(path) -> tuple[Calibrator, dict]:
    tensors, meta = load_checkpoint(path)
    spec = meta.get("calibrator")
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: not a calibrator checkpoint")
    params = {k: T.Tensor(v) for k, v in tensors.items()}
    if spec["kind"] == "linear":
        calib = LinearCalibrator(params["lin.w"], params["lin.b"], int(spec["n_base_rows"]), bool(spec["residual"]))
    else:
        calib = CalibTransformer(params, int(spec["hw"]), int(spec["d"]), spec["scale_position"], spec["keys_from"])
    return calib, meta
