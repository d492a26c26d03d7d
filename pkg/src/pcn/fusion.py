"""Score fusion (plain, NPF, NSF) and the calibrators that refine fused scores.

Every fused score matrix is ``(c, hw)`` with rows in the fixed order
``[background, *base classes, *novel classes]``; the novel classifier's own
background row is always dropped at fusion time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import kaiming
from .classifiers import BaseClassifier, NovelClassifier
from .data import write_pnm
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor


@dataclass
class ScoreStack:
    class_ids: tuple[int, ...]
    n_base_rows: int  # background + base classes
    base_probs: Tensor | None = None
    novel_probs: Tensor | None = None
    y_nsf: Tensor | None = None
    y_plain: Tensor | None = None
    y_npf: Tensor | None = None
    y_delta: Tensor | None = None
    y_calib: Tensor | None = None

    @property
    def c(self) -> int:
        return len(self.class_ids)

    @property
    def n_novel_rows(self) -> int:
        return self.c - self.n_base_rows


def _flat(x: Tensor) -> Tensor:
    return T.reshape(x, (x.shape[0], -1)) if x.ndim == 3 else x


def _check_blocks(base_logits: Tensor, novel_logits: Tensor) -> tuple[Tensor, Tensor]:
    b, n = _flat(base_logits), _flat(novel_logits)
    if b.ndim != 2 or n.ndim != 2 or b.shape[1] != n.shape[1]:
        raise DimensionError(f"score blocks disagree on pixels: {base_logits.shape} vs {novel_logits.shape}")
    if n.shape[0] < 2:
        raise DimensionError("novel block needs a background row plus at least one class")
    return b, n


def _ids(class_ids, nb: int, nn: int) -> tuple[int, ...]:
    ids = tuple(class_ids) if class_ids is not None else tuple(range(nb + nn - 1))
    if len(ids) != nb + nn - 1:
        raise DimensionError(f"{len(ids)} class ids for {nb + nn - 1} fused rows")
    return ids


def _union(base_rows: Tensor, novel_rows: Tensor) -> Tensor:
    return T.concat([base_rows, T.take_rows(novel_rows, range(1, novel_rows.shape[0]))], axis=0)


def fuse_nsf(base_logits: Tensor, novel_logits: Tensor, class_ids: Sequence[int] | None = None) -> ScoreStack:
    """Softmax each block over its own classes, then stack the probabilities."""
    b, n = _check_blocks(base_logits, novel_logits)
    pb, pn = T.softmax(b, axis=0), T.softmax(n, axis=0)
    return ScoreStack(_ids(class_ids, b.shape[0], n.shape[0]), b.shape[0], pb, pn, y_nsf=_union(pb, pn))


def fuse_plain(base_logits: Tensor, novel_logits: Tensor, class_ids: Sequence[int] | None = None) -> ScoreStack:
    """One softmax over the concatenated raw logits."""
    b, n = _check_blocks(base_logits, novel_logits)
    return ScoreStack(_ids(class_ids, b.shape[0], n.shape[0]), b.shape[0], y_plain=T.softmax(_union(b, n), axis=0))


def _unit_rows(w: Tensor) -> Tensor:
    flat = w.data.reshape(w.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise NumericError(f"zero weight vector for row(s) {np.nonzero(norms == 0)[0].tolist()}")
    inv = Tensor((1.0 / norms).reshape((-1,) + (1,) * (w.ndim - 1)) * np.ones_like(w.data))
    return T.mul(w, inv)


def fuse_npf(
    base_clf: BaseClassifier,
    novel_clf: NovelClassifier,
    features: Tensor,
    base_rows: Sequence[int] | None = None,
) -> ScoreStack:
    """L2-normalise every final-layer class vector over channels, then one joint softmax.

    ``base_rows`` restricts the base classifier to a subset of its rows.
    """
    rows = list(range(base_clf.weight.shape[0])) if base_rows is None else list(base_rows)
    wb = _unit_rows(T.take_rows(base_clf.weight, rows))
    bb = T.take_rows(base_clf.bias, rows)
    wn = _unit_rows(novel_clf.weight)
    lb = T.conv2d(features, wb, bb)
    ln = T.conv2d(novel_clf.hidden(features), wn, novel_clf.bias)
    ids = tuple(base_clf.class_ids[r] for r in rows) + novel_clf.class_ids[1:]
    plain = fuse_plain(lb, ln, ids)
    return ScoreStack(ids, len(rows), y_npf=plain.y_plain)


# -- calibration transformer -------------------------------------------------------

@dataclass
class CalibTransformer:
    """Cross-covariance attention with class-score rows and feature-channel rows as tokens.

    Query head maps each score row (length hw) to d, key and value heads map
    each feature-channel row; the calibration head maps each attended class
    row back to hw.  With ``keys_from="scores"`` keys/values are taken from
    the score rows instead (self-attention ablation).
    """

    params: dict[str, Tensor]
    hw: int
    d: int
    scale_position: str = "post"  # divide by sqrt(d) after ("post") or before ("pre") the softmax
    keys_from: str = "features"

    @classmethod
    def init(
        cls,
        hw: int,
        d: int,
        rng: np.random.Generator,
        scale_position: str = "post",
        keys_from: str = "features",
    ) -> CalibTransformer:
        if scale_position not in ("post", "pre"):
            raise ConfigError(f"scale_position must be 'post' or 'pre', got {scale_position!r}")
        if keys_from not in ("features", "scores"):
            raise ConfigError(f"keys_from must be 'features' or 'scores', got {keys_from!r}")
        p = {}
        for head in ("q", "k", "v"):
            p[f"{head}.w"] = T.parameter(kaiming(rng, (hw, d), hw), f"{head}.w")
            p[f"{head}.b"] = T.parameter(np.zeros(d), f"{head}.b")
        p["o.w"] = T.parameter(np.zeros((d, hw)), "o.w")
        p["o.b"] = T.parameter(np.zeros(hw), "o.b")
        return cls(p, hw, d, scale_position, keys_from)

    def head(self, name: str, x: Tensor) -> Tensor:
        if x.shape[-1] != self.hw:
            raise DimensionError(f"head {name} expects rows of length {self.hw}, got {x.shape}")
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))


def cross_covariance(y: Tensor, f: Tensor, t: CalibTransformer) -> Tensor:
    """``(c, m)`` matrix of query(score row) . key(feature row)."""
    y, f = _flat(y), _flat(f)
    if y.shape[1] != f.shape[1]:
        raise DimensionError(f"scores have {y.shape[1]} pixels, features {f.shape[1]}")
    return T.matmul(t.head("q", y), T.transpose(t.head("k", f)))


def attend(y: Tensor, f: Tensor, t: CalibTransformer) -> Tensor:
    """Offset rows ``(c, hw)`` produced by the transformer."""
    f = _flat(f)
    sigma = cross_covariance(y, f, t)
    inv = 1.0 / math.sqrt(t.d)
    attn = T.scale(T.softmax(sigma, axis=1), inv) if t.scale_position == "post" else T.softmax(T.scale(sigma, inv), axis=1)
    v = T.matmul(attn, t.head("v", f))
    return T.linear(v, t.params["o.w"], t.params["o.b"])


def calibrate(stack: ScoreStack, f: Tensor, t: CalibTransformer) -> ScoreStack:
    if stack.y_nsf is None:
        raise ContractError("calibrate needs NSF scores in the stack")
    keys = stack.y_nsf if t.keys_from == "scores" else f
    return _with_offset(stack, attend(stack.y_nsf, keys, t))


def _with_offset(stack: ScoreStack, offset: Tensor) -> ScoreStack:
    # y_delta is the offset as realised in floating point, so that
    # y_calib - y_nsf == y_delta and y_nsf + y_delta == y_calib hold bit-for-bit.
    y_calib = T.add(stack.y_nsf, offset)
    return replace(stack, y_delta=T.sub(y_calib, stack.y_nsf), y_calib=y_calib)


def calibrate_selfattn(stack: ScoreStack, t: CalibTransformer) -> ScoreStack:
    """Self-attention over class-score tokens: sigma is ``(c, c)``."""
    if t.keys_from != "scores":
        raise ConfigError("self-attention calibration needs a transformer with keys_from='scores'")
    return calibrate(stack, stack.y_nsf, t)


@dataclass
class LinearCalibrator:
    """One fully connected layer on each pixel's c-vector.

    Sized for ``c`` rows laid out as ``[bg, base..., novel...]``.  A stack with
    fewer rows (episodes, where one base class plays novel) uses the
    sub-block matching its base rows followed by its novel rows.
    """

    weight: Tensor  # (c, c)
    bias: Tensor  # (c,)
    n_base_rows: int
    residual: bool = True

    @classmethod
    def init(cls, c: int, n_base_rows: int, residual: bool = True) -> LinearCalibrator:
        w = np.zeros((c, c)) if residual else np.eye(c)
        return cls(T.parameter(w, "lin.w"), T.parameter(np.zeros(c), "lin.b"), n_base_rows, residual)

    @property
    def params(self) -> dict[str, Tensor]:
        return {"lin.w": self.weight, "lin.b": self.bias}

    def num_parameters(self) -> int:
        return self.weight.data.size + self.bias.data.size

    def rows_for(self, stack: ScoreStack) -> list[int]:
        c = self.weight.shape[0]
        nb, nn = stack.n_base_rows, stack.n_novel_rows
        if nb > self.n_base_rows or nn > c - self.n_base_rows:
            raise DimensionError(f"stack with {nb}+{nn} rows does not fit a {c}-row linear calibrator")
        return list(range(nb)) + list(range(c - nn, c))


def calibrate_linear(stack: ScoreStack, lin: LinearCalibrator) -> ScoreStack:
    if stack.y_nsf is None:
        raise ContractError("calibrate_linear needs NSF scores in the stack")
    rows = lin.rows_for(stack)
    w = T.transpose(T.take_rows(T.transpose(T.take_rows(lin.weight, rows)), rows))
    out = T.add_bias(T.matmul(w, stack.y_nsf), T.take_rows(lin.bias, rows), axis=0)
    if lin.residual:
        return _with_offset(stack, out)
    return replace(stack, y_delta=T.sub(out, stack.y_nsf), y_calib=out)


# -- segmentation ---------------------------------------------------------------------

_FIELDS = {"nsf": "y_nsf", "calib": "y_calib", "plain": "y_plain", "npf": "y_npf"}


def argmax_segment(stack: ScoreStack, mode: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Per-pixel class id of the highest score (ties -> first row, i.e. lowest id).

    ``shape`` reshapes the flat pixel axis to ``(h, w)``.
    """
    try:
        scores = getattr(stack, _FIELDS[mode])
    except KeyError:
        raise ConfigError(f"unknown segmentation mode {mode!r}") from None
    if scores is None:
        raise ContractError(f"stack has no {_FIELDS[mode]} scores")
    data = scores.data.reshape(scores.shape[0], -1)
    ids = np.asarray(stack.class_ids)[np.argmax(data, axis=0)]
    return ids.reshape(shape) if shape is not None else ids


def export_heatmaps(stack: ScoreStack, out_dir, shape: tuple[int, int], prefix: str = "heat", fields=("nsf", "calib")) -> list[Path]:
    """Write one 16-bit PGM per (field, class) plus a CSV of the raw scores.

    Each field is min-max scaled over all of its classes so planes of one
    field are comparable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    for mode in fields:
        scores = getattr(stack, _FIELDS[mode])
        if scores is None:
            continue
        data = scores.data.reshape((scores.shape[0],) + tuple(shape))
        lo, hi = float(data.min()), float(data.max())
        span = hi - lo if hi > lo else 1.0
        for r, cid in enumerate(stack.class_ids):
            plane = np.rint((data[r] - lo) / span * 65535).astype(np.uint16)
            p = out / f"{prefix}_{mode}_class{cid}.pgm"
            write_pnm(p, plane)
            written.append(p)
            for (y, x), v in np.ndenumerate(data[r]):
                rows.append((mode, cid, y, x, repr(float(v))))
    csv_path = out / f"{prefix}_scores.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "class_id", "y", "x", "score"])
        w.writerows(rows)
    written.append(csv_path)
    return written
