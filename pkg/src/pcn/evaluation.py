"""Test-time GFSS protocol: per task, fit a novel classifier on a K-shot support of
the held-out classes, then score N_base query pairs (a novel-class image and
an image of the j-th base class) under every requested mode.

All modes share one task stream, so their supports and queries are identical.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .classifiers import relabel, train_novel
from .data import Dataset
from .errors import ConfigError, SamplingError
from .metrics import IoUAccumulator, h_mean, mean_over, miou_all
from .model import MODES, ModelBundle, score_stack

STREAM_TASK, STREAM_TASK_NOVEL = 10, 11


@dataclass
class MetricsReport:
    mode: str
    per_class_iou: dict[int, float]
    miou_base: float
    miou_novel: float
    miou_all: float
    h_mean: float
    num_tasks: int
    n_base: int
    n_novel: int
    task_seeds: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {
            "mode": self.mode,
            "base": self.miou_base,
            "novel": self.miou_novel,
            "miou": self.miou_all,
            "h_mean": self.h_mean,
            "num_tasks": self.num_tasks,
        }


@dataclass
class Task:
    index: int
    seed: tuple[int, ...]
    support: list[int]
    pairs: list[tuple[int, int]]  # (novel image, base image)

    @property
    def queries(self) -> list[int]:
        return [i for pair in self.pairs for i in pair]


def _choice(rng, pool, what):
    if not pool:
        raise SamplingError(f"no test images available for {what}")
    return int(pool[int(rng.integers(len(pool)))])


def sample_task(dataset: Dataset, index: int, shots: int, seed: int) -> Task:
    task_seed = (seed, STREAM_TASK, index)
    rng = np.random.default_rng(list(task_seed))
    val = dataset.val_idx
    support: list[int] = []
    for n in dataset.novel_ids:
        pure = [i for i in dataset.images_with(n, val) if set(np.unique(dataset.masks[i])) <= {0, n}]
        if len(pure) < shots:
            raise SamplingError(f"novel class {n}: {len(pure)} support candidates for {shots} shots")
        support += [int(i) for i in rng.choice(pure, size=shots, replace=False)]
    taken = set(support)
    pairs = []
    for b in dataset.base_ids:
        n = int(rng.choice(dataset.novel_ids))
        ni = _choice(rng, [i for i in dataset.images_with(n, val) if i not in taken], f"novel class {n}")
        bi = _choice(rng, [i for i in dataset.images_with(b, val) if i not in taken], f"base class {b}")
        pairs.append((ni, bi))
    return Task(index, task_seed, support, pairs)


def _predict(bundle, novel, dataset, i, mode, base_ids, factor) -> np.ndarray:
    gt = dataset.masks[i]
    if mode == "oracle":
        return gt.astype(np.int64)
    if mode == "background":
        return np.zeros_like(gt, dtype=np.int64)
    bank = bundle.bank
    calib = bundle.calibrators.get(mode)
    stack = score_stack(bundle, novel, bank.fused[i], bank.tap[i], base_ids, mode, calib)
    scores = {"plain": stack.y_plain, "npf": stack.y_npf, "nsf": stack.y_nsf}.get(mode, stack.y_calib)
    h, w = bank.fused.shape[-2:]
    labels = np.asarray(stack.class_ids)[np.argmax(scores.data, axis=0)].reshape(h, w)
    return np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)


def _run_task(bundle: ModelBundle, dataset: Dataset, task: Task, modes, cfg) -> dict[str, IoUAccumulator]:
    novel_ids = (0,) + tuple(dataset.novel_ids)
    base_ids = (0,) + tuple(dataset.base_ids)
    all_ids = base_ids + tuple(dataset.novel_ids)
    needs_novel = any(m not in ("oracle", "background") for m in modes)
    novel = None
    if needs_novel:
        targets = np.stack([relabel(dataset.masks[i], novel_ids, strict=False) for i in task.support])
        rng = np.random.default_rng([task.seed[0], STREAM_TASK_NOVEL, task.index])
        novel = train_novel(bundle.bank.fused[task.support], targets, novel_ids, rng, cfg["inner_iters"], cfg["inner_lr"]).classifier
    factor = dataset.masks.shape[-1] // bundle.bank.fused.shape[-1] if bundle.bank is not None else 1
    accs = {}
    with T.no_grad():
        for mode in modes:
            acc = IoUAccumulator(all_ids)
            for i in task.queries:
                acc.add(_predict(bundle, novel, dataset, i, mode, base_ids, factor), dataset.masks[i])
            accs[mode] = acc
    return accs


def evaluate_gfss(
    bundle: ModelBundle,
    dataset: Dataset,
    modes: Sequence[str],
    num_tasks: int = 100,
    shots: int = 1,
    seed: int = 0,
    inner_iters: int = 50,
    inner_lr: float = 0.1,
    include_background: bool = False,
    global_accumulate: bool = False,
    threads: int = 1,
) -> dict[str, MetricsReport]:
    """One :class:`MetricsReport` per mode over ``num_tasks`` paired tasks.

    Default accumulation: intersections/unions summed over each task's
    queries, IoU per task, then averaged over tasks.  ``global_accumulate``
    instead sums counts over all tasks before dividing.
    """
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown evaluation mode {m!r}")
        if m in ("pcn", "selfattn", "linear", "linear_nores") and m not in bundle.calibrators:
            raise ConfigError(f"no calibrator loaded for mode {m!r}")
    if num_tasks < 1:
        raise ConfigError("num_tasks must be positive")
    tasks = [sample_task(dataset, t, shots, seed) for t in range(num_tasks)]
    cfg = {"inner_iters": inner_iters, "inner_lr": inner_lr}

    def work(task):
        return _run_task(bundle, dataset, task, modes, cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, tasks))
    else:
        results = [work(t) for t in tasks]

    base_cls = ([0] if include_background else []) + list(dataset.base_ids)
    novel_cls = list(dataset.novel_ids)
    reports = {}
    for mode in modes:
        accs = [r[mode] for r in results]
        if global_accumulate:
            total = IoUAccumulator(accs[0].class_ids)
            for a in accs:
                total.merge(a)
            per_class = total.per_class()
            mb = mean_over(per_class, base_cls) or 0.0
            mn = mean_over(per_class, novel_cls) or 0.0
        else:
            task_ious = [a.per_class() for a in accs]
            mbs = [mean_over(ti, base_cls) for ti in task_ious]
            mns = [mean_over(ti, novel_cls) for ti in task_ious]
            mb = float(np.mean([v for v in mbs if v is not None])) if any(v is not None for v in mbs) else 0.0
            mn = float(np.mean([v for v in mns if v is not None])) if any(v is not None for v in mns) else 0.0
            per_class = {}
            for c in accs[0].class_ids:
                vals = [ti[c] for ti in task_ious if c in ti]
                if vals:
                    per_class[c] = float(np.mean(vals))
        reports[mode] = MetricsReport(
            mode=mode,
            per_class_iou=per_class,
            miou_base=mb,
            miou_novel=mn,
            miou_all=miou_all(mb, mn, len(base_cls), len(novel_cls)),
            h_mean=h_mean(mb, mn),
            num_tasks=num_tasks,
            n_base=len(base_cls),
            n_novel=len(novel_cls),
            task_seeds=[t.seed for t in tasks],
        )
    return reports


# -- report output ----------------------------------------------------------------------

REPORT_COLUMNS = ["mode", "split", "base", "novel", "miou", "h_mean", "num_tasks", "seed", "config_hash"]


def write_report_csv(path, reports: Sequence[MetricsReport], split: int, seed: int, config_hash: str) -> Path:
    """Values on the [0, 1] scale, written with full precision."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.mode, split, repr(r.miou_base), repr(r.miou_novel), repr(r.miou_all), repr(r.h_mean), r.num_tasks, seed, config_hash])
    return path


def write_per_class_csv(path, reports: Sequence[MetricsReport]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "class_id", "iou"])
        for r in reports:
            for c, v in sorted(r.per_class_iou.items()):
                w.writerow([r.mode, c, repr(v)])
    return path


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(reports: Sequence[MetricsReport], label: str = "Method") -> str:
    """Plain-text table with Base / Novel / mIoU / H_mean columns, values x100."""
    head = f"{label:<16} {'Base':>7} {'Novel':>7} {'mIoU':>7} {'H_mean':>7}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(
            f"{r.mode:<16} {100 * r.miou_base:7.2f} {100 * r.miou_novel:7.2f} {100 * r.miou_all:7.2f} {100 * r.h_mean:7.2f}"
        )
    return "\n".join(lines)


def dump_heatmaps(bundle: ModelBundle, dataset: Dataset, out_dir, count: int, shots: int, seed: int, mode: str = "pcn",
                  inner_iters: int = 50, inner_lr: float = 0.1) -> list[Path]:
    """Score planes (NSF and calibrated) for the first query of the first ``count`` tasks."""
    from .fusion import export_heatmaps

    novel_ids = (0,) + tuple(dataset.novel_ids)
    base_ids = (0,) + tuple(dataset.base_ids)
    written = []
    for t in range(count):
        task = sample_task(dataset, t, shots, seed)
        targets = np.stack([relabel(dataset.masks[i], novel_ids, strict=False) for i in task.support])
        rng = np.random.default_rng([seed, STREAM_TASK_NOVEL, t])
        novel = train_novel(bundle.bank.fused[task.support], targets, novel_ids, rng, inner_iters, inner_lr).classifier
        q = task.queries[0]
        with T.no_grad():
            stack = score_stack(bundle, novel, bundle.bank.fused[q], bundle.bank.tap[q], base_ids, mode,
                                bundle.calibrators.get(mode))
        fields = ("nsf",) if stack.y_calib is None else ("nsf", "calib")
        written += export_heatmaps(stack, out_dir, bundle.bank.fused.shape[-2:], f"task{t:03d}_img{q:04d}", fields)
    return written
