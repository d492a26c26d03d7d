"""Command line experiment runner.

    pcn gen-data        --config C [--out DIR]
    pcn train-base      --config C --data DIR [--out DIR]
    pcn meta-train      --config C --data DIR --base CKPT [--variant V] [--out DIR]
    pcn eval            --config C --data DIR --base CKPT [--calib CKPT ...] [--modes a,b] [--out DIR]
    pcn ablate-features --config C --data DIR --base CKPT [--out DIR]
    pcn grad-check      [--seeds N] [--tolerance T]

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.
Output directories must be new (or empty); without ``--out`` a timestamped
directory under ``runs/`` is created.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, NumericError, PcnError

log = logging.getLogger("pcn")

FEATURE_TAPS = ("layer2", "layer3", "layer4", "high", "layer4+high")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment TOML file (defaults if omitted)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", type=Path, help="output directory (must be new or empty)")
    p.add_argument("--threads", type=int, default=1, help="worker cap for task-parallel evaluation")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _common(p)

    p = sub.add_parser("train-base", help="train backbone + base classifier")
    _common(p)
    p.add_argument("--data", type=Path)

    p = sub.add_parser("meta-train", help="episodic training of a calibrator")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--base", type=Path, required=True, help="base checkpoint (base.ckpt)")
    p.add_argument("--variant", choices=("pcn", "selfattn", "linear", "linear_nores"))

    p = sub.add_parser("eval", help="paired GFSS evaluation of several modes")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--calib", type=Path, action="append", default=[], help="calibrator checkpoint (repeatable)")
    p.add_argument("--modes", help="comma separated modes (default from config)")
    p.add_argument("--per-class", action="store_true", help="also write per_class.csv")
    p.add_argument("--heatmaps", type=int, help="dump score heatmaps for this many tasks")
    p.add_argument("--global-accumulate", action="store_true", default=None)
    p.add_argument("--include-background", action="store_true", default=None)

    p = sub.add_parser("ablate-features", help="meta-train + eval PCN for every feature tap")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--base", type=Path, required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    if getattr(args, "data", None) is not None:
        cfg = cfg.replace(dataset_path=str(args.data))
    return cfg


def _out_dir(args, name: str) -> Path:
    out = args.out or Path("runs") / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}"
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty; refusing to overwrite a previous run")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    from .data import dataset_digest, generate_dataset, save_dataset
    from .pipeline import write_resolved_config

    cfg = _config(args)
    out = _out_dir(args, "data")
    ds = generate_dataset(cfg.dataset, cfg.seed)
    ds.manifest["config_hash"] = cfg.hash()
    root = save_dataset(ds, out / "dataset")
    write_resolved_config(cfg, out)
    digest = dataset_digest(root)
    (out / "dataset.sha256").write_text(digest + "\n")
    print(f"dataset {root}")
    print(f"sha256 {digest}")
    return 0


def cmd_train_base(args) -> int:
    from .pipeline import base_stage, get_dataset, save_base, write_loss_csv, write_resolved_config

    cfg = _config(args)
    ds = get_dataset(cfg)
    out = _out_dir(args, "base")
    write_resolved_config(cfg, out)
    result = base_stage(cfg, ds)
    save_base(out / "base.ckpt", result, cfg)
    write_loss_csv(out / "base_loss.csv", result.losses, result.lrs)
    print(f"base loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    print(f"checkpoint {out / 'base.ckpt'}")
    return 0


def cmd_meta_train(args) -> int:
    from .pipeline import get_dataset, load_bundle, meta_stage, save_meta, write_resolved_config

    cfg = _config(args)
    variant = args.variant or cfg.variant
    ds = get_dataset(cfg)
    bundle = load_bundle(args.base, cfg, ds)
    out = _out_dir(args, f"meta-{variant}")
    write_resolved_config(cfg.replace(variant=variant), out)

    def progress(row):
        if row["episode"] % 100 == 0:
            log.info("episode %d meta_loss %.4f lr %.5f", row["episode"], row["meta_loss"], row["lr"])

    calib, mlog = meta_stage(cfg, ds, bundle, variant, progress)
    losses = mlog.meta_losses()
    if not all(map(lambda v: v == v and abs(v) != float("inf"), losses)):
        raise NumericError("non-finite meta-training loss")
    ckpt = save_meta(out, variant, calib, mlog, cfg, cfg.backbone.feature_tap)
    print(f"meta loss first {losses[0]:.4f} last {losses[-1]:.4f}")
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import dump_heatmaps, format_table, write_per_class_csv, write_report_csv
    from .pipeline import attach_calibrator, eval_stage, get_dataset, load_bundle, write_resolved_config

    cfg = _config(args)
    ev = cfg.evaluation
    overrides = {}
    if args.global_accumulate:
        overrides["global_accumulate"] = True
    if args.include_background:
        overrides["include_background"] = True
    if args.heatmaps is not None:
        overrides["heatmaps"] = args.heatmaps
    if args.modes:
        overrides["modes"] = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    if overrides:
        from dataclasses import replace

        cfg = cfg.replace(evaluation=replace(ev, **overrides))
        cfg.validate()
    modes = list(cfg.evaluation.modes)
    ds = get_dataset(cfg)
    bundle = load_bundle(args.base, cfg, ds)
    for path in args.calib:
        attach_calibrator(bundle, path)
    missing = [m for m in modes if m in ("pcn", "selfattn", "linear", "linear_nores") and m not in bundle.calibrators]
    if missing:
        raise ConfigError(f"no calibrator checkpoint given for mode(s) {', '.join(missing)}")
    out = _out_dir(args, "eval")
    write_resolved_config(cfg, out)
    reports = eval_stage(cfg, ds, bundle, modes, args.threads)
    rows = [reports[m] for m in modes]
    write_report_csv(out / "report.csv", rows, cfg.dataset.fold, cfg.seed, cfg.hash())
    table = format_table(rows)
    (out / "report.txt").write_text(table + "\n")
    if args.per_class:
        write_per_class_csv(out / "per_class.csv", rows)
    if cfg.evaluation.heatmaps:
        hm_mode = next((m for m in modes if m in bundle.calibrators), "nsf")
        dump_heatmaps(bundle, ds, out / "heatmaps", cfg.evaluation.heatmaps, cfg.evaluation.shots, cfg.seed, hm_mode,
                      cfg.evaluation.inner_iters, cfg.evaluation.inner_lr)
    print(table)
    return 0


def cmd_ablate_features(args) -> int:
    from .pipeline import eval_stage, get_dataset, load_bundle, meta_stage, save_meta, write_resolved_config

    cfg = _config(args)
    ds = get_dataset(cfg)
    out = _out_dir(args, "ablate-features")
    write_resolved_config(cfg, out)
    rows = []
    for tap in FEATURE_TAPS:
        bundle = load_bundle(args.base, cfg, ds, tap=tap)
        calib, mlog = meta_stage(cfg, ds, bundle, "pcn")
        tap_dir = out / tap.replace("+", "_")
        tap_dir.mkdir()
        save_meta(tap_dir, "pcn", calib, mlog, cfg, tap)
        bundle.calibrators["pcn"] = calib
        rep = eval_stage(cfg, ds, bundle, ["pcn"], args.threads)["pcn"]
        seeds_key = f"{rep.task_seeds[0][0]}:{rep.task_seeds[0][1]}:0-{len(rep.task_seeds) - 1}"
        rows.append([tap, repr(rep.miou_base), repr(rep.miou_novel), repr(rep.miou_all), repr(rep.h_mean),
                     rep.num_tasks, seeds_key, cfg.seed, cfg.hash()])
        print(f"{tap:<12} base {100 * rep.miou_base:6.2f} novel {100 * rep.miou_novel:6.2f} "
              f"mIoU {100 * rep.miou_all:6.2f} H {100 * rep.h_mean:6.2f}")
    with open(out / "ablate_features.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "base", "novel", "miou", "h_mean", "num_tasks", "task_seeds", "seed", "config_hash"])
        w.writerows(rows)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import composite_builders, run_suite

    reports = run_suite(range(args.seeds), args.tolerance, composite_builders())
    ok = True
    for r in reports:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<28} max_rel_err {r.max_rel_error:.3e} (tol {r.tolerance:g})")
    if not ok:
        raise NumericError("gradient check failed")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "meta-train": cmd_meta_train,
    "eval": cmd_eval,
    "ablate-features": cmd_ablate_features,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PcnError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
