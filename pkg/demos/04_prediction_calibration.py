"""Meta-train the calibration transformer on fake-novel episodes.

Each episode hides one base class, fits a throwaway classifier on a single
support image of it, and asks the transformer to correct the fused scores
of two query images.  The trained calibrator is then evaluated on the real
novel classes next to NSF, on the same tasks.

    python demos/04_prediction_calibration.py [episodes] [num_tasks]
"""
import sys
from dataclasses import replace

from _shared import OUT, base_bundle

from pcn.episodes import meta_train
from pcn.evaluation import dump_heatmaps, evaluate_gfss, format_table

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
num_tasks = int(sys.argv[2]) if len(sys.argv) > 2 else 40
cfg, ds, bundle = base_bundle()
mcfg = replace(cfg.meta_training, iterations=episodes)


def progress(row):
    if row["episode"] % 250 == 0:
        print(f"  episode {row['episode']:>5}  meta loss {row['meta_loss']:.4f}  lr {row['lr']:.5f}")


calib, log = meta_train(ds, bundle, mcfg, "pcn", cfg.seed, progress)
losses = log.meta_losses()
k = max(1, len(losses) // 10)
print(f"meta loss: first 10% {losses[:k].mean():.4f}, last 10% {losses[-k:].mean():.4f}")
print(f"calibrator has {calib.num_parameters()} parameters (independent of the number of classes)")

bundle.calibrators["pcn"] = calib
reports = evaluate_gfss(bundle, ds, ["nsf", "pcn"], num_tasks=num_tasks, seed=cfg.seed)
print(format_table(list(reports.values())))
for m, r in reports.items():
    print(f"{m:<4} |base - novel| = {100 * abs(r.miou_base - r.miou_novel):.2f}")

files = dump_heatmaps(bundle, ds, OUT / "heatmaps", count=1, shots=1, seed=cfg.seed, mode="pcn")
print(f"score heatmaps for one query written to {files[0].parent}")
