"""Which calibrator?  Cross-covariance attention against two simpler ones.

Same episodes, same test tasks, three calibrators:
  pcn       score rows attend over feature channels
  selfattn  score rows attend over score rows (no image features)
  linear    one c x c layer applied to every pixel's score vector

    python demos/05_calibration_ablations.py [episodes] [num_tasks]
"""
import sys
from dataclasses import replace

from _shared import base_bundle

from pcn.episodes import meta_train
from pcn.evaluation import evaluate_gfss, format_table

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
num_tasks = int(sys.argv[2]) if len(sys.argv) > 2 else 40
cfg, ds, bundle = base_bundle()
mcfg = replace(cfg.meta_training, iterations=episodes)

for variant in ("pcn", "selfattn", "linear"):
    calib, log = meta_train(ds, bundle, mcfg, variant, cfg.seed)
    bundle.calibrators[variant] = calib
    print(f"{variant:<9} {calib.num_parameters():>6} parameters, final meta loss {log.meta_losses()[-100:].mean():.4f}")

reports = evaluate_gfss(bundle, ds, ["nsf", "pcn", "selfattn", "linear"], num_tasks=num_tasks, seed=cfg.seed)
print(format_table(list(reports.values())))
