"""Why naive fusion fails: base classes swamp the novel ones.

A base segmenter trained on six classes and a one-shot novel classifier
are combined three ways.  Concatenating raw logits (plain fusion) or
normalising classifier weights (NPF) leaves the novel classes far behind;
normalising each classifier's scores separately (NSF) closes most of the
gap, at some cost on the base side.

    python demos/03_bias_phenomenon.py [num_tasks]
"""
import sys

from _shared import base_bundle

from pcn.evaluation import evaluate_gfss, format_table

num_tasks = int(sys.argv[1]) if len(sys.argv) > 1 else 40
cfg, ds, bundle = base_bundle()

reports = evaluate_gfss(bundle, ds, ["plain", "npf", "nsf"], num_tasks=num_tasks, seed=cfg.seed)
print(format_table(list(reports.values())))

for mode, r in reports.items():
    gap = 100 * (r.miou_base - r.miou_novel)
    print(f"{mode:<6} base - novel = {gap:+6.2f} points")
