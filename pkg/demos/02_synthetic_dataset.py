"""The synthetic benchmark: coloured, striped shapes on a grey background.

Fold 0 holds out classes 1 and 2 as novel; training images only contain
base classes 3..8.  Writes the dataset to disk, prints its digest, and
dumps a few images and masks as netpbm files you can open in any viewer.

    python demos/02_synthetic_dataset.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from pcn.data import SynthConfig, dataset_digest, generate_dataset, save_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/dataset")
cfg = SynthConfig()
ds = generate_dataset(cfg, seed=0)

print(f"{len(ds.train_idx)} train + {len(ds.val_idx)} val images of {cfg.image_size}x{cfg.image_size}")
print(f"base classes {ds.base_ids}, novel classes {ds.novel_ids}")

counts = ds.manifest["class_counts"]
print("\nimages containing each class")
print("class  train  val")
for c in range(1, cfg.num_classes + 1):
    print(f"{c:>5}  {counts['train'][str(c)]:>5}  {counts['val'][str(c)]:>3}")

fg = np.mean([np.mean(ds.masks[i] > 0) for i in range(len(ds))])
print(f"\nforeground covers {100 * fg:.1f}% of pixels on average")

pure = {c: sum(set(np.unique(ds.masks[i]).tolist()) <= {0, c} for i in ds.images_with(c, ds.val_idx)) for c in ds.novel_ids}
print(f"single-class val images usable as novel supports: {pure}")

root = save_dataset(ds, out)
print(f"\nwritten to {root}\nsha256 {dataset_digest(root)}")
