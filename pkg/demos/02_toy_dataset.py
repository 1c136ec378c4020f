"""Generate a small toy dataset and look at what ground truth it carries.

Each sample is a full co-registered unit: image, semantic label, instance
label, centroid-distance map, point map, and a templated text prompt. The
touching-pairs mode is switched on here so some patches contain merged
clusters, the case instance separation has to untangle.

Run:  python3 demos/02_toy_dataset.py
"""

import os

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from histodiff import ToyDataConfig, ToyDataset, generate_dataset
from histodiff.viz import distance_to_rgb8, image_to_rgb8, label_to_rgb8

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

cfg = ToyDataConfig(seed=11, touching_pair_prob=0.35)
root = os.path.join(OUT, "02_dataset")
generate_dataset(cfg, count=24, split_fractions=(0.75, 0.25), out_dir=root)
ds = ToyDataset(root)
print(f"dataset: {len(ds)} samples, {ds.num_foreground_classes} foreground classes")
print("example prompt:", ds[0].prompt)

rows = 4
fig, axes = plt.subplots(rows, 5, figsize=(11, 2.3 * rows))
for r in range(rows):
    e = ds[r]
    panels = [
        ("image", image_to_rgb8(e.sample.image)),
        ("semantic", label_to_rgb8(e.sample.semantic)),
        ("instances", label_to_rgb8(e.sample.instance % 6 + (e.sample.instance > 0))),
        ("distance", distance_to_rgb8(e.sample.distance)),
        ("points", label_to_rgb8(e.point_map.grid)),
    ]
    for c, (title, img) in enumerate(panels):
        axes[r, c].imshow(img)
        if r == 0:
            axes[r, c].set_title(title)
        axes[r, c].set_xticks([])
        axes[r, c].set_yticks([])
fig.tight_layout()
fig.savefig(os.path.join(OUT, "02_ground_truth.png"), dpi=120)
print("wrote", os.path.join(OUT, "02_ground_truth.png"))
