"""Marker-controlled watershed vs connectivity labeling on touching nuclei.

Builds clusters of abutting nuclei, then separates the semantic label with
(a) plain per-class connected components and (b) the marker-controlled
watershed over the distance map. Reports per-nucleus mean Dice for both, which
reproduces the expected ordering: the watershed splits clusters the
connectivity baseline merges.

Run:  python3 demos/04_instance_separation.py
"""

import os

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from histodiff import (
    ToyDataConfig,
    build_point_map,
    connectivity_separate,
    distance_map,
    generate_patch,
    mdice,
    watershed_separate,
)
from histodiff.viz import distance_to_rgb8, image_to_rgb8, label_to_rgb8

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

cfg = ToyDataConfig(seed=31, touching_pair_prob=0.9, nuclei_per_patch=(4, 7))

scores_ws, scores_cc = [], []
fig, axes = plt.subplots(3, 6, figsize=(13, 6.6))
row = 0
for i in range(200):
    patch = generate_patch(cfg, np.random.default_rng(i))
    gt = patch.sample.instance
    sem = patch.sample.semantic
    if not gt.any():
        continue
    d = distance_map(gt)
    pm = build_point_map(gt, sem)
    ws = watershed_separate(d, sem, pm)
    cc = connectivity_separate(sem)
    scores_ws.append(mdice(ws, gt))
    scores_cc.append(mdice(cc, gt))
    if row < 3 and scores_cc[-1] < 0.9:  # show patches where connectivity fails
        panels = [
            ("image", image_to_rgb8(patch.sample.image)),
            ("distance", distance_to_rgb8(patch.sample.distance)),
            ("markers", label_to_rgb8(pm.grid)),
            ("ground truth", label_to_rgb8(gt % 6 + (gt > 0))),
            (f"watershed {scores_ws[-1]:.2f}", label_to_rgb8(ws % 6 + (ws > 0))),
            (f"connectivity {scores_cc[-1]:.2f}", label_to_rgb8(cc % 6 + (cc > 0))),
        ]
        for c, (title, img) in enumerate(panels):
            axes[row, c].imshow(img)
            axes[row, c].set_title(title, fontsize=9)
            axes[row, c].set_xticks([])
            axes[row, c].set_yticks([])
        row += 1

print(f"over {len(scores_ws)} patches with touching clusters:")
print(f"  watershed    mDice = {np.mean(scores_ws):.4f}")
print(f"  connectivity mDice = {np.mean(scores_cc):.4f}")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "04_separation.png"), dpi=120)
print("wrote", os.path.join(OUT, "04_separation.png"))
