"""Train a small joint denoiser and sample conditioned triplets from it.

This is a scaled-down run (a few minutes): 24x24 patches, 300 optimizer steps,
T=100 schedule, half-width model. It trains the joint model, samples with
classifier-free guidance on held-out point maps, and saves a grid comparing
conditions, samples, and an untrained baseline.

Run:  python3 demos/05_train_and_sample.py
"""

import os
import time

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from histodiff import (
    Adam,
    BranchSchedules,
    DenoiserConfig,
    HashTextEmbedder,
    JointDenoiser,
    ToyDataConfig,
    cosine_schedule,
    generate_patch,
    marker_agreement_rate,
    sample_batch,
)
from histodiff.training import smoothed, train
from histodiff.viz import image_to_rgb8, label_to_rgb8

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

STEPS = 300
T = 100


class Entry:
    def __init__(self, patch):
        self.sample = patch.sample
        self.point_map = patch.point_map
        self.prompt = patch.prompt


data_cfg = ToyDataConfig(patch_size=24, seed=51, radius_range=(2.0, 3.5))
patches = [
    generate_patch(data_cfg, np.random.default_rng(
        np.random.SeedSequence(entropy=[51, i])))
    for i in range(200)
]
entries = [Entry(p) for p in patches[:192]]
held_out = patches[192:]

k = data_cfg.num_classes + 1
model_cfg = DenoiserConfig(num_classes=k, base_width=16, channel_mults=(1, 2, 2))
rng = np.random.default_rng(51)
model = JointDenoiser(model_cfg, rng=rng)
optimizer = Adam(model, lr=4e-4, beta1=0.9, beta2=0.99)
sched = cosine_schedule(T)
schedules = BranchSchedules(sched, sched, sched)
embedder = HashTextEmbedder(model_cfg.text_dim)

t0 = time.time()
history = train(entries, model, optimizer, schedules, rng,
                steps=STEPS, batch_size=16, loss_weights=(9.0, 1.0, 3.0),
                text_dropout=0.1, embedder=embedder)
print(f"trained {STEPS} steps in {time.time() - t0:.0f}s; "
      f"loss {history[0].total:.2f} -> {history[-1].total:.2f}")

fig, ax = plt.subplots(figsize=(6, 3))
ax.plot([h.total for h in history], alpha=0.3, label="per step")
ax.plot(np.arange(24, STEPS), smoothed([h.total for h in history], 25),
        label="smoothed")
ax.set_xlabel("step")
ax.set_ylabel("total loss")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(OUT, "05_loss.png"), dpi=120)

grids = np.stack([p.point_map.grid for p in held_out])
embs = np.stack([embedder.embed(p.prompt) for p in held_out]).astype(np.float32)
samples = sample_batch(model, grids, embs, 2.0, schedules, np.random.default_rng(1))
baseline_model = JointDenoiser(model_cfg, rng=np.random.default_rng(999))
baseline = sample_batch(baseline_model, grids, embs, 2.0, schedules,
                        np.random.default_rng(1))

for name, ss in (("trained", samples), ("untrained", baseline)):
    rates = [marker_agreement_rate(s.semantic, g) for s, g in zip(ss, grids)
             if g.any()]
    print(f"{name:>9} marker adherence: {np.mean(rates):.2f}")

rows = len(held_out)
fig, axes = plt.subplots(rows, 5, figsize=(10.5, 2.1 * rows))
for r, (p, s, b) in enumerate(zip(held_out, samples, baseline)):
    panels = [
        ("condition markers", label_to_rgb8(p.point_map.grid)),
        ("sampled image", image_to_rgb8(s.image)),
        ("sampled label", label_to_rgb8(s.semantic)),
        ("real image", image_to_rgb8(p.sample.image)),
        ("untrained label", label_to_rgb8(b.semantic)),
    ]
    for c, (title, img) in enumerate(panels):
        axes[r, c].imshow(img)
        if r == 0:
            axes[r, c].set_title(title, fontsize=9)
        axes[r, c].set_xticks([])
        axes[r, c].set_yticks([])
fig.tight_layout()
fig.savefig(os.path.join(OUT, "05_samples.png"), dpi=120)
print("wrote", os.path.join(OUT, "05_samples.png"))
