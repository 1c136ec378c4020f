"""Walk through the noise schedules and both forward processes.

Builds the default cosine schedule, plots beta_t / alpha_bar_t, then corrupts
one toy patch at increasing steps on all three branches (Gaussian image,
Gaussian distance, categorical label) and saves a strip of the results.

Run:  python3 demos/01_schedules_and_forward_noising.py
"""

import os

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from histodiff import (
    ToyDataConfig,
    categorical_forward_marginal,
    categorical_sample,
    cosine_schedule,
    gaussian_forward_marginal,
    generate_patch,
)
from histodiff.diffusion import _onehot
from histodiff.viz import image_to_rgb8, label_to_rgb8

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

# --- the schedule itself ----------------------------------------------------
T = 1000
sched = cosine_schedule(T, offset=0.008)
print(f"cosine schedule: T={T}, beta_1={sched.beta(1):.2e}, "
      f"beta_T={sched.beta(T):.3f}, alpha_bar_T={sched.alpha_bar(T):.2e}")

fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
axes[0].plot(sched.betas)
axes[0].set_title("beta_t")
axes[0].set_xlabel("t")
axes[1].plot(sched.alpha_bars)
axes[1].set_title("alpha_bar_t (signal fraction)")
axes[1].set_xlabel("t")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "01_schedule.png"), dpi=120)
print("wrote", os.path.join(OUT, "01_schedule.png"))

# --- forward corruption of one patch ----------------------------------------
cfg = ToyDataConfig(seed=3)
patch = generate_patch(cfg, np.random.default_rng(3))
sample = patch.sample
k = cfg.num_classes + 1
rng = np.random.default_rng(0)

steps = [0, 50, 200, 500, 1000]
fig, axes = plt.subplots(2, len(steps), figsize=(2.1 * len(steps), 4.4))
for col, t in enumerate(steps):
    if t == 0:
        img_t = sample.image
        lab_t = sample.semantic
    else:
        img_t = gaussian_forward_marginal(
            sample.image, t, sched, rng.standard_normal(sample.image.shape)
        )
        probs = categorical_forward_marginal(
            _onehot(sample.semantic.astype(int), k), t, sched
        )
        lab_t = categorical_sample(probs, rng)
    axes[0, col].imshow(image_to_rgb8(np.clip(img_t, -1, 1)))
    axes[0, col].set_title(f"t={t}")
    axes[1, col].imshow(label_to_rgb8(lab_t))
    for ax in (axes[0, col], axes[1, col]):
        ax.set_xticks([])
        ax.set_yticks([])
axes[0, 0].set_ylabel("image branch")
axes[1, 0].set_ylabel("label branch")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "01_forward_noising.png"), dpi=120)
print("wrote", os.path.join(OUT, "01_forward_noising.png"))
