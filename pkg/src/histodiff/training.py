"""Training loop for the joint denoiser.

One optimizer step: draw a batch, draw one diffusion step per sample, corrupt
all three branches with their schedules, run one batched forward pass, compute
the composite loss sample-by-sample (steps differ within a batch), accumulate
gradients through one batched backward pass, and step Adam.

Every random draw flows from a single generator in a fixed order (batch
indices, steps, image noise, distance noise, per-sample label draws, text
dropout), so identical seeds reproduce identical trajectories and a resumed
run with a restored generator state continues bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .diffusion import (
    BranchSchedules,
    categorical_forward_marginal,
    categorical_sample,
    gaussian_forward_marginal,
    joint_loss_and_grads,
    _onehot,
)
from .persistence import save_checkpoint


@dataclass
class TrainBatchStats:
    step: int
    total: float
    loss_image: float
    loss_distance: float
    loss_label: float

    def as_dict(self):
        return {
            "step": self.step,
            "total": self.total,
            "loss_image": self.loss_image,
            "loss_distance": self.loss_distance,
            "loss_label": self.loss_label,
        }


class PromptCache:
    def __init__(self, embedder):
        self.embedder = embedder
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, prompt: str) -> np.ndarray:
        if prompt not in self._cache:
            self._cache[prompt] = np.asarray(
                self.embedder.embed(prompt), dtype=np.float32
            )
        return self._cache[prompt]


def _stack_training_arrays(entries):
    images = np.stack([np.moveaxis(e.sample.image, -1, 0) for e in entries])
    distances = np.stack([e.sample.distance[None] for e in entries])
    labels = np.stack([e.sample.semantic for e in entries]).astype(np.int64)
    points = np.stack([e.point_map.grid for e in entries])
    prompts = [e.prompt for e in entries]
    return images.astype(np.float32), distances.astype(np.float32), labels, points, prompts


def train(
    entries,
    model,
    optimizer,
    schedules: BranchSchedules,
    rng: np.random.Generator,
    *,
    steps: int,
    batch_size: int,
    loss_weights: tuple[float, float, float],
    text_dropout: float,
    embedder,
    start_step: int = 0,
    checkpoint_every: int | None = None,
    checkpoint_dir: str | None = None,
    log: list | None = None,
) -> list[TrainBatchStats]:
    """Run ``steps`` optimizer steps; returns per-step loss statistics."""
    images, distances, labels, points, prompts = _stack_training_arrays(entries)
    n = images.shape[0]
    k = model.config.num_classes
    t_max = schedules.num_steps
    embed = PromptCache(embedder)
    prompt_embs = np.stack([embed(p) for p in prompts])
    history: list[TrainBatchStats] = log if log is not None else []

    for local_step in range(steps):
        step_no = start_step + local_step + 1
        idx = rng.integers(0, n, size=batch_size)
        t_s = rng.integers(1, t_max + 1, size=batch_size)

        x_img = images[idx]
        x_dist = distances[idx]
        l0 = labels[idx]
        noise_i = rng.standard_normal(x_img.shape).astype(np.float32)
        noise_d = rng.standard_normal(x_dist.shape).astype(np.float32)

        img_t = np.empty_like(x_img)
        dist_t = np.empty_like(x_dist)
        label_t_idx = np.empty(l0.shape, dtype=np.int32)
        l0_onehot = _onehot(l0, k)
        for i in range(batch_size):
            t = int(t_s[i])
            img_t[i] = gaussian_forward_marginal(x_img[i], t, schedules.image, noise_i[i])
            dist_t[i] = gaussian_forward_marginal(x_dist[i], t, schedules.distance, noise_d[i])
            marg = categorical_forward_marginal(l0_onehot[i], t, schedules.label)
            label_t_idx[i] = categorical_sample(marg, rng)
        label_t = _onehot(label_t_idx, k)

        present = rng.random(batch_size) >= text_dropout
        eps_i_hat, eps_d_hat, logits = model.forward(
            img_t,
            dist_t,
            np.moveaxis(label_t, -1, 1),
            points[idx],
            t_s,
            prompt_embs[idx],
            present,
        )

        g_i = np.empty_like(eps_i_hat)
        g_d = np.empty_like(eps_d_hat)
        g_l = np.empty_like(logits)
        tot = li = ld = ll = 0.0
        for i in range(batch_size):
            total_i, (a, b, c), (gi, gd, gl) = joint_loss_and_grads(
                (eps_i_hat[i], eps_d_hat[i], np.moveaxis(logits[i], 0, -1)),
                (noise_i[i], noise_d[i], l0_onehot[i]),
                loss_weights,
                label_t=label_t[i],
                step=int(t_s[i]),
                label_schedule=schedules.label,
            )
            g_i[i] = gi / batch_size
            g_d[i] = gd / batch_size
            g_l[i] = np.moveaxis(gl, -1, 0) / batch_size
            tot += total_i
            li += a
            ld += b
            ll += c

        model.zero_grad()
        model.backward(g_i, g_d, g_l)
        optimizer.step()

        history.append(
            TrainBatchStats(
                step=step_no,
                total=tot / batch_size,
                loss_image=li / batch_size,
                loss_distance=ld / batch_size,
                loss_label=ll / batch_size,
            )
        )
        if (
            checkpoint_every
            and checkpoint_dir
            and (step_no % checkpoint_every == 0 or local_step == steps - 1)
        ):
            save_checkpoint(
                model,
                optimizer,
                step_no,
                os.path.join(checkpoint_dir, f"step_{step_no:06d}"),
                rng_state=rng.bit_generator.state,
            )
    return history


def smoothed(values, window: int):
    """Simple moving average used for loss-trend checks."""
    values = np.asarray(values, dtype=np.float64)
    if window <= 1 or values.size <= window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
