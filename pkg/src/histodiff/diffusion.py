"""Forward/reverse diffusion over the tripartite unit (image, distance map, label).

The image and distance branches follow the Gaussian chain

    q(x_t | x_{t-1}) = N(x_t; sqrt(1 - beta_t) x_{t-1}, beta_t I)

whose composition gives the closed-form marginal
x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps. The semantic-label branch
follows the uniform categorical chain

    q(x_t | x_{t-1}) = C(x_t; (1 - beta_t) x_{t-1} + beta_t / K)

with marginal rows abar_t * x_0 + (1 - abar_t) / K and posterior

    q(x_{t-1} | x_t, x_0) propto [(1 - beta_t) x_t + beta_t / K]
                                 * [abar_{t-1} x_0 + (1 - abar_{t-1}) / K].

The reverse process factorizes across the three branches; one network
predicts the Gaussian noises and the label x_0 distribution jointly, and
classifier-free guidance blends its text-conditioned and text-dropped
predictions at sampling time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .schedules import NoiseSchedule


# ---------------------------------------------------------------------------
# Data units
# ---------------------------------------------------------------------------

@dataclass
class TripletSample:
    """One co-registered unit: image in [-1,1], distance map in [0,1],
    semantic label in {0..K-1} (0 = background), optional instance label."""

    image: np.ndarray            # (H, W, 3) float32
    distance: np.ndarray         # (H, W)    float32
    semantic: np.ndarray         # (H, W)    int32
    instance: np.ndarray | None = None   # (H, W) int32, 0 = background

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.shape

    def validate(self, num_classes: int | None = None) -> None:
        h, w = self.semantic.shape
        if self.image.shape != (h, w, 3):
            raise DataError(f"image shape {self.image.shape} != {(h, w, 3)}")
        if self.distance.shape != (h, w):
            raise DataError(f"distance shape {self.distance.shape} != {(h, w)}")
        if self.image.min() < -1.0 - 1e-6 or self.image.max() > 1.0 + 1e-6:
            raise DataError("image values outside [-1, 1]")
        if self.distance.min() < -1e-6 or self.distance.max() > 1.0 + 1e-6:
            raise DataError("distance values outside [0, 1]")
        if self.semantic.min() < 0:
            raise DataError("negative semantic class")
        if num_classes is not None and self.semantic.max() >= num_classes:
            raise DataError(f"semantic class >= {num_classes}")
        if self.instance is not None:
            if self.instance.shape != (h, w):
                raise DataError(f"instance shape {self.instance.shape} != {(h, w)}")
            fg = self.instance > 0
            if np.any(self.semantic[fg] == 0):
                raise DataError("instance pixel with background semantic class")


@dataclass
class NoisyState:
    """The tripartite unit at diffusion step t; label_t holds per-pixel
    probability rows (one-hot for sampled chains)."""

    step: int
    image_t: np.ndarray      # (H, W, 3)
    distance_t: np.ndarray   # (H, W)
    label_t: np.ndarray      # (H, W, K), rows sum to 1

    def validate(self) -> None:
        rows = self.label_t.sum(axis=-1)
        if np.max(np.abs(rows - 1.0)) > 1e-6:
            raise DataError("label_t rows are not normalized")


# ---------------------------------------------------------------------------
# Forward processes
# ---------------------------------------------------------------------------

def gaussian_forward_marginal(
    x0: np.ndarray, t: int, schedule: NoiseSchedule, noise: np.ndarray
) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def categorical_forward_marginal(
    x0_onehot: np.ndarray, t: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Marginal rows abar_t * x0 + (1 - abar_t)/K for x0 given as (..., K) rows."""
    _check_rows(x0_onehot, "x0_onehot")
    k = x0_onehot.shape[-1]
    abar = schedule.alpha_bar(t)
    return abar * x0_onehot + (1.0 - abar) / k


def categorical_sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one class index per row of ``probs`` (..., K); deterministic given rng."""
    _check_rows(probs, "probs")
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    # first index whose cumulative mass exceeds u; clip guards u == 1 round-off
    idx = (u < cdf).argmax(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1).astype(np.int32)


def categorical_posterior(
    x_t_onehot: np.ndarray, x0_probs: np.ndarray, t: int, schedule: NoiseSchedule
) -> np.ndarray:
    """q(x_{t-1} | x_t, x_0) rows; plugging the model's predicted x0 distribution
    in place of x_0 gives the reverse-step distribution p_theta(x_{t-1} | x_t)."""
    _check_rows(x_t_onehot, "x_t_onehot")
    _check_rows(x0_probs, "x0_probs")
    k = x_t_onehot.shape[-1]
    beta = schedule.beta(t)
    abar_prev = schedule.alpha_bar_prev(t)
    fac_t = (1.0 - beta) * x_t_onehot + beta / k
    fac_0 = abar_prev * x0_probs + (1.0 - abar_prev) / k
    unnorm = fac_t * fac_0
    total = unnorm.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise NumericalError(
            f"categorical posterior normalization failed at step t={t}: "
            f"{int(np.count_nonzero(total <= 0.0))} all-zero rows"
        )
    return unnorm / total


def _check_rows(probs: np.ndarray, name: str) -> None:
    if probs.shape[-1] < 2:
        raise ValueError(f"{name} must have K >= 2 categories")
    rows = probs.sum(axis=-1)
    if np.max(np.abs(rows - 1.0)) > 1e-5:
        raise ValueError(f"{name} rows do not sum to 1")


# ---------------------------------------------------------------------------
# Reverse steps and losses
# ---------------------------------------------------------------------------

def gaussian_reverse_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral step with fixed variance beta_t; no noise is added at t = 1."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"x_t shape {x_t.shape} != eps_hat shape {eps_hat.shape}")
    beta = schedule.beta(t)
    abar = schedule.alpha_bar(t)
    mean = (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    z = rng.standard_normal(x_t.shape).astype(x_t.dtype, copy=False)
    return mean + np.sqrt(beta) * z


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def joint_loss(
    model_out: tuple[np.ndarray, np.ndarray, np.ndarray],
    targets: tuple[np.ndarray, np.ndarray, np.ndarray],
    weights: tuple[float, float, float],
    *,
    label_t: np.ndarray,
    step: int,
    label_schedule: NoiseSchedule,
) -> tuple[float, tuple[float, float, float]]:
    """Composite objective lambda_i L_i + lambda_d L_d + lambda_l L_l.

    L_i and L_d are mean squared errors between predicted and true noise.
    L_l is the hybrid categorical objective: the posterior KL
    KL(q(x_{t-1}|x_t,x_0) || p_theta(x_{t-1}|x_t)) plus an auxiliary
    cross-entropy of the predicted x_0 distribution against the clean label
    for t > 1, and the cross-entropy alone at t = 1. The auxiliary term is
    what gives the label branch a usable learning signal: the bare KL is
    nearly flat in x0_hat at high t (the posterior is dominated by the
    uniform mixture) and at low t (dominated by the barely-corrupted x_t).
    All terms are means over pixels.
    """
    total, comps, _ = _joint_loss_impl(
        model_out, targets, weights,
        label_t=label_t, step=step, label_schedule=label_schedule, want_grads=False,
    )
    return total, comps


def joint_loss_and_grads(
    model_out, targets, weights, *, label_t, step, label_schedule
):
    """Same as joint_loss, plus gradients of the total w.r.t. each model output."""
    return _joint_loss_impl(
        model_out, targets, weights,
        label_t=label_t, step=step, label_schedule=label_schedule, want_grads=True,
    )


def _joint_loss_impl(model_out, targets, weights, *, label_t, step, label_schedule,
                     want_grads):
    eps_i_hat, eps_d_hat, label_logits = model_out
    eps_i, eps_d, label0 = targets
    lam_i, lam_d, lam_l = (float(w) for w in weights)
    if min(lam_i, lam_d, lam_l) < 0.0:
        raise ValueError("loss weights must be nonnegative")
    if eps_i_hat.shape != eps_i.shape or eps_d_hat.shape != eps_d.shape:
        raise ValueError("noise prediction/target shapes disagree")
    if label_logits.shape != label0.shape or label_logits.shape != label_t.shape:
        raise ValueError("label logits, targets, and label_t shapes disagree")

    diff_i = eps_i_hat - eps_i
    diff_d = eps_d_hat - eps_d
    loss_i = float(np.mean(diff_i ** 2))
    loss_d = float(np.mean(diff_d ** 2))

    n_pix = int(np.prod(label_logits.shape[:-1]))
    x0_hat = softmax(label_logits)
    ce = -(label0 * np.log(np.maximum(x0_hat, 1e-30))).sum(axis=-1)
    ce_loss = float(ce.mean())
    ce_grad = (x0_hat - label0) / n_pix
    if step == 1:
        loss_l = ce_loss
        grad_logits_raw = ce_grad
    else:
        q = categorical_posterior(label_t, label0, step, label_schedule)
        p = categorical_posterior(label_t, x0_hat, step, label_schedule)
        kl = np.where(q > 0.0, q * (np.log(np.maximum(q, 1e-30)) - np.log(p)), 0.0)
        loss_l = float(kl.sum(axis=-1).mean()) + ce_loss
        # grad of KL(q || p(softmax(z))) through the posterior's x0 mixing:
        # with s = softmax(z), fac0 = a*s + b, p = f1*fac0 / <f1, fac0>,
        # dL/ds = a*(f1/<f1,fac0> - q/fac0), then the softmax Jacobian.
        k = label_logits.shape[-1]
        beta = label_schedule.beta(step)
        a = label_schedule.alpha_bar_prev(step)
        b = (1.0 - a) / k
        f1 = (1.0 - beta) * label_t + beta / k
        fac0 = a * x0_hat + b
        norm = (f1 * fac0).sum(axis=-1, keepdims=True)
        g_s = a * (f1 / norm - q / fac0)
        inner = (g_s * x0_hat).sum(axis=-1, keepdims=True)
        grad_logits_raw = x0_hat * (g_s - inner) / n_pix + ce_grad

    total = lam_i * loss_i + lam_d * loss_d + lam_l * loss_l
    if not want_grads:
        return total, (loss_i, loss_d, loss_l), None
    g_i = (2.0 * lam_i / diff_i.size) * diff_i
    g_d = (2.0 * lam_d / diff_d.size) * diff_d
    g_l = lam_l * grad_logits_raw
    return total, (loss_i, loss_d, loss_l), (g_i, g_d, g_l)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, omega: float) -> np.ndarray:
    """Classifier-free guidance blend omega * cond + (1 - omega) * uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    return omega * eps_cond + (1.0 - omega) * eps_uncond


# ---------------------------------------------------------------------------
# Ancestral sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchSchedules:
    image: NoiseSchedule
    distance: NoiseSchedule
    label: NoiseSchedule

    def __post_init__(self):
        steps = {self.image.num_steps, self.distance.num_steps, self.label.num_steps}
        if len(steps) != 1:
            raise ValueError(f"branch schedules must share num_steps, got {steps}")

    @property
    def num_steps(self) -> int:
        return self.image.num_steps


def sample_batch(
    model,
    point_grids: np.ndarray,
    text_embeddings: np.ndarray,
    omega: float,
    schedules: BranchSchedules,
    rng: np.random.Generator,
    guidance: bool = True,
) -> list[TripletSample]:
    """Run the full reverse chain for a batch of conditions.

    ``point_grids`` is (B, H, W) int with 0 = no marker; ``text_embeddings`` is
    (B, D). With ``guidance`` the model is queried twice per step (with and
    without text) and the predictions blended with ``omega`` on the Gaussian
    branches and on the label x0-logits; without it, a single conditional pass
    is used and ``omega`` is ignored. Per step the RNG is consumed in a fixed
    order: label draw, image noise, distance noise.
    """
    point_grids = np.asarray(point_grids)
    if point_grids.ndim != 3:
        raise ValueError(f"point_grids must be (B, H, W), got {point_grids.shape}")
    b, h, w = point_grids.shape
    k = model.config.num_classes
    if text_embeddings.shape != (b, model.config.text_dim):
        raise ValueError(
            f"text embeddings shape {text_embeddings.shape} != "
            f"{(b, model.config.text_dim)}"
        )
    steps = schedules.num_steps
    dtype = np.float32

    img = rng.standard_normal((b, 3, h, w)).astype(dtype)
    dist = rng.standard_normal((b, 1, h, w)).astype(dtype)
    label = rng.integers(0, k, size=(b, h, w))

    # the point condition is constant along the trajectory; encode it once
    point_features = model.point_encoder.forward(point_grids)
    present = np.ones(b, dtype=bool)
    absent = np.zeros(b, dtype=bool)
    for t in range(steps, 0, -1):
        label_onehot = _onehot(label, k, dtype)
        label_cf = np.moveaxis(label_onehot, -1, 1)  # (B, K, H, W)
        tt = np.full(b, t, dtype=np.int64)

        eps_i_c, eps_d_c, logits_c = model.forward(
            img, dist, label_cf, point_grids, tt, text_embeddings, present,
            point_features=point_features,
        )
        if guidance:
            eps_i_u, eps_d_u, logits_u = model.forward(
                img, dist, label_cf, point_grids, tt, text_embeddings, absent,
                point_features=point_features,
            )
            eps_i = cfg_combine(eps_i_c, eps_i_u, omega)
            eps_d = cfg_combine(eps_d_c, eps_d_u, omega)
            logits = cfg_combine(logits_c, logits_u, omega)
        else:
            eps_i, eps_d, logits = eps_i_c, eps_d_c, logits_c
        if not (np.isfinite(eps_i).all() and np.isfinite(eps_d).all()
                and np.isfinite(logits).all()):
            raise NumericalError(f"non-finite model output at step t={t}")

        x0_hat = softmax(np.moveaxis(logits, 1, -1))  # (B, H, W, K)
        posterior = categorical_posterior(label_onehot, x0_hat, t, schedules.label)
        label = categorical_sample(posterior, rng)
        img = gaussian_reverse_step(img, eps_i, t, schedules.image, rng)
        dist = gaussian_reverse_step(dist, eps_d, t, schedules.distance, rng)

    img = np.clip(img, -1.0, 1.0)
    dist = np.clip(dist, 0.0, 1.0)
    out = []
    for i in range(b):
        out.append(
            TripletSample(
                image=np.moveaxis(img[i], 0, -1).astype(np.float32),
                distance=dist[i, 0].astype(np.float32),
                semantic=label[i].astype(np.int32),
            )
        )
    return out


def sample_triplet(
    model,
    pc,
    tc,
    omega: float,
    schedules: BranchSchedules,
    rng: np.random.Generator,
    guidance: bool = True,
) -> TripletSample:
    """Sample a single unit conditioned on one point map and one text condition."""
    grid = np.asarray(pc.grid)
    emb = np.asarray(tc.embedding, dtype=np.float32)
    return sample_batch(
        model, grid[None], emb[None], omega, schedules, rng, guidance=guidance
    )[0]


def _onehot(idx: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros(idx.shape + (k,), dtype=dtype)
    np.put_along_axis(out, idx[..., None].astype(np.int64), 1.0, axis=-1)
    return out
