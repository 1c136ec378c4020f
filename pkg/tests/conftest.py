import numpy as np
import pytest

from histodiff.diffusion import BranchSchedules
from histodiff.nn.denoiser import DenoiserConfig, JointDenoiser
from histodiff.schedules import NoiseSchedule, cosine_schedule


def tiny_config(**overrides) -> DenoiserConfig:
    """Smallest denoiser that still exercises every layer type."""
    base = dict(
        num_classes=3,
        base_width=8,
        channel_mults=(1, 2),
        groups=4,
        temb_dim=16,
        time_freq_dim=8,
        text_dim=16,
        point_width=4,
        point_growth=4,
        point_blocks=1,
        point_dense_layers=2,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def tiny_model(seed=0, **overrides) -> JointDenoiser:
    return JointDenoiser(tiny_config(**overrides), rng=np.random.default_rng(seed))


def make_schedule(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    return NoiseSchedule(
        num_steps=len(betas), betas=betas, alpha_bars=np.cumprod(1.0 - betas)
    )


@pytest.fixture
def tiny_schedules() -> BranchSchedules:
    sched = cosine_schedule(6)
    return BranchSchedules(image=sched, distance=sched, label=sched)
