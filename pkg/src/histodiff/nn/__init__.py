from .denoiser import DenoiserConfig, JointDenoiser, PointEncoder, denoise, encode_points
from .optim import Adam

__all__ = [
    "Adam",
    "DenoiserConfig",
    "JointDenoiser",
    "PointEncoder",
    "denoise",
    "encode_points",
]
