"""histodiff: joint diffusion co-synthesis of histology-style images, distance
maps, and multi-class nuclei labels, conditioned on centroid point maps and
text prompts, with marker-controlled instance separation and evaluation
metrics."""

__version__ = "0.1.0"

from .conditioning import (
    HashTextEmbedder,
    PointMap,
    TableTextEmbedder,
    TextCondition,
    build_point_map,
    embed_text,
    make_prompt,
    text_condition,
)
from .diffusion import (
    BranchSchedules,
    NoisyState,
    TripletSample,
    categorical_forward_marginal,
    categorical_posterior,
    categorical_sample,
    cfg_combine,
    gaussian_forward_marginal,
    gaussian_reverse_step,
    joint_loss,
    sample_batch,
    sample_triplet,
)
from .instancing import connectivity_separate, distance_map, watershed_separate
from .metrics import (
    DetectionScores,
    MetricsReport,
    aji,
    detection_scores,
    dice,
    fid,
    frechet_distance,
    fsd,
    inception_score,
    marker_agreement_rate,
    mdice,
)
from .nn import Adam, DenoiserConfig, JointDenoiser, PointEncoder, denoise, encode_points
from .persistence import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from .schedules import NoiseSchedule, cosine_schedule, schedule_at
from .toydata import ToyDataConfig, ToyDataset, generate_dataset, generate_patch

__all__ = [
    "Adam",
    "BranchSchedules",
    "DenoiserConfig",
    "DetectionScores",
    "HashTextEmbedder",
    "JointDenoiser",
    "MetricsReport",
    "NoiseSchedule",
    "NoisyState",
    "PointEncoder",
    "PointMap",
    "TableTextEmbedder",
    "TextCondition",
    "ToyDataConfig",
    "ToyDataset",
    "TripletSample",
    "aji",
    "build_point_map",
    "categorical_forward_marginal",
    "categorical_posterior",
    "categorical_sample",
    "cfg_combine",
    "connectivity_separate",
    "cosine_schedule",
    "denoise",
    "detection_scores",
    "dice",
    "distance_map",
    "embed_text",
    "encode_points",
    "fid",
    "frechet_distance",
    "fsd",
    "gaussian_forward_marginal",
    "gaussian_reverse_step",
    "generate_dataset",
    "generate_patch",
    "inception_score",
    "joint_loss",
    "load_checkpoint",
    "make_prompt",
    "marker_agreement_rate",
    "mdice",
    "read_tensor",
    "sample_batch",
    "sample_triplet",
    "save_checkpoint",
    "schedule_at",
    "text_condition",
    "watershed_separate",
    "write_tensor",
]
