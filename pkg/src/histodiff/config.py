"""Run configuration: one JSON document, fully validated before any work starts.

Paths may be relative; relative dataset/output paths resolve against the
HISTODIFF_DATA_ROOT environment variable when it is set, else the current
directory. Command-line flags (--seed, --omega, --out) override the file.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .nn.denoiser import DenoiserConfig
from .persistence import read_json
from .schedules import cosine_schedule
from .diffusion import BranchSchedules
from .toydata import ToyDataConfig

DATA_ROOT_ENV = "HISTODIFF_DATA_ROOT"


@dataclass
class ScheduleParams:
    num_steps: int = 1000
    offset_image: float = 0.008
    offset_distance: float = 0.008
    offset_label: float = 0.008

    def validate(self, errors: list[str]) -> None:
        if not isinstance(self.num_steps, int) or self.num_steps < 1:
            errors.append(f"schedule.num_steps must be a positive integer, got {self.num_steps!r}")
        for name in ("offset_image", "offset_distance", "offset_label"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                errors.append(f"schedule.{name} must lie in (0, 1), got {v!r}")

    def build(self) -> BranchSchedules:
        return BranchSchedules(
            image=cosine_schedule(self.num_steps, self.offset_image),
            distance=cosine_schedule(self.num_steps, self.offset_distance),
            label=cosine_schedule(self.num_steps, self.offset_label),
        )


@dataclass
class OptimizerParams:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99

    def validate(self, errors: list[str]) -> None:
        if not self.lr > 0:
            errors.append(f"optimizer.lr must be positive, got {self.lr!r}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                errors.append(f"optimizer.{name} must lie in [0, 1), got {v!r}")


@dataclass
class ModelParams:
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    groups: int = 8
    temb_dim: int = 128
    time_freq_dim: int = 64
    text_dim: int = 512
    point_width: int = 16
    point_growth: int = 16
    point_blocks: int = 1
    point_dense_layers: int = 2

    def validate(self, errors: list[str]) -> None:
        if self.base_width < 1:
            errors.append("model.base_width must be positive")
        if len(self.channel_mults) < 2:
            errors.append("model.channel_mults needs at least 2 levels")
        for m in self.channel_mults:
            if self.base_width * m % self.groups:
                errors.append(
                    f"model width {self.base_width * m} not divisible by groups {self.groups}"
                )
        for name in ("temb_dim", "time_freq_dim"):
            if getattr(self, name) % 2:
                errors.append(f"model.{name} must be even")
        for name in ("text_dim", "point_width", "point_growth", "point_blocks",
                     "point_dense_layers"):
            if getattr(self, name) < 1:
                errors.append(f"model.{name} must be positive")

    def denoiser_config(self, num_classes: int) -> DenoiserConfig:
        return DenoiserConfig(
            num_classes=num_classes,
            base_width=self.base_width,
            channel_mults=tuple(self.channel_mults),
            groups=self.groups,
            temb_dim=self.temb_dim,
            time_freq_dim=self.time_freq_dim,
            text_dim=self.text_dim,
            point_width=self.point_width,
            point_growth=self.point_growth,
            point_blocks=self.point_blocks,
            point_dense_layers=self.point_dense_layers,
        )


@dataclass
class GenParams:
    count: int = 512
    split_fractions: tuple[float, float] = (0.9, 0.1)
    toy: dict = field(default_factory=dict)

    def validate(self, errors: list[str]) -> None:
        if self.count < 1:
            errors.append(f"gen.count must be >= 1, got {self.count!r}")
        fr = self.split_fractions
        if len(fr) != 2 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            errors.append(
                f"gen.split_fractions must be two nonnegative values summing to 1, got {fr!r}"
            )
        try:
            self.toy_config(seed=0)
        except ConfigError as exc:
            errors.append(f"gen.toy: {exc}")

    def toy_config(self, seed: int) -> ToyDataConfig:
        kwargs = dict(self.toy)
        if "class_palette" in kwargs:
            kwargs["class_palette"] = tuple(
                (tuple(c), float(b)) for c, b in kwargs["class_palette"]
            )
        for key in ("nuclei_per_patch", "radius_range", "cell_type_names", "tissue_names"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return ToyDataConfig(seed=seed, **kwargs)


@dataclass
class RunConfig:
    dataset_dir: str = "data/toy"
    out_dir: str = "runs/default"
    seed: int = 0
    gen: GenParams = field(default_factory=GenParams)
    model: ModelParams = field(default_factory=ModelParams)
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    loss_weights: tuple[float, float, float] = (9.0, 1.0, 3.0)
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)
    batch_size: int = 16
    train_steps: int = 600
    text_dropout: float = 0.1
    checkpoint_every: int = 200
    omega: float = 3.0
    sample_count: int = 16

    def validate(self) -> None:
        errors: list[str] = []
        if not isinstance(self.seed, int):
            errors.append(f"seed must be an integer, got {self.seed!r}")
        self.gen.validate(errors)
        self.model.validate(errors)
        self.schedule.validate(errors)
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            errors.append(f"loss_weights must be three nonnegative values, got {self.loss_weights!r}")
        self.optimizer.validate(errors)
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size!r}")
        if self.train_steps < 1:
            errors.append(f"train_steps must be >= 1, got {self.train_steps!r}")
        if not 0.0 <= self.text_dropout <= 1.0:
            errors.append(f"text_dropout must lie in [0, 1], got {self.text_dropout!r}")
        if self.checkpoint_every < 1:
            errors.append(f"checkpoint_every must be >= 1, got {self.checkpoint_every!r}")
        if not np.isfinite(self.omega):
            errors.append(f"omega must be finite, got {self.omega!r}")
        if self.sample_count < 1:
            errors.append(f"sample_count must be >= 1, got {self.sample_count!r}")
        if errors:
            raise ConfigError("; ".join(errors))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        d["model"]["channel_mults"] = list(self.model.channel_mults)
        d["gen"]["split_fractions"] = list(self.gen.split_fractions)
        return d

    def resolve(self, path: str) -> str:
        if os.path.isabs(path):
            return path
        root = os.environ.get(DATA_ROOT_ENV, "")
        return os.path.join(root, path) if root else path


def load_run_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Parse and fully validate a JSON run configuration."""
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level config must be an object")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    raw = {**raw, **overrides}

    known = {
        "dataset_dir", "out_dir", "seed", "gen", "model", "schedule",
        "loss_weights", "optimizer", "batch_size", "train_steps",
        "text_dropout", "checkpoint_every", "omega", "sample_count",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")

    def build(cls, value, label):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: {label} must be an object")
        try:
            return cls(**value)
        except TypeError as exc:
            raise ConfigError(f"{path}: {label}: {exc}") from None

    cfg = RunConfig(
        dataset_dir=raw.get("dataset_dir", "data/toy"),
        out_dir=raw.get("out_dir", "runs/default"),
        seed=raw.get("seed", 0),
        gen=build(GenParams, _tupled(raw.get("gen", {}), "split_fractions"), "gen"),
        model=build(ModelParams, _tupled(raw.get("model", {}), "channel_mults"), "model"),
        schedule=build(ScheduleParams, raw.get("schedule", {}), "schedule"),
        loss_weights=tuple(raw.get("loss_weights", (9.0, 1.0, 3.0))),
        optimizer=build(OptimizerParams, raw.get("optimizer", {}), "optimizer"),
        batch_size=raw.get("batch_size", 16),
        train_steps=raw.get("train_steps", 600),
        text_dropout=raw.get("text_dropout", 0.1),
        checkpoint_every=raw.get("checkpoint_every", 200),
        omega=raw.get("omega", 3.0),
        sample_count=raw.get("sample_count", 16),
    )
    cfg.validate()
    return cfg


def _tupled(d: dict, key: str) -> dict:
    if isinstance(d, dict) and key in d:
        d = dict(d)
        d[key] = tuple(d[key])
    return d
