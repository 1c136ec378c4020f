"""Procedural desk-scale patches with exact ground truth.

Each patch is a textured background with non-overlapping elliptical nuclei;
each class has a distinct base color and size bias so the generation task is
learnable and class identity is recoverable from pixels. The generator emits
the full tripartite unit plus instance labels, the centroid point map, and a
templated prompt, so every downstream stage can be verified against ground
truth it did not produce.

An optional touching-pairs mode abuts two nuclei to create the merged-cluster
failure case that distinguishes marker-controlled watershed from plain
connectivity labeling.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .conditioning import PointMap, build_point_map, make_prompt
from .diffusion import TripletSample
from .errors import ConfigError
from .instancing import distance_map
from .persistence import digest_of, read_json, read_tensor, write_json, write_tensor

DEFAULT_PALETTE = (
    ((-0.30, -0.55, 0.10), 1.0),    # class 1: blue-violet, medium
    ((0.35, -0.60, -0.55), 1.25),   # class 2: red-brown, large
    ((-0.60, 0.05, -0.50), 0.8),    # class 3: green, small
)
DEFAULT_CELL_TYPES = ("epithelial", "lymphocyte", "stromal")
DEFAULT_TISSUES = ("colon", "breast", "lung", "kidney")


@dataclass(frozen=True)
class ToyDataConfig:
    patch_size: int = 32
    num_classes: int = 3
    nuclei_per_patch: tuple[int, int] = (3, 8)
    radius_range: tuple[float, float] = (2.0, 4.5)
    class_palette: tuple = DEFAULT_PALETTE
    cell_type_names: tuple[str, ...] = DEFAULT_CELL_TYPES
    tissue_names: tuple[str, ...] = DEFAULT_TISSUES
    touching_pair_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(self.class_palette) != self.num_classes:
            raise ConfigError("class_palette length must equal num_classes")
        if len(self.cell_type_names) != self.num_classes:
            raise ConfigError("cell_type_names length must equal num_classes")
        if not self.tissue_names:
            raise ConfigError("tissue_names must be nonempty")
        lo, hi = self.nuclei_per_patch
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad nuclei_per_patch range {self.nuclei_per_patch}")
        rlo, rhi = self.radius_range
        max_extent = rhi * max(b for _, b in self.class_palette) * 1.3
        if rlo <= 0 or rhi < rlo or 2 * max_extent >= self.patch_size:
            raise ConfigError(
                f"radius_range {self.radius_range} does not fit patch_size "
                f"{self.patch_size}"
            )
        if not 0.0 <= self.touching_pair_prob <= 1.0:
            raise ConfigError("touching_pair_prob must lie in [0, 1]")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["nuclei_per_patch"] = list(self.nuclei_per_patch)
        d["radius_range"] = list(self.radius_range)
        d["class_palette"] = [[list(c), b] for c, b in self.class_palette]
        d["cell_type_names"] = list(self.cell_type_names)
        d["tissue_names"] = list(self.tissue_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyDataConfig":
        d = dict(d)
        d["nuclei_per_patch"] = tuple(d["nuclei_per_patch"])
        d["radius_range"] = tuple(d["radius_range"])
        d["class_palette"] = tuple((tuple(c), float(b)) for c, b in d["class_palette"])
        d["cell_type_names"] = tuple(d["cell_type_names"])
        d["tissue_names"] = tuple(d["tissue_names"])
        return cls(**d)


class ToyPatch(NamedTuple):
    sample: TripletSample
    point_map: PointMap
    prompt: str
    tissue: str


def _tissue_tint(idx: int) -> np.ndarray:
    phases = np.array([0.0, 2.1, 4.2])
    return 0.45 + 0.22 * np.sin(1.7 * idx + phases)


def _ellipse_mask(size, center, axes, theta):
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - center[0]
    dx = xx - center[1]
    ct, st = np.cos(theta), np.sin(theta)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    return (u / axes[1]) ** 2 + (v / axes[0]) ** 2 <= 1.0


def _connected(mask: np.ndarray) -> bool:
    _, n = ndimage.label(mask)
    return n == 1


def generate_patch(config: ToyDataConfig, rng: np.random.Generator) -> ToyPatch:
    """One patch with exact (semantic, instance, distance, point map, prompt)
    ground truth. Placement failures reduce the nucleus count, never raise."""
    s = config.patch_size
    tissue_idx = int(rng.integers(len(config.tissue_names)))
    tissue = config.tissue_names[tissue_idx]

    coarse = rng.normal(0.0, 0.09, size=(4, 4, 3))
    lowfreq = ndimage.zoom(coarse, (s / 4, s / 4, 1), order=1)
    image = _tissue_tint(tissue_idx)[None, None, :] + lowfreq
    image = image + rng.normal(0.0, 0.02, size=(s, s, 3))

    semantic = np.zeros((s, s), dtype=np.int32)
    instance = np.zeros((s, s), dtype=np.int32)
    occupied = np.zeros((s, s), dtype=bool)

    lo, hi = config.nuclei_per_patch
    n_target = int(rng.integers(lo, hi + 1))
    next_id = 1

    def try_place(center, cls, axes, theta):
        nonlocal next_id
        mask = _ellipse_mask(s, center, axes, theta)
        mask &= ~occupied
        if mask.sum() < 3 or not _connected(mask):
            return None
        color = np.array(config.class_palette[cls - 1][0]) + rng.normal(0, 0.05, 3)
        image[mask] = color + rng.normal(0.0, 0.02, size=(int(mask.sum()), 3))
        semantic[mask] = cls
        instance[mask] = next_id
        occupied[mask] = True
        next_id += 1
        return mask

    placed = 0
    while placed < n_target:
        success = False
        for _ in range(20):
            cls = int(rng.integers(1, config.num_classes + 1))
            bias = config.class_palette[cls - 1][1]
            r = rng.uniform(*config.radius_range) * bias
            axes = (r * rng.uniform(0.75, 1.0), r * rng.uniform(0.75, 1.0))
            theta = rng.uniform(0.0, np.pi)
            margin = int(np.ceil(max(axes))) + 1
            if 2 * margin >= s:
                continue
            center = (rng.uniform(margin, s - margin), rng.uniform(margin, s - margin))
            probe = _ellipse_mask(s, center, axes, theta)
            if (probe & occupied).any() or probe.sum() < 3:
                continue
            try_place(center, cls, axes, theta)
            success = True
            placed += 1

            if placed < n_target and rng.random() < config.touching_pair_prob:
                # abut a second nucleus so the pair forms one connected blob
                cls2 = int(rng.integers(1, config.num_classes + 1))
                r2 = rng.uniform(*config.radius_range) * config.class_palette[cls2 - 1][1]
                ang = rng.uniform(0.0, 2 * np.pi)
                dvec = np.array([np.sin(ang), np.cos(ang)])
                c2 = np.array(center) + dvec * (max(axes) + r2)
                m2 = int(np.ceil(r2)) + 1
                if m2 <= c2[0] <= s - m2 and m2 <= c2[1] <= s - m2:
                    if try_place(tuple(c2), cls2, (r2, r2), 0.0) is not None:
                        placed += 1
            break
        if not success:
            break

    sample = TripletSample(
        image=np.clip(image, -1.0, 1.0).astype(np.float32),
        distance=distance_map(instance),
        semantic=semantic,
        instance=instance,
    )
    pm = build_point_map(instance, semantic)
    present = sorted(int(c) for c in np.unique(semantic) if c != 0)
    if present:
        prompt = make_prompt(tissue, [config.cell_type_names[c - 1] for c in present])
    else:
        prompt = f"high-quality histopathology {tissue} tissue image including no nuclei."
    return ToyPatch(sample=sample, point_map=pm, prompt=prompt, tissue=tissue)


# ---------------------------------------------------------------------------
# Persisted datasets
# ---------------------------------------------------------------------------

TENSOR_KEYS = ("image", "semantic", "instance", "distance", "points")


def generate_dataset(
    config: ToyDataConfig,
    count: int,
    split_fractions: tuple[float, float],
    out_dir: str,
) -> dict:
    """Write ``count`` patches and a manifest with train/test split tags.

    Patch i is generated from its own generator seeded by (config.seed, i), so
    the dataset is reproducible sample-by-sample. Returns the manifest dict.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    fracs = tuple(float(f) for f in split_fractions)
    if len(fracs) != 2 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(
            f"split_fractions must be two nonnegative values summing to 1, got {fracs}"
        )
    n_train = int(np.floor(fracs[0] * count + 0.5))
    tensor_dir = os.path.join(out_dir, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)

    samples = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[config.seed, i]))
        patch = generate_patch(config, rng)
        name = f"sample_{i:05d}"
        arrays = {
            "image": patch.sample.image,
            "semantic": patch.sample.semantic,
            "instance": patch.sample.instance,
            "distance": patch.sample.distance,
            "points": patch.point_map.grid,
        }
        paths = {}
        for key in TENSOR_KEYS:
            rel = os.path.join("tensors", f"{name}_{key}.ncsd")
            write_tensor(os.path.join(out_dir, rel), arrays[key])
            paths[key] = rel
        samples.append({
            "id": name,
            "split": "train" if i < n_train else "test",
            "tissue": patch.tissue,
            "tissue_index": config.tissue_names.index(patch.tissue),
            "prompt": patch.prompt,
            "paths": paths,
        })

    manifest = {
        "kind": "histodiff-dataset",
        "config": config.as_dict(),
        "config_digest": digest_of(config.as_dict()),
        "count": count,
        "split_fractions": list(fracs),
        "split_counts": {"train": n_train, "test": count - n_train},
        "samples": samples,
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


@dataclass
class DatasetEntry:
    sample: TripletSample
    point_map: PointMap
    prompt: str
    tissue: str
    tissue_index: int
    split: str
    sample_id: str


class ToyDataset:
    """In-memory view over a persisted dataset directory."""

    def __init__(self, root: str, split: str | None = None):
        self.root = root
        manifest = read_json(os.path.join(root, "manifest.json"))
        if manifest.get("kind") != "histodiff-dataset":
            raise ConfigError(f"{root}: not a dataset directory")
        self.manifest = manifest
        self.config = ToyDataConfig.from_dict(manifest["config"])
        self.entries: list[DatasetEntry] = []
        for rec in manifest["samples"]:
            if split is not None and rec["split"] != split:
                continue
            arrays = {
                key: read_tensor(os.path.join(root, rec["paths"][key]))
                for key in TENSOR_KEYS
            }
            sample = TripletSample(
                image=arrays["image"],
                distance=arrays["distance"],
                semantic=arrays["semantic"],
                instance=arrays["instance"],
            )
            self.entries.append(
                DatasetEntry(
                    sample=sample,
                    point_map=PointMap(grid=arrays["points"]),
                    prompt=rec["prompt"],
                    tissue=rec["tissue"],
                    tissue_index=rec["tissue_index"],
                    split=rec["split"],
                    sample_id=rec["id"],
                )
            )

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> DatasetEntry:
        return self.entries[i]

    @property
    def num_foreground_classes(self) -> int:
        return self.config.num_classes
