"""Conditioning inputs: centroid point maps, prompt templates, text embedding.

The point map marks one pixel per nucleus instance with the instance's class;
everything else is 0. Prompts follow a fixed template over tissue type, an
optional staining method, and the cell types present. Embedding is pluggable:
the default is a deterministic hashed bag-of-words; precomputed tables
(e.g. from an external vision-language encoder) can be loaded from disk.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .persistence import read_json, read_tensor

PROMPT_TEMPLATE = (
    "high-quality histopathology {tissue} tissue image "
    "including nuclei types of {cells}."
)
PROMPT_TEMPLATE_STAINED = (
    "high-quality histopathology {stain}-stained {tissue} tissue image "
    "including nuclei types of {cells}."
)


@dataclass
class PointMap:
    """(H, W) int grid; 0 = no marker, k >= 1 = class-k centroid marker."""

    grid: np.ndarray
    marker_count: int = field(default=-1)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int32)
        count = int(np.count_nonzero(self.grid))
        if self.marker_count < 0:
            self.marker_count = count
        elif self.marker_count != count:
            raise DataError(
                f"marker_count {self.marker_count} != nonzero pixels {count}"
            )


@dataclass
class TextCondition:
    prompt: str
    embedding: np.ndarray
    source: str = "template"   # "template" or "external"

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float32)
        if not np.isfinite(self.embedding).all():
            raise DataError("text embedding contains non-finite values")


# ---------------------------------------------------------------------------
# Point maps
# ---------------------------------------------------------------------------

def centroid_pixel(rows: np.ndarray, cols: np.ndarray) -> tuple[int, int]:
    """Integer anchor pixel of a pixel set: the rounded (half-up) centroid if
    it lies in the set, otherwise the set pixel nearest the continuous
    centroid. Distances are compared in exact integer arithmetic (scaled by
    the pixel count) so geometric ties break lexicographically, not by
    float rounding."""
    n = int(rows.size)
    sr = int(rows.sum())
    sc = int(cols.sum())
    rr = (2 * sr + n) // (2 * n)   # floor(sr/n + 1/2)
    rc = (2 * sc + n) // (2 * n)
    if ((rows == rr) & (cols == rc)).any():
        return rr, rc
    dr = n * rows.astype(np.int64) - sr
    dc = n * cols.astype(np.int64) - sc
    d2 = dr * dr + dc * dc
    cand = np.flatnonzero(d2 == d2.min())
    order = np.lexsort((cols[cand], rows[cand]))
    pick = cand[order[0]]
    return int(rows[pick]), int(cols[pick])


def build_point_map(instance_label: np.ndarray, semantic_label: np.ndarray) -> PointMap:
    """One marker per instance at its centroid pixel, carrying the instance's
    majority foreground class (ties toward the lower class index)."""
    instance_label = np.asarray(instance_label)
    semantic_label = np.asarray(semantic_label)
    if instance_label.shape != semantic_label.shape:
        raise ValueError(
            f"label shapes disagree: {instance_label.shape} vs {semantic_label.shape}"
        )
    grid = np.zeros(instance_label.shape, dtype=np.int32)
    for inst_id in np.unique(instance_label):
        if inst_id == 0:
            continue
        rows, cols = np.nonzero(instance_label == inst_id)
        if rows.size == 0:
            raise DataError(f"instance id {inst_id} labels no pixels")
        classes = semantic_label[rows, cols]
        classes = classes[classes > 0]
        if classes.size == 0:
            raise DataError(f"instance id {inst_id} has no foreground class")
        counts = np.bincount(classes)
        cls = int(np.argmax(counts))  # argmax returns the lowest index on ties
        r, c = centroid_pixel(rows, cols)
        grid[r, c] = cls
    return PointMap(grid=grid)


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------

def make_prompt(tissue_type: str, cell_types: list[str], stain: str | None = None) -> str:
    if not tissue_type:
        raise ValueError("tissue_type must be nonempty")
    if not cell_types or any(not c for c in cell_types):
        raise ValueError("cell_types must be a nonempty list of nonempty names")
    cells = ", ".join(cell_types)
    if stain:
        return PROMPT_TEMPLATE_STAINED.format(stain=stain, tissue=tissue_type, cells=cells)
    return PROMPT_TEMPLATE.format(tissue=tissue_type, cells=cells)


# ---------------------------------------------------------------------------
# Text embedding
# ---------------------------------------------------------------------------

class HashTextEmbedder:
    """Deterministic bag-of-words: lowercase word tokens hashed (crc32) into
    ``dim`` buckets, counts L2-normalized."""

    source = "template"

    def __init__(self, dim: int = 512):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def embed(self, prompt: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float32)
        for token in re.findall(r"[a-z0-9]+", prompt.lower()):
            vec[zlib.crc32(token.encode()) % self.dim] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec


class TableTextEmbedder:
    """Embeddings precomputed elsewhere, loaded from a JSON manifest mapping
    prompt strings to tensor-container files (paths relative to the manifest)."""

    source = "external"

    def __init__(self, manifest_path: str):
        import os

        table = read_json(manifest_path)
        if not isinstance(table, dict) or not table:
            raise DataError(f"{manifest_path}: expected a nonempty prompt->path mapping")
        base = os.path.dirname(os.path.abspath(manifest_path))
        self._vectors: dict[str, np.ndarray] = {}
        dim = None
        for prompt, rel in table.items():
            vec = read_tensor(os.path.join(base, rel)).astype(np.float32).ravel()
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DataError(
                    f"{manifest_path}: inconsistent embedding dims {vec.size} vs {dim}"
                )
            self._vectors[prompt] = vec
        self.dim = int(dim)

    def embed(self, prompt: str) -> np.ndarray:
        try:
            return self._vectors[prompt]
        except KeyError:
            raise LookupError(f"no precomputed embedding for prompt: {prompt!r}") from None


def embed_text(embedder, prompt: str) -> np.ndarray:
    """Fixed-dimension embedding of a nonempty prompt via the given embedder."""
    if not prompt:
        raise ValueError("prompt must be nonempty")
    return embedder.embed(prompt)


def text_condition(embedder, prompt: str) -> TextCondition:
    return TextCondition(
        prompt=prompt,
        embedding=embed_text(embedder, prompt),
        source=getattr(embedder, "source", "template"),
    )
