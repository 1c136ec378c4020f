"""Centroid-distance maps and instance separation of semantic labels.

The distance map is 0 at each instance's centroid pixel, rises to 1 at the
instance's farthest pixel, and is 1 on background, so a marker-seeded flood
that grows in ascending distance order carves touching nuclei apart along the
ridge between their centroids. The connectivity baseline (per-class connected
components) is what the watershed is measured against: it merges touching
instances by construction.
"""

from __future__ import annotations

import heapq

import numpy as np
from scipy import ndimage

from .conditioning import PointMap, centroid_pixel

_EIGHT = np.ones((3, 3), dtype=int)


def distance_map(instance_label: np.ndarray) -> np.ndarray:
    """Per-pixel normalized Euclidean distance from each instance's centroid
    pixel; single-pixel instances get 0, background is 1."""
    instance_label = np.asarray(instance_label)
    d = np.ones(instance_label.shape, dtype=np.float32)
    for inst_id in np.unique(instance_label):
        if inst_id == 0:
            continue
        rows, cols = np.nonzero(instance_label == inst_id)
        cr, cc = centroid_pixel(rows, cols)
        dist = np.sqrt((rows - cr) ** 2.0 + (cols - cc) ** 2.0)
        peak = dist.max()
        d[rows, cols] = dist / peak if peak > 0 else 0.0
    return d


def watershed_separate(
    d: np.ndarray, semantic: np.ndarray, pc: PointMap | np.ndarray
) -> np.ndarray:
    """Marker-controlled watershed over the distance map, restricted to
    foreground (semantic != 0).

    Markers become seeds with distinct instance ids (row-major order); the
    flood grows 4-connected in ascending d, ties broken by insertion order.
    Markers on background pixels are ignored. Foreground unreachable from any
    marker is labeled as per-class connected components so no annotated pixel
    is dropped; with zero markers this degrades to connectivity labeling.
    """
    grid = pc.grid if isinstance(pc, PointMap) else np.asarray(pc)
    d = np.asarray(d)
    semantic = np.asarray(semantic)
    if not (d.shape == semantic.shape == grid.shape):
        raise ValueError(
            f"shape mismatch: d {d.shape}, semantic {semantic.shape}, pc {grid.shape}"
        )
    h, w = d.shape
    fg = semantic != 0
    labels = np.zeros((h, w), dtype=np.int32)

    heap: list[tuple[float, int, int, int, int]] = []
    counter = 0
    seeds = np.argwhere((grid != 0) & fg)
    for idx, (r, c) in enumerate(seeds, start=1):
        heapq.heappush(heap, (float(d[r, c]), counter, int(r), int(c), idx))
        counter += 1

    while heap:
        _, _, r, c, idx = heapq.heappop(heap)
        if labels[r, c]:
            continue
        labels[r, c] = idx
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and fg[rr, cc] and not labels[rr, cc]:
                heapq.heappush(heap, (float(d[rr, cc]), counter, rr, cc, idx))
                counter += 1

    orphan = fg & (labels == 0)
    if orphan.any():
        next_id = int(labels.max()) + 1
        orphan_sem = np.where(orphan, semantic, 0)
        extra = connectivity_separate(orphan_sem)
        labels[orphan] = extra[orphan] + (next_id - 1)
    return labels


def connectivity_separate(semantic: np.ndarray) -> np.ndarray:
    """8-connected components of each foreground class, as distinct instances."""
    semantic = np.asarray(semantic)
    labels = np.zeros(semantic.shape, dtype=np.int32)
    offset = 0
    for cls in np.unique(semantic):
        if cls == 0:
            continue
        comp, n = ndimage.label(semantic == cls, structure=_EIGHT)
        mask = comp > 0
        labels[mask] = comp[mask] + offset
        offset += n
    return labels
