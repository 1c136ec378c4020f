"""PNG export for visual inspection: fixed label legend, image/distance/label grids."""

from __future__ import annotations

import numpy as np
from PIL import Image

# fixed legend: background, then one color per foreground class
LABEL_COLORS = np.array(
    [
        (0, 0, 0),        # 0 background
        (66, 99, 235),    # 1 blue
        (214, 69, 65),    # 2 red
        (38, 166, 91),    # 3 green
        (244, 179, 80),   # 4 amber
        (155, 89, 182),   # 5 purple
        (26, 188, 156),   # 6 teal
    ],
    dtype=np.uint8,
)


def image_to_rgb8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float image to uint8."""
    return np.clip((image + 1.0) * 127.5, 0, 255).astype(np.uint8)


def distance_to_rgb8(distance: np.ndarray) -> np.ndarray:
    gray = np.clip(distance * 255.0, 0, 255).astype(np.uint8)
    return np.stack([gray] * 3, axis=-1)


def label_to_rgb8(semantic: np.ndarray) -> np.ndarray:
    idx = np.clip(semantic, 0, len(LABEL_COLORS) - 1)
    return LABEL_COLORS[idx]


def save_png(rgb8: np.ndarray, path: str) -> None:
    Image.fromarray(rgb8, mode="RGB").save(path)


def triplet_panel(sample, point_grid: np.ndarray | None = None) -> np.ndarray:
    """Side-by-side uint8 panel: image | distance | label (| markers)."""
    panels = [
        image_to_rgb8(sample.image),
        distance_to_rgb8(sample.distance),
        label_to_rgb8(sample.semantic),
    ]
    if point_grid is not None:
        panels.append(label_to_rgb8(point_grid))
    pad = np.full((sample.image.shape[0], 2, 3), 255, dtype=np.uint8)
    cells = []
    for i, p in enumerate(panels):
        if i:
            cells.append(pad)
        cells.append(p)
    return np.concatenate(cells, axis=1)


def sample_grid_png(samples, path: str, point_grids=None) -> None:
    rows = []
    hpad = None
    for i, s in enumerate(samples):
        pg = point_grids[i] if point_grids is not None else None
        row = triplet_panel(s, pg)
        if hpad is None:
            hpad = np.full((2, row.shape[1], 3), 255, dtype=np.uint8)
        if rows:
            rows.append(hpad)
        rows.append(row)
    save_png(np.concatenate(rows, axis=0), path)
