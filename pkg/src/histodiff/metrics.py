"""Segmentation, detection/classification, and distributional metrics.

Instance metrics use pixel-count contingency tables; every greedy choice has a
pinned deterministic tie-break so independent reference implementations can
match results exactly:

- mdice: each ground-truth instance pairs with the prediction of maximal
  overlap (ties -> lower prediction id); zero overlap scores 0.
- aji: ground-truth instances in ascending id greedily consume the unused
  prediction of maximal Jaccard (ratio ties compared by integer
  cross-multiplication, then lower prediction id); unmatched ground truth adds
  its own pixels to the union, leftover prediction pixels join the union last.
- detection: candidate pairs need strict Jaccard > 0.5, then one-to-one greedy
  assignment by descending Jaccard (ties -> ascending gt id, pred id).

The Frechet kernel is shared by FID and FSD; the trace term is evaluated
through the PSD-similar form sqrt(Ca) Cb sqrt(Ca) with eigenvalues clipped at
the -1e-6 tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DataError, NumericalError, UndefinedMetricError

EIG_CLIP_TOL = -1e-6


# ---------------------------------------------------------------------------
# Pixel-level segmentation
# ---------------------------------------------------------------------------

def dice(pred_semantic: np.ndarray, gt_semantic: np.ndarray) -> float:
    """Binary foreground Dice 2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    pred_semantic = np.asarray(pred_semantic)
    gt_semantic = np.asarray(gt_semantic)
    if pred_semantic.shape != gt_semantic.shape:
        raise ValueError(
            f"shape mismatch {pred_semantic.shape} vs {gt_semantic.shape}"
        )
    p = pred_semantic > 0
    g = gt_semantic > 0
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# ---------------------------------------------------------------------------
# Instance-level: shared contingency machinery
# ---------------------------------------------------------------------------

def _relabel(label_map: np.ndarray):
    """Map instance ids to 0..n-1 preserving ascending id order; returns
    (index_map, ids, sizes)."""
    ids, inv = np.unique(label_map.ravel(), return_inverse=True)
    sizes = np.bincount(inv, minlength=len(ids))
    return inv.reshape(label_map.shape), ids, sizes


def _contingency(gt: np.ndarray, pred: np.ndarray):
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"instance map shapes disagree: {gt.shape} vs {pred.shape}")
    gi, gids, gsizes = _relabel(gt)
    pi, pids, psizes = _relabel(pred)
    table = np.bincount(
        gi.ravel() * len(pids) + pi.ravel(), minlength=len(gids) * len(pids)
    ).reshape(len(gids), len(pids))
    # strip background rows/columns (id 0) if present
    if gids[0] == 0:
        table = table[1:]
        gids, gsizes = gids[1:], gsizes[1:]
    if pids[0] == 0:
        table = table[:, 1:]
        pids, psizes = pids[1:], psizes[1:]
    return table, gids, gsizes, pids, psizes


def mdice(pred_instances: np.ndarray, gt_instances: np.ndarray) -> float:
    """Mean per-nucleus Dice over ground-truth instances."""
    table, gids, gsizes, pids, psizes = _contingency(gt_instances, pred_instances)
    if len(gids) == 0:
        raise UndefinedMetricError("mdice undefined: empty ground truth")
    total = 0.0
    for gi in range(len(gids)):
        if len(pids) == 0:
            continue
        inter = table[gi]
        best = int(np.argmax(inter))  # argmax keeps the lowest index on ties
        if inter[best] == 0:
            continue
        total += 2.0 * inter[best] / (gsizes[gi] + psizes[best])
    return total / len(gids)


def aji(pred_instances: np.ndarray, gt_instances: np.ndarray) -> float:
    """Aggregated Jaccard index."""
    table, gids, gsizes, pids, psizes = _contingency(gt_instances, pred_instances)
    if len(gids) == 0:
        raise UndefinedMetricError("aji undefined: empty ground truth")
    used = np.zeros(len(pids), dtype=bool)
    c = 0
    u = 0
    for gi in range(len(gids)):
        best_j = -1
        best_inter = 0
        best_union = 1
        for pj in range(len(pids)):
            if used[pj]:
                continue
            inter = int(table[gi, pj])
            if inter == 0:
                continue
            union = int(gsizes[gi]) + int(psizes[pj]) - inter
            # compare inter/union > best_inter/best_union without floats
            if best_j < 0 or inter * best_union > best_inter * union:
                best_j, best_inter, best_union = pj, inter, union
        if best_j < 0:
            u += int(gsizes[gi])
        else:
            used[best_j] = True
            c += best_inter
            u += best_union
    u += int(psizes[~used].sum())
    if u == 0:
        return 0.0
    return c / u


class DetectionScores(NamedTuple):
    f_d: float
    acc: float
    per_class_f: np.ndarray


def instance_classes(instances: np.ndarray, semantic: np.ndarray) -> dict[int, int]:
    """Majority foreground class of each instance (ties -> lower class)."""
    out = {}
    for inst_id in np.unique(instances):
        if inst_id == 0:
            continue
        classes = semantic[instances == inst_id]
        classes = classes[classes > 0]
        if classes.size == 0:
            raise DataError(f"instance {inst_id} has no foreground class")
        out[int(inst_id)] = int(np.argmax(np.bincount(classes)))
    return out


def _match_instances(gt: np.ndarray, pred: np.ndarray):
    """One-to-one matches [(gt_id, pred_id)] with strict Jaccard > 0.5, greedy
    by descending Jaccard (ties by ascending gt id then pred id)."""
    table, gids, gsizes, pids, psizes = _contingency(gt, pred)
    candidates = []
    for gi in range(len(gids)):
        for pj in range(len(pids)):
            inter = int(table[gi, pj])
            if inter == 0:
                continue
            union = int(gsizes[gi]) + int(psizes[pj]) - inter
            if 2 * inter > union:  # inter/union > 0.5 in exact arithmetic
                candidates.append((inter / union, gi, pj))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    g_used = set()
    p_used = set()
    matches = []
    for _, gi, pj in candidates:
        if gi in g_used or pj in p_used:
            continue
        g_used.add(gi)
        p_used.add(pj)
        matches.append((int(gids[gi]), int(pids[pj])))
    n_gt = len(gids)
    n_pred = len(pids)
    return matches, n_gt, n_pred


def detection_counts(
    pred_instances, pred_semantic, gt_instances, gt_semantic, num_classes: int
) -> dict:
    """Raw matching counts, aggregatable across images before scoring."""
    matches, n_gt, n_pred = _match_instances(gt_instances, pred_instances)
    gt_cls = instance_classes(gt_instances, gt_semantic)
    pred_cls = instance_classes(pred_instances, pred_semantic)
    for table, name in ((gt_cls, "gt"), (pred_cls, "pred")):
        for cls in table.values():
            if cls > num_classes:
                raise DataError(f"{name} class {cls} out of range 1..{num_classes}")
    tp_cls = np.zeros(num_classes + 1, dtype=np.int64)
    fp_cls = np.zeros(num_classes + 1, dtype=np.int64)
    fn_cls = np.zeros(num_classes + 1, dtype=np.int64)
    correct = 0
    matched_gt = set()
    matched_pred = set()
    for g_id, p_id in matches:
        matched_gt.add(g_id)
        matched_pred.add(p_id)
        gc, pc = gt_cls[g_id], pred_cls[p_id]
        if gc == pc:
            correct += 1
            tp_cls[gc] += 1
        else:
            fn_cls[gc] += 1
            fp_cls[pc] += 1
    for g_id, gc in gt_cls.items():
        if g_id not in matched_gt:
            fn_cls[gc] += 1
    for p_id, pc in pred_cls.items():
        if p_id not in matched_pred:
            fp_cls[pc] += 1
    return {
        "tp": len(matches),
        "fp": n_pred - len(matches),
        "fn": n_gt - len(matches),
        "correct": correct,
        "matched": len(matches),
        "tp_cls": tp_cls,
        "fp_cls": fp_cls,
        "fn_cls": fn_cls,
        "num_classes": num_classes,
    }


def scores_from_counts(counts: dict) -> DetectionScores:
    tp, fp, fn = counts["tp"], counts["fp"], counts["fn"]
    denom = 2 * tp + fp + fn
    f_d = 1.0 if denom == 0 else 2.0 * tp / denom
    if counts["matched"] == 0:
        acc = 1.0 if (tp + fp + fn) == 0 else 0.0
    else:
        acc = counts["correct"] / counts["matched"]
    k = counts["num_classes"]
    per_class = np.ones(k, dtype=np.float64)
    for cls in range(1, k + 1):
        d = 2 * counts["tp_cls"][cls] + counts["fp_cls"][cls] + counts["fn_cls"][cls]
        if d > 0:
            per_class[cls - 1] = 2.0 * counts["tp_cls"][cls] / d
    return DetectionScores(f_d=float(f_d), acc=float(acc), per_class_f=per_class)


def detection_scores(
    pred_instances, pred_semantic, gt_instances, gt_semantic,
    num_classes: int | None = None,
) -> DetectionScores:
    """Detection F1, classification accuracy over matches, and per-class F1."""
    if num_classes is None:
        num_classes = int(max(np.max(gt_semantic), np.max(pred_semantic), 1))
    counts = detection_counts(
        pred_instances, pred_semantic, gt_instances, gt_semantic, num_classes
    )
    return scores_from_counts(counts)


def merge_counts(parts: list[dict]) -> dict:
    out = dict(parts[0])
    for key in ("tp", "fp", "fn", "correct", "matched"):
        out[key] = sum(p[key] for p in parts)
    for key in ("tp_cls", "fp_cls", "fn_cls"):
        out[key] = np.sum([p[key] for p in parts], axis=0)
    return out


# ---------------------------------------------------------------------------
# Distributional metrics
# ---------------------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < EIG_CLIP_TOL:
        raise NumericalError(
            f"matrix not PSD within tolerance: min eigenvalue {vals.min():.3e}"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2))."""
    mu_a = np.asarray(mu_a, dtype=np.float64).ravel()
    mu_b = np.asarray(mu_b, dtype=np.float64).ravel()
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError("moment shapes disagree")
    for name, cov in (("cov_a", cov_a), ("cov_b", cov_b)):
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise NumericalError(f"{name} is not symmetric")
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < EIG_CLIP_TOL:
        raise NumericalError(
            f"cross term not PSD within tolerance: min eigenvalue {vals.min():.3e}"
        )
    trace_cross = 2.0 * np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(np.sum((mu_a - mu_b) ** 2))
    return d2 + float(np.trace(cov_a) + np.trace(cov_b) - trace_cross)


def class_fractions(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, K) per-patch class pixel fractions for a stack of (H, W) label maps."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n = labels.shape[0]
    out = np.empty((n, num_classes), dtype=np.float64)
    size = labels[0].size
    for i in range(n):
        out[i] = np.bincount(labels[i].ravel(), minlength=num_classes)[:num_classes] / size
    return out


def _moments(features: np.ndarray):
    if features.shape[0] < 2:
        raise UndefinedMetricError(
            "need at least 2 samples for a covariance estimate"
        )
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1)
    return mu, np.atleast_2d(cov)


def fsd(real_labels: np.ndarray, synth_labels: np.ndarray, num_classes: int) -> float:
    """Frechet distance between class-pixel-fraction statistics of two label sets."""
    real = class_fractions(real_labels, num_classes)
    synth = class_fractions(synth_labels, num_classes)
    mu_r, cov_r = _moments(real)
    mu_s, cov_s = _moments(synth)
    return frechet_distance(mu_r, cov_r, mu_s, cov_s)


def fid(
    extractor: Callable[[np.ndarray], np.ndarray],
    real_images: np.ndarray,
    synth_images: np.ndarray,
) -> float:
    """Frechet distance between extracted feature moments of two image sets."""
    mu_r, cov_r = _moments(np.asarray(extractor(real_images), dtype=np.float64))
    mu_s, cov_s = _moments(np.asarray(extractor(synth_images), dtype=np.float64))
    return frechet_distance(mu_r, cov_r, mu_s, cov_s)


def inception_score(
    classifier: Callable[[np.ndarray], np.ndarray], synth_images: np.ndarray
) -> float:
    """exp(mean KL(p(y|x) || p(y))) over per-image class distributions."""
    probs = np.asarray(classifier(synth_images), dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("classifier must return (N, C) probabilities")
    rows = probs.sum(axis=1)
    if np.max(np.abs(rows - 1.0)) > 1e-5:
        raise ValueError("classifier rows do not sum to 1")
    marginal = probs.mean(axis=0)
    kl = np.where(
        probs > 0.0,
        probs * (np.log(np.maximum(probs, 1e-30)) - np.log(np.maximum(marginal, 1e-30))),
        0.0,
    ).sum(axis=1)
    return float(np.exp(kl.mean()))


def marker_agreement_rate(semantic: np.ndarray, point_grid: np.ndarray,
                          window: int = 3) -> float:
    """Fraction of markers whose surrounding window's modal class equals the
    marker class (ties toward the lower class index)."""
    semantic = np.asarray(semantic)
    grid = np.asarray(point_grid)
    if semantic.shape != grid.shape:
        raise ValueError("semantic and point grid shapes disagree")
    half = window // 2
    coords = np.argwhere(grid != 0)
    if coords.shape[0] == 0:
        raise UndefinedMetricError("no markers in point map")
    h, w = semantic.shape
    hits = 0
    for r, c in coords:
        patch = semantic[max(0, r - half):min(h, r + half + 1),
                         max(0, c - half):min(w, c + half + 1)]
        mode = int(np.argmax(np.bincount(patch.ravel())))
        hits += int(mode == grid[r, c])
    return hits / coords.shape[0]


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    values: dict[str, float] = field(default_factory=dict)
    sample_counts: dict[str, int] = field(default_factory=dict)
    config_digest: str = ""
    flags: dict[str, str] = field(default_factory=dict)

    def validate(self):
        for key, val in self.values.items():
            if not np.isfinite(val):
                raise NumericalError(f"metric {key} is not finite: {val}")

    def to_text(self) -> str:
        lines = [f"{key}: {self.values[key]:.6f}" for key in sorted(self.values)]
        for key in sorted(self.flags):
            lines.append(f"# {key}: {self.flags[key]}")
        for key in sorted(self.sample_counts):
            lines.append(f"# count {key}: {self.sample_counts[key]}")
        lines.append(f"# config digest: {self.config_digest}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "values": {k: float(v) for k, v in self.values.items()},
            "sample_counts": dict(self.sample_counts),
            "config_digest": self.config_digest,
            "flags": dict(self.flags),
        }
