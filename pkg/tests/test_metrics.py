"""Metric tests. The reference implementations here are written independently
(coordinate sets, python loops, exact rational comparisons) and pin the same
greedy/tie rules the library documents, so results must match exactly."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histodiff.errors import NumericalError, UndefinedMetricError
from histodiff.metrics import (
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


# ---------------------------------------------------------------------------
# Reference implementations (oracles)
# ---------------------------------------------------------------------------

def _pixels(label_map, inst_id):
    rows, cols = np.nonzero(label_map == inst_id)
    return set(zip(rows.tolist(), cols.tolist()))


def _ids(label_map):
    return sorted(int(i) for i in np.unique(label_map) if i != 0)


def mdice_oracle(pred, gt):
    gt_ids = _ids(gt)
    if not gt_ids:
        raise UndefinedMetricError("empty gt")
    pred_sets = {p: _pixels(pred, p) for p in _ids(pred)}
    total = 0.0
    for g in gt_ids:
        gset = _pixels(gt, g)
        best_p, best_inter = None, 0
        for p in sorted(pred_sets):
            inter = len(gset & pred_sets[p])
            if inter > best_inter:
                best_p, best_inter = p, inter
        if best_p is not None:
            total += 2.0 * best_inter / (len(gset) + len(pred_sets[best_p]))
    return total / len(gt_ids)


def aji_oracle(pred, gt):
    gt_ids = _ids(gt)
    if not gt_ids:
        raise UndefinedMetricError("empty gt")
    pred_sets = {p: _pixels(pred, p) for p in _ids(pred)}
    used = set()
    c = 0
    u = 0
    for g in gt_ids:
        gset = _pixels(gt, g)
        best = None
        best_j = Fraction(0)
        for p in sorted(pred_sets):
            if p in used:
                continue
            inter = len(gset & pred_sets[p])
            if inter == 0:
                continue
            j = Fraction(inter, len(gset | pred_sets[p]))
            if best is None or j > best_j:
                best, best_j = p, j
        if best is None:
            u += len(gset)
        else:
            used.add(best)
            c += len(gset & pred_sets[best])
            u += len(gset | pred_sets[best])
    for p, pset in pred_sets.items():
        if p not in used:
            u += len(pset)
    return c / u if u else 0.0


def majority_class_oracle(instances, semantic):
    out = {}
    for i in _ids(instances):
        votes = {}
        for (r, c) in _pixels(instances, i):
            cls = int(semantic[r, c])
            if cls > 0:
                votes[cls] = votes.get(cls, 0) + 1
        out[i] = min(
            (cls for cls in votes if votes[cls] == max(votes.values())),
        )
    return out


def detection_oracle(pred_inst, pred_sem, gt_inst, gt_sem, num_classes):
    gt_sets = {g: _pixels(gt_inst, g) for g in _ids(gt_inst)}
    pred_sets = {p: _pixels(pred_inst, p) for p in _ids(pred_inst)}
    candidates = []
    for g, gset in gt_sets.items():
        for p, pset in pred_sets.items():
            inter = len(gset & pset)
            if inter == 0:
                continue
            j = Fraction(inter, len(gset | pset))
            if j > Fraction(1, 2):
                candidates.append((j, g, p))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    gu, pu, matches = set(), set(), []
    for _, g, p in candidates:
        if g in gu or p in pu:
            continue
        gu.add(g)
        pu.add(p)
        matches.append((g, p))
    gt_cls = majority_class_oracle(gt_inst, gt_sem)
    pred_cls = majority_class_oracle(pred_inst, pred_sem)
    tp = len(matches)
    fp = len(pred_sets) - tp
    fn = len(gt_sets) - tp
    f_d = 1.0 if (2 * tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
    correct = sum(1 for g, p in matches if gt_cls[g] == pred_cls[p])
    if tp == 0:
        acc = 1.0 if (fp + fn) == 0 else 0.0
    else:
        acc = correct / tp
    per = []
    for cls in range(1, num_classes + 1):
        tpc = sum(1 for g, p in matches if gt_cls[g] == cls and pred_cls[p] == cls)
        fpc = sum(1 for p in pred_sets if pred_cls[p] == cls) - tpc
        fnc = sum(1 for g in gt_sets if gt_cls[g] == cls) - tpc
        d = 2 * tpc + fpc + fnc
        per.append(1.0 if d == 0 else 2.0 * tpc / d)
    return f_d, acc, np.array(per)


def random_instance_scene(rng, shape=(16, 16), n_range=(0, 6), num_classes=3,
                          sparse_ids=False):
    inst = np.zeros(shape, dtype=np.int32)
    sem = np.zeros(shape, dtype=np.int32)
    n = int(rng.integers(*n_range)) if n_range[0] < n_range[1] else n_range[0]
    for i in range(1, n + 1):
        r, c = rng.integers(0, shape[0] - 2), rng.integers(0, shape[1] - 2)
        hh, ww = rng.integers(2, 6, size=2)
        inst_id = i * 3 + 1 if sparse_ids else i
        inst[r:r + hh, c:c + ww] = inst_id
        sem[r:r + hh, c:c + ww] = int(rng.integers(1, num_classes + 1))
    return inst, sem


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------

def test_dice_trivials():
    a = np.zeros((6, 6), dtype=np.int32)
    a[1:4, 1:4] = 2
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[4:6, 4:6] = 1
    assert dice(a, b) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0


def test_dice_counting_case():
    pred = np.zeros((4, 4), dtype=np.int32)
    gt = np.zeros((4, 4), dtype=np.int32)
    pred[0, 0:3] = 1            # 3 pixels
    gt[0, 1:4] = 1
    gt[1, 0:2] = 1              # 5 pixels, overlap 2
    assert dice(pred, gt) == pytest.approx(2 * 2 / (3 + 5))


# ---------------------------------------------------------------------------
# mdice / aji
# ---------------------------------------------------------------------------

def test_mdice_exact_match_is_one():
    inst, _ = random_instance_scene(np.random.default_rng(0), n_range=(3, 4))
    assert mdice(inst, inst) == 1.0
    assert aji(inst, inst) == 1.0


def test_mdice_merged_equal_disks_two_thirds():
    gt = np.zeros((10, 22), dtype=np.int32)
    gt[3:7, 2:10] = 1    # 32 pixels
    gt[3:7, 10:18] = 2   # 32 pixels, touching
    pred = (gt > 0).astype(np.int32)  # one merged instance of 64 pixels
    assert mdice(pred, gt) == pytest.approx(2 / 3)


def test_aji_empty_prediction_zero():
    gt = np.zeros((8, 8), dtype=np.int32)
    gt[2:5, 2:5] = 1
    assert aji(np.zeros_like(gt), gt) == 0.0


def test_empty_ground_truth_flagged():
    pred = np.zeros((5, 5), dtype=np.int32)
    pred[0, 0] = 1
    with pytest.raises(UndefinedMetricError):
        mdice(pred, np.zeros_like(pred))
    with pytest.raises(UndefinedMetricError):
        aji(pred, np.zeros_like(pred))


def test_instance_metrics_match_oracles_on_random_scenes():
    rng = np.random.default_rng(42)
    for trial in range(200):
        gt, gt_sem = random_instance_scene(rng, sparse_ids=trial % 2 == 0)
        pred, pred_sem = random_instance_scene(rng, sparse_ids=trial % 3 == 0)
        if not (gt > 0).any():
            continue
        assert mdice(pred, gt) == mdice_oracle(pred, gt), trial
        assert aji(pred, gt) == aji_oracle(pred, gt), trial
        k = 3
        got = detection_scores(pred, pred_sem, gt, gt_sem, num_classes=k)
        exp_fd, exp_acc, exp_per = detection_oracle(pred, pred_sem, gt, gt_sem, k)
        assert got.f_d == exp_fd, trial
        assert got.acc == exp_acc, trial
        assert np.array_equal(got.per_class_f, exp_per), trial


def test_instance_metrics_invariant_under_id_permutation():
    rng = np.random.default_rng(3)
    gt, _ = random_instance_scene(rng, n_range=(3, 5))
    pred, _ = random_instance_scene(rng, n_range=(3, 5))
    perm = {0: 0, 1: 7, 2: 4, 3: 9, 4: 1, 5: 2}
    gt2 = np.vectorize(perm.get)(gt).astype(np.int32)
    pred2 = np.vectorize(perm.get)(pred).astype(np.int32)
    assert mdice(pred2, gt2) == pytest.approx(mdice(pred, gt))
    assert aji(pred2, gt2) == pytest.approx(aji(pred, gt))


# ---------------------------------------------------------------------------
# detection scores
# ---------------------------------------------------------------------------

def _two_instance_scene(cls_a, cls_b):
    inst = np.zeros((8, 12), dtype=np.int32)
    sem = np.zeros((8, 12), dtype=np.int32)
    inst[2:6, 1:5] = 1
    sem[2:6, 1:5] = cls_a
    inst[2:6, 7:11] = 2
    sem[2:6, 7:11] = cls_b
    return inst, sem


def test_detection_perfect_prediction():
    inst, sem = _two_instance_scene(1, 2)
    scores = detection_scores(inst, sem, inst, sem, num_classes=2)
    assert scores.f_d == 1.0 and scores.acc == 1.0
    assert np.all(scores.per_class_f == 1.0)


def test_detection_class_swap_decouples_detection_and_classification():
    gt_inst, gt_sem = _two_instance_scene(1, 2)
    _, swap_sem = _two_instance_scene(2, 1)
    scores = detection_scores(gt_inst, swap_sem, gt_inst, gt_sem, num_classes=2)
    assert scores.f_d == 1.0
    assert scores.acc == 0.0
    assert np.all(scores.per_class_f == 0.0)


def test_detection_fd_invariant_to_class_relabeling():
    gt_inst, gt_sem = _two_instance_scene(1, 2)
    _, swap = _two_instance_scene(2, 1)
    a = detection_scores(gt_inst, gt_sem, gt_inst, gt_sem, num_classes=2)
    b = detection_scores(gt_inst, swap, gt_inst, gt_sem, num_classes=2)
    assert a.f_d == b.f_d
    assert a.acc != b.acc


def test_detection_requires_majority_overlap():
    gt = np.zeros((6, 6), dtype=np.int32)
    gt[0:4, 0:4] = 1             # 16 pixels
    pred = np.zeros_like(gt)
    pred[0:2, 0:4] = 1           # 8 pixels, jaccard 8/16 = 0.5 (not > 0.5)
    sem = (gt > 0).astype(np.int32)
    psem = (pred > 0).astype(np.int32)
    scores = detection_scores(pred, psem, gt, sem, num_classes=1)
    assert scores.f_d == 0.0


# ---------------------------------------------------------------------------
# Frechet kernel, FSD, FID, IS
# ---------------------------------------------------------------------------

def test_frechet_identical_moments_zero():
    mu = np.array([0.3, -0.2])
    cov = np.array([[0.5, 0.1], [0.1, 0.4]])
    assert frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-9)


def test_frechet_degenerate_gaussians():
    v = np.array([1.0, -2.0, 0.5])
    z = np.zeros((3, 3))
    assert frechet_distance(np.zeros(3), z, v, z) == pytest.approx(v @ v)


def test_frechet_scalar_closed_form():
    assert frechet_distance([0.0], [[1.0]], [1.0], [[4.0]]) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_frechet_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4))
    cov_a = a @ a.T
    cov_b = b @ b.T
    mu_a = rng.standard_normal(4)
    mu_b = rng.standard_normal(4)
    d_ab = frechet_distance(mu_a, cov_a, mu_b, cov_b)
    d_ba = frechet_distance(mu_b, cov_b, mu_a, cov_a)
    assert d_ab == pytest.approx(d_ba, rel=1e-7, abs=1e-8)
    assert d_ab >= -1e-9


def test_frechet_rejects_non_psd():
    bad = np.array([[1.0, 0.0], [0.0, -0.5]])
    good = np.eye(2)
    with pytest.raises(NumericalError):
        frechet_distance(np.zeros(2), bad, np.zeros(2), good)


def _random_labels(rng, n, k=4, shape=(8, 8)):
    return rng.integers(0, k, size=(n,) + shape).astype(np.int32)


def test_fsd_identical_sets_zero():
    labels = _random_labels(np.random.default_rng(0), 24)
    assert fsd(labels, labels, 4) == pytest.approx(0.0, abs=1e-9)


def test_fsd_permutation_invariant():
    rng = np.random.default_rng(1)
    labels = _random_labels(rng, 30)
    shuffled = labels[rng.permutation(30)]
    assert fsd(labels, shuffled, 4) == pytest.approx(0.0, abs=1e-9)


def test_fsd_matches_hand_computed_moments():
    rng = np.random.default_rng(2)
    a = _random_labels(rng, 40)
    b = _random_labels(rng, 40)
    got = fsd(a, b, 4)
    # independent moment computation
    def fracs(labels):
        return np.stack([
            np.bincount(l.ravel(), minlength=4) / l.size for l in labels
        ])
    fa, fb = fracs(a), fracs(b)
    exp = frechet_distance(fa.mean(0), np.cov(fa, rowvar=False, ddof=1),
                           fb.mean(0), np.cov(fb, rowvar=False, ddof=1))
    assert got == pytest.approx(exp, rel=1e-12)


def test_fsd_detects_shifted_class_fraction():
    rng = np.random.default_rng(3)
    base = _random_labels(rng, 50, k=3)
    shifted = base.copy()
    # push ~20% of pixels into class 2
    mask = rng.random(shifted.shape) < 0.2
    shifted[mask] = 2
    assert fsd(base, shifted, 3) > 10 * fsd(base, base[rng.permutation(50)], 3) + 1e-6


def test_fsd_singleton_set_rejected():
    labels = _random_labels(np.random.default_rng(0), 1)
    with pytest.raises(UndefinedMetricError):
        fsd(labels, labels, 4)


def test_fid_same_set_zero():
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, size=(20, 8, 8, 3))
    extractor = lambda imgs: imgs.reshape(imgs.shape[0], -1)[:, :10]
    assert fid(extractor, images, images) == pytest.approx(0.0, abs=1e-9)


def test_inception_score_constant_classifier_is_one():
    probs = np.tile(np.array([0.2, 0.5, 0.3]), (15, 1))
    classifier = lambda imgs: probs
    assert inception_score(classifier, np.zeros((15, 4, 4, 3))) == pytest.approx(1.0)


def test_inception_score_confident_diverse_classifier():
    # one-hot over 3 classes, uniformly spread -> IS = 3
    probs = np.eye(3)[np.arange(30) % 3]
    classifier = lambda imgs: probs
    assert inception_score(classifier, np.zeros((30, 2, 2, 3))) == pytest.approx(3.0)


# ---------------------------------------------------------------------------
# marker agreement
# ---------------------------------------------------------------------------

def test_marker_agreement_perfect_and_chance():
    sem = np.zeros((9, 9), dtype=np.int32)
    sem[2:5, 2:5] = 2
    grid = np.zeros_like(sem)
    grid[3, 3] = 2
    assert marker_agreement_rate(sem, grid) == 1.0
    grid2 = np.zeros_like(sem)
    grid2[3, 3] = 1  # wrong class at the marker
    assert marker_agreement_rate(sem, grid2) == 0.0
    with pytest.raises(UndefinedMetricError):
        marker_agreement_rate(sem, np.zeros_like(sem))
