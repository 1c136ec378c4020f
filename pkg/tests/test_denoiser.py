import numpy as np
import pytest

from histodiff.conditioning import PointMap, TextCondition
from histodiff.diffusion import NoisyState, joint_loss, joint_loss_and_grads, _onehot
from histodiff.nn.denoiser import JointDenoiser, PointEncoder, denoise, encode_points
from histodiff.schedules import cosine_schedule

from conftest import tiny_config, tiny_model


def _state(rng, h=8, w=8, k=3, step=3):
    return NoisyState(
        step=step,
        image_t=rng.standard_normal((h, w, 3)).astype(np.float32),
        distance_t=rng.standard_normal((h, w)).astype(np.float32),
        label_t=_onehot(rng.integers(0, k, (h, w)), k),
    )


def _condition(rng, h=8, w=8, dim=16, markers=((4, 4, 1),)):
    grid = np.zeros((h, w), dtype=np.int32)
    for r, c, cls in markers:
        grid[r, c] = cls
    emb = rng.standard_normal(dim).astype(np.float32)
    return PointMap(grid=grid), TextCondition(prompt="p", embedding=emb)


def test_output_shapes():
    model = tiny_model()
    rng = np.random.default_rng(0)
    state = _state(rng, 32, 32)
    pm, tc = _condition(rng, 32, 32)
    eps_i, eps_d, logits = denoise(model, state, pm, tc, text_present=True)
    assert eps_i.shape == (32, 32, 3)
    assert eps_d.shape == (32, 32, 1)
    assert logits.shape == (32, 32, 3)


def test_prompt_invariance_when_text_dropped():
    model = tiny_model(zero_init_heads=False)
    rng = np.random.default_rng(1)
    state = _state(rng)
    pm, tc_a = _condition(rng)
    _, tc_b = _condition(rng)
    assert not np.array_equal(tc_a.embedding, tc_b.embedding)
    out_a = denoise(model, state, pm, tc_a, text_present=False)
    out_b = denoise(model, state, pm, tc_b, text_present=False)
    for a, b in zip(out_a, out_b):
        assert np.array_equal(a, b)
    # with text present the prompts must matter
    on_a = denoise(model, state, pm, tc_a, text_present=True)
    on_b = denoise(model, state, pm, tc_b, text_present=True)
    assert not np.array_equal(on_a[0], on_b[0])


def test_forward_deterministic():
    model = tiny_model(zero_init_heads=False)
    rng = np.random.default_rng(2)
    state = _state(rng)
    pm, tc = _condition(rng)
    a = denoise(model, state, pm, tc, True)
    b = denoise(model, state, pm, tc, True)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_shape_mismatch_rejected():
    model = tiny_model()
    rng = np.random.default_rng(3)
    state = _state(rng, 8, 8)
    pm, tc = _condition(rng, 4, 4, markers=((2, 2, 1),))
    with pytest.raises(ValueError):
        denoise(model, state, pm, tc, True)
    pm8, _ = _condition(rng, 8, 8)
    bad_tc = TextCondition(prompt="p", embedding=np.zeros(9, dtype=np.float32))
    with pytest.raises(ValueError):
        denoise(model, state, pm8, bad_tc, True)


def test_finite_outputs_over_many_random_inputs():
    """1000 random in-range inputs, batched through the forward pass."""
    model = tiny_model(zero_init_heads=False)
    rng = np.random.default_rng(4)
    k = 3
    for _ in range(5):
        b, h, w = 200, 8, 8
        img = rng.uniform(-1, 1, (b, 3, h, w)).astype(np.float32)
        dist = rng.uniform(0, 1, (b, 1, h, w)).astype(np.float32)
        lab = np.moveaxis(_onehot(rng.integers(0, k, (b, h, w)), k), -1, 1)
        points = np.where(rng.random((b, h, w)) < 0.05,
                          rng.integers(1, k, (b, h, w)), 0).astype(np.int32)
        t = rng.integers(1, 1001, b)
        emb = rng.standard_normal((b, 16)).astype(np.float32)
        present = rng.random(b) < 0.5
        out = model.forward(img, dist, lab, points, t, emb, present)
        for arr in out:
            assert np.isfinite(arr).all()


# ---------------------------------------------------------------------------
# Gradient check: analytic backprop vs central finite differences
# ---------------------------------------------------------------------------

def build_gradcheck_problem(seed=0):
    """4x4, K=2, float64, every layer type active, nonzero heads."""
    cfg = tiny_config(
        num_classes=2,
        base_width=8,
        channel_mults=(1, 2),
        groups=4,
        temb_dim=16,
        time_freq_dim=8,
        text_dim=12,
        point_width=4,
        point_growth=4,
        point_blocks=1,
        point_dense_layers=2,
        zero_init_heads=False,
        dtype="float64",
    )
    model = JointDenoiser(cfg, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    h = w = 4
    k = 2
    sched = cosine_schedule(10)
    step = 4
    img_t = rng.standard_normal((1, 3, h, w))
    dist_t = rng.standard_normal((1, 1, h, w))
    label_t = _onehot(rng.integers(0, k, (1, h, w)), k, dtype=np.float64)
    points = np.zeros((1, h, w), dtype=np.int32)
    points[0, 1, 2] = 1
    t = np.array([step])
    emb = rng.standard_normal((1, 12))
    present = np.array([True])
    targets = (
        rng.standard_normal((1, 3, h, w)),
        rng.standard_normal((1, 1, h, w)),
        _onehot(rng.integers(0, k, (1, h, w)), k, dtype=np.float64),
    )
    weights = (9.0, 1.0, 3.0)

    def loss_of_model():
        eps_i, eps_d, logits = model.forward(
            img_t, dist_t, np.moveaxis(label_t, -1, 1), points, t, emb, present
        )
        total, _ = joint_loss(
            (eps_i[0], eps_d[0], np.moveaxis(logits[0], 0, -1)),
            (targets[0][0], targets[1][0], targets[2][0]),
            weights,
            label_t=label_t[0],
            step=step,
            label_schedule=sched,
        )
        return total

    def analytic_grads():
        eps_i, eps_d, logits = model.forward(
            img_t, dist_t, np.moveaxis(label_t, -1, 1), points, t, emb, present
        )
        _, _, (g_i, g_d, g_l) = joint_loss_and_grads(
            (eps_i[0], eps_d[0], np.moveaxis(logits[0], 0, -1)),
            (targets[0][0], targets[1][0], targets[2][0]),
            weights,
            label_t=label_t[0],
            step=step,
            label_schedule=sched,
        )
        model.zero_grad()
        model.backward(g_i[None], g_d[None], np.moveaxis(g_l, -1, 0)[None])
        return dict(model.named_gradients())

    return model, loss_of_model, analytic_grads


def max_relative_gradient_error(model, loss_of_model, analytic_grads,
                                coords_per_tensor=6, h=1e-5, seed=7):
    grads = {name: g.copy() for name, g in analytic_grads().items()}
    pick = np.random.default_rng(seed)
    worst = 0.0
    params = dict(model.named_parameters())
    for name, p in params.items():
        flat = p.reshape(-1)
        n = min(coords_per_tensor, flat.size)
        idxs = pick.choice(flat.size, size=n, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = loss_of_model()
            flat[idx] = orig - h
            f_minus = loss_of_model()
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2 * h)
            an = grads[name].reshape(-1)[idx]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


def test_gradients_match_finite_differences():
    model, loss_fn, grads_fn = build_gradcheck_problem()
    worst = max_relative_gradient_error(model, loss_fn, grads_fn)
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"


def build_three_level_gradcheck_problem(seed=1):
    """8x8 with three resolution levels, exercising multi-skip routing."""
    cfg = tiny_config(
        num_classes=2,
        base_width=4,
        channel_mults=(1, 2, 4),
        groups=2,
        temb_dim=8,
        time_freq_dim=8,
        text_dim=8,
        point_width=4,
        point_growth=4,
        point_blocks=1,
        point_dense_layers=2,
        zero_init_heads=False,
        dtype="float64",
    )
    model = JointDenoiser(cfg, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    h = w = 8
    k = 2
    sched = cosine_schedule(10)
    step = 6
    img_t = rng.standard_normal((1, 3, h, w))
    dist_t = rng.standard_normal((1, 1, h, w))
    label_t = _onehot(rng.integers(0, k, (1, h, w)), k, dtype=np.float64)
    points = np.zeros((1, h, w), dtype=np.int32)
    points[0, 5, 3] = 1
    t = np.array([step])
    emb = rng.standard_normal((1, 8))
    present = np.array([False])  # exercise the null-embedding path too
    targets = (
        rng.standard_normal((1, 3, h, w)),
        rng.standard_normal((1, 1, h, w)),
        _onehot(rng.integers(0, k, (1, h, w)), k, dtype=np.float64),
    )
    weights = (9.0, 1.0, 3.0)

    def run(want_grads):
        eps_i, eps_d, logits = model.forward(
            img_t, dist_t, np.moveaxis(label_t, -1, 1), points, t, emb, present
        )
        args = (
            (eps_i[0], eps_d[0], np.moveaxis(logits[0], 0, -1)),
            (targets[0][0], targets[1][0], targets[2][0]),
            weights,
        )
        kw = dict(label_t=label_t[0], step=step, label_schedule=sched)
        if not want_grads:
            return joint_loss(*args, **kw)[0]
        _, _, (g_i, g_d, g_l) = joint_loss_and_grads(*args, **kw)
        model.zero_grad()
        model.backward(g_i[None], g_d[None], np.moveaxis(g_l, -1, 0)[None])
        return dict(model.named_gradients())

    return model, (lambda: run(False)), (lambda: run(True))


def test_gradients_match_finite_differences_three_levels():
    model, loss_fn, grads_fn = build_three_level_gradcheck_problem()
    worst = max_relative_gradient_error(model, loss_fn, grads_fn,
                                        coords_per_tensor=3)
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"


# ---------------------------------------------------------------------------
# Point encoder
# ---------------------------------------------------------------------------

def test_encode_points_empty_map_deterministic():
    enc = PointEncoder(3, 4, 4, 2, 1, np.random.default_rng(0))
    pm = PointMap(grid=np.zeros((8, 8), dtype=np.int32))
    a = encode_points(enc, pm)
    b = encode_points(enc, pm)
    assert a.shape == (8, 8, 4)
    assert np.array_equal(a, b)


def test_encode_points_rejects_out_of_range():
    enc = PointEncoder(3, 4, 4, 2, 1, np.random.default_rng(0))
    bad = PointMap(grid=np.full((4, 4), 3, dtype=np.int32))
    with pytest.raises(ValueError):
        encode_points(enc, bad)


def test_encode_points_translation_equivariance():
    """Shifting a marker well inside a padded canvas shifts the response."""
    enc = PointEncoder(3, 4, 4, 2, 1, np.random.default_rng(5))
    size = 40
    grid_a = np.zeros((size, size), dtype=np.int32)
    grid_a[20, 20] = 2
    grid_b = np.zeros((size, size), dtype=np.int32)
    grid_b[23, 20] = 2
    fa = encode_points(enc, PointMap(grid=grid_a))
    fb = encode_points(enc, PointMap(grid=grid_b))
    # receptive radius is ~10 px; compare windows fully inside both canvases
    wa = fa[14:27, 14:27]
    wb = fb[17:30, 14:27]
    assert np.array_equal(wa, wb)
