"""The joint denoising network: one encoder-decoder backbone, three heads.

Inputs are the noisy tripartite unit (image, distance, one-hot label) plus the
conditions: a nucleus-centroid point map encoded by a stack of
residual-in-residual dense blocks and concatenated to the backbone input, and
a text embedding added to the time embedding. Dropping the text swaps in a
learned null embedding, which is what classifier-free guidance contrasts
against at sampling time.

Heads: predicted image noise (3 ch), predicted distance noise (1 ch), and
label x0-logits (K ch), all at input resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NumericalError
from .layers import (
    Conv2d,
    GroupNorm,
    Layer,
    Linear,
    SiLU,
    Upsample2x,
    sinusoidal_time_embedding,
)


@dataclass(frozen=True)
class DenoiserConfig:
    num_classes: int                     # label classes K, background included
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    groups: int = 8
    temb_dim: int = 128
    time_freq_dim: int = 64
    text_dim: int = 512
    point_width: int = 16
    point_growth: int = 16
    point_blocks: int = 1     # residual-in-residual groups of 2 dense blocks each
    point_dense_layers: int = 2
    zero_init_heads: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.channel_mults) < 2:
            raise ValueError("need at least 2 resolution levels")
        for m in self.channel_mults:
            if self.base_width * m % self.groups:
                raise ValueError("every level width must be divisible by groups")
        if self.temb_dim % 2 or self.time_freq_dim % 2:
            raise ValueError("embedding dims must be even")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


class ResBlock(Layer):
    """GroupNorm/SiLU/conv pair with a per-block time-embedding bias and skip."""

    def __init__(self, cin, cout, temb_dim, groups, rng, dtype):
        super().__init__()
        self.gn1 = self.child("gn1", GroupNorm(cin, groups, dtype=dtype))
        self.act1 = self.child("act1", SiLU())
        self.conv1 = self.child("conv1", Conv2d(cin, cout, 3, rng, dtype=dtype))
        self.act_t = self.child("act_t", SiLU())
        self.lin_t = self.child("lin_t", Linear(temb_dim, cout, rng, dtype=dtype))
        self.gn2 = self.child("gn2", GroupNorm(cout, groups, dtype=dtype))
        self.act2 = self.child("act2", SiLU())
        self.conv2 = self.child("conv2", Conv2d(cout, cout, 3, rng, dtype=dtype))
        self.skip = None
        if cin != cout:
            self.skip = self.child("skip", Conv2d(cin, cout, 1, rng, dtype=dtype))

    def forward(self, x, temb):
        h = self.conv1.forward(self.act1.forward(self.gn1.forward(x)))
        tp = self.lin_t.forward(self.act_t.forward(temb))
        h = h + tp[:, :, None, None]
        h = self.conv2.forward(self.act2.forward(self.gn2.forward(h)))
        s = self.skip.forward(x) if self.skip is not None else x
        return h + s

    def backward(self, g):
        gh = self.gn2.backward(self.act2.backward(self.conv2.backward(g)))
        gtemb = self.act_t.backward(self.lin_t.backward(gh.sum(axis=(2, 3))))
        gx = self.gn1.backward(self.act1.backward(self.conv1.backward(gh)))
        gx = gx + (self.skip.backward(g) if self.skip is not None else g)
        return gx, gtemb


class DenseBlock(Layer):
    """Residual dense block: growing concatenation, 1x1 fusion, scaled residual."""

    RES_SCALE = 0.2

    def __init__(self, channels, growth, n_layers, rng, dtype):
        super().__init__()
        self.growth = growth
        self.convs = []
        self.acts = []
        for i in range(n_layers):
            conv = Conv2d(channels + i * growth, growth, 3, rng, dtype=dtype)
            self.convs.append(self.child(f"conv{i}", conv))
            self.acts.append(self.child(f"act{i}", SiLU()))
        self.fuse = self.child(
            "fuse", Conv2d(channels + n_layers * growth, channels, 1, rng, dtype=dtype)
        )

    def forward(self, x):
        cur = x
        for conv, act in zip(self.convs, self.acts):
            y = act.forward(conv.forward(cur))
            cur = np.concatenate([cur, y], axis=1)
        return x + self.RES_SCALE * self.fuse.forward(cur)

    def backward(self, g):
        gcur = self.fuse.backward(self.RES_SCALE * g)
        for conv, act in zip(reversed(self.convs), reversed(self.acts)):
            gy = gcur[:, -self.growth:]
            gcur = np.ascontiguousarray(gcur[:, :-self.growth])
            gcur += conv.backward(act.backward(gy))
        return g + gcur


class RRDB(Layer):
    """Residual-in-residual wrapper around a chain of dense blocks."""

    RES_SCALE = 0.2

    def __init__(self, channels, growth, n_dense_layers, n_blocks, rng, dtype):
        super().__init__()
        self.blocks = [
            self.child(f"rdb{i}", DenseBlock(channels, growth, n_dense_layers, rng, dtype))
            for i in range(n_blocks)
        ]

    def forward(self, x):
        h = x
        for blk in self.blocks:
            h = blk.forward(h)
        return x + self.RES_SCALE * h

    def backward(self, g):
        gh = self.RES_SCALE * g
        for blk in reversed(self.blocks):
            gh = blk.backward(gh)
        return g + gh


class PointEncoder(Layer):
    """Dense-residual encoder of the one-hot point map, resolution preserving.

    Channel 0 of the one-hot input means "no marker"; channels 1..K-1 carry the
    marker class.
    """

    def __init__(self, num_classes, width, growth, n_dense_layers, n_blocks, rng,
                 dtype=np.float32):
        super().__init__()
        self.num_classes = num_classes
        self.dtype = dtype
        self.stem = self.child("stem", Conv2d(num_classes, width, 3, rng, dtype=dtype))
        self.rrdbs = [
            self.child(
                f"rrdb{i}",
                RRDB(width, growth, n_dense_layers, n_blocks=2, rng=rng, dtype=dtype),
            )
            for i in range(n_blocks)
        ]
        self.out = self.child("out", Conv2d(width, width, 3, rng, dtype=dtype))

    def forward(self, point_grid: np.ndarray) -> np.ndarray:
        grid = np.asarray(point_grid)
        if grid.min() < 0 or grid.max() >= self.num_classes:
            raise ValueError(
                f"point classes must lie in [0, {self.num_classes - 1}], "
                f"got [{grid.min()}, {grid.max()}]"
            )
        onehot = np.zeros(grid.shape + (self.num_classes,), dtype=self.dtype)
        np.put_along_axis(onehot, grid[..., None].astype(np.int64), 1.0, axis=-1)
        h = self.stem.forward(np.moveaxis(onehot, -1, 1))
        for blk in self.rrdbs:
            h = blk.forward(h)
        return self.out.forward(h)

    def backward(self, g):
        gh = self.out.backward(g)
        for blk in reversed(self.rrdbs):
            gh = blk.backward(gh)
        self.stem.backward(gh)  # one-hot input needs no gradient
        return None


class JointDenoiser(Layer):
    """epsilon_theta(u_t, t, pc, tc) with three output heads."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        dt = config.np_dtype
        k = config.num_classes
        widths = [config.base_width * m for m in config.channel_mults]
        self.widths = widths
        self.levels = len(widths)

        self.point_encoder = self.child(
            "point_encoder",
            PointEncoder(k, config.point_width, config.point_growth,
                         config.point_dense_layers, config.point_blocks, rng, dtype=dt),
        )
        cin = 3 + 1 + k + config.point_width
        self.stem = self.child("stem", Conv2d(cin, widths[0], 3, rng, dtype=dt))

        self.lin_t1 = self.child("lin_t1", Linear(config.time_freq_dim, config.temb_dim, rng, dtype=dt))
        self.act_t = self.child("act_t", SiLU())
        self.lin_t2 = self.child("lin_t2", Linear(config.temb_dim, config.temb_dim, rng, dtype=dt))
        self.text_proj = self.child("text_proj", Linear(config.text_dim, config.temb_dim, rng, dtype=dt))
        self.add_param(
            "null_text", (rng.standard_normal(config.text_dim) * 0.01).astype(dt)
        )

        g = config.groups
        td = config.temb_dim
        self.down_blocks = [
            self.child(f"down_res{i}", ResBlock(widths[i], widths[i], td, g, rng, dt))
            for i in range(self.levels - 1)
        ]
        self.down_convs = [
            self.child(f"down_conv{i}",
                       Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, dtype=dt))
            for i in range(self.levels - 1)
        ]
        self.mid_block = self.child(
            "mid_res", ResBlock(widths[-1], widths[-1], td, g, rng, dt)
        )
        self.up_samplers = []
        self.up_convs = []
        self.up_blocks = []
        for i in reversed(range(self.levels - 1)):
            self.up_samplers.append(self.child(f"up_nn{i}", Upsample2x()))
            self.up_convs.append(
                self.child(f"up_conv{i}", Conv2d(widths[i + 1], widths[i], 3, rng, dtype=dt))
            )
            self.up_blocks.append(
                self.child(f"up_res{i}", ResBlock(2 * widths[i], widths[i], td, g, rng, dt))
            )

        self.gn_out = self.child("gn_out", GroupNorm(widths[0], g, dtype=dt))
        self.act_out = self.child("act_out", SiLU())
        zi = config.zero_init_heads
        self.head_image = self.child("head_image", Conv2d(widths[0], 3, 3, rng, dtype=dt, zero_init=zi))
        self.head_distance = self.child("head_distance", Conv2d(widths[0], 1, 3, rng, dtype=dt, zero_init=zi))
        self.head_label = self.child("head_label", Conv2d(widths[0], k, 3, rng, dtype=dt, zero_init=zi))

    # ------------------------------------------------------------------
    def forward(self, image_t, distance_t, label_t, point_grid, t, text_emb,
                text_present, point_features=None):
        """Batched forward pass.

        image_t (B,3,H,W), distance_t (B,1,H,W), label_t (B,K,H,W),
        point_grid (B,H,W) int, t (B,) int, text_emb (B,text_dim),
        text_present (B,) bool. H and W must be divisible by
        2**(levels-1). Returns (eps_i, eps_d, label_logits) channel-first.

        ``point_features`` may carry a precomputed encoder output for the same
        point grids (samplers reuse it across steps); backward is only valid
        when the encoder ran inside this forward.
        """
        cfg = self.config
        dt = cfg.np_dtype
        b, _, h, w = image_t.shape
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise ValueError(f"spatial dims {(h, w)} not divisible by {div}")
        if label_t.shape != (b, cfg.num_classes, h, w):
            raise ValueError(f"label_t shape {label_t.shape} != "
                             f"{(b, cfg.num_classes, h, w)}")
        if text_emb.shape != (b, cfg.text_dim):
            raise ValueError(f"text embedding shape {text_emb.shape} != {(b, cfg.text_dim)}")

        if point_features is None:
            pf = self.point_encoder.forward(point_grid)
            self._pf_external = False
        else:
            pf = point_features
            self._pf_external = True
        x = np.concatenate(
            [image_t.astype(dt, copy=False), distance_t.astype(dt, copy=False),
             label_t.astype(dt, copy=False), pf], axis=1
        )

        temb_sin = sinusoidal_time_embedding(t, cfg.time_freq_dim, dtype=dt)
        temb = self.lin_t2.forward(self.act_t.forward(self.lin_t1.forward(temb_sin)))
        present = np.asarray(text_present, dtype=bool)
        e = np.where(present[:, None], text_emb.astype(dt, copy=False),
                     self.params["null_text"][None, :])
        temb = temb + self.text_proj.forward(e)
        self._present = present

        h0 = self.stem.forward(x)
        skips = []
        cur = h0
        for res, down in zip(self.down_blocks, self.down_convs):
            cur = res.forward(cur, temb)
            skips.append(cur)
            cur = down.forward(cur)
        cur = self.mid_block.forward(cur, temb)
        for nn_up, conv_up, res_up, skip in zip(
            self.up_samplers, self.up_convs, self.up_blocks, reversed(skips)
        ):
            cur = conv_up.forward(nn_up.forward(cur))
            cur = res_up.forward(np.concatenate([cur, skip], axis=1), temb)

        ho = self.act_out.forward(self.gn_out.forward(cur))
        return (
            self.head_image.forward(ho),
            self.head_distance.forward(ho),
            self.head_label.forward(ho),
        )

    # ------------------------------------------------------------------
    def backward(self, g_eps_i, g_eps_d, g_logits):
        """Accumulate parameter gradients; returns grads w.r.t. the three
        noisy-state inputs (image_t, distance_t, label_t)."""
        gho = (
            self.head_image.backward(g_eps_i)
            + self.head_distance.backward(g_eps_d)
            + self.head_label.backward(g_logits)
        )
        gcur = self.gn_out.backward(self.act_out.backward(gho))

        gtemb = np.zeros((gcur.shape[0], self.config.temb_dim),
                         dtype=self.config.np_dtype)
        gskips = []
        for nn_up, conv_up, res_up in zip(
            reversed(self.up_samplers), reversed(self.up_convs), reversed(self.up_blocks)
        ):
            gcat, gt = res_up.backward(gcur)
            gtemb += gt
            width = gcat.shape[1] // 2
            gskips.append(np.ascontiguousarray(gcat[:, width:]))
            gcur = nn_up.backward(conv_up.backward(np.ascontiguousarray(gcat[:, :width])))
        gcur, gt = self.mid_block.backward(gcur)
        gtemb += gt
        # gskips were collected shallowest-first; the down path unwinds deepest-first
        for res, down, gskip in zip(
            reversed(self.down_blocks), reversed(self.down_convs), reversed(gskips)
        ):
            gcur = down.backward(gcur) + gskip
            gcur, gt = res.backward(gcur)
            gtemb += gt
        gx = self.stem.backward(gcur)

        ge = self.text_proj.backward(gtemb)
        absent = ~self._present
        if absent.any():
            self.grads["null_text"] += ge[absent].sum(axis=0)
        self.lin_t1.backward(self.act_t.backward(self.lin_t2.backward(gtemb)))

        k = self.config.num_classes
        if self._pf_external:
            raise RuntimeError("backward after a forward with external point features")
        gpf = gx[:, 4 + k:]
        self.point_encoder.backward(np.ascontiguousarray(gpf))
        return (
            np.ascontiguousarray(gx[:, :3]),
            np.ascontiguousarray(gx[:, 3:4]),
            np.ascontiguousarray(gx[:, 4:4 + k]),
        )


# ---------------------------------------------------------------------------
# Single-sample functional surface
# ---------------------------------------------------------------------------

def denoise(model: JointDenoiser, state, pc, tc, text_present: bool):
    """Run one denoising prediction on a single (channel-last) noisy state.

    Returns (eps_i_hat, eps_d_hat, label_logits) with shapes (H, W, 3),
    (H, W, 1), (H, W, K).
    """
    grid = np.asarray(pc.grid)
    if state.image_t.shape[:2] != grid.shape:
        raise ValueError(
            f"state spatial shape {state.image_t.shape[:2]} != point map {grid.shape}"
        )
    emb = np.asarray(tc.embedding)
    if emb.shape != (model.config.text_dim,):
        raise ValueError(
            f"text embedding dimension {emb.shape} != ({model.config.text_dim},)"
        )
    img = np.moveaxis(state.image_t, -1, 0)[None]
    dist = state.distance_t[None, None]
    lab = np.moveaxis(state.label_t, -1, 0)[None]
    eps_i, eps_d, logits = model.forward(
        img, dist, lab, grid[None], np.array([state.step]), emb[None],
        np.array([bool(text_present)]),
    )
    for name, arr in (("eps_i", eps_i), ("eps_d", eps_d), ("label_logits", logits)):
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite activations in {name}")
    return (
        np.moveaxis(eps_i[0], 0, -1),
        np.moveaxis(eps_d[0], 0, -1),
        np.moveaxis(logits[0], 0, -1),
    )


def encode_points(encoder: PointEncoder, pc) -> np.ndarray:
    """Feature map (H, W, width) for one point map."""
    grid = np.asarray(pc.grid)
    return np.moveaxis(encoder.forward(grid[None])[0], 0, -1)
