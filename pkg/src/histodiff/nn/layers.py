"""Minimal layer zoo with explicit forward/backward passes on numpy arrays.

Spatial layers operate on channel-first batches (B, C, H, W). Every layer owns
its parameter and gradient buffers; ``forward`` caches exactly what
``backward`` needs, so each forward must be followed by at most one backward.
Gradients accumulate until ``zero_grad``.

Activations are smooth (SiLU) throughout so that central finite differences
agree with the analytic gradients to high precision.
"""

from __future__ import annotations

import numpy as np


class Layer:
    """Base: a (possibly nested) container of parameters and gradients."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._children: dict[str, "Layer"] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def child(self, name: str, layer: "Layer") -> "Layer":
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix: str = ""):
        for name, p in self.params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}.{cname}" if prefix else cname)

    def named_gradients(self, prefix: str = ""):
        for name, g in self.grads.items():
            yield (f"{prefix}.{name}" if prefix else name), g
        for cname, c in self._children.items():
            yield from c.named_gradients(f"{prefix}.{cname}" if prefix else cname)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0
        for c in self._children.values():
            c.zero_grad()


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo), (ho, wo)


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int, pad: int):
    b, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    g6 = gcols.reshape(b, c, k, k, ho, wo)
    gxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[:, :, i, j]
    return gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp


class Conv2d(Layer):
    def __init__(self, cin, cout, ksize, rng, *, stride=1, dtype=np.float32,
                 zero_init=False):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, ksize, stride
        self.pad = ksize // 2
        fan_in = cin * ksize * ksize
        if zero_init:
            w = np.zeros((cout, cin, ksize, ksize), dtype=dtype)
        else:
            w = (rng.standard_normal((cout, cin, ksize, ksize))
                 * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.add_param("weight", w)
        self.add_param("bias", np.zeros(cout, dtype=dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, _, h, w = x.shape
        w2 = self.params["weight"].reshape(self.cout, -1)
        if self.k == 1 and self.stride == 1:
            cols = x.reshape(b, self.cin, h * w)  # view; no patch extraction needed
            ho, wo = h, w
        else:
            cols, (ho, wo) = _im2col(x, self.k, self.stride, self.pad)
        self._cache = (x.shape, cols)
        y = np.matmul(w2, cols)  # (B, cout, ho*wo)
        y = y.reshape(b, self.cout, ho, wo)
        return y + self.params["bias"][:, None, None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        x_shape, cols = self._cache
        self._cache = None
        b = g.shape[0]
        gf = g.reshape(b, self.cout, -1)
        self.grads["weight"] += np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0) \
            .reshape(self.params["weight"].shape)
        self.grads["bias"] += g.sum(axis=(0, 2, 3))
        w2 = self.params["weight"].reshape(self.cout, -1)
        gcols = np.matmul(w2.T, gf)
        if self.k == 1 and self.stride == 1:
            return gcols.reshape(x_shape)
        return _col2im(gcols, x_shape, self.k, self.stride, self.pad)


class Linear(Layer):
    def __init__(self, din, dout, rng, *, dtype=np.float32, zero_init=False):
        super().__init__()
        if zero_init:
            w = np.zeros((dout, din), dtype=dtype)
        else:
            w = (rng.standard_normal((dout, din)) * np.sqrt(2.0 / din)).astype(dtype)
        self.add_param("weight", w)
        self.add_param("bias", np.zeros(dout, dtype=dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, g: np.ndarray) -> np.ndarray:
        self.grads["weight"] += g.T @ self._x
        self.grads["bias"] += g.sum(axis=0)
        self._x = None
        return g @ self.params["weight"]


class GroupNorm(Layer):
    def __init__(self, channels, groups, *, eps=1e-5, dtype=np.float32):
        super().__init__()
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.channels, self.groups, self.eps = channels, groups, eps
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        xg = x.reshape(b, self.groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        var = xg.var(axis=-1, keepdims=True)
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * ivar).reshape(b, c, h, w)
        self._cache = (xhat, ivar)
        return self.params["gamma"][:, None, None] * xhat + self.params["beta"][:, None, None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        xhat, ivar = self._cache
        self._cache = None
        b, c, h, w = g.shape
        self.grads["gamma"] += (g * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] += g.sum(axis=(0, 2, 3))
        gx_hat = (g * self.params["gamma"][:, None, None]).reshape(b, self.groups, -1)
        xh = xhat.reshape(b, self.groups, -1)
        m = gx_hat.shape[-1]
        s1 = gx_hat.sum(axis=-1, keepdims=True)
        s2 = (gx_hat * xh).sum(axis=-1, keepdims=True)
        gx = ivar / m * (m * gx_hat - s1 - xh * s2)
        return gx.reshape(b, c, h, w)


class SiLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._sig = 1.0 / (1.0 + np.exp(-x))
        return x * self._sig

    def backward(self, g: np.ndarray) -> np.ndarray:
        s, x = self._sig, self._x
        self._x = self._sig = None
        return g * (s * (1.0 + x * (1.0 - s)))


class Upsample2x(Layer):
    """Nearest-neighbor doubling of the spatial resolution."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, g: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        return g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


class AvgPool2x(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        self._shape = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, g: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        return (g[:, :, :, None, :, None] / 4.0 * np.ones((1, 1, 1, 2, 1, 2), g.dtype)) \
            .reshape(b, c, h, w)


def sinusoidal_time_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic transformer-style embedding of integer steps, shape (B, dim)."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(dtype)
