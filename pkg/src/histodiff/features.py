"""Desk-scale feature/probability extractor backing FID and the inception score.

A small convolutional classifier is trained to predict the tissue identity of
toy patches; its softmax output is the probability extractor and its pooled
penultimate activations are the feature extractor. The canonical large
pretrained extractor is out of scope; relative comparisons between sets remain
meaningful with any fixed extractor.
"""

from __future__ import annotations

import numpy as np

from .nn.layers import AvgPool2x, Conv2d, GroupNorm, Layer, Linear, SiLU
from .nn.optim import Adam


class _ClassifierNet(Layer):
    FEATURE_DIM = 64

    def __init__(self, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = self.child("conv1", Conv2d(3, 16, 3, rng))
        self.gn1 = self.child("gn1", GroupNorm(16, 4))
        self.act1 = self.child("act1", SiLU())
        self.pool1 = self.child("pool1", AvgPool2x())
        self.conv2 = self.child("conv2", Conv2d(16, 32, 3, rng))
        self.gn2 = self.child("gn2", GroupNorm(32, 4))
        self.act2 = self.child("act2", SiLU())
        self.pool2 = self.child("pool2", AvgPool2x())
        self.conv3 = self.child("conv3", Conv2d(32, self.FEATURE_DIM, 3, rng))
        self.gn3 = self.child("gn3", GroupNorm(self.FEATURE_DIM, 4))
        self.act3 = self.child("act3", SiLU())
        self.fc = self.child("fc", Linear(self.FEATURE_DIM, n_classes, rng))

    def forward(self, x: np.ndarray):
        h = self.pool1.forward(self.act1.forward(self.gn1.forward(self.conv1.forward(x))))
        h = self.pool2.forward(self.act2.forward(self.gn2.forward(self.conv2.forward(h))))
        h = self.act3.forward(self.gn3.forward(self.conv3.forward(h)))
        self._hw = h.shape[2] * h.shape[3]
        feats = h.mean(axis=(2, 3))
        return feats, self.fc.forward(feats)

    def backward(self, g_logits: np.ndarray, spatial_shape):
        gf = self.fc.backward(g_logits)
        g = np.broadcast_to(
            gf[:, :, None, None] / self._hw,
            (gf.shape[0], gf.shape[1]) + spatial_shape,
        ).astype(gf.dtype)
        g = self.conv3.backward(self.gn3.backward(self.act3.backward(g)))
        g = self.pool2.backward(g)
        g = self.conv2.backward(self.gn2.backward(self.act2.backward(g)))
        g = self.pool1.backward(g)
        self.conv1.backward(self.gn1.backward(self.act1.backward(g)))


class ToyImageClassifier:
    """Trained classifier exposing ``features`` (FID) and ``probs`` (IS).

    Images are channel-last (N, H, W, 3) float arrays in [-1, 1].
    """

    def __init__(self, net: _ClassifierNet, n_classes: int):
        self._net = net
        self.n_classes = n_classes

    def _prep(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
        return np.moveaxis(images, -1, 1)

    def features(self, images: np.ndarray) -> np.ndarray:
        feats, _ = self._net.forward(self._prep(images))
        return feats

    def probs(self, images: np.ndarray) -> np.ndarray:
        _, logits = self._net.forward(self._prep(images))
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def train_toy_classifier(
    images: np.ndarray,
    class_ids: np.ndarray,
    n_classes: int,
    rng: np.random.Generator,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> ToyImageClassifier:
    """Fit the extractor on (channel-last) images with integer targets."""
    x = np.moveaxis(np.asarray(images, dtype=np.float32), -1, 1)
    y = np.asarray(class_ids, dtype=np.int64)
    net = _ClassifierNet(n_classes, rng)
    opt = Adam(net, lr=lr, beta1=0.9, beta2=0.999)
    n = x.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        xb, yb = x[idx], y[idx]
        _, logits = net.forward(xb)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        g = probs.copy()
        g[np.arange(len(yb)), yb] -= 1.0
        g /= len(yb)
        net.zero_grad()
        net.backward(g.astype(np.float32), (x.shape[2] // 4, x.shape[3] // 4))
        opt.step()
    return ToyImageClassifier(net, n_classes)
