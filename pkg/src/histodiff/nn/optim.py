"""Adam optimizer over a Layer tree, with serializable state."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, model, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.model = model
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p) for name, p in model.named_parameters()}
        self.v = {name: np.zeros_like(p) for name, p in model.named_parameters()}

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        grads = dict(self.model.named_gradients())
        for name, p in self.model.named_parameters():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)

    def hyperparams(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
        }

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[name + ".m"] = arr
        for name, arr in self.v.items():
            out[name + ".v"] = arr
        return out

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        for name in self.m:
            self.m[name][...] = state[name + ".m"]
            self.v[name][...] = state[name + ".v"]
