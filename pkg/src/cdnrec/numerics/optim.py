"""Plain SGD and Adam over a :class:`ParamStore`.

Both skip frozen slots and zero every gradient after stepping.
"""
from __future__ import annotations

import numpy as np

from cdnrec.numerics.tape import ParamStore


class SGD:
    def __init__(self, lr: float = 0.01):
        self.lr = lr

    def step(self, store: ParamStore) -> None:
        for name, p in store.params.items():
            if name not in store.frozen:
                p -= self.lr * store.grads[name]
        store.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def state_meta(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        pass


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in store.params.items():
            if name in store.frozen:
                continue
            g = store.grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        store.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def state_meta(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    def load_state(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.t = int(meta.get("t", 0))
        self.m = {k[len("adam.m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}


def make_optimizer(kind: str, lr: float, **hyper):
    if kind == "adam":
        return Adam(lr=lr, **hyper)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
