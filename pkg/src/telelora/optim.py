"""First-order optimizers over flat ``name -> ndarray`` parameter dicts (updated in place)."""

from __future__ import annotations

import numpy as np


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if not max_norm:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    s = max_norm / (norm + 1e-12)
    return {k: g * s for k, g in grads.items()}


class RMSProp:
    """Momentum-free adaptive step: p -= lr * g / (sqrt(E[g^2]) + eps), bias-corrected."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, decay: float = 0.99,
                 eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.sq = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        grads = clip_grads(grads, self.clip)
        self.t += 1
        corr = 1.0 - self.decay ** self.t
        for k, g in grads.items():
            if k not in self.params:
                continue
            g = g.astype(self.params[k].dtype, copy=False)
            sq = self.sq[k]
            sq *= self.decay
            sq += (1.0 - self.decay) * g * g
            self.params[k] -= (self.lr * g / (np.sqrt(sq / corr) + self.eps)).astype(self.params[k].dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {f"sq.{k}": v for k, v in self.sq.items()}


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 3e-3, betas=(0.9, 0.98),
                 eps: float = 1e-8, clip: float | None = 1.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        grads = clip_grads(grads, self.clip)
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.params:
                continue
            p = self.params[k]
            g = g.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim > 1:
                upd = upd + lr * self.weight_decay * p
            p -= upd.astype(p.dtype)
