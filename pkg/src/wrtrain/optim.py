"""Adam and global-norm gradient clipping for :mod:`wrtrain.autodiff` parameters."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be nonnegative")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            dt = p.data.dtype.type
            self.m[k] = dt(b1) * self.m[k] + dt(1.0 - b1) * g
            self.v[k] = dt(b2) * self.v[k] + dt(1.0 - b2) * (g * g)
            mhat = self.m[k] / dt(c1)
            vhat = self.v[k] / dt(c2)
            p.data = p.data - dt(self.lr) * mhat / (np.sqrt(vhat) + dt(self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.params) or set(state["v"]) != set(self.params):
            raise ValueError("optimizer state does not match parameters")
        self.t = int(state["t"])
        self.m = {k: np.array(state["m"][k], dtype=self.params[k].dtype) for k in self.params}
        self.v = {k: np.array(state["v"][k], dtype=self.params[k].dtype) for k in self.params}


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; returns the norm before."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm
