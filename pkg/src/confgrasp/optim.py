"""First-order optimizers over named parameter dicts."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor


def step_decay(lr0: float, epoch: int, every: int, factor: float = 0.5) -> float:
    """Learning rate after ``epoch`` full epochs: multiplied by ``factor`` every ``every`` epochs."""
    return lr0 * factor ** (epoch // every)


class SGD:
    def __init__(self, params: Mapping[str, Tensor], names: Iterable[str], lr: float):
        self.params = params
        self.names = list(names)
        self.lr = lr

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].grad = None

    def step(self) -> None:
        for n in self.names:
            p = self.params[n]
            if p.grad is not None:
                p.data -= p.data.dtype.type(self.lr) * p.grad


class Adam(SGD):
    def __init__(self, params, names, lr, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, names, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)


def make_optimizer(kind: str, params, names, lr):
    if kind == "adam":
        return Adam(params, names, lr)
    if kind == "sgd":
        return SGD(params, names, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
