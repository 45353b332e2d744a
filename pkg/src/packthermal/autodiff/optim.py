from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .tensor import Tensor


@dataclass(eq=False)
class Parameter:
    """A trainable tensor plus its Adam moments."""

    name: str
    tensor: Tensor
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.m is None:
            self.m = np.zeros_like(self.tensor.data)
        if self.v is None:
            self.v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


@nb.njit(cache=True)
def _adam_kernel(x, g, m, v, lr, beta1, beta2, eps, c1, c2):
    # flattened views; c1/c2 are the bias corrections 1 - beta^t
    for i in range(x.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        x[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    for p in params:
        p.step += 1
        x = p.tensor.data
        if not x.flags.c_contiguous or not x.flags.writeable:
            x = p.tensor.data = np.ascontiguousarray(x).copy()
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(x)
        g = np.ascontiguousarray(g, dtype=x.dtype)
        _adam_kernel(x.reshape(-1), g.reshape(-1), p.m.reshape(-1), p.v.reshape(-1),
                     lr, beta1, beta2, eps, 1.0 - beta1 ** p.step, 1.0 - beta2 ** p.step)


def decay_lr(lr: float, factor: float) -> float:
    return lr * factor
