"""RAdam optimizer and stochastic weight averaging over named parameter dicts."""

from __future__ import annotations

import math

import numpy as np


class RAdam:
    """Rectified Adam (Liu et al.), updating a parameter dict in place.

    While the variance rectification term is intractable (``rho_t <= 4``)
    the step falls back to bias-corrected momentum SGD.
    """

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {k}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        rho_t = self.rho_inf - 2.0 * t * b2**t / bc2
        rect = None
        if rho_t > 4.0:
            rect = math.sqrt(
                (rho_t - 4) * (rho_t - 2) * self.rho_inf / ((self.rho_inf - 4) * (self.rho_inf - 2) * rho_t)
            )
        for k, p in params.items():
            g = grads[k].astype(np.float64)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / bc1
            if rect is None:
                update = self.lr * m_hat
            else:
                update = self.lr * rect * m_hat * math.sqrt(bc2) / (np.sqrt(v) + self.eps)
            params[k] = (p - update).astype(p.dtype)


class SWA:
    """Equal-weight average of end-of-epoch snapshots from ``swa_start`` on.

    Snapshots are summed in float64 so the mean is order independent.
    """

    def __init__(self, swa_start: int = 10):
        self.swa_start = swa_start
        self.count = 0
        self.total: dict[str, np.ndarray] | None = None

    def update(self, params: dict, epoch: int) -> bool:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if epoch < self.swa_start:
            return False
        if self.total is None:
            self.total = {k: v.astype(np.float64) for k, v in params.items()}
        else:
            for k, v in params.items():
                self.total[k] += v
        self.count += 1
        return True

    def mean(self, dtype=np.float32) -> dict[str, np.ndarray] | None:
        if not self.count:
            return None
        return {k: (v / self.count).astype(dtype) for k, v in self.total.items()}
