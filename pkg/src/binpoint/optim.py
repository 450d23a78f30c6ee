"""Adam and the cosine learning-rate schedule used by every training run."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class AdamState:
    """First/second moment buffers for a fixed parameter list."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: list[Tensor], state: AdamState, lr: float):
    """One in-place Adam update; parameters with no grad are skipped."""
    state.t += 1
    t = state.t
    bias1 = 1.0 - BETA1 ** t
    bias2 = 1.0 - BETA2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad
        state.m[i] = BETA1 * state.m[i] + (1 - BETA1) * g
        state.v[i] = BETA2 * state.v[i] + (1 - BETA2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + EPS)


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * epoch / total)) / 2, annealing to zero."""
    return base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0
