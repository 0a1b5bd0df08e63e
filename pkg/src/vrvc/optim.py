"""Bias-corrected Adam over named tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import OptimizerError


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise OptimizerError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self._shapes = [p.data.shape for p in params]


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray] | None = None) -> None:
    """One in-place update. `grads` defaults to each parameter's .grad.

    Zero gradients leave parameters untouched; non-finite gradients raise
    OptimizerError carrying the parameter name.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise OptimizerError(f"got {len(grads)} gradients for {len(params)} parameters")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise OptimizerError(f"gradient shape {g.shape} != parameter shape {p.data.shape}", p.name)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {p.name or i}", p.name)
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
