"""Adan (adaptive Nesterov momentum) on dicts of numpy arrays, plus an Adam fallback.

Update per parameter, with bias corrections ``bc_i = 1 - beta_i ** k``::

    diff = g - g_prev            (zero at the first step)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * diff
    n = b3 * n + (1 - b3) * (g + b2 * diff) ** 2
    p -= lr * (m / bc1 + b2 * v / bc2) / (sqrt(n / bc3) + eps)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdanState:
    betas: tuple[float, float, float] = (0.98, 0.92, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    n: dict = field(default_factory=dict)
    prev_grad: dict = field(default_factory=dict)


def adan_step(params: dict, grads: dict, state: AdanState, lr: float) -> None:
    """In-place Adan update of every array in ``params``."""
    b1, b2, b3 = state.betas
    state.step += 1
    k = state.step
    bc1 = 1.0 - b1**k
    bc2 = 1.0 - b2**k
    bc3 = 1.0 - b3**k
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.n[name] = np.zeros_like(p)
            state.prev_grad[name] = g.copy()
        diff = g - state.prev_grad[name]
        m, v, n = state.m[name], state.v[name], state.n[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * diff
        u = g + b2 * diff
        n *= b3
        n += (1 - b3) * u * u
        denom = np.sqrt(n) / np.sqrt(bc3) + state.eps
        update = (m / bc1 + b2 * v / bc2) / denom
        if state.weight_decay:
            p -= lr * update
            p /= 1.0 + lr * state.weight_decay
        else:
            p -= lr * update
        state.prev_grad[name][...] = g


@dataclass
class AdamState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def make_optimizer(name: str = "adan", **kwargs):
    """Return ``(state, step_fn)`` for ``"adan"`` or ``"adam"``."""
    name = name.lower()
    if name == "adan":
        return AdanState(**kwargs), adan_step
    if name == "adam":
        return AdamState(**kwargs), adam_step
    raise ValueError(f"unknown optimizer {name!r}")
