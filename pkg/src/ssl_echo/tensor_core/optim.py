"""Adam optimizer with coupled L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "DivergenceError", "init_adam", "adam_step"]


class DivergenceError(RuntimeError):
    """Non-finite values encountered in a training step."""


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """Fresh moment buffers for every trainable tensor in ``params``."""
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                      weight_decay=weight_decay)
    for name, p in params.items():
        if p.requires_grad:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params, grads, state):
    """One in-place Adam update with bias correction.

    L2 decay is coupled: grad += weight_decay * param before the moment
    updates. Raises :class:`DivergenceError` on any non-finite gradient.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, m in state.m.items():
        p = params[name]
        g = grads[name]
        if g is None:
            raise DivergenceError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
