"""Optimizers and learning-rate schedules.

Momentum SGD uses the velocity convention ``v <- m*v + (g + wd*W)``,
``W <- W - lr*v``. RMSprop keeps ``a <- rho*a + (1-rho)*g^2`` and moves
``W <- W - lr*g/sqrt(a + eps)``. Adam is the usual bias-corrected form with
L2 weight decay folded into the gradient. Every step clears the gradient
buffers.
"""

from __future__ import annotations

import logging

import numpy as np

from .params import ParamStore

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


def _check_finite(params: ParamStore, names):
    bad = [n for n in names if not np.all(np.isfinite(params[n].grad))]
    if bad:
        log.error("non-finite gradient in %s; step rejected", ", ".join(bad))
        raise NonFiniteGradientError(f"non-finite gradient in parameter(s): {', '.join(bad)}")


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, names=None):
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    names = params.names() if names is None else list(names)
    _check_finite(params, names)
    for n in names:
        p = params[n]
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            st = params.state.setdefault(n, {})
            v = st.get("velocity")
            v = g.copy() if v is None else momentum * v + g
            st["velocity"] = v
            g = v
        p.data -= lr * g
        p.grad.fill(0.0)
    return params


def rmsprop_step(params: ParamStore, lr: float, rho: float = 0.99, eps: float = 1e-8, names=None):
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    names = params.names() if names is None else list(names)
    _check_finite(params, names)
    for n in names:
        p = params[n]
        g = p.grad
        st = params.state.setdefault(n, {})
        avg = st.get("sq_avg")
        avg = (1.0 - rho) * g * g if avg is None else rho * avg + (1.0 - rho) * g * g
        st["sq_avg"] = avg
        p.data -= lr * g / np.sqrt(avg + eps)
        p.grad.fill(0.0)
    return params


def adam_step(params: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0, names=None):
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    names = params.names() if names is None else list(names)
    _check_finite(params, names)
    for n in names:
        p = params[n]
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        st = params.state.setdefault(n, {})
        t = int(st.get("adam_t", 0)) + 1
        m = st.get("adam_m")
        v = st.get("adam_v")
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        st["adam_m"], st["adam_v"], st["adam_t"] = m, v, np.array(t)
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad.fill(0.0)
    return params


def clip_parameters(params: ParamStore, c: float = 0.01, names=None):
    """Clamp every selected parameter value into [-c, c] in place."""
    if c <= 0:
        raise ValueError(f"clip constant must be positive, got {c}")
    names = params.names() if names is None else names
    for n in names:
        np.clip(params[n].data, -c, c, out=params[n].data)
    return params


def step_decay(base: float, epoch: int, every: int = 10, factor: float = 0.1) -> float:
    """``base * factor ** (epoch // every)`` with zero-based epochs."""
    return base * factor ** (epoch // every)
