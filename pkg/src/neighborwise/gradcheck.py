"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

import numpy as np

from .params import ParamStore
from .tensor import Graph


class NondeterministicForward(RuntimeError):
    pass


def grad_check(build_loss, params: ParamStore, h: float = 1e-3, n_coords: int = 20, seed: int = 0):
    """Return ``{name: max relative error}`` over sampled coordinates.

    ``build_loss(params)`` must return a scalar Tensor and must be a pure
    function of the parameter values (no fresh dropout draws).
    Relative error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    rng = np.random.default_rng(seed)

    def value():
        return float(build_loss(params).data)

    params.zero_grad()
    with Graph() as g:
        loss = build_loss(params)
    g.backward(loss)
    analytic = params.grads()
    params.zero_grad()

    base = float(loss.data)
    again = value()
    if again != base:
        raise NondeterministicForward(f"forward not repeatable: {base!r} vs {again!r}")

    errors = {}
    for name in params.names():
        w = params[name].data
        flat = w.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = value()
            flat[i] = old - h
            down = value()
            flat[i] = old
            num = (up - down) / (2.0 * h)
            ana = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(1.0, abs(num)))
        errors[name] = worst
    return errors
