"""Finite-difference gradient verification.

The numeric side only ever calls the forward pass (under ``no_grad``), so it
stays independent of the backward implementation it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_gradient(f: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``param``.

    ``f`` must rebuild its forward pass on every call; ``param.data`` is
    perturbed in place and restored.
    """
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f()
            flat[i] = orig - step
            f_minus = f()
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * step)
    return g


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between taped and finite-difference gradients.

    Error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    ``build_loss`` must construct a fresh scalar loss on each call.
    """
    for p in params:
        p.zero_grad()
    backward(build_loss())
    analytic = [p.grad.copy() for p in params]

    def f() -> float:
        return float(build_loss().data)

    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_gradient(f, p, step=step)
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        worst = max(worst, float(err.max()))
    return worst
