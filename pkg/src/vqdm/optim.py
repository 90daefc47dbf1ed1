"""Adam optimizer over Tensor parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moment buffers plus hyperparameters.

    Moments are keyed by position in the parameter list, so the caller must
    pass parameters in a stable order across steps.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on param.data."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = p.data if isinstance(p, Tensor) else p
        g = np.asarray(g)
        if g.shape != arr.shape:
            raise DimensionError(f"adam_step: param {i} shape {arr.shape} vs grad {g.shape}")
        m = state.m.get(i)
        if m is None:
            m = np.zeros_like(arr)
            v = np.zeros_like(arr)
            state.m[i], state.v[i] = m, v
        else:
            v = state.v[i]
        g = g.astype(arr.dtype, copy=False)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= state.lr / bc1
        arr -= denom
