"""Finite-difference verification of analytic gradients.

Runs in float64 only; float32 has too little headroom for the central
difference quotient at useful step sizes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import NumericError


def gradient_check(
    f: Callable[..., T.Tensor],
    inputs: Sequence[T.Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and return a scalar Tensor. Every input must
    be float64 with requires_grad set. The relative error per coordinate is
    |analytic - numeric| / (|numeric| + 1e-8).
    """
    for inp in inputs:
        if inp.data.dtype != np.float64:
            raise ValueError("gradient_check requires float64 inputs")
        inp.zero_grad()

    tape = T.Tape()
    with T.recording(tape):
        out = f(*inputs)
    if out.data.shape != ():
        raise ValueError("gradient_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise NumericError("non-finite value in forward pass")
    T.backward(tape, out)

    worst = 0.0
    for inp in inputs:
        analytic = inp.grad if inp.grad is not None else np.zeros_like(inp.data)
        flat = inp.data.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            with T.no_grad():
                hi = float(f(*inputs).data)
            flat[i] = orig - eps
            with T.no_grad():
                lo = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("non-finite value during finite differencing")
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, float(err))
    return worst
