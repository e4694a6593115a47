"""Shared test helpers: finite-difference gradient checking."""

import numpy as np
import pytest

from mspa import tensor as _tensor
from mspa.tensor import backward, no_grad


@pytest.fixture(autouse=True)
def _fresh_tape():
    """Keep autodiff tape state from leaking between tests."""
    _tensor._state.entries = []
    yield
    _tensor._state.entries = []

GRAD_ATOL = 1e-3
GRAD_RTOL = 1e-2


def gradcheck(build, tensors, h=1e-3, atol=GRAD_ATOL, rtol=GRAD_RTOL):
    """Compare tape gradients of a scalar graph against central differences.

    `build` must construct the scalar output from `tensors` from scratch on
    every call (the tape is consumed by backward). Inputs should keep a
    margin of at least `h` from any kink (relu/abs/max/clamp boundaries),
    otherwise the numeric estimate straddles the kink and is meaningless.
    """
    out = build()
    backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]
    for t in tensors:
        t.grad = None
    for t, grads in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        flat_grad = grads.reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + h
            with no_grad():
                f_plus = float(build().data)
            flat[idx] = saved - h
            with no_grad():
                f_minus = float(build().data)
            flat[idx] = saved
            numeric = (f_plus - f_minus) / (2.0 * h)
            diff = abs(float(flat_grad[idx]) - numeric)
            assert diff <= max(atol, rtol * abs(numeric)), (
                f"gradient mismatch at flat index {idx}: "
                f"analytic {flat_grad[idx]:.6f} vs numeric {numeric:.6f} (diff {diff:.2e})"
            )


def away_from_zero(rng, shape, low=0.2, high=1.0):
    """Random values with |x| in [low, high]: safe for relu/abs/sqrt kinks."""
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return (mag * sign).astype(np.float32)
