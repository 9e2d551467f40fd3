from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


class NonDeterministicFunctionError(RuntimeError):
    pass


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` maps a tensor to a scalar tensor. The analytic gradient comes from
    the reverse-mode engine; the numeric one perturbs ``x`` in place, one
    coordinate at a time.
    """
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    first = f(probe)
    if first.size != 1:
        raise ValueError(f"f must return a scalar, got shape {first.shape}")
    if f(Tensor(base)).item() != first.item():
        raise NonDeterministicFunctionError("f returned different values for identical input")
    if first.requires_grad:
        first.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(base)).item()
        flat[i] = orig - h
        down = f(Tensor(base)).item()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
