"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, kink_trace, no_grad


def _probe(f: Callable[[Tensor], Tensor], x: Tensor) -> tuple[float, list]:
    trace: list = []
    with no_grad(), kink_trace(trace):
        value = f(x).data
    if value.size != 1:
        raise ValueError(f"check_gradients: f must be scalar-valued, got shape {value.shape}")
    return float(value), trace


def check_gradients(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``x`` must be a leaf with ``requires_grad=True``; ``f`` may close over
    other tensors. Coordinates whose +/-eps probes switch the activation
    pattern of a relu, leaky relu or max are skipped: the central
    difference straddles a kink there. ``max_coords`` checks a seeded
    random subset of coordinates.
    """
    if not x.requires_grad:
        raise ValueError("check_gradients: x must require grad")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("check_gradients: x has non-finite entries")
    x.data = np.ascontiguousarray(x.data)
    x.grad = None
    loss = f(x)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"check_gradients: non-finite loss {loss.data}")
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("check_gradients: non-finite analytic gradient")

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp, tp = _probe(f, x)
        flat[i] = orig - eps
        fm, tm = _probe(f, x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"check_gradients: non-finite value probing coordinate {i}")
        if tp != tm:
            continue
        central = (fp - fm) / (2 * eps)
        err = abs(float(analytic.reshape(-1)[i]) - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
