"""Central finite-difference gradient checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .autodiff import Tensor, no_grad


def numeric_grad(
    loss_fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-6, indices: Optional[np.ndarray] = None
) -> np.ndarray:
    """``(f(x + eps) - f(x - eps)) / 2 eps`` at the flat ``indices`` of ``t`` (all by default)."""
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.empty(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            out[n] = (hi - lo) / (2 * eps)
    return out


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3, scale: Optional[float] = None
) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor * scale)``.

    ``scale`` defaults to ``max|n|``. The floor keeps entries whose true
    gradient is ~0 from turning finite-difference round-off into a huge
    relative error.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(n))) if scale is None else scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    eps: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
    shared_scale: bool = False,
) -> dict[str, float]:
    """Relative error of backprop vs central differences for each tensor.

    With ``max_entries`` each tensor is checked on a seeded random subset of
    that many entries. ``shared_scale`` measures the error floor against the
    largest gradient over all tensors rather than per tensor, for models
    where some tensor's true gradient vanishes (e.g. a scale feeding a
    batch-norm).
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    pairs = {}
    for name, t in tensors.items():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, max_entries, replace=False))
        pairs[name] = (analytic[idx], numeric_grad(loss_fn, t, eps, idx))
    scale = max((float(np.max(np.abs(n))) for _, n in pairs.values() if n.size), default=0.0) if shared_scale else None
    return {name: relative_error(a, n, scale=scale) for name, (a, n) in pairs.items()}
