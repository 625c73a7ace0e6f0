"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6,
                 entries: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences for every entry of ``param`` (or only the flat ``entries``; others stay 0)."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-6, max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> dict[str, float]:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    With ``max_entries``, large parameters are checked on a random subset of
    that many coordinates. Returns the relative error per parameter (keyed by
    name or position).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape():
        loss = fn()
        backward(loss)
    analytic = [p.grad.copy() for p in params]
    errors = {}
    for k, (p, a) in enumerate(zip(params, analytic)):
        entries = None
        if max_entries is not None and p.size > max_entries:
            entries = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        num = numeric_grad(fn, p, eps, entries)
        if entries is not None:
            a = a.reshape(-1)[entries]
            num = num.reshape(-1)[entries]
        errors[p.name or str(k)] = relative_error(a, num)
        p.zero_grad()
    return errors
