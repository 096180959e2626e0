from __future__ import annotations

from typing import Callable

import numpy as np

from .core import DiffValue, backward


def grad_check(f: Callable[[DiffValue], DiffValue], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` must map a DiffValue shaped like ``x`` to a scalar DiffValue.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    x = np.array(x, dtype=np.float64)
    xv = DiffValue(x.copy(), requires_grad=True)
    out = f(xv)
    backward(out)
    analytic = np.zeros_like(x) if xv.grad is None else xv.grad

    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(DiffValue(x)).data)
        flat[i] = orig - eps
        fm = float(f(DiffValue(x)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
