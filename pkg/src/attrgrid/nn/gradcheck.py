from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
               max_per_param: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over checked entries of ``|g_ad - g_fd| / max(1, |g_fd|)``.

    ``f`` rebuilds the graph from the current parameter values on every call and
    returns a scalar. Central differences with step ``h``. With ``max_per_param``
    only a random subset of entries of each parameter is probed.
    """
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, g_ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = rng.choice(flat.size, size=max_per_param, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                g_fd = (fp - fm) / (2 * h)
                err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
                worst = max(worst, err)
    return worst
