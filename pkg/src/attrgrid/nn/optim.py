from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter).

    Parameters are moved into one contiguous buffer (each ``p.data`` becomes a view
    into it) so an update is a handful of vectorised operations.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        sizes = [p.data.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.flat = np.empty(int(self._offsets[-1]))
        for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            self.flat[a:b] = p.data.reshape(-1)
            p.data = self.flat[a:b].reshape(p.data.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self._grad = np.zeros_like(self.flat)
        self._t1 = np.zeros_like(self.flat)
        self._t2 = np.zeros_like(self.flat)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        g = self._grad
        has = np.zeros(len(self.flat), dtype=bool)
        for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            if p.grad is None:
                continue
            g[a:b] = p.grad.reshape(-1)
            has[a:b] = True
        if self.weight_decay:
            self.flat *= 1.0 - self.lr * self.weight_decay
        if has.all():
            self._update(slice(None), g, c1, c2)
        elif has.any():
            self._update(has, g[has], c1, c2)

    def _update(self, sel, g, c1, c2) -> None:
        b1, b2 = self.beta1, self.beta2
        if not isinstance(sel, slice):
            m, v, flat = self.m[sel], self.v[sel], self.flat[sel]
            t1, t2 = np.empty_like(g), np.empty_like(g)
        else:
            # reuse scratch buffers; fresh 8 MB temporaries cost page faults every step
            m, v, flat = self.m, self.v, self.flat
            t1, t2 = self._t1, self._t2
        m *= b1
        np.multiply(g, 1.0 - b1, out=t1)
        m += t1
        v *= b2
        np.multiply(g, g, out=t1)
        t1 *= 1.0 - b2
        v += t1
        np.multiply(v, 1.0 / c2, out=t2)
        np.sqrt(t2, out=t2)
        t2 += self.eps
        np.divide(m, t2, out=t2)
        t2 *= self.lr / c1
        flat -= t2
        if not isinstance(sel, slice):
            self.m[sel], self.v[sel], self.flat[sel] = m, v, flat
