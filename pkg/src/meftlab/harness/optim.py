"""Bias-corrected Adam over ParamStore entries."""

from __future__ import annotations

import weakref

import numpy as np

from ..params import ParamStore


class Adam:
    """Bias-corrected Adam over the non-frozen entries of a ParamStore."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, t: int | None = None) -> None:
        """Apply one update using step index ``t`` (1-based), then zero all grads."""
        t = self.t + 1 if t is None else t
        if t < 1:
            raise ValueError(f"Adam step index must be >= 1, got {t}")
        self.t = t
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for name, e in self.store.items():
            if e.frozen:
                continue
            g = e.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            e.value.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(e.value.data.dtype, copy=False)
        self.store.zero_grad()


_STATE: "weakref.WeakKeyDictionary[ParamStore, Adam]" = weakref.WeakKeyDictionary()


def adam_step(params: ParamStore, spec, t: int, lr: float | None = None) -> None:
    """One Adam update with ``spec``'s betas and eps; moments persist per store across calls.

    ``lr`` defaults to the first value of ``spec.lr_grid``.
    """
    lr = spec.lr_grid[0] if lr is None else lr
    opt = _STATE.get(params)
    if opt is None:
        opt = _STATE[params] = Adam(params, lr=lr, betas=spec.betas, eps=spec.eps)
    opt.lr = lr
    opt.step(t)
