"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def grad_check(f, params: list[Tensor], eps: float = 1e-4, max_entries: int | None = 64, seed: int = 0,
               floor: float = 1e-7) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds a scalar tensor from ``params``. At most ``max_entries`` randomly
    chosen entries per parameter are probed. The relative error of one entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = float(f().data)
            flat[i] = old - eps
            fm = float(f().data)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        p.grad = None
    return worst
