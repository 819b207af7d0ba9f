"""Parameter initialization helpers and small composite layers."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import ParamStore


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, gain: float = np.sqrt(2.0)) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_dense(store: ParamStore, name: str, fan_in: int, fan_out: int, rng, gain: float = np.sqrt(2.0),
              batch: int | None = None, **kw):
    shape = (fan_in, fan_out) if batch is None else (batch, fan_in, fan_out)
    bshape = (fan_out,) if batch is None else (batch, fan_out)
    store.add(f"{name}/w", kaiming_uniform(rng, fan_in, shape, gain), **kw)
    store.add(f"{name}/b", np.zeros(bshape), **kw)


def dense(store: ParamStore, name: str, x, act=None):
    y = T.linear(x, store[f"{name}/w"], store[f"{name}/b"])
    return act(y) if act is not None else y


def add_conv(store: ParamStore, name: str, cin: int, cout: int, rng, gain: float = np.sqrt(2.0), **kw):
    store.add(f"{name}/w", kaiming_uniform(rng, 9 * cin, (3, 3, cin, cout), gain), **kw)
    store.add(f"{name}/b", np.zeros(cout), **kw)


def conv(store: ParamStore, name: str, x, act=None):
    y = T.conv2d_3x3(x, store[f"{name}/w"], store[f"{name}/b"])
    return act(y) if act is not None else y
