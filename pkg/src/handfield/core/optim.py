"""Named parameter storage and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class Param:
    value: Tensor
    adam: AdamState
    trainable: bool = True
    lr_scale: float = 1.0
    grad_mask: np.ndarray | None = None


@dataclass
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class ParamStore:
    """Ordered name -> parameter map. Values are tensors that require gradients."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def add(self, name: str, value, trainable: bool = True, lr_scale: float = 1.0, grad_mask=None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        t = Tensor(arr, requires_grad=trainable, name=name)
        self._params[name] = Param(t, AdamState(np.zeros_like(arr), np.zeros_like(arr)), trainable, lr_scale,
                                   None if grad_mask is None else np.asarray(grad_mask, dtype=self.dtype))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def param(self, name: str) -> Param:
        return self._params[name]

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def num_values(self, prefix: str = "") -> int:
        return int(sum(self._params[n].value.data.size for n in self.names(prefix)))

    def zero_grad(self):
        for p in self._params.values():
            p.value.grad = None

    def set_trainable(self, prefix: str, trainable: bool):
        for n in self.names(prefix):
            p = self._params[n]
            p.trainable = trainable
            p.value.requires_grad = trainable

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for n, p in self._params.items():
            out.add(n, p.value.data, p.trainable, p.lr_scale, p.grad_mask)
            q = out._params[n]
            q.adam = AdamState(p.adam.m.astype(dtype), p.adam.v.astype(dtype), p.adam.step)
        return out


def adam_step(store: ParamStore, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update on every trainable parameter, then zero gradients."""
    for p in store._params.values():
        t = p.value
        if not p.trainable:
            t.grad = None
            continue
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if p.grad_mask is not None:
            g = g * p.grad_mask
        st = p.adam
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        t.data = (t.data - (lr * p.lr_scale) * m_hat / (np.sqrt(v_hat) + eps)).astype(t.data.dtype, copy=False)
        t.grad = None
