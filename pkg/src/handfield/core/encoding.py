"""Sinusoidal positional encoding of low-dimensional coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EncodingConfig:
    num_frequencies: int = 10
    include_identity: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (int(self.include_identity) + 2 * self.num_frequencies)


def positional_encode(x, cfg: EncodingConfig) -> np.ndarray:
    """Per scalar ``p``: ``[p,] sin(2^l pi p), cos(2^l pi p)`` for ``l < L``.

    Output layout is scalar-major: all terms of the first coordinate, then the second.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    L = cfg.num_frequencies
    parts = []
    if cfg.include_identity:
        parts.append(x[..., None])
    if L:
        freqs = (2.0 ** np.arange(L) * np.pi).astype(x.dtype)
        ang = x[..., None] * freqs  # (..., d, L)
        sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(ang.shape[:-1] + (2 * L,))
        parts.append(sc)
    if not parts:
        return np.zeros(x.shape[:-1] + (0,), dtype=x.dtype)
    out = np.concatenate(parts, axis=-1)
    return out.reshape(x.shape[:-1] + (-1,))
