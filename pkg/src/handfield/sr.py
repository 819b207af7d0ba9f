"""Local convolutional 2x upsampler from (color, features) to full-resolution color."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .camera import ConfigError
from .core import tensor as T
from .core.layers import add_conv, conv
from .core.optim import ParamStore
from .core.tensor import DimensionError

FACTOR = 2


@dataclass
class SRConfig:
    in_channels: int = 32
    hidden: int = 64
    skip_rgb: bool = True

    def __post_init__(self):
        if self.in_channels < 3 or self.hidden < 1:
            raise ConfigError("SR needs at least 3 input channels and 1 hidden channel")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SRConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown SR config keys {sorted(unknown)}")
        return cls(**d)


def receptive_span(i: int) -> tuple[int, int]:
    """Inclusive output-index range (per axis) that input index ``i`` can influence.

    conv3x3 at low res reaches i-1..i+1; the bilinear upsampler maps low-res j to
    outputs 2j-1..2j+2; the two high-res 3x3 convolutions widen that by 2 each side.
    """
    return 2 * i - 5, 2 * i + 6


class SuperResolution:
    """conv3x3 -> relu -> bilinear x2 -> conv3x3 -> relu -> conv3x3 (+ upsampled color) -> sigmoid."""

    def __init__(self, cfg: SRConfig, store: ParamStore, rng: np.random.Generator | int = 0, prefix: str = "sr"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        rng = np.random.default_rng(rng)
        add_conv(store, f"{prefix}/c0", cfg.in_channels, cfg.hidden, rng)
        add_conv(store, f"{prefix}/c1", cfg.hidden, cfg.hidden, rng)
        add_conv(store, f"{prefix}/c2", cfg.hidden, 3, rng, gain=0.1)

    def num_params(self) -> int:
        return self.store.num_values(self.prefix + "/")

    def zero(self):
        for n in self.store.names(self.prefix + "/"):
            self.store[n].data[...] = 0.0

    def forward(self, x) -> T.Tensor:
        """``x`` (H, W, in_channels) with color in the first three channels -> (2H, 2W, 3)."""
        x = T.as_tensor(x)
        if x.data.ndim != 3 or x.shape[2] != self.cfg.in_channels:
            raise DimensionError(f"SR expects (H, W, {self.cfg.in_channels}) input, got {x.shape}")
        p = self.prefix
        h = conv(self.store, f"{p}/c0", x, T.relu)
        h = T.upsample_bilinear_2x(h)
        h = conv(self.store, f"{p}/c1", h, T.relu)
        y = conv(self.store, f"{p}/c2", h)
        if self.cfg.skip_rgb:
            y = T.add(y, T.upsample_bilinear_2x(x[..., :3]))
        return T.sigmoid(y)


def sr_input(L, F) -> T.Tensor:
    return T.concat([T.as_tensor(L), T.as_tensor(F)], axis=-1)
