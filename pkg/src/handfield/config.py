"""Experiment configuration: one JSON document holding every tunable default."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path

from .camera import ConfigError
from .field import FieldConfig
from .render import RenderConfig
from .sr import SRConfig

PERC_MODES = ("full", "patch64", "off")


@dataclass
class LossConfig:
    rec_weight: float = 1.0
    perc_weight: float = 0.1
    perc_mode: str = "full"
    apply_low_res: bool = True
    apply_high_res: bool = True
    low_res_weight: float = 1.0
    high_res_weight: float = 1.0
    patch_size: int = 64
    lattice_stride: int = 4  # background pixels always supervised on this grid
    alpha_weight: float = 0.0  # rendered opacity vs foreground coverage; 0 keeps the plain objective

    def __post_init__(self):
        if self.perc_mode not in PERC_MODES:
            raise ConfigError(f"unknown perceptual mode {self.perc_mode!r}; expected one of {PERC_MODES}")
        for k in ("rec_weight", "perc_weight", "low_res_weight", "high_res_weight", "alpha_weight"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")


@dataclass
class TrainConfig:
    steps: int = 4000
    lr: float = 5e-4
    lr_final_ratio: float = 0.1  # exponential decay to lr * ratio at the last step
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float64"
    calibrate: bool = True
    calib_lr_scale: float = 10.0  # gains must travel ~0.3 within a few hundred visits per camera
    view_warmup: float = 1.0  # fraction of steps over which the view direction is faded in; gains settle first
    eval_every: int = 256
    checkpoint_every: int = 250
    eval_cameras: list | None = None  # None = all cameras

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.steps < 0 or self.lr <= 0 or self.calib_lr_scale <= 0:
            raise ConfigError("steps must be >= 0, lr > 0 and calib_lr_scale > 0")
        if not 0.0 <= self.view_warmup <= 1.0:
            raise ConfigError("view_warmup must lie in [0, 1]")


@dataclass
class ExtractorConfig:
    channels: tuple = (8, 16, 32, 32, 32)
    seed: int = 7
    weights_file: str | None = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 5:
            raise ConfigError("the feature pyramid has exactly 5 stages")


@dataclass
class ExperimentConfig:
    name: str = "ours"
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    sr: SRConfig = dc_field(default_factory=SRConfig)
    use_sr: bool = True
    loss: LossConfig = dc_field(default_factory=LossConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    extractor: ExtractorConfig = dc_field(default_factory=ExtractorConfig)

    def __post_init__(self):
        want = 3 + self.field.feature_channels
        if self.use_sr and self.sr.in_channels != want:
            raise ConfigError(f"SR in_channels {self.sr.in_channels} must equal 3 + feature_channels = {want}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "field": self.field.to_dict(),
            "render": self.render.to_dict(),
            "sr": self.sr.to_dict(),
            "use_sr": self.use_sr,
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "extractor": {**asdict(self.extractor), "channels": list(self.extractor.channels)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"name", "field", "render", "sr", "use_sr", "loss", "train", "extractor"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")

        def sub(klass, key):
            vals = d.get(key, {})
            bad = set(vals) - set(klass.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            return klass(**vals)

        return cls(
            name=d.get("name", "ours"),
            field=FieldConfig.from_dict(d.get("field", {})),
            render=RenderConfig.from_dict(d.get("render", {})),
            sr=SRConfig.from_dict(d.get("sr", {})),
            use_sr=bool(d.get("use_sr", True)),
            loss=sub(LossConfig, "loss"),
            train=sub(TrainConfig, "train"),
            extractor=sub(ExtractorConfig, "extractor"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def with_(self, **sections) -> "ExperimentConfig":
        """Copy with whole sections or section fields replaced, e.g. ``with_(loss={"perc_mode": "off"})``."""
        kw = {}
        for key, val in sections.items():
            cur = getattr(self, key)
            kw[key] = replace(cur, **val) if isinstance(val, dict) else val
        return replace(self, **kw)


def desk_config(name: str = "ours", steps: int = 3000) -> ExperimentConfig:
    """Single-core desk-scale preset: smaller MLP, 32-bit training, black background."""
    return ExperimentConfig(
        name=name,
        field=FieldConfig(width=64, depth=4, inject_after=3, bone_width=32, bone_depth=3, bone_inject_after=2),
        render=RenderConfig(background=(0.0, 0.0, 0.0), margin=0.008, dilation=2),
        sr=SRConfig(in_channels=32, hidden=32),
        loss=LossConfig(alpha_weight=1.0),
        train=TrainConfig(steps=steps, dtype="float32", lr=1e-3),
    )
