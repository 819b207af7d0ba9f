"""Multi-view dataset container and its on-disk layout.

Layout::

    cameras.json             {"cameras": [camera records]}
    template.json            rigged template (optional)
    recipe.json              generator recipe (optional)
    frames/<p>/params.json   {"params": hand parameters, "split": "train" | "heldout"}
    frames/<p>/cam<j>.png    RGB target of camera j
    frames/<p>/mask<j>.png   binary foreground mask of camera j
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, ConfigError
from .hand_model import HandParams, RiggedTemplate, load_template, save_template

SPLITS = ("train", "heldout")


class DatasetError(ValueError):
    """Dataset files are missing or violate an invariant."""


@dataclass
class Frame:
    params: HandParams
    images: list  # per camera (H, W, 3) float in [0, 1]
    masks: list  # per camera (H, W) bool
    split: str = "train"


@dataclass
class Dataset:
    cameras: list
    frames: list
    template: RiggedTemplate | None = None
    recipe: dict | None = None

    def validate(self) -> None:
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise DatasetError("camera ids are not unique")
        if not self.frames:
            raise DatasetError("dataset has no frames")
        shape = None
        for p, fr in enumerate(self.frames):
            if fr.split not in SPLITS:
                raise DatasetError(f"frame {p}: unknown split {fr.split!r}")
            if len(fr.images) != len(self.cameras) or len(fr.masks) != len(self.cameras):
                raise DatasetError(f"frame {p}: expected {len(self.cameras)} images and masks")
            for img, m in zip(fr.images, fr.masks):
                if shape is None:
                    shape = img.shape
                if img.shape != shape or img.ndim != 3 or img.shape[2] != 3:
                    raise DatasetError(f"frame {p}: image shape {img.shape} differs from {shape}")
                if m.shape != shape[:2] or m.dtype != bool:
                    raise DatasetError(f"frame {p}: mask must be a boolean {shape[:2]} array")
        for c in self.cameras:
            if (c.height, c.width) != shape[:2]:
                raise DatasetError(f"camera {c.id} resolution {c.width}x{c.height} differs from images")

    def indices(self, split: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.split == split]

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.frames[0].images[0].shape[:2]
        return w, h


def _png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def save_dataset(ds: Dataset, root) -> None:
    ds.validate()
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "cameras.json").write_text(json.dumps({"cameras": [c.to_dict() for c in ds.cameras]}, indent=1))
    if ds.template is not None:
        save_template(ds.template, root / "template.json")
    if ds.recipe is not None:
        (root / "recipe.json").write_text(json.dumps(ds.recipe, indent=1))
    for p, fr in enumerate(ds.frames):
        d = root / "frames" / f"{p:04d}"
        d.mkdir(exist_ok=True)
        (d / "params.json").write_text(json.dumps({"params": fr.params.to_dict(), "split": fr.split}))
        for j, (img, m) in enumerate(zip(fr.images, fr.masks)):
            _png(d / f"cam{j}.png", np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
            _png(d / f"mask{j}.png", m.astype(np.uint8) * 255)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        cams = [Camera.from_dict(c) for c in json.loads((root / "cameras.json").read_text())["cameras"]]
    except FileNotFoundError:
        raise DatasetError(f"{root}: missing cameras.json") from None
    except (KeyError, json.JSONDecodeError, ConfigError) as exc:
        raise DatasetError(f"{root}/cameras.json: {exc}") from None
    template = load_template(root / "template.json") if (root / "template.json").exists() else None
    recipe = json.loads((root / "recipe.json").read_text()) if (root / "recipe.json").exists() else None
    frames = []
    fdir = root / "frames"
    if not fdir.is_dir():
        raise DatasetError(f"{root}: missing frames/ directory")
    for d in sorted(p for p in fdir.iterdir() if p.is_dir()):
        try:
            meta = json.loads((d / "params.json").read_text())
            params = HandParams.from_dict(meta["params"])
        except FileNotFoundError:
            raise DatasetError(f"{d}: missing params.json") from None
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{d}/params.json: {exc}") from None
        images, masks = [], []
        for j in range(len(cams)):
            try:
                with Image.open(d / f"cam{j}.png") as im:
                    images.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
                with Image.open(d / f"mask{j}.png") as im:
                    m = np.asarray(im.convert("L"))
            except FileNotFoundError as exc:
                raise DatasetError(f"{d}: missing {Path(exc.filename).name}") from None
            if not np.all((m == 0) | (m == 255)):
                raise DatasetError(f"{d}/mask{j}.png is not binary")
            masks.append(m == 255)
        frames.append(Frame(params, images, masks, meta.get("split", "train")))
    ds = Dataset(cams, frames, template, recipe)
    ds.validate()
    return ds
