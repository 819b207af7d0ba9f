"""Pinhole camera (OpenCV convention: x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera rotation
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world -> camera translation
    near: float = 0.1
    far: float = 10.0
    id: int = 0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"camera focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.near < self.far:
            raise ConfigError(f"camera near ({self.near}) must be < far ({self.far})")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("camera image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_cam(self, x: np.ndarray) -> np.ndarray:
        return x @ self.R.T + self.t

    def project(self, x: np.ndarray) -> np.ndarray:
        """Continuous pixel coordinates; pixel (i, j) has its center at (j + 0.5, i + 0.5)."""
        xc = self.world_to_cam(np.atleast_2d(x))
        u = self.fx * xc[:, 0] / xc[:, 2] + self.cx
        v = self.fy * xc[:, 1] / xc[:, 2] + self.cy
        return np.stack([u, v], axis=-1)

    def scaled(self, factor: float) -> "Camera":
        """Same viewpoint at ``factor`` times the resolution."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return Camera(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            w, h, self.R.copy(), self.t.copy(), self.near, self.far, self.id,
        )

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, near, far, id=0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fy, width / 2.0, height / 2.0, width, height, R, -R @ eye, near, far, id)

    def to_dict(self) -> dict:
        return {
            "id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(), "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(
                float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                int(d["width"]), int(d["height"]), np.asarray(d["R"]), np.asarray(d["t"]),
                float(d["near"]), float(d["far"]), int(d.get("id", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"camera record missing field {exc}") from None
