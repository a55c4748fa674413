"""Pinhole lifting, ego-frame projection, polar coordinates and extrinsic noise.

Camera frame convention: x right, y down, z forward. ``rotation`` maps camera
axes into the ego frame, so ``ego = R @ K^-1 @ [u d, v d, d] + T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numeric import ConfigError

POLAR_EPS = 1e-9
AXES = ("x", "y", "z")


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        for name, shape in (("intrinsics", (3, 3)), ("rotation", (3, 3)), ("translation", (3,))):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != shape:
                raise ConfigError(f"{name} must have shape {shape}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ConfigError(f"{name} has non-finite entries")
            object.__setattr__(self, name, value)

    def validate(self, tol: float = 1e-9) -> None:
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ConfigError("intrinsics are singular")
        r = self.rotation
        if abs(abs(np.linalg.det(r)) - 1.0) > tol:
            raise ConfigError(f"rotation determinant {np.linalg.det(r)} is not +-1")
        if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
            raise ConfigError("rotation is not orthonormal")

    @property
    def lift_matrix(self) -> np.ndarray:
        """``R @ K^-1``, the linear part of the pixel-to-ego map."""
        return self.rotation @ np.linalg.inv(self.intrinsics)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[CameraModel, ...]
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        cams = tuple(self.cameras)
        names = tuple(self.names) or tuple(f"cam{i}" for i in range(len(cams)))
        if not cams:
            raise ConfigError("a rig needs at least one camera")
        if len(names) != len(cams):
            raise ConfigError("one name per camera required")
        if len(set(names)) != len(names):
            raise ConfigError(f"camera names must be unique: {names}")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.cameras)

    def validate(self) -> None:
        for cam in self.cameras:
            cam.validate()

    def to_json(self) -> dict:
        return {
            "cameras": [
                {
                    "name": name,
                    "intrinsics": cam.intrinsics.reshape(-1).tolist(),
                    "rotation": cam.rotation.reshape(-1).tolist(),
                    "translation": cam.translation.tolist(),
                }
                for name, cam in zip(self.names, self.cameras)
            ]
        }

    @classmethod
    def from_json(cls, data: dict) -> "CameraRig":
        try:
            entries = data["cameras"]
            cams, names = [], []
            for entry in entries:
                cams.append(
                    CameraModel(
                        np.reshape(entry["intrinsics"], (3, 3)),
                        np.reshape(entry["rotation"], (3, 3)),
                        np.reshape(entry["translation"], (3,)),
                    )
                )
                names.append(str(entry["name"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed rig description: {exc}") from exc
        rig = cls(tuple(cams), tuple(names))
        rig.validate()
        return rig

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CameraRig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DepthBins:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size < 1 or v[0] <= 0 or np.any(np.diff(v) <= 0):
            raise ConfigError("depth bins must be positive and strictly increasing")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, near: float = 1.0, far: float = 60.0, count: int = 32) -> "DepthBins":
        return cls(np.linspace(near, far, count) if count > 1 else np.array([near]))

    def __len__(self) -> int:
        return self.values.size


class PolarCoord(NamedTuple):
    d: np.ndarray
    sin: np.ndarray
    cos: np.ndarray
    z: np.ndarray


def lift_pixel(u: float, v: float, bins: DepthBins) -> np.ndarray:
    """Homogeneous reference points ``(u d_k, v d_k, d_k)``, one row per bin."""
    d = bins.values
    return np.stack([u * d, v * d, d], axis=-1)


def project_to_ego(p_hom: np.ndarray, cam: CameraModel) -> np.ndarray:
    p = np.asarray(p_hom, dtype=float)
    return p @ cam.lift_matrix.T + cam.translation


def pixel_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """``(u, v)`` grids of feature-pixel centers, each shaped ``(height, width)``."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return u, v


def reference_points(cam: CameraModel, height: int, width: int, bins: DepthBins) -> np.ndarray:
    """Ego-frame reference points of every feature pixel, shape ``(height, width, D, 3)``."""
    u, v = pixel_centers(height, width)
    d = bins.values
    p_hom = np.stack(
        [u[..., None] * d, v[..., None] * d, np.broadcast_to(d, u.shape + d.shape)], axis=-1
    )
    return project_to_ego(p_hom, cam)


def rig_reference_points(rig: CameraRig, height: int, width: int, bins: DepthBins) -> np.ndarray:
    return np.stack([reference_points(cam, height, width, bins) for cam in rig.cameras])


def to_polar(p: np.ndarray) -> PolarCoord:
    """BEV-plane distance, bearing sine/cosine and height of ego-frame points.

    Points closer than ``POLAR_EPS`` to the vertical axis get ``sin=0, cos=1``.
    """
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    d = np.hypot(x, y)
    near = d < POLAR_EPS
    safe = np.where(near, 1.0, d)
    sin = np.where(near, 0.0, y / safe)
    cos = np.where(near, 1.0, x / safe)
    return PolarCoord(d, sin, cos, z)


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ConfigError(f"unknown axis {axis!r}")


@dataclass(frozen=True)
class PerturbSpec:
    """Zero-mean Gaussian extrinsic noise about/along one camera axis.

    ``frame="camera"`` expresses translation offsets along the camera's own
    axis (rotated into ego); ``frame="ego"`` adds them along the ego axis.
    """

    axis: str
    kind: str
    sigma: float
    frame: str = "camera"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}")
        if self.kind not in ("rotation", "translation"):
            raise ConfigError("kind must be 'rotation' or 'translation'")
        if self.frame not in ("camera", "ego"):
            raise ConfigError("frame must be 'camera' or 'ego'")
        if not self.sigma >= 0:
            raise ConfigError("sigma must be non-negative")


def perturb_camera(cam: CameraModel, spec: PerturbSpec, delta: float) -> CameraModel:
    if spec.kind == "rotation":
        return replace(cam, rotation=cam.rotation @ axis_rotation(spec.axis, delta))
    offset = np.zeros(3)
    offset[AXES.index(spec.axis)] = delta
    if spec.frame == "camera":
        offset = cam.rotation @ offset
    return replace(cam, translation=cam.translation + offset)


def perturb_rig(rig: CameraRig, spec: PerturbSpec, rng: np.random.Generator) -> CameraRig:
    """Independent noise per camera: one draw of N(0, sigma^2) each, in camera order."""
    deltas = rng.normal(0.0, spec.sigma, size=len(rig)) if spec.sigma > 0 else np.zeros(len(rig))
    cams = tuple(perturb_camera(cam, spec, float(delta)) for cam, delta in zip(rig.cameras, deltas))
    return CameraRig(cams, rig.names)
