"""Synthetic multi-camera scenes standing in for a surround-view rig."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import CameraModel, CameraRig
from .numeric import ConfigError, make_rng


@dataclass(frozen=True)
class SceneSpec:
    n_cameras: int = 6
    h_i: int = 16
    w_i: int = 44
    channels: int = 64
    seed: int = 0
    camera_height: float = 1.6
    ring_radius: float = 1.0

    def __post_init__(self):
        if min(self.n_cameras, self.h_i, self.w_i, self.channels) < 1:
            raise ConfigError("scene dimensions must be positive")


def yaw_camera(yaw: float, w_i: int, h_i: int, radius: float, height: float) -> CameraModel:
    """Level camera looking along ``yaw``; columns of R are the camera's right, down, forward axes."""
    c, s = math.cos(yaw), math.sin(yaw)
    rotation = np.array([
        [s, 0.0, c],
        [-c, 0.0, s],
        [0.0, -1.0, 0.0],
    ])
    intrinsics = np.array([[w_i, 0.0, w_i / 2], [0.0, w_i, h_i / 2], [0.0, 0.0, 1.0]], dtype=float)
    return CameraModel(intrinsics, rotation, np.array([radius * c, radius * s, height]))


def ring_yaws(n: int) -> np.ndarray:
    return 2 * np.pi * np.arange(n) / n


def gen_scene(spec: SceneSpec = SceneSpec()) -> tuple[CameraRig, np.ndarray]:
    cams = tuple(
        yaw_camera(y, spec.w_i, spec.h_i, spec.ring_radius, spec.camera_height)
        for y in ring_yaws(spec.n_cameras)
    )
    rig = CameraRig(cams, tuple(f"cam{i}" for i in range(spec.n_cameras)))
    rig.validate()
    feat = make_rng(spec.seed, stream=0).normal(size=(spec.n_cameras, spec.h_i, spec.w_i, spec.channels))
    return rig, feat


TOY_SPEC = SceneSpec(n_cameras=2, h_i=4, w_i=6, channels=8, seed=0)


def toy_scene(seed: int = 0) -> tuple[CameraRig, np.ndarray]:
    """Two cameras, 4x6 features, 8 channels: the dims used by oracle and gradient checks."""
    return gen_scene(replace(TOY_SPEC, seed=seed))
