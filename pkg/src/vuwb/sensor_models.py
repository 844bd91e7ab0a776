"""Pinhole camera and UWB range measurement functions (no noise)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError
from .liegeom import PoseSE3


@dataclass(frozen=True)
class CameraIntrinsics:
    fu: float
    fv: float
    cu: float
    cv: float
    width: float
    height: float
    min_depth: float = 0.2
    max_depth: float = 30.0

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cu < self.width and 0 < self.cv < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (0 < self.min_depth < self.max_depth):
            raise ValueError("need 0 < min_depth < max_depth")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])


def pinhole_project(p_C, K: CameraIntrinsics) -> np.ndarray:
    X, Y, Z = np.asarray(p_C, dtype=float).reshape(3)
    if Z <= 0:
        raise BehindCameraError(f"point has depth {Z}")
    return np.array([K.fu * X / Z + K.cu, K.fv * Y / Z + K.cv])


def project_batch(p_C: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Project (N, 3) camera-frame points without the depth check."""
    Z = p_C[:, 2]
    return np.column_stack([K.fu * p_C[:, 0] / Z + K.cu, K.fv * p_C[:, 1] / Z + K.cv])


def backproject(z, depth: float, K: CameraIntrinsics) -> np.ndarray:
    u, v = np.asarray(z, dtype=float)
    return np.array([(u - K.cu) / K.fu * depth, (v - K.cv) / K.fv * depth, depth])


def visible_mask(p_C: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Depth inside ``(min_depth, max_depth)`` and pixel inside the image."""
    p_C = np.atleast_2d(p_C)
    Z = p_C[:, 2]
    ok = (Z > K.min_depth) & (Z < K.max_depth)
    Zs = np.where(ok, Z, 1.0)
    u = K.fu * p_C[:, 0] / Zs + K.cu
    v = K.fv * p_C[:, 1] / Zs + K.cv
    return ok & (u >= 0) & (u <= K.width) & (v >= 0) & (v <= K.height)


def world_to_camera(X_v: PoseSE3, T_cb: PoseSE3, p) -> np.ndarray:
    p_B = X_v.R @ np.asarray(p, dtype=float) + X_v.translation
    return T_cb.R @ p_B + T_cb.translation


def body_center(X_v: PoseSE3) -> np.ndarray:
    """Tag / body origin in world coordinates, ``-R_BW^T t_BW``."""
    return -(X_v.R.T @ X_v.translation)


def range_truth(p_anchor, p_body) -> float:
    return float(np.linalg.norm(np.asarray(p_anchor, dtype=float) - np.asarray(p_body, dtype=float)))
