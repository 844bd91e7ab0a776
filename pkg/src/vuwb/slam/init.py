"""Monocular bootstrap pieces: triangulation and metric scale recovery from anchor-1 ranges."""

from __future__ import annotations

import numpy as np

from ..errors import InitializationError
from ..liegeom import PoseSE3, compose
from ..sensor_models import CameraIntrinsics
from .map import MapState

CURVATURE_TOL = 1e-9


def triangulate(T_cws, pixels, camera: CameraIntrinsics, min_parallax_deg=1.0, max_error_px=4.0,
                min_depth=None):
    """Multi-view DLT point from camera poses ``T_cws`` (world->camera) and pixels.

    Returns the world point, or ``None`` when the rays are too parallel,
    the point is not in front of every camera, or a view reprojects worse
    than ``max_error_px``.
    """
    pixels = np.asarray(pixels, dtype=float)
    x = np.column_stack([(pixels[:, 0] - camera.cu) / camera.fu, (pixels[:, 1] - camera.cv) / camera.fv])
    A = np.empty((2 * len(T_cws), 4))
    for k, T in enumerate(T_cws):
        P = np.column_stack([T.R, T.translation])
        A[2 * k] = x[k, 0] * P[2] - P[0]
        A[2 * k + 1] = x[k, 1] * P[2] - P[1]
    # row scaling keeps the SVD well conditioned
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    h = np.linalg.svd(A)[2][-1]
    if abs(h[3]) < 1e-12:
        return None
    p = h[:3] / h[3]
    min_depth = camera.min_depth if min_depth is None else min_depth
    rays = []
    for k, T in enumerate(T_cws):
        p_C = T.R @ p + T.translation
        if p_C[2] <= min_depth:
            return None
        uv = np.array([camera.fu * p_C[0] / p_C[2] + camera.cu, camera.fv * p_C[1] / p_C[2] + camera.cv])
        if np.linalg.norm(uv - pixels[k]) > max_error_px:
            return None
        c = -(T.R.T @ T.translation)
        rays.append((p - c) / np.linalg.norm(p - c))
    rays = np.array(rays)
    cos_min = np.min(np.clip(rays @ rays.T, -1.0, 1.0))
    if np.degrees(np.arccos(cos_min)) < min_parallax_deg:
        return None
    return p


def init_scale(T_cws, D1, T_cb: PoseSE3, min_keyframes: int = 2, max_iterations: int = 50) -> float:
    """Metric scale from ranges to the first anchor, which sits at the world origin.

    Minimises ``sum_i (D_i - ||s c_i + R_CW_i^T t_CB||)^2`` where ``c_i`` is
    the camera centre of keyframe i at the arbitrary visual scale. 1-D
    Gauss-Newton from ``s0 = mean(D) / mean(||c||)``.
    """
    D1 = np.asarray(D1, dtype=float)
    if len(T_cws) != len(D1):
        raise ValueError("need one range per keyframe")
    if len(D1) < min_keyframes:
        raise InitializationError(f"scale initialisation needs {min_keyframes} keyframes, got {len(D1)}")
    c = np.array([-(T.R.T @ T.translation) for T in T_cws])
    a = np.array([T.R.T @ T_cb.translation for T in T_cws])
    mean_c = np.mean(np.linalg.norm(c, axis=1))
    if mean_c < 1e-12:
        raise InitializationError("camera centres coincide with the anchor; scale is unobservable")
    s = np.mean(D1) / mean_c
    curvature = 0.0
    for _ in range(max_iterations):
        b = s * c + a
        n = np.maximum(np.linalg.norm(b, axis=1), 1e-12)
        r = D1 - n
        J = -np.einsum("ij,ij->i", b, c) / n
        curvature = float(J @ J)
        if curvature < CURVATURE_TOL:
            raise InitializationError("scale is unobservable (vehicle nearly stationary)")
        step = -float(J @ r) / curvature
        s += step
        if abs(step) <= 1e-15 * max(abs(s), 1.0):
            break
    if not s > 0:
        raise InitializationError(f"scale estimate {s} is not positive")
    return float(s)


def apply_scale(m: MapState, s: float) -> MapState:
    """Scale keyframe body centres and landmarks about the origin; rotations are kept."""
    if not s > 0:
        raise ValueError("scale must be positive")
    for kf in m.keyframes.values():
        kf.pose = PoseSE3(kf.pose.rotation, kf.pose.translation * s)
    for j in m.landmarks:
        m.landmarks[j] = m.landmarks[j] * s
    return m


def camera_poses(poses, T_cb: PoseSE3) -> list:
    """World->camera poses of world->body poses."""
    return [compose(T_cb, X) for X in poses]
