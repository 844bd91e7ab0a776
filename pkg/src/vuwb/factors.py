"""Reprojection and range residuals with analytic Jacobians, plus Huber weighting.

Residuals are ``measured - predicted``. Pose Jacobian columns follow the
tangent layout ``[dt; dw]`` of :func:`vuwb.liegeom.boxplus`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateRangeError
from .liegeom import PoseSE3, skew, skew_batch
from .sensor_models import CameraIntrinsics, body_center, pinhole_project, world_to_camera

RANGE_EPS = 1e-6
HUBER_DELTA_RANGE = 1.345
HUBER_DELTA_REPROJ = 2.447


@dataclass(frozen=True)
class ReprojectionFactor:
    keyframe_id: int
    landmark_id: int
    z: tuple
    sigma_rp: float = 1.0

    def __post_init__(self):
        if not self.sigma_rp > 0:
            raise ValueError("sigma_rp must be positive")


@dataclass(frozen=True)
class RangeFactor:
    keyframe_id: int
    anchor_id: int
    D: float
    sigma_uwb: float = 0.01

    def __post_init__(self):
        if self.D < 0:
            raise ValueError("range must be non-negative")
        if not self.sigma_uwb > 0:
            raise ValueError("sigma_uwb must be positive")


@dataclass(frozen=True)
class HuberLoss:
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber delta must be positive")

    def __call__(self, r2):
        return huber_weight(r2, self.delta)


def huber_weight(r2, delta: float):
    """Return ``(rho, w)`` for a squared whitened residual.

    ``rho`` is quadratic up to ``delta`` and linear beyond; ``w = rho'(r2)``
    is the IRLS reweighting factor. Works elementwise on arrays.
    """
    r2 = np.asarray(r2, dtype=float)
    r = np.sqrt(r2)
    inlier = r <= delta
    rho = np.where(inlier, r2, 2.0 * delta * r - delta * delta)
    w = np.where(inlier, 1.0, delta / np.where(inlier, 1.0, r))
    if rho.ndim == 0:
        return float(rho), float(w)
    return rho, w


def _projection_derivative(p_C, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = p_C
    return np.array([[K.fu / z, 0.0, -K.fu * x / (z * z)],
                     [0.0, K.fv / z, -K.fv * y / (z * z)]])


def _camera_point(X_v, T_cb, p_l):
    p_C = world_to_camera(X_v, T_cb, p_l)
    if p_C[2] <= 0:
        raise BehindCameraError(f"landmark at depth {p_C[2]}")
    return p_C


def reproj_error(X_v: PoseSE3, T_cb: PoseSE3, K: CameraIntrinsics, p_l, z) -> np.ndarray:
    return np.asarray(z, dtype=float) - pinhole_project(world_to_camera(X_v, T_cb, p_l), K)


def reproj_jac_pose(X_v: PoseSE3, T_cb: PoseSE3, K: CameraIntrinsics, p_l) -> np.ndarray:
    p_C = _camera_point(X_v, T_cb, p_l)
    p_B = X_v.R @ np.asarray(p_l, dtype=float) + X_v.translation
    A = _projection_derivative(p_C, K) @ T_cb.R
    return -A @ np.hstack([np.eye(3), -skew(p_B)])


def reproj_jac_landmark(X_v: PoseSE3, T_cb: PoseSE3, K: CameraIntrinsics, p_l) -> np.ndarray:
    p_C = _camera_point(X_v, T_cb, p_l)
    return -_projection_derivative(p_C, K) @ T_cb.R @ X_v.R


def range_error(X_v: PoseSE3, p_k, D: float) -> float:
    return float(D - np.linalg.norm(np.asarray(p_k, dtype=float) - body_center(X_v)))


def _range_direction(X_v, p_k):
    d = np.asarray(p_k, dtype=float) - body_center(X_v)
    n = np.linalg.norm(d)
    if n <= RANGE_EPS:
        raise DegenerateRangeError(f"anchor and tag coincide (distance {n:.3g} m)")
    return d / n


def range_jac_pose(X_v: PoseSE3, p_k) -> np.ndarray:
    # body centre moves by -R^T dt and is unaffected by dw to first order
    u = _range_direction(X_v, p_k)
    return np.concatenate([-(X_v.R @ u), np.zeros(3)]).reshape(1, 6)


def range_jac_anchor(X_v: PoseSE3, p_k) -> np.ndarray:
    return -_range_direction(X_v, p_k).reshape(1, 3)


# ---------------------------------------------------------------------------
# batched evaluation used by the solver
# ---------------------------------------------------------------------------

def reproj_batch(R_bw, t_bw, p_l, z, K: CameraIntrinsics, T_cb: PoseSE3, jacobians=True):
    """Residuals for F observations at once.

    Returns ``(e, J_pose, J_landmark, valid)``; invalid rows (non-positive
    depth) carry zero residual and zero Jacobians.
    """
    p_B = np.einsum("fij,fj->fi", R_bw, p_l) + t_bw
    R_cb = T_cb.R
    p_C = p_B @ R_cb.T + T_cb.translation
    Z = p_C[:, 2]
    valid = Z > 1e-9
    Zs = np.where(valid, Z, 1.0)
    X, Y = p_C[:, 0], p_C[:, 1]
    h = np.column_stack([K.fu * X / Zs + K.cu, K.fv * Y / Zs + K.cv])
    e = np.where(valid[:, None], z - h, 0.0)
    if not jacobians:
        return e, None, None, valid
    F = len(Z)
    P = np.zeros((F, 2, 3))
    P[:, 0, 0] = K.fu / Zs
    P[:, 0, 2] = -K.fu * X / (Zs * Zs)
    P[:, 1, 1] = K.fv / Zs
    P[:, 1, 2] = -K.fv * Y / (Zs * Zs)
    P[~valid] = 0.0
    A = P @ R_cb
    J_pose = np.concatenate([-A, A @ skew_batch(p_B)], axis=2)
    J_lm = -A @ R_bw
    return e, J_pose, J_lm, valid


def range_batch(R_bw, t_bw, p_k, D, jacobians=True):
    """Range residuals for F measurements; rows within ``RANGE_EPS`` are invalid."""
    pb = -np.einsum("fji,fj->fi", R_bw, t_bw)
    d = p_k - pb
    n = np.linalg.norm(d, axis=1)
    valid = n > RANGE_EPS
    e = np.where(valid, D - n, 0.0)
    if not jacobians:
        return e, None, None, valid
    u = d / np.where(valid, n, 1.0)[:, None]
    u[~valid] = 0.0
    J_pose = np.zeros((len(n), 1, 6))
    J_pose[:, 0, :3] = -np.einsum("fij,fj->fi", R_bw, u)
    J_an = -u[:, None, :]
    return e, J_pose, J_an, valid
