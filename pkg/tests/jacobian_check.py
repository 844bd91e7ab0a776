"""Finite-difference oracle for the analytic Jacobians.

The residuals differenced here are an independent re-implementation of the
measurement model in extended precision (``np.longdouble``), so the oracle
shares no code with the package and its rounding noise stays well below the
1e-8 absolute floor used for small entries.
"""

import numpy as np

from vuwb.factors import range_jac_anchor, range_jac_pose, reproj_jac_landmark, reproj_jac_pose
from vuwb.liegeom import PoseSE3, Rotation
from vuwb.sensor_models import CameraIntrinsics, body_center

STEP = 1e-6
LD = np.longdouble


def _rotmat(q):
    w, x, y, z = q / np.sqrt(np.sum(q * q))
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                     [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                     [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]], dtype=LD)


def _exp(w):
    th = np.sqrt(np.sum(w * w))
    if th == 0:
        return np.eye(3, dtype=LD)
    k = w / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]], dtype=LD)
    return np.eye(3, dtype=LD) + np.sin(th) * Kx + (1 - np.cos(th)) * (Kx @ Kx)


def _perturbed(X, d):
    """Left perturbation: R' = exp(dw) R, t' = exp(dw) t + dt."""
    R = _rotmat(X.rotation.q.astype(LD))
    t = X.translation.astype(LD)
    E = _exp(d[3:])
    return E @ R, E @ t + d[:3]


def reproj_residual(R, t, T_cb, K, p_l, z):
    p_B = R @ p_l + t
    p_C = _rotmat(T_cb.rotation.q.astype(LD)) @ p_B + T_cb.translation.astype(LD)
    h = np.array([LD(K.fu) * p_C[0] / p_C[2] + LD(K.cu), LD(K.fv) * p_C[1] / p_C[2] + LD(K.cv)])
    return z - h


def range_residual(R, t, p_k, D):
    p_b = -(R.T @ t)
    return LD(D) - np.sqrt(np.sum((p_k - p_b) ** 2))


def central_diff(f, n, step=STEP):
    cols = []
    for i in range(n):
        d = np.zeros(n, dtype=LD)
        d[i] = LD(step)
        cols.append((np.atleast_1d(f(d)) - np.atleast_1d(f(-d))) / (2 * LD(step)))
    return np.column_stack(cols).astype(float)


def jacobian_error(analytic, numeric):
    """Max relative error; entries below 1e-3 are judged on an absolute 1e-8 scale."""
    a = np.asarray(analytic, dtype=float)
    err = np.abs(a - numeric)
    small = np.abs(a) < 1e-3
    rel = np.where(small, err / 1e-8 * 1e-5, err / np.where(small, 1.0, np.abs(a)))
    return float(rel.max())


def random_scene(rng):
    q = rng.normal(size=4)
    X = PoseSE3(Rotation(q), rng.uniform(-3, 3, 3))
    T_cb = PoseSE3(Rotation(rng.normal(size=4)), rng.uniform(-0.2, 0.2, 3))
    K = CameraIntrinsics(rng.uniform(300, 700), rng.uniform(300, 700), 320.0, 240.0, 640.0, 480.0)
    # landmark chosen by pixel and depth (it must be observable), then mapped back to world
    depth = rng.uniform(1, 10)
    p_C = np.array([(rng.uniform(0, K.width) - K.cu) / K.fu * depth,
                    (rng.uniform(0, K.height) - K.cv) / K.fv * depth, depth])
    p_B = T_cb.R.T @ (p_C - T_cb.translation)
    p_l = X.R.T @ (p_B - X.translation)
    direction = rng.normal(size=3)
    p_k = body_center(X) + direction / np.linalg.norm(direction) * rng.uniform(0.5, 30)
    return X, T_cb, K, p_l, p_k


def check_all(rng, n=1000):
    """Return the worst error for each of the four Jacobians over n scenes."""
    worst = dict(reproj_pose=0.0, reproj_landmark=0.0, range_pose=0.0, range_anchor=0.0)
    z = np.zeros(2, dtype=LD)
    for _ in range(n):
        X, T_cb, K, p_l, p_k = random_scene(rng)
        pl, pk = p_l.astype(LD), p_k.astype(LD)
        R0, t0 = _perturbed(X, np.zeros(6, dtype=LD))

        num = central_diff(lambda d: reproj_residual(*_perturbed(X, d), T_cb, K, pl, z), 6)
        worst["reproj_pose"] = max(worst["reproj_pose"], jacobian_error(reproj_jac_pose(X, T_cb, K, p_l), num))
        num = central_diff(lambda d: reproj_residual(R0, t0, T_cb, K, pl + d, z), 3)
        worst["reproj_landmark"] = max(worst["reproj_landmark"],
                                       jacobian_error(reproj_jac_landmark(X, T_cb, K, p_l), num))
        num = central_diff(lambda d: range_residual(*_perturbed(X, d), pk, 0.0), 6)
        worst["range_pose"] = max(worst["range_pose"], jacobian_error(range_jac_pose(X, p_k), num))
        num = central_diff(lambda d: range_residual(R0, t0, pk + d, 0.0), 3)
        worst["range_anchor"] = max(worst["range_anchor"], jacobian_error(range_jac_anchor(X, p_k), num))
    return worst
