"""Per-frame estimation: range association, motion-only BA and single-epoch fixes."""

from __future__ import annotations

import numpy as np

from ..errors import (DegenerateGeometryError, DivergenceError, InsufficientAnchorsError,
                      UnderConstrainedError)
from ..factors import RangeFactor
from ..liegeom import PoseSE3, Rotation, compose, inverse
from ..solver import Problem, SolverConfig, optimize

MIN_OBS = 4
MIN_OBS_WITH_RANGES = 1
MIN_RANGES_WITH_OBS = 3


class RangeIndex:
    """Per-anchor sorted view of a range stream.

    The default association window is half of each anchor's median
    measurement spacing; anchors with a single sample borrow the widest
    window seen on any anchor.
    """

    def __init__(self, ranges, window: float | None = None):
        ts = np.asarray(ranges.timestamp, dtype=float)
        if len(ts) > 1 and np.any(np.diff(ts) < 0):
            raise ValueError("range stream must be sorted by timestamp")
        self.by_anchor = {}
        ids = np.asarray(ranges.anchor_id)
        for a in dict.fromkeys(ids.tolist()):
            sel = ids == a
            self.by_anchor[a] = (ts[sel], np.asarray(ranges.range)[sel], np.asarray(ranges.sigma)[sel])
        self.windows = {}
        spans = {a: 0.5 * float(np.median(np.diff(v[0]))) for a, v in self.by_anchor.items() if len(v[0]) > 1}
        fallback = max(spans.values(), default=0.05)
        for a in self.by_anchor:
            self.windows[a] = window if window is not None else spans.get(a, fallback)

    def first_time(self, anchor_id) -> float:
        return float(self.by_anchor[anchor_id][0][0])

    def associate(self, t: float) -> dict:
        """anchor id -> (timestamp, D, sigma) of the measurement closest to ``t``."""
        out = {}
        for a, (ts, D, s) in self.by_anchor.items():
            i = int(np.searchsorted(ts, t))
            best = None
            if i > 0:
                best = i - 1
            if i < len(ts) and (best is None or ts[i] - t < t - ts[best]):
                best = i
            if best is not None and abs(ts[best] - t) <= self.windows[a]:
                out[a] = (float(ts[best]), float(D[best]), float(s[best]))
        return out


def associate_range(frame_timestamp: float, range_stream, window: float | None = None) -> dict:
    """Nearest measurement per anchor within the window; ties go to the earlier one."""
    index = range_stream if isinstance(range_stream, RangeIndex) else RangeIndex(range_stream, window)
    return index.associate(frame_timestamp)


def motion_only_ba(pose: PoseSE3, camera, T_cb, landmarks, lm_ids, z, sigma_px, anchors=None, ranges=None,
                   config: SolverConfig | None = None) -> tuple:
    """Refine a single pose against fixed landmarks and anchors.

    ``landmarks`` maps id -> position and ``anchors`` id -> position;
    ``ranges`` maps anchor id -> (D, sigma). Observations of unknown
    landmarks and ranges to unknown anchors are ignored. Returns
    ``(pose, report)``.
    """
    pb = Problem(camera, T_cb)
    pb.add_pose(0, pose)
    lm_ids = np.asarray(lm_ids, dtype=np.int64)
    sigma_px = np.broadcast_to(np.asarray(sigma_px, dtype=float), (len(lm_ids),))
    known = np.array([j in landmarks for j in lm_ids.tolist()], dtype=bool)
    for j in dict.fromkeys(lm_ids[known].tolist()):
        pb.add_landmark(j, landmarks[j], fixed=True)
    n_obs = int(known.sum())
    if n_obs:
        pb.add_reprojections(0, lm_ids[known], np.asarray(z, dtype=float).reshape(-1, 2)[known], sigma_px[known])
    n_rng = 0
    for a, (D, s) in (ranges or {}).items():
        if anchors is not None and a in anchors:
            pb.add_anchor(a, anchors[a], fixed=True)
            pb.factors.append(RangeFactor(0, a, D, s))
            n_rng += 1
    if not (n_obs >= MIN_OBS or (n_obs >= MIN_OBS_WITH_RANGES and n_rng >= MIN_RANGES_WITH_OBS)):
        raise UnderConstrainedError(f"{n_obs} observations and {n_rng} ranges are too few for a pose")
    pb.gauge_free = True
    report = optimize(pb, config)
    if report.final_cost > report.initial_cost:
        raise DivergenceError("motion-only BA increased the cost")
    return pb.poses[0], report


def _coplanar(P: np.ndarray, tol=1e-6) -> bool:
    c = P - P.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return len(s) < 3 or s[2] <= tol * max(s[0], 1e-12)


def uwb_only_fix(ranges: dict, anchors: dict, fixed_height: float | None = None,
                 max_iterations: int = 50) -> np.ndarray:
    """Multilateration by Gauss-Newton from the anchor centroid.

    ``ranges`` maps anchor id -> D (or (D, sigma)); only anchors present in
    ``anchors`` are used. With ``fixed_height`` the z coordinate is held at
    that value and three anchors suffice.
    """
    ids = [a for a in ranges if a in anchors]
    P = np.array([anchors[a] for a in ids], dtype=float).reshape(-1, 3)
    D = np.array([ranges[a][0] if isinstance(ranges[a], tuple) else ranges[a] for a in ids], dtype=float)
    if fixed_height is None:
        if len(ids) < 4 or _coplanar(P):
            raise InsufficientAnchorsError(f"need 4 non-coplanar anchors, got {len(ids)}")
        dims = 3
    else:
        if len(ids) < 3:
            raise InsufficientAnchorsError(f"need 3 anchors with a fixed height, got {len(ids)}")
        dims = 2
    p = P.mean(axis=0)
    if fixed_height is not None:
        p[2] = fixed_height
    for _ in range(max_iterations):
        diff = P - p
        d = np.linalg.norm(diff, axis=1)
        if np.any(d < 1e-12):
            d = np.maximum(d, 1e-12)
        r = D - d
        J = (diff / d[:, None])[:, :dims]   # dr/dp
        N = J.T @ J
        if np.linalg.cond(N) > 1e8:
            raise DegenerateGeometryError("anchor geometry is degenerate")
        step = -np.linalg.solve(N, J.T @ r)
        p[:dims] += step
        if np.linalg.norm(step) < 1e-13 * max(1.0, np.linalg.norm(p)):
            break
    return p


def bearing_rotation(p_body, world_points, pixels, camera, T_cb) -> Rotation:
    """World->body rotation aligning observed bearings with map directions.

    Solved in closed form (Kabsch); the camera offset is ignored, which is
    exact for a zero lever arm and a good initial guess otherwise.
    """
    f = np.column_stack([(pixels[:, 0] - camera.cu) / camera.fu, (pixels[:, 1] - camera.cv) / camera.fv,
                         np.ones(len(pixels))])
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    b = f @ T_cb.R   # camera bearings expressed in the body frame
    d = np.asarray(world_points, dtype=float) - p_body
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    U, _, Vt = np.linalg.svd(b.T @ d)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return Rotation.from_matrix(U @ S @ Vt)


def pnp_dlt(world_points, pixels, camera, T_cb) -> PoseSE3:
    """World->body pose from >= 6 known 2D-3D correspondences by linear DLT."""
    X = np.asarray(world_points, dtype=float)
    if len(X) < 6:
        raise UnderConstrainedError("DLT pose needs at least 6 correspondences")
    x = np.column_stack([(pixels[:, 0] - camera.cu) / camera.fu, (pixels[:, 1] - camera.cv) / camera.fv])
    mu = X.mean(axis=0)
    scale = np.sqrt(3) / max(np.mean(np.linalg.norm(X - mu, axis=1)), 1e-12)
    Xn = np.column_stack([(X - mu) * scale, np.ones(len(X))])
    A = np.zeros((2 * len(X), 12))
    A[0::2, 0:4] = Xn
    A[0::2, 8:12] = -x[:, :1] * Xn
    A[1::2, 4:8] = Xn
    A[1::2, 8:12] = -x[:, 1:] * Xn
    P = np.linalg.svd(A)[2][-1].reshape(3, 4)
    # undo the normalisation: P_world = P_norm @ [[s I, -s mu], [0, 1]]
    P = P @ np.vstack([np.column_stack([scale * np.eye(3), -scale * mu]), [0, 0, 0, 1]])
    if np.mean(np.column_stack([X, np.ones(len(X))]) @ P[2]) < 0:
        P = -P
    U, S, Vt = np.linalg.svd(P[:, :3])
    R = U @ Vt
    if np.linalg.det(R) < 0:
        raise DegenerateGeometryError("DLT produced a reflection")
    t = P[:, 3] / S.mean()
    T_cw = PoseSE3(Rotation.from_matrix(R), t)
    return compose(inverse(T_cb), T_cw)

