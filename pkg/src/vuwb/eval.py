"""Trajectory and anchor accuracy: Umeyama alignment, ATE, anchor errors, scale error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AnchorMismatchError, CollinearError, InsufficientPairsError, NoOverlapError
from .liegeom import Rotation

MATCH_TOLERANCE = 0.02


@dataclass(frozen=True)
class AlignmentResult:
    """Maps estimate points onto ground truth: ``gt ~ s * R @ est + t``."""
    s: float
    R: Rotation
    t: np.ndarray
    count: int

    def apply(self, points) -> np.ndarray:
        return self.s * np.asarray(points, dtype=float) @ self.R.matrix.T + self.t

    def rigid(self) -> AlignmentResult:
        return AlignmentResult(1.0, self.R, self.t, self.count)


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    rmse: float
    min: float
    max: float
    median: float
    count: int

    @classmethod
    def from_errors(cls, e) -> ErrorStats:
        e = np.asarray(e, dtype=float)
        if len(e) == 0:
            raise NoOverlapError("no errors to summarise")
        return cls(float(e.mean()), float(np.sqrt(np.mean(e * e))), float(e.min()), float(e.max()),
                   float(np.median(e)), len(e))

    def as_dict(self) -> dict:
        return {"mean": self.mean, "rmse": self.rmse, "min": self.min, "max": self.max,
                "median": self.median, "count": self.count}


def match_timestamps(t_est, t_gt, tol: float = MATCH_TOLERANCE) -> tuple:
    """Index pairs ``(i_est, i_gt)`` of nearest neighbours within ``tol``.

    Estimates are processed in time order and each ground-truth sample is
    used at most once; when the nearest one is taken the estimate stays
    unmatched.
    """
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    order = np.argsort(t_gt, kind="stable")
    srt = t_gt[order]
    used = np.zeros(len(t_gt), dtype=bool)
    ie, ig = [], []
    if len(srt):
        for i in np.argsort(t_est, kind="stable"):
            k = int(np.searchsorted(srt, t_est[i]))
            cands = [c for c in (k - 1, k) if 0 <= c < len(srt)]
            c = min(cands, key=lambda c: (abs(srt[c] - t_est[i]), c))
            if abs(srt[c] - t_est[i]) <= tol and not used[order[c]]:
                used[order[c]] = True
                ie.append(int(i))
                ig.append(int(order[c]))
    if not ie:
        raise NoOverlapError("no estimate and ground-truth timestamps match")
    return np.array(ie, dtype=int), np.array(ig, dtype=int)


def umeyama_align(est, gt, with_scale: bool = True) -> AlignmentResult:
    """Least-squares similarity (or rigid) transform taking ``est`` onto ``gt``."""
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(est) != len(gt):
        raise ValueError("point sets differ in length")
    if len(est) < 3:
        raise InsufficientPairsError(f"alignment needs 3 pairs, got {len(est)}")
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    de, dg = est - mu_e, gt - mu_g
    cov = dg.T @ de / len(est)
    U, d, Vt = np.linalg.svd(cov)
    spread = np.linalg.svd(de, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1e-300):
        raise CollinearError("correspondences are collinear")
    S = np.diag([1.0, 1.0, 1.0 if np.linalg.det(U) * np.linalg.det(Vt) > 0 else -1.0])
    R = U @ S @ Vt
    s = float(np.trace(np.diag(d) @ S) / (np.sum(de * de) / len(est))) if with_scale else 1.0
    t = mu_g - s * R @ mu_e
    return AlignmentResult(s, Rotation.from_matrix(R), t, len(est))


def matched_positions(est_traj, gt_traj, tol: float = MATCH_TOLERANCE) -> tuple:
    ie, ig = match_timestamps(est_traj.timestamps, gt_traj.timestamps, tol)
    return est_traj.positions()[ie], gt_traj.positions()[ig], est_traj.timestamps[ie]


def align_trajectories(est_traj, gt_traj, with_scale: bool = False) -> AlignmentResult:
    est, gt, _ = matched_positions(est_traj, gt_traj)
    return umeyama_align(est, gt, with_scale)


def translation_errors(est_traj, gt_traj, alignment: AlignmentResult | None = None) -> tuple:
    """``(timestamps, errors)`` per matched pair; rigid alignment is fitted if none is given."""
    est, gt, ts = matched_positions(est_traj, gt_traj)
    if alignment is None:
        alignment = umeyama_align(est, gt, with_scale=False)
    return ts, np.linalg.norm(gt - alignment.apply(est), axis=1)


def ate(est_traj, gt_traj, alignment: AlignmentResult | None = None) -> ErrorStats:
    return ErrorStats.from_errors(translation_errors(est_traj, gt_traj, alignment)[1])


def anchor_errors(est: dict, gt: dict, alignment: AlignmentResult | None = None) -> tuple:
    """``({id: error}, mean)`` after applying the trajectory's rigid alignment."""
    if set(est) != set(gt):
        raise AnchorMismatchError(f"anchor ids differ: {sorted(set(est) ^ set(gt))}")
    if not est:
        raise AnchorMismatchError("no anchors to compare")
    al = (alignment or AlignmentResult(1.0, Rotation.identity(), np.zeros(3), 0)).rigid()
    per = {k: float(np.linalg.norm(np.asarray(gt[k], dtype=float) - al.apply(est[k]))) for k in sorted(est)}
    return per, float(np.mean(list(per.values())))


def estimate_scale(est_traj, gt_traj) -> float:
    """Size of the estimate relative to the truth: ``1 / s`` of the similarity alignment."""
    return 1.0 / align_trajectories(est_traj, gt_traj, with_scale=True).s


def scale_error(est_traj, gt_traj) -> float:
    """Residual scale error ``|estimate_scale - 1|``."""
    return abs(estimate_scale(est_traj, gt_traj) - 1.0)


def metrics(est_traj, gt_traj, est_anchors: dict | None = None, gt_anchors: dict | None = None) -> dict:
    """Metrics document: 6DoF ATE, anchor errors, 7DoF scale error, alignment."""
    al = align_trajectories(est_traj, gt_traj, with_scale=False)
    stats = ate(est_traj, gt_traj, al)
    out = {"ate": stats.as_dict()}
    if est_anchors is not None and gt_anchors is not None:
        per, mean = anchor_errors(est_anchors, gt_anchors, al)
        out["anchors"] = {"per_id": {str(k): v for k, v in per.items()}, "mean": mean, "count": len(per)}
    out["scale_error"] = scale_error(est_traj, gt_traj)
    out["alignment"] = {"s": al.s, "R": [float(x) for x in al.R.q], "t": [float(x) for x in al.t]}
    out["counts"] = {"estimate": len(est_traj), "ground_truth": len(gt_traj), "matched": stats.count}
    return out
