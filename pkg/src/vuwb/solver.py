"""Robust Gauss-Newton / Levenberg-Marquardt over poses, landmarks and anchors.

Variables are compiled into flat arrays once per :func:`optimize` call.
Poses and anchors form the dense "camera" block of the normal equations;
landmarks form a 3x3 block-diagonal part that is eliminated with a Schur
complement before the dense solve.

Per-iteration debug log lines (logger ``vuwb.solver``) have the form::

    iter=<k> cost=<float> lambda=<float> step=<float> accepted=<0|1>
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import ConfigError, GaugeError
from .factors import (HUBER_DELTA_RANGE, HUBER_DELTA_REPROJ, RangeFactor, ReprojectionFactor,
                      huber_weight, range_batch, reproj_batch)
from .liegeom import PoseSE3, Rotation, boxplus_batch, quat_to_matrix
from .sensor_models import CameraIntrinsics

log = logging.getLogger("vuwb.solver")

# camera-landmark coupling is kept dense up to this many entries, sparse beyond
DENSE_COUPLING_LIMIT = 2.5e7


@dataclass
class SolverConfig:
    max_iterations: int = 20
    rel_tol: float = 1e-6
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    step_tol: float = 1e-8
    max_lambda: float = 1e10
    huber_reproj: float = HUBER_DELTA_REPROJ
    huber_range: float = HUBER_DELTA_RANGE
    robust: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        for name in ("rel_tol", "lambda0", "step_tol", "huber_reproj", "huber_range"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not (self.lambda_up > 1 and self.lambda_down > 1):
            raise ConfigError("lambda scale factors must exceed 1")


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    cost_trace: list = field(default_factory=list)
    n_invalid: int = 0

    def as_dict(self) -> dict:
        return {"initial_cost": self.initial_cost, "final_cost": self.final_cost,
                "iterations": self.iterations, "termination": self.termination,
                "n_invalid": self.n_invalid}


@dataclass
class Problem:
    camera: CameraIntrinsics
    T_cb: PoseSE3
    poses: dict = field(default_factory=dict)
    landmarks: dict = field(default_factory=dict)
    anchors: dict = field(default_factory=dict)
    factors: list = field(default_factory=list)
    fixed_poses: set = field(default_factory=set)
    fixed_landmarks: set = field(default_factory=set)
    fixed_anchors: set = field(default_factory=set)
    gauge_free: bool = False
    rp_blocks: list = field(default_factory=list)   # (pose ids, landmark ids, z (n, 2), sigma (n,))
    rg_blocks: list = field(default_factory=list)   # (pose ids, anchor ids, D (n,), sigma (n,))

    def add_reprojections(self, pose_ids, landmark_ids, z, sigma):
        """Append reprojection factors given as arrays (integer ids)."""
        n = len(landmark_ids)
        self.rp_blocks.append((np.broadcast_to(np.asarray(pose_ids, dtype=np.int64), (n,)),
                               np.asarray(landmark_ids, dtype=np.int64),
                               np.asarray(z, dtype=float).reshape(n, 2),
                               np.broadcast_to(np.asarray(sigma, dtype=float), (n,))))

    def add_ranges(self, pose_ids, anchor_ids, D, sigma):
        """Append range factors given as arrays (integer ids)."""
        n = len(anchor_ids)
        self.rg_blocks.append((np.broadcast_to(np.asarray(pose_ids, dtype=np.int64), (n,)),
                               np.asarray(anchor_ids, dtype=np.int64),
                               np.asarray(D, dtype=float).reshape(n),
                               np.broadcast_to(np.asarray(sigma, dtype=float), (n,))))

    def add_pose(self, key, pose: PoseSE3, fixed=False):
        self.poses[key] = pose
        if fixed:
            self.fixed_poses.add(key)

    def add_landmark(self, key, p, fixed=False):
        self.landmarks[key] = np.asarray(p, dtype=float)
        if fixed:
            self.fixed_landmarks.add(key)

    def add_anchor(self, key, p, fixed=False):
        self.anchors[key] = np.asarray(p, dtype=float)
        if fixed:
            self.fixed_anchors.add(key)

    def validate(self):
        for blocks, what, keys in ((self.rp_blocks, "landmark", self.landmarks),
                                   (self.rg_blocks, "anchor", self.anchors)):
            if blocks:
                _lookup(list(self.poses), np.concatenate([b[0] for b in blocks]), "pose")
                _lookup(list(keys), np.concatenate([b[1] for b in blocks]), what)
        for f in self.factors:
            if f.keyframe_id not in self.poses:
                raise KeyError(f"factor references unknown pose {f.keyframe_id}")
            if isinstance(f, ReprojectionFactor):
                if f.landmark_id not in self.landmarks:
                    raise KeyError(f"factor references unknown landmark {f.landmark_id}")
            elif isinstance(f, RangeFactor):
                if f.anchor_id not in self.anchors:
                    raise KeyError(f"factor references unknown anchor {f.anchor_id}")
            else:
                raise TypeError(f"unsupported factor {type(f).__name__}")
        has_fixed = bool(self.fixed_poses & self.poses.keys()
                         or self.fixed_landmarks & self.landmarks.keys()
                         or self.fixed_anchors & self.anchors.keys())
        if not has_fixed and not self.gauge_free:
            raise GaugeError("no fixed variable; set gauge_free=True to override")


def _lookup(keys, ids, what) -> np.ndarray:
    """Positions of integer ``ids`` within ``keys``; KeyError for unknown ids."""
    ids = np.asarray(ids)
    if not len(ids):
        return np.zeros(0, dtype=int)
    try:
        arr = np.asarray(keys, dtype=np.int64)
    except (TypeError, ValueError):
        pos = {k: i for i, k in enumerate(keys)}
        try:
            return np.array([pos[k] for k in ids.tolist()], dtype=int)
        except KeyError as exc:
            raise KeyError(f"factor references unknown {what} {exc.args[0]}") from None
    order = np.argsort(arr, kind="stable")
    srt = arr[order]
    loc = np.searchsorted(srt, ids)
    loc = np.minimum(loc, max(len(srt) - 1, 0))
    bad = (len(srt) == 0) | (srt[loc] != ids) if len(srt) else np.ones(len(ids), dtype=bool)
    if np.any(bad):
        raise KeyError(f"factor references unknown {what} {ids[np.argmax(bad)]}")
    return order[loc]


class _Compiled:
    """Flat-array view of a :class:`Problem`."""

    def __init__(self, problem: Problem):
        self.problem = problem
        pose_ids = list(problem.poses)
        lm_ids = list(problem.landmarks)
        an_ids = list(problem.anchors)
        self.pose_ids, self.lm_ids, self.an_ids = pose_ids, lm_ids, an_ids
        pidx = {k: i for i, k in enumerate(pose_ids)}
        lidx = {k: i for i, k in enumerate(lm_ids)}
        aidx = {k: i for i, k in enumerate(an_ids)}

        self.q = np.array([problem.poses[k].rotation.q for k in pose_ids]).reshape(-1, 4)
        self.t = np.array([problem.poses[k].translation for k in pose_ids]).reshape(-1, 3)
        self.lm = np.array([problem.landmarks[k] for k in lm_ids], dtype=float).reshape(-1, 3)
        self.an = np.array([problem.anchors[k] for k in an_ids], dtype=float).reshape(-1, 3)

        self.pose_free = np.array([k not in problem.fixed_poses for k in pose_ids], dtype=bool)
        self.lm_free = np.array([k not in problem.fixed_landmarks for k in lm_ids], dtype=bool)
        self.an_free = np.array([k not in problem.fixed_anchors for k in an_ids], dtype=bool)

        npf = int(self.pose_free.sum())
        naf = int(self.an_free.sum())
        self.pose_col = np.full(len(pose_ids), -1)
        self.pose_col[self.pose_free] = 6 * np.arange(npf)
        self.an_col = np.full(len(an_ids), -1)
        self.an_col[self.an_free] = 6 * npf + 3 * np.arange(naf)
        self.lm_slot = np.full(len(lm_ids), -1)
        self.lm_slot[self.lm_free] = np.arange(int(self.lm_free.sum()))
        self.nc = 6 * npf + 3 * naf
        self.nl = int(self.lm_free.sum())

        rp = [f for f in problem.factors if isinstance(f, ReprojectionFactor)]
        rg = [f for f in problem.factors if isinstance(f, RangeFactor)]
        rp_pose = [np.array([pidx[f.keyframe_id] for f in rp], dtype=int)]
        rp_lm = [np.array([lidx[f.landmark_id] for f in rp], dtype=int)]
        rp_z = [np.array([f.z for f in rp], dtype=float).reshape(-1, 2)]
        rp_sigma = [np.array([f.sigma_rp for f in rp], dtype=float)]
        if problem.rp_blocks:
            ids, lms, z, sig = (np.concatenate(v) for v in zip(*problem.rp_blocks))
            rp_pose.append(_lookup(pose_ids, ids, "pose"))
            rp_lm.append(_lookup(lm_ids, lms, "landmark"))
            rp_z.append(z)
            rp_sigma.append(sig)
        rg_pose = [np.array([pidx[f.keyframe_id] for f in rg], dtype=int)]
        rg_an = [np.array([aidx[f.anchor_id] for f in rg], dtype=int)]
        rg_D = [np.array([f.D for f in rg], dtype=float)]
        rg_sigma = [np.array([f.sigma_uwb for f in rg], dtype=float)]
        if problem.rg_blocks:
            ids, ans, D, sig = (np.concatenate(v) for v in zip(*problem.rg_blocks))
            rg_pose.append(_lookup(pose_ids, ids, "pose"))
            rg_an.append(_lookup(an_ids, ans, "anchor"))
            rg_D.append(D)
            rg_sigma.append(sig)
        self.rp_pose = np.concatenate(rp_pose).astype(int)
        self.rp_lm = np.concatenate(rp_lm).astype(int)
        self.rp_z = np.concatenate(rp_z)
        self.rp_sigma = np.concatenate(rp_sigma)
        self.rg_pose = np.concatenate(rg_pose).astype(int)
        self.rg_an = np.concatenate(rg_an).astype(int)
        self.rg_D = np.concatenate(rg_D)
        self.rg_sigma = np.concatenate(rg_sigma)
        if np.any(self.rp_sigma <= 0) or np.any(self.rg_sigma <= 0):
            raise ValueError("factor sigmas must be positive")

    def state(self):
        return self.q.copy(), self.t.copy(), self.lm.copy(), self.an.copy()

    def restore(self, s):
        self.q, self.t, self.lm, self.an = (a.copy() for a in s)

    def write_back(self):
        pb = self.problem
        for i, k in enumerate(self.pose_ids):
            if self.pose_free[i]:
                pb.poses[k] = PoseSE3(Rotation(self.q[i]), self.t[i].copy())
        for i, k in enumerate(self.lm_ids):
            if self.lm_free[i]:
                pb.landmarks[k] = self.lm[i].copy()
        for i, k in enumerate(self.an_ids):
            if self.an_free[i]:
                pb.anchors[k] = self.an[i].copy()


def _evaluate(c: _Compiled, cfg: SolverConfig, jacobians: bool):
    R = quat_to_matrix(c.q) if len(c.q) else np.zeros((0, 3, 3))
    pb = c.problem
    out = {}
    cost = 0.0
    n_invalid = 0
    if len(c.rp_pose):
        e, Jp, Jl, valid = reproj_batch(R[c.rp_pose], c.t[c.rp_pose], c.lm[c.rp_lm], c.rp_z,
                                        pb.camera, pb.T_cb, jacobians)
        r2 = np.einsum("fi,fi->f", e, e) / c.rp_sigma ** 2
        if cfg.robust:
            rho, w = huber_weight(r2, cfg.huber_reproj)
        else:
            rho, w = r2, np.ones_like(r2)
        rho = np.where(valid, rho, 0.0)
        cost += float(rho.sum())
        n_invalid += int((~valid).sum())
        out["rp"] = (e, Jp, Jl, np.where(valid, w, 0.0) / c.rp_sigma ** 2)
    if len(c.rg_pose):
        e, Jp, Ja, valid = range_batch(R[c.rg_pose], c.t[c.rg_pose], c.an[c.rg_an], c.rg_D, jacobians)
        r2 = e * e / c.rg_sigma ** 2
        if cfg.robust:
            rho, w = huber_weight(r2, cfg.huber_range)
        else:
            rho, w = r2, np.ones_like(r2)
        rho = np.where(valid, rho, 0.0)
        cost += float(rho.sum())
        n_invalid += int((~valid).sum())
        out["rg"] = (e[:, None], Jp, Ja, np.where(valid, w, 0.0) / c.rg_sigma ** 2)
    return cost, n_invalid, out


def _block_index(r0, c0, nr, nc_, stride):
    """Flat indices of an (nr x nc_) block at rows r0, cols c0 of a square matrix."""
    rr = r0[:, None, None] + np.arange(nr)[None, :, None]
    cc = c0[:, None, None] + np.arange(nc_)[None, None, :]
    return (rr * stride + cc).ravel()


class _System:
    """Normal equations split into camera block, landmark blocks and coupling."""

    def __init__(self, c: _Compiled, terms: dict):
        nc, nl = c.nc, c.nl
        self.nc, self.nl = nc, nl
        hcc = np.zeros(nc * nc)
        bc = np.zeros(nc)
        hll = np.zeros((nl, 3, 3))
        bl = np.zeros((nl, 3))
        rows, cols, vals = [], [], []

        if "rp" in terms:
            e, Jp, Jl, W = terms["rp"]
            pcol = c.pose_col[c.rp_pose]
            lslot = c.lm_slot[c.rp_lm]
            WJp = Jp * W[:, None, None]
            WJl = Jl * W[:, None, None]
            fp = pcol >= 0
            if fp.any():
                Hpp = WJp[fp].transpose(0, 2, 1) @ Jp[fp]
                hcc += np.bincount(_block_index(pcol[fp], pcol[fp], 6, 6, nc), Hpp.ravel(), nc * nc)
                bc += np.bincount((pcol[fp][:, None] + np.arange(6)).ravel(),
                                  (WJp[fp].transpose(0, 2, 1) @ e[fp][:, :, None])[:, :, 0].ravel(), nc)
            fl = lslot >= 0
            if fl.any():
                Hll = WJl[fl].transpose(0, 2, 1) @ Jl[fl]
                hll += np.bincount((lslot[fl][:, None] * 9 + np.arange(9)).ravel(),
                                   Hll.reshape(-1), nl * 9).reshape(nl, 3, 3)
                gl = (WJl[fl].transpose(0, 2, 1) @ e[fl][:, :, None])[:, :, 0]
                bl += np.bincount((lslot[fl][:, None] * 3 + np.arange(3)).ravel(), gl.ravel(), nl * 3).reshape(nl, 3)
            both = fp & fl
            if both.any():
                Hpl = WJp[both].transpose(0, 2, 1) @ Jl[both]
                rows.append(np.repeat(pcol[both][:, None] + np.arange(6), 3, axis=1).ravel())
                cols.append(np.tile(3 * lslot[both][:, None] + np.arange(3), (1, 6)).ravel())
                vals.append(Hpl.ravel())

        if "rg" in terms:
            e, Jp, Ja, W = terms["rg"]
            pcol = c.pose_col[c.rg_pose]
            acol = c.an_col[c.rg_an]
            jp = Jp[:, 0, :] * 1.0
            ja = Ja[:, 0, :] * 1.0
            we = W * e[:, 0]
            fp = pcol >= 0
            fa = acol >= 0
            if fp.any():
                Hpp = np.einsum("fi,fj->fij", jp[fp] * W[fp, None], jp[fp])
                hcc += np.bincount(_block_index(pcol[fp], pcol[fp], 6, 6, nc), Hpp.ravel(), nc * nc)
                bc += np.bincount((pcol[fp][:, None] + np.arange(6)).ravel(),
                                  (jp[fp] * we[fp, None]).ravel(), nc)
            if fa.any():
                Haa = np.einsum("fi,fj->fij", ja[fa] * W[fa, None], ja[fa])
                hcc += np.bincount(_block_index(acol[fa], acol[fa], 3, 3, nc), Haa.ravel(), nc * nc)
                bc += np.bincount((acol[fa][:, None] + np.arange(3)).ravel(),
                                  (ja[fa] * we[fa, None]).ravel(), nc)
            both = fp & fa
            if both.any():
                Hpa = np.einsum("fi,fj->fij", jp[both] * W[both, None], ja[both])
                hcc += np.bincount(_block_index(pcol[both], acol[both], 6, 3, nc), Hpa.ravel(), nc * nc)
                hcc += np.bincount(_block_index(acol[both], pcol[both], 3, 6, nc),
                                   Hpa.transpose(0, 2, 1).ravel(), nc * nc)

        self.Hcc = hcc.reshape(nc, nc)
        self.bc = bc
        self.Hll = hll
        self.bl = bl
        self.dense_coupling = nc * 3 * nl <= DENSE_COUPLING_LIMIT
        if self.dense_coupling:
            hcl = np.zeros(nc * 3 * nl)
            if rows:
                hcl += np.bincount(np.concatenate(rows) * (3 * nl) + np.concatenate(cols),
                                   np.concatenate(vals), nc * 3 * nl)
            self.Hcl = hcl.reshape(nc, 3 * nl)
        elif rows:
            self.Hcl = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                     shape=(nc, 3 * nl))
        else:
            self.Hcl = sp.csr_matrix((nc, 3 * nl))

    def dense(self):
        """Full (H, b) over ``[camera block, landmarks]``."""
        n = self.nc + 3 * self.nl
        H = np.zeros((n, n))
        H[:self.nc, :self.nc] = self.Hcc
        Hcl = self.Hcl if self.dense_coupling else self.Hcl.toarray()
        H[:self.nc, self.nc:] = Hcl
        H[self.nc:, :self.nc] = Hcl.T
        for i in range(self.nl):
            H[self.nc + 3 * i:self.nc + 3 * i + 3, self.nc + 3 * i:self.nc + 3 * i + 3] = self.Hll[i]
        return H, np.concatenate([self.bc, self.bl.ravel()])

    def solve(self, lam: float):
        """Solve the damped system ``(H + lam * diag(H)) dx = -b``; None on failure."""
        nc, nl = self.nc, self.nl
        dc = np.diag(self.Hcc)
        Hcc = self.Hcc + np.diag(lam * np.maximum(dc, 1e-9))
        dl = np.diagonal(self.Hll, axis1=1, axis2=2)
        Hll = self.Hll.copy()
        idx = np.arange(3)
        Hll[:, idx, idx] += lam * np.maximum(dl, 1e-9)
        if nl:
            try:
                Hll_inv = np.linalg.inv(Hll)
            except np.linalg.LinAlgError:
                return None
            if self.dense_coupling:
                Y = (self.Hcl.reshape(nc, nl, 3).transpose(1, 0, 2) @ Hll_inv).transpose(1, 0, 2).reshape(nc, 3 * nl)
                S = Hcc - Y @ self.Hcl.T
            else:
                rr = (3 * np.arange(nl))[:, None, None] + idx[None, :, None]
                cc = (3 * np.arange(nl))[:, None, None] + idx[None, None, :]
                rr, cc = np.broadcast_arrays(rr, cc)
                Dinv = sp.csr_matrix((Hll_inv.ravel(), (rr.ravel(), cc.ravel())), shape=(3 * nl, 3 * nl))
                Y = self.Hcl @ Dinv
                S = Hcc - (Y @ self.Hcl.T).toarray()
            rhs = -(self.bc - Y @ self.bl.ravel()) if nc else self.bc
        else:
            S = Hcc
            rhs = -self.bc
        if nc:
            try:
                cf = scipy.linalg.cho_factor(S, check_finite=False)
                dcam = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                return None
            if not np.all(np.isfinite(dcam)):
                return None
        else:
            dcam = np.zeros(0)
        if nl:
            g = self.bl + (self.Hcl.T @ dcam).reshape(nl, 3)
            dlm = -np.einsum("nij,nj->ni", Hll_inv, g)
        else:
            dlm = np.zeros((0, 3))
        return dcam, dlm


def _apply(c: _Compiled, dcam: np.ndarray, dlm: np.ndarray):
    fp = c.pose_free
    if fp.any():
        cols = c.pose_col[fp]
        delta = dcam[cols[:, None] + np.arange(6)]
        c.q[fp], c.t[fp] = boxplus_batch(c.q[fp], c.t[fp], delta)
    fa = c.an_free
    if fa.any():
        cols = c.an_col[fa]
        c.an[fa] = c.an[fa] + dcam[cols[:, None] + np.arange(3)]
    fl = c.lm_free
    if fl.any():
        c.lm[fl] = c.lm[fl] + dlm


def total_cost(problem: Problem, config: SolverConfig | None = None) -> float:
    cfg = config or SolverConfig()
    cost, _, _ = _evaluate(_Compiled(problem), cfg, jacobians=False)
    return cost


def count_invalid(problem: Problem, config: SolverConfig | None = None) -> int:
    cfg = config or SolverConfig()
    return _evaluate(_Compiled(problem), cfg, jacobians=False)[1]


def linearize(problem: Problem, config: SolverConfig | None = None):
    """Dense normal equations ``(H, b)`` over the free variables.

    Column order: free poses (6 each, ``[dt; dw]``), free anchors (3 each),
    free landmarks (3 each), each group in insertion order.
    """
    cfg = config or SolverConfig()
    c = _Compiled(problem)
    _, _, terms = _evaluate(c, cfg, jacobians=True)
    return _System(c, terms).dense()


def optimize(problem: Problem, config: SolverConfig | None = None) -> SolveReport:
    """Minimise the robust cost in place; returns a :class:`SolveReport`.

    Rejected steps restore the saved variable arrays, so the problem is
    always left at the last accepted state.
    """
    cfg = config or SolverConfig()
    problem.validate()
    c = _Compiled(problem)
    cost, n_inv, terms = _evaluate(c, cfg, jacobians=True)
    report = SolveReport(cost, cost, 0, "converged", [cost], n_inv)
    if c.nc + c.nl == 0 or cost == 0.0:
        return report
    lam = cfg.lambda0
    termination = "max-iter"
    for it in range(cfg.max_iterations):
        report.iterations = it + 1
        system = _System(c, terms)
        saved = c.state()
        accepted = False
        while True:
            sol = system.solve(lam)
            if sol is None:
                lam *= cfg.lambda_up
                if lam > cfg.max_lambda:
                    termination = "solve-failed"
                    break
                continue
            dcam, dlm = sol
            step = float(np.sqrt(dcam @ dcam + np.sum(dlm * dlm)))
            if step < cfg.step_tol:
                termination = "converged"
                break
            _apply(c, dcam, dlm)
            new_cost, new_inv, new_terms = _evaluate(c, cfg, jacobians=True)
            ok = new_cost < cost and new_inv <= n_inv
            log.debug("iter=%d cost=%.17g lambda=%.3g step=%.3g accepted=%d", it, new_cost, lam, step, ok)
            if ok:
                accepted = True
                lam = max(lam / cfg.lambda_down, 1e-12)
                break
            c.restore(saved)
            lam *= cfg.lambda_up
            if lam > cfg.max_lambda:
                termination = "stalled"
                break
        if not accepted:
            break
        rel = (cost - new_cost) / cost
        cost, n_inv, terms = new_cost, new_inv, new_terms
        report.cost_trace.append(cost)
        if cost == 0.0 or rel < cfg.rel_tol:
            termination = "converged"
            break
    else:
        termination = "max-iter"
    c.write_back()
    report.final_cost = cost
    report.n_invalid = n_inv
    report.termination = termination
    return report
