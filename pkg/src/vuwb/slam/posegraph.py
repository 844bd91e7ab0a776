"""6DoF pose-graph optimisation over keyframe poses (no scale, no ranges)."""

from __future__ import annotations

from collections import deque

import numpy as np
import scipy.linalg

from ..errors import DisconnectedGraphError, GaugeError
from ..liegeom import PoseSE3, Rotation, boxplus_batch, compose, inverse, quat_multiply, quat_to_matrix, \
    quat_to_rotvec
from .map import LoopEdge, MapState

FD_STEP = 1e-6


def sequential_edges(poses: dict, weight: float = 1.0) -> list:
    """Edges between consecutive poses (dict order) holding their current relative pose."""
    ids = list(poses)
    return [LoopEdge(a, b, compose(poses[a], inverse(poses[b])), weight) for a, b in zip(ids, ids[1:])]


def _conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _residuals(qi, ti, qj, tj, q_ij, t_ij, sw):
    """``[t; log R]`` of ``T_ij^-1 T_i T_j^-1`` for every edge, scaled by sqrt(weight)."""
    qj_inv = _conj(qj)
    tj_inv = -np.einsum("nji,nj->ni", quat_to_matrix(qj), tj)
    # A = T_i * T_j^-1
    qa = quat_multiply(qi, qj_inv)
    ta = np.einsum("nij,nj->ni", quat_to_matrix(qi), tj_inv) + ti
    # E = T_ij^-1 * A
    R_ij = quat_to_matrix(q_ij)
    qe = quat_multiply(_conj(q_ij), qa)
    te = np.einsum("nji,nj->ni", R_ij, ta - t_ij)
    return np.concatenate([te, quat_to_rotvec(qe)], axis=1) * sw[:, None]


def _check_connected(ids, edges, fixed):
    adj = {k: [] for k in ids}
    for e in edges:
        adj[e.i].append(e.j)
        adj[e.j].append(e.i)
    seen = set(fixed)
    todo = deque(fixed)
    while todo:
        for nb in adj[todo.popleft()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    missing = [k for k in ids if k not in seen]
    if missing:
        raise DisconnectedGraphError(f"{len(missing)} poses are not connected to a fixed pose")


def pose_graph_6dof(poses: dict, edges: list, fixed=None, max_iterations: int = 20, tol: float = 1e-12) -> dict:
    """Minimise the weighted squared SE(3) edge residuals; returns new poses.

    ``fixed`` defaults to the first pose. Jacobians are central differences
    of the vectorised residual under the same left perturbation the solver
    uses.
    """
    ids = list(poses)
    fixed = set(ids[:1] if fixed is None else fixed)
    if not fixed & set(ids):
        raise GaugeError("pose graph needs at least one fixed pose")
    for e in edges:
        if e.i not in poses or e.j not in poses:
            raise KeyError(f"edge ({e.i}, {e.j}) references an unknown pose")
    _check_connected(ids, edges, [k for k in ids if k in fixed])
    idx = {k: n for n, k in enumerate(ids)}
    q = np.array([poses[k].rotation.q for k in ids])
    t = np.array([poses[k].translation for k in ids])
    free = np.array([k not in fixed for k in ids])
    col = np.full(len(ids), -1)
    col[free] = 6 * np.arange(int(free.sum()))
    n = 6 * int(free.sum())
    if not edges or n == 0:
        return {k: poses[k] for k in ids}
    ei = np.array([idx[e.i] for e in edges])
    ej = np.array([idx[e.j] for e in edges])
    q_ij = np.array([e.T_ij.rotation.q for e in edges])
    t_ij = np.array([e.T_ij.translation for e in edges])
    sw = np.sqrt([e.weight for e in edges])

    def residual(q, t):
        return _residuals(q[ei], t[ei], q[ej], t[ej], q_ij, t_ij, sw)

    def jacobian(q, t, which):
        """(m, 6, 6) derivative of each edge residual w.r.t. its endpoint ``which``."""
        m = len(edges)
        J = np.empty((m, 6, 6))
        for k in range(6):
            d = np.zeros((m, 6))
            d[:, k] = FD_STEP
            out = []
            for sgn in (1.0, -1.0):
                qs, ts = [q[ei], q[ej]], [t[ei], t[ej]]
                qs[which], ts[which] = boxplus_batch(qs[which], ts[which], sgn * d)
                out.append(_residuals(qs[0], ts[0], qs[1], ts[1], q_ij, t_ij, sw))
            J[:, :, k] = (out[0] - out[1]) / (2 * FD_STEP)
        return J

    r = residual(q, t)
    cost = float(np.sum(r * r))
    lam = 1e-6
    for _ in range(max_iterations):
        Ji, Jj = jacobian(q, t, 0), jacobian(q, t, 1)
        H = np.zeros((n, n))
        g = np.zeros(n)
        for J, ends in ((Ji, ei), (Jj, ej)):
            for e, c in enumerate(col[ends]):
                if c >= 0:
                    g[c:c + 6] += J[e].T @ r[e]
        for A, ea in ((Ji, ei), (Jj, ej)):
            for B, eb in ((Ji, ei), (Jj, ej)):
                for e in range(len(edges)):
                    ca, cb = col[ea[e]], col[eb[e]]
                    if ca >= 0 and cb >= 0:
                        H[ca:ca + 6, cb:cb + 6] += A[e].T @ B[e]
        improved = False
        while lam < 1e8:
            try:
                step = -scipy.linalg.cho_solve(scipy.linalg.cho_factor(H + lam * np.diag(np.diag(H) + 1e-12)), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            delta = np.zeros((len(ids), 6))
            delta[free] = step.reshape(-1, 6)
            q_new, t_new = boxplus_batch(q, t, delta)
            q_new[~free], t_new[~free] = q[~free], t[~free]
            r_new = residual(q_new, t_new)
            c_new = float(np.sum(r_new * r_new))
            if c_new < cost:
                improved = True
                rel = (cost - c_new) / cost
                q, t, r, cost = q_new, t_new, r_new, c_new
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not improved or rel < tol or cost == 0.0:
            break
    return {k: (PoseSE3(Rotation(q[n_]), t[n_].copy()) if free[n_] else poses[k]) for n_, k in enumerate(ids)}


def pose_graph_cost(poses: dict, edges: list) -> float:
    if not edges:
        return 0.0
    q = {k: p.rotation.q for k, p in poses.items()}
    t = {k: p.translation for k, p in poses.items()}
    r = _residuals(np.array([q[e.i] for e in edges]), np.array([t[e.i] for e in edges]),
                   np.array([q[e.j] for e in edges]), np.array([t[e.j] for e in edges]),
                   np.array([e.T_ij.rotation.q for e in edges]), np.array([e.T_ij.translation for e in edges]),
                   np.sqrt([e.weight for e in edges]))
    return float(np.sum(r * r))


def _move_point(p, old: PoseSE3, new: PoseSE3):
    """Carry a world point along with its reference keyframe's pose correction."""
    p_body = old.R @ p + old.translation
    return new.R.T @ (p_body - new.translation)


def close_loops(m: MapState, loop_edges: list, fixed=None, max_iterations: int = 20) -> dict:
    """Pose-graph correction of a map's keyframes from odometry plus loop edges.

    Landmarks move rigidly with their reference keyframe. Anchors are not
    part of the graph and keep their positions. Returns the corrected poses.
    """
    old = {k: kf.pose for k, kf in m.keyframes.items()}
    new = pose_graph_6dof(old, sequential_edges(old) + list(loop_edges), fixed=fixed,
                          max_iterations=max_iterations)
    for j, p in m.landmarks.items():
        k = m.ref_kf[j]
        m.landmarks[j] = _move_point(p, old[k], new[k])
    for k, kf in m.keyframes.items():
        kf.pose = new[k]
    return new
