"""Anchor deployment and the local / full bundle adjustments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..liegeom import PoseSE3
from ..sensor_models import CameraIntrinsics, body_center
from ..solver import Problem, SolveReport, SolverConfig, optimize
from .map import Anchor, MapState


def should_deploy_anchor(p_body, anchors, d_min: float, init_complete: bool = True) -> bool:
    """True iff the nearest deployed anchor is at least ``d_min`` away.

    ``anchors`` may be a dict of :class:`Anchor` or a sequence of positions.
    With nothing deployed yet the answer is ``init_complete``.
    """
    if isinstance(anchors, dict):
        anchors = [a.position for a in anchors.values()]
    if len(anchors) == 0:
        return bool(init_complete)
    d = np.linalg.norm(np.asarray(anchors, dtype=float).reshape(-1, 3) - np.asarray(p_body, dtype=float), axis=1)
    return bool(d.min() >= d_min)


def deploy_anchor(m: MapState, pose: PoseSE3, anchor_id: int | None = None, timestamp: float = 0.0) -> int:
    """Add an anchor at the body centre of ``pose``.

    The first anchor defines the world origin: it is placed at exactly
    (0, 0, 0) and fixed.
    """
    if anchor_id is None:
        anchor_id = max(m.anchors, default=0) + 1
    if anchor_id in m.anchors:
        raise ValueError(f"anchor {anchor_id} already deployed")
    if not m.anchors:
        m.anchors[anchor_id] = Anchor(anchor_id, np.zeros(3), True, float(timestamp))
    else:
        m.anchors[anchor_id] = Anchor(anchor_id, body_center(pose), False, float(timestamp))
    return anchor_id


@dataclass
class LocalSelection:
    active: list
    fixed: list
    landmarks: list
    anchors: list
    fixed_anchors: list


def select_local_ba(m: MapState, current_kf: int, theta: int) -> LocalSelection:
    """Current keyframe plus every keyframe sharing at least ``theta`` landmarks with it.

    Keyframes outside that set which observe an active landmark are added as
    fixed keyframes. All anchors are active except the first, which is fixed.
    """
    if current_kf not in m.keyframes:
        raise KeyError(f"unknown keyframe {current_kf}")
    active = sorted({current_kf, *m.covisible(current_kf, theta)})
    lms = set()
    for k in active:
        lms.update(i for i in m.keyframes[k].lm_ids.tolist() if i in m.landmarks)
    aset = set(active)
    fixed = sorted({k for lm in lms for k in m.observers[lm]} - aset)
    first = m.first_anchor_id()
    return LocalSelection(active, fixed, sorted(lms), list(m.anchors),
                          [first] if first is not None else [])


def build_problem(m: MapState, camera: CameraIntrinsics, T_cb: PoseSE3, free_kfs, fixed_kfs, landmarks,
                  anchors=(), fixed_anchors=(), fixed_landmarks=(), use_ranges=True, sigma_px=1.0,
                  sigma_uwb=0.01) -> Problem:
    """Problem over the given keyframes, landmarks and anchors.

    Reprojection factors come from every listed keyframe's observations of
    listed landmarks; range factors from their ranges to listed anchors.
    A zero sigma in the data falls back to the configured one.
    """
    pb = Problem(camera, T_cb)
    lmset = set(landmarks)
    anset = set(anchors) if use_ranges else set()
    for k in list(free_kfs) + list(fixed_kfs):
        pb.poses[k] = m.keyframes[k].pose
    pb.fixed_poses = set(fixed_kfs)
    for j in landmarks:
        pb.landmarks[j] = m.landmarks[j]
    pb.fixed_landmarks = set(fixed_landmarks)
    for a in anset:
        pb.anchors[a] = m.anchors[a].position
    pb.fixed_anchors = set(fixed_anchors) & anset
    lm_arr = np.fromiter(lmset, dtype=np.int64, count=len(lmset))
    for k in pb.poses:
        kf = m.keyframes[k]
        ids = np.asarray(kf.lm_ids, dtype=np.int64)
        sel = np.isin(ids, lm_arr)
        if np.any(sel):
            s = np.asarray(kf.sigma, dtype=float)[sel]
            pb.add_reprojections(k, ids[sel], np.asarray(kf.z)[sel], np.where(s > 0, s, sigma_px))
        rng = [(a, D, s) for a, (D, s) in kf.ranges.items() if a in anset]
        if rng:
            a, D, s = (np.array(v) for v in zip(*rng))
            pb.add_ranges(k, a, D, np.where(s > 0, s, sigma_uwb))
    return pb


def write_back(m: MapState, pb: Problem):
    for k in pb.poses:
        if k not in pb.fixed_poses:
            m.keyframes[k].pose = pb.poses[k]
    for j in pb.landmarks:
        if j not in pb.fixed_landmarks:
            m.landmarks[j] = pb.landmarks[j]
    for a in pb.anchors:
        if a not in pb.fixed_anchors:
            m.anchors[a].position = pb.anchors[a]


def local_ba(m: MapState, sel: LocalSelection, camera: CameraIntrinsics, T_cb: PoseSE3,
             config: SolverConfig | None = None, always_fixed=(), use_ranges=True,
             sigma_px=1.0, sigma_uwb=0.01) -> SolveReport:
    """Optimise active keyframes, active landmarks and the free anchors in place.

    Keyframes in ``always_fixed`` (the gauge keyframes) never move even when
    they are in the active set.
    """
    pinned = [k for k in sel.active if k in set(always_fixed)]
    free = [k for k in sel.active if k not in set(pinned)]
    pb = build_problem(m, camera, T_cb, free, sel.fixed + pinned, sel.landmarks, sel.anchors,
                       sel.fixed_anchors, use_ranges=use_ranges, sigma_px=sigma_px, sigma_uwb=sigma_uwb)
    if not pb.fixed_poses and not pb.fixed_anchors:
        pb.gauge_free = True
    report = optimize(pb, config)
    write_back(m, pb)
    return report


def full_ba(m: MapState, camera: CameraIntrinsics, T_cb: PoseSE3, config: SolverConfig | None = None,
            fixed_kfs=None, use_ranges=True, sigma_px=1.0, sigma_uwb=0.01) -> SolveReport:
    """Every keyframe, landmark and anchor; the first keyframe and first anchor are fixed."""
    kfs = list(m.keyframes)
    fixed = list(fixed_kfs) if fixed_kfs is not None else kfs[:1]
    free = [k for k in kfs if k not in set(fixed)]
    first = m.first_anchor_id()
    pb = build_problem(m, camera, T_cb, free, fixed, list(m.landmarks), list(m.anchors),
                       [first] if first is not None else [], use_ranges=use_ranges,
                       sigma_px=sigma_px, sigma_uwb=sigma_uwb)
    report = optimize(pb, config)
    write_back(m, pb)
    return report
