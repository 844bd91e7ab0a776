"""Exploration (visual-UWB SLAM) and localization (frozen-map replay) drivers.

Both run as one sequential loop over the frames of a dataset, so a run is
bit-reproducible. Keyframe ids are the frame ids they were created from.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..dataset import Dataset, Trajectory
from ..errors import (ConfigError, DegenerateGeometryError, InitializationError, InsufficientAnchorsError,
                      PipelineError, TrackingLostError, UnderConstrainedError)
from ..liegeom import PoseSE3, Rotation, compose, inverse
from ..sensor_models import body_center
from ..solver import SolverConfig
from .init import apply_scale, camera_poses, init_scale, triangulate
from .map import Keyframe, MapState
from .mapping import deploy_anchor, full_ba, local_ba, select_local_ba
from . import posegraph
from .tracking import RangeIndex, bearing_rotation, motion_only_ba, pnp_dlt, uwb_only_fix

log = logging.getLogger("vuwb.pipeline")

_EMPTY = (np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros(0))


@dataclass
class PipelineConfig:
    kf_every: int = 5                  # keyframe at least every N frames
    kf_min_translation: float = 0.2    # ... or after this much motion (metres, once scale is known)
    covisibility_theta: int = 15
    init_kf_count: int = 10
    sigma_px: float = 1.0              # used where the data carries a zero sigma
    sigma_uwb: float = 0.01
    association_window: float | None = None
    max_lost_frames: int = 10
    min_parallax_deg: float = 1.0
    max_triangulation_error: float = 4.0   # pixels
    min_init_landmarks: int = 20
    constant_velocity: bool = False
    loop_closing: bool = True
    final_full_ba: bool = True
    pose_graph_iterations: int = 20
    tracking: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=10, rel_tol=1e-3))
    local: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=10, rel_tol=1e-3))
    full: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=50, rel_tol=1e-10))

    def __post_init__(self):
        if self.covisibility_theta < 1:
            raise ConfigError("covisibility threshold must be >= 1")
        if self.init_kf_count < 2:
            raise ConfigError("init keyframe count must be >= 2")
        if self.kf_every < 1:
            raise ConfigError("keyframe spacing must be >= 1")
        if not (self.sigma_px > 0 and self.sigma_uwb > 0):
            raise ConfigError("sigmas must be positive")
        if self.max_lost_frames < 0:
            raise ConfigError("max_lost_frames must be >= 0")


@dataclass
class ExplorationResult:
    map: MapState
    trajectory: Trajectory
    keyframe_trajectory: Trajectory
    events: list
    solver_trace: list   # rows (stage, call, iteration, cost)
    scale: float


@dataclass
class LocalizationResult:
    trajectory: Trajectory
    events: list


def _sigmas(sig, fallback):
    return np.where(sig > 0, sig, fallback)


class _Explorer:
    def __init__(self, ds: Dataset, cfg: PipelineConfig, camera, T_cb):
        self.ds, self.cfg, self.camera, self.T_cb = ds, cfg, camera, T_cb
        self.frames_t = ds.groundtruth.timestamps
        self.obs = ds.observations.by_frame()
        self.ranges = RangeIndex(ds.ranges, cfg.association_window)
        self.loop_frames = {e.i for e in ds.loop_edges} | {e.j for e in ds.loop_edges}
        self.m = MapState()
        self.rows = {}       # kf id -> {landmark id: observation row}
        self.rel = {}        # frame id -> (reference kf id, T_frame * T_kf^-1)
        self.events = []
        self.trace = []
        self.calls = 0
        self.initialized = False
        self.scale = float("nan")
        self.first_anchor = None
        self.kf0 = self.kf1 = None

    # -- bookkeeping ---------------------------------------------------------
    def _event(self, kind, **kw):
        self.events.append({"event": kind, **kw})

    def _record(self, stage, report):
        self.calls += 1
        for i, c in enumerate(report.cost_trace):
            self.trace.append((stage, self.calls, i, c))
        return report

    def _frame_pose(self, f):
        k, T = self.rel[f]
        return compose(T, self.m.keyframes[k].pose)

    def _set_rel(self, f, pose, k):
        self.rel[f] = (k, compose(pose, inverse(self.m.keyframes[k].pose)))

    def _frame_obs(self, f):
        ids, z, sig = self.obs.get(f, _EMPTY)
        return ids, z, _sigmas(sig, self.cfg.sigma_px)

    def _assoc(self, f):
        return {a: (D, s if s > 0 else self.cfg.sigma_uwb)
                for a, (_, D, s) in self.ranges.associate(self.frames_t[f]).items()}

    # -- keyframes and landmarks ----------------------------------------------
    def _add_keyframe(self, f, pose, ranges):
        ids, z, sig = self._frame_obs(f)
        kf = Keyframe(f, float(self.frames_t[f]), pose, ids.copy(), z.copy(), sig.copy(), dict(ranges))
        self.m.add_keyframe(kf)
        self.rows[f] = {j: r for r, j in enumerate(ids.tolist())}
        self.rel[f] = (f, PoseSE3())
        return kf

    def _triangulate_new(self, kf):
        made = 0
        cfg = self.cfg
        for j in kf.lm_ids.tolist():
            if j in self.m.landmarks:
                continue
            obs = self.m.observers.get(j, [])
            if len(obs) < 2:
                continue
            T = camera_poses([self.m.keyframes[k].pose for k in obs], self.T_cb)
            px = np.array([self.m.keyframes[k].z[self.rows[k][j]] for k in obs])
            p = triangulate(T, px, self.camera, cfg.min_parallax_deg, cfg.max_triangulation_error)
            if p is not None:
                self.m.add_landmark(j, p, obs[0])
                made += 1
        return made

    # -- stages ----------------------------------------------------------------
    def bootstrap(self):
        cfg, gt = self.cfg, self.ds.groundtruth
        n = len(self.frames_t)
        if n < 2:
            raise InitializationError("dataset has fewer than two frames")
        f1 = min(cfg.kf_every, n - 1)
        # simulated two-view frontend: relative pose at unit baseline
        T_rel = compose(gt.pose(f1), inverse(gt.pose(0)))
        base = float(np.linalg.norm(T_rel.translation))
        if base < 1e-9:
            raise InitializationError("no baseline between the bootstrap frames; scale is unobservable")
        first = sorted(self.ranges.by_anchor, key=lambda a: (self.ranges.first_time(a), a))
        if first:
            self.first_anchor = first[0]
            deploy_anchor(self.m, PoseSE3(), self.first_anchor, self.ranges.first_time(self.first_anchor))
            self._event("anchor_deployed", frame=0, anchor_id=self.first_anchor, position=[0.0, 0.0, 0.0])
        self.kf0, self.kf1 = 0, f1
        self._add_keyframe(0, PoseSE3(), self._init_ranges(0))
        kf1 = self._add_keyframe(f1, PoseSE3(T_rel.rotation, T_rel.translation / base), self._init_ranges(f1))
        made = self._triangulate_new(kf1)
        if made < cfg.min_init_landmarks:
            raise InitializationError(f"bootstrap triangulated only {made} landmarks")
        self._local(f1)
        self._event("bootstrap", frames=[0, f1], landmarks=made)

    def _init_ranges(self, f):
        r = self._assoc(f)
        return {self.first_anchor: r[self.first_anchor]} if self.first_anchor in r else {}

    def _local(self, k):
        sel = select_local_ba(self.m, k, self.cfg.covisibility_theta)
        fixed = {self.kf0} if self.initialized else {self.kf0, self.kf1}
        rep = local_ba(self.m, sel, self.camera, self.T_cb, self.cfg.local, always_fixed=fixed,
                       use_ranges=self.initialized, sigma_px=self.cfg.sigma_px, sigma_uwb=self.cfg.sigma_uwb)
        self._record("local_ba", rep)
        self._event("local_ba", keyframe=k, active=len(sel.active), fixed=len(sel.fixed),
                    landmarks=len(sel.landmarks), initial_cost=rep.initial_cost, final_cost=rep.final_cost,
                    iterations=rep.iterations, termination=rep.termination)

    def _finish_init(self):
        cfg, a1 = self.cfg, self.first_anchor
        if a1 is None:
            raise InitializationError("no anchor ranges available for scale initialisation")
        kfs = [kf for kf in self.m.keyframes.values() if a1 in kf.ranges]
        s = init_scale(camera_poses([kf.pose for kf in kfs], self.T_cb), [kf.ranges[a1][0] for kf in kfs],
                       self.T_cb, min_keyframes=cfg.init_kf_count)
        apply_scale(self.m, s)
        for f, (k, T) in self.rel.items():
            self.rel[f] = (k, PoseSE3(T.rotation, T.translation * s))
        res = [abs(kf.ranges[a1][0] - np.linalg.norm(body_center(kf.pose))) for kf in kfs]
        self.initialized = True
        self.scale = s
        rep = full_ba(self.m, self.camera, self.T_cb, cfg.local, fixed_kfs=[self.kf0],
                      sigma_px=cfg.sigma_px, sigma_uwb=cfg.sigma_uwb)
        self._record("init_ba", rep)
        self._event("init_complete", keyframes=len(self.m.keyframes), scale=s,
                    mean_abs_range_residual=float(np.mean(res)))

    def track(self, f, pred):
        ids, z, sig = self._frame_obs(f)
        ranges = {}
        anchors = None
        if self.initialized:
            ranges = {a: v for a, v in self._assoc(f).items() if a in self.m.anchors}
            anchors = {a: an.position for a, an in self.m.anchors.items()}
        pose, rep = motion_only_ba(pred, self.camera, self.T_cb, self.m.landmarks, ids, z, sig, anchors, ranges,
                                   self.cfg.tracking)
        return pose

    def run(self):
        cfg = self.cfg
        self.bootstrap()
        n = len(self.frames_t)
        last_kf = self.kf1
        prev_f, prev2_f = 0, None
        lost = 0
        for f in range(1, n):
            if f == self.kf1:
                prev2_f, prev_f = prev_f, f
                continue
            pred = self._frame_pose(prev_f)
            if cfg.constant_velocity and prev2_f is not None:
                vel = compose(pred, inverse(self._frame_pose(prev2_f)))
                pred = compose(vel, pred)
            try:
                pose = self.track(f, pred)
            except UnderConstrainedError as exc:
                lost += 1
                self._event("tracking_lost", frame=f, reason=str(exc))
                if lost > cfg.max_lost_frames:
                    raise TrackingLostError(f"tracking lost for {lost} consecutive frames at frame {f}") from None
                continue
            lost = 0
            new_anchors = []
            if self.initialized:
                for a in self._assoc(f):
                    if a not in self.m.anchors:
                        deploy_anchor(self.m, pose, a, self.ranges.first_time(a))
                        new_anchors.append(a)
                        self._event("anchor_deployed", frame=f, anchor_id=a,
                                    position=self.m.anchors[a].position.tolist())
            moved = np.linalg.norm(body_center(pose) - body_center(self.m.keyframes[last_kf].pose))
            is_kf = (f - last_kf >= cfg.kf_every or f in self.loop_frames or bool(new_anchors)
                     or (self.initialized and moved >= cfg.kf_min_translation))
            if is_kf:
                ranges = ({a: v for a, v in self._assoc(f).items() if a in self.m.anchors}
                          if self.initialized else self._init_ranges(f))
                kf = self._add_keyframe(f, pose, ranges)
                self._triangulate_new(kf)
                self._local(f)
                last_kf = f
                if not self.initialized and len(self.m.keyframes) >= cfg.init_kf_count:
                    self._finish_init()
            else:
                self._set_rel(f, pose, last_kf)
            prev2_f, prev_f = prev_f, f
        if not self.initialized:
            raise InitializationError(f"only {len(self.m.keyframes)} keyframes; scale was never initialised")
        self.close_loops()
        if cfg.final_full_ba:
            rep = full_ba(self.m, self.camera, self.T_cb, cfg.full, fixed_kfs=[self.kf0],
                          sigma_px=cfg.sigma_px, sigma_uwb=cfg.sigma_uwb)
            self._record("full_ba", rep)
            self._event("full_ba", initial_cost=rep.initial_cost, final_cost=rep.final_cost,
                        iterations=rep.iterations, termination=rep.termination)
        return self.result()

    def close_loops(self):
        edges = [e for e in self.ds.loop_edges if e.i in self.m.keyframes and e.j in self.m.keyframes]
        if not (edges and self.cfg.loop_closing):
            return
        posegraph.close_loops(self.m, edges, fixed=[self.kf0], max_iterations=self.cfg.pose_graph_iterations)
        self._event("pose_graph", loop_edges=len(edges))

    def result(self):
        frames = sorted(self.rel)
        poses = [self._frame_pose(f) for f in frames]
        traj = Trajectory.from_poses(self.frames_t[frames], poses)
        kfs = list(self.m.keyframes.values())
        kf_traj = Trajectory.from_poses([kf.timestamp for kf in kfs], [kf.pose for kf in kfs])
        return ExplorationResult(self.m, traj, kf_traj, self.events, self.trace, self.scale)


def run_exploration(ds: Dataset, config: PipelineConfig | None = None, camera=None, T_cb=None) -> ExplorationResult:
    cfg = config or PipelineConfig()
    camera = camera or ds.camera
    T_cb = T_cb or ds.T_cb
    if camera is None or T_cb is None:
        raise PipelineError("camera calibration missing from dataset and arguments")
    return _Explorer(ds, cfg, camera, T_cb).run()


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

def _relocalize(m: MapState, camera, T_cb, ids, z, sig, ranges, anchors, cfg: PipelineConfig):
    """First-fix pose: UWB multilateration plus bearing alignment, else linear PnP."""
    known = np.array([j in m.landmarks for j in ids.tolist()], dtype=bool)
    pts = np.array([m.landmarks[j] for j in ids[known].tolist()]).reshape(-1, 3)
    if len(ranges) >= 4:
        try:
            p = uwb_only_fix({a: D for a, (D, _) in ranges.items()}, anchors)
            rot = bearing_rotation(p, pts, z[known], camera, T_cb) if known.sum() >= 3 else Rotation()
            return PoseSE3(rot, -(rot.matrix @ p))
        except (InsufficientAnchorsError, DegenerateGeometryError):
            pass
    return pnp_dlt(pts, z[known], camera, T_cb)


def run_localization(ds: Dataset, m: MapState, config: PipelineConfig | None = None, camera=None,
                     T_cb=None) -> LocalizationResult:
    """Track every frame against a frozen map; the map is only read."""
    cfg = config or PipelineConfig()
    camera = camera or ds.camera
    T_cb = T_cb or ds.T_cb
    if camera is None or T_cb is None:
        raise PipelineError("camera calibration missing from dataset and arguments")
    if not m.landmarks and not m.anchors:
        raise PipelineError("map is empty")
    ts = ds.groundtruth.timestamps
    obs = ds.observations.by_frame()
    index = RangeIndex(ds.ranges, cfg.association_window)
    anchors = {a: an.position for a, an in m.anchors.items()}
    events, frames, poses = [], [], []
    pose, lost = None, 0
    for f in range(len(ts)):
        ids, z, sig = obs.get(f, _EMPTY)
        sig = _sigmas(sig, cfg.sigma_px)
        ranges = {a: (D, s if s > 0 else cfg.sigma_uwb)
                  for a, (_, D, s) in index.associate(ts[f]).items() if a in anchors}
        try:
            if pose is None:
                pred = _relocalize(m, camera, T_cb, ids, z, sig, ranges, anchors, cfg)
                events.append({"event": "relocalized", "frame": f})
            else:
                pred = pose
            pose, _ = motion_only_ba(pred, camera, T_cb, m.landmarks, ids, z, sig, anchors, ranges, cfg.tracking)
        except (UnderConstrainedError, InsufficientAnchorsError, DegenerateGeometryError) as exc:
            fix = None
            if len(ranges) >= 4:
                # ranges fix the position only; keep the last heading (identity before any fix)
                rot = pose.rotation if pose is not None else Rotation()
                try:
                    p = uwb_only_fix({a: D for a, (D, _) in ranges.items()}, anchors)
                    fix = PoseSE3(rot, -(rot.matrix @ p))
                except (InsufficientAnchorsError, DegenerateGeometryError):
                    fix = None
            if fix is None:
                lost += 1
                events.append({"event": "tracking_lost", "frame": f, "reason": str(exc)})
                if lost > cfg.max_lost_frames:
                    raise TrackingLostError(f"tracking lost for {lost} consecutive frames at frame {f}") from None
                continue
            pose = fix
            events.append({"event": "uwb_only_fix", "frame": f})
        lost = 0
        frames.append(f)
        poses.append(pose)
    return LocalizationResult(Trajectory.from_poses(ts[frames], poses), events)
