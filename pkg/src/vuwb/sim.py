"""Synthetic datasets: trajectory, landmarks, pinhole observations, TWR ranges, anchor drops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .dataset import (AnchorDrop, Dataset, Observations, Ranges, Trajectory, read_tum)
from .errors import ConfigError
from .liegeom import PoseSE3, Rotation, boxplus, compose, inverse, matrix_to_quat, quat_to_matrix
from .sensor_models import CameraIntrinsics, project_batch, visible_mask
from .slam.map import LoopEdge
from .slam.mapping import should_deploy_anchor

# forward-looking camera on a body with x forward, y left, z up
R_CB_FORWARD = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

# reference anchor survey: ground truth and an estimate with per-anchor errors of 2-3.4 cm
REFERENCE_ANCHORS_GT = np.array([
    [3.643, 0.600, 0.864],
    [6.726, 3.4490, 0.506],
    [8.407, 3.660, -0.228],
    [10.409, 0.889, -0.779],
    [8.905, -1.731, 0.041],
])
REFERENCE_ANCHORS_EST = np.array([
    [3.635, 0.632, 0.854],
    [6.742, 3.458, 0.523],
    [8.411, 3.653, -0.247],
    [10.422, 0.887, -0.760],
    [8.919, -1.750, 0.047],
])


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(458.654, 457.296, 367.215, 248.375, 752.0, 480.0, 0.2, 30.0)


def default_T_cb() -> PoseSE3:
    return PoseSE3(Rotation.from_matrix(R_CB_FORWARD), np.zeros(3))


@dataclass
class TrajectorySpec:
    kind: str = "lissajous"           # lissajous | waypoints | file
    rate: float = 20.0                # frames per second
    t0: float = 0.0
    duration: float = 50.0            # lissajous only
    box: tuple = (15.0, 20.0, 2.0)    # lissajous extent (x, y, z), centred on the origin
    waypoints: list = field(default_factory=list)  # rows [t, x, y, z] or [t, x, y, z, yaw]
    path: str | None = None           # TUM file for kind == "file"
    excitation: float = 0.1           # pitch/roll amplitude (rad)

    def __post_init__(self):
        if self.kind not in ("lissajous", "waypoints", "file"):
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if not self.rate > 0:
            raise ConfigError("frame rate must be positive")
        if self.kind == "lissajous" and not (self.duration > 0 and all(b > 0 for b in self.box)):
            raise ConfigError("lissajous needs a positive duration and box")
        if self.kind == "waypoints":
            w = self.waypoints
            if len(w) < 2:
                raise ConfigError("need at least 2 waypoints")
            if any(len(r) not in (4, 5) for r in w) or len({len(r) for r in w}) != 1:
                raise ConfigError("waypoints are rows [t, x, y, z] or [t, x, y, z, yaw]")
            if np.any(np.diff([r[0] for r in w]) <= 0):
                raise ConfigError("waypoint timestamps must increase")
        if self.kind == "file" and not self.path:
            raise ConfigError("file trajectory needs a path")
        if self.excitation < 0:
            raise ConfigError("excitation must be >= 0")


@dataclass
class SensorSpec:
    camera: CameraIntrinsics = field(default_factory=default_camera)
    T_cb: PoseSE3 = field(default_factory=default_T_cb)
    sigma_px: float = 1.0
    sigma_uwb: float = 0.01
    range_rate: float = 100.0         # aggregate TWR epochs per second
    range_timing: str = "round_robin"  # round_robin | frame_synchronous
    outlier_fraction: float = 0.0

    def __post_init__(self):
        if self.sigma_px < 0 or self.sigma_uwb < 0:
            raise ConfigError("sigmas must be >= 0")
        if not self.range_rate > 0:
            raise ConfigError("range rate must be positive")
        if self.range_timing not in ("round_robin", "frame_synchronous"):
            raise ConfigError(f"unknown range timing {self.range_timing!r}")
        if not 0 <= self.outlier_fraction <= 1:
            raise ConfigError("outlier fraction must be in [0, 1]")


@dataclass
class WorldSpec:
    n_landmarks: int = 500
    margin: tuple = (6.0, 6.0, 3.0)   # landmark volume = trajectory bounding box grown by this
    anchor_rule: str = "period"        # period | distance | explicit
    anchor_period: float = 10.0
    anchor_distance: float = 20.0
    max_anchors: int | None = None
    init_drop: float | None = None     # extra drop this many seconds after the start
    explicit_anchors: list = field(default_factory=list)  # rows [t, x, y, z]
    loop_closures: int = 0
    loop_min_gap: float = 20.0         # seconds between loop endpoints
    loop_radius: float = 1.0           # metres
    loop_weight: float = 100.0
    loop_sigma_t: float = 0.0
    loop_sigma_r: float = 0.0

    def __post_init__(self):
        if self.n_landmarks < 1:
            raise ConfigError("need at least one landmark")
        if any(m < 0 for m in self.margin):
            raise ConfigError("margins must be >= 0")
        if self.anchor_rule not in ("period", "distance", "explicit"):
            raise ConfigError(f"unknown anchor rule {self.anchor_rule!r}")
        if not (self.anchor_period > 0 and self.anchor_distance > 0):
            raise ConfigError("anchor period and distance must be positive")
        if self.anchor_rule == "explicit" and any(len(r) != 4 for r in self.explicit_anchors):
            raise ConfigError("explicit anchors are rows [t, x, y, z]")


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------

def _lissajous(spec: TrajectorySpec):
    w = 2 * np.pi / spec.duration
    a = np.asarray(spec.box, dtype=float) / 2

    def pos(t):
        s = np.asarray(t) - spec.t0
        return np.column_stack([a[0] * np.sin(w * s), a[1] * np.sin(2 * w * s),
                                a[2] * np.sin(3 * w * s + np.pi / 4)])

    def vel(t):
        s = np.asarray(t) - spec.t0
        return np.column_stack([a[0] * w * np.cos(w * s), 2 * a[1] * w * np.cos(2 * w * s),
                                3 * a[2] * w * np.cos(3 * w * s + np.pi / 4)])
    return pos, vel


def _rot_zyx(yaw, pitch, roll) -> np.ndarray:
    """Batch of body->world rotations ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty((len(yaw), 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    return R


def gen_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Ground-truth poses at the frame rate.

    Yaw follows the horizontal velocity; pitch and roll get a sinusoidal
    excitation so that rotation stays observable.
    """
    if spec.kind == "file":
        return read_tum(spec.path)
    yaw = None
    if spec.kind == "lissajous":
        n = int(round(spec.duration * spec.rate))
        ts = spec.t0 + np.arange(n) / spec.rate
        pos_fn, vel_fn = _lissajous(spec)
        p, v = pos_fn(ts), vel_fn(ts)
    else:
        w = np.asarray(spec.waypoints, dtype=float)
        t_w = w[:, 0]
        if np.allclose(w[:, 1:4], w[0, 1:4]):
            raise ConfigError("degenerate trajectory: zero path length")
        spline = CubicSpline(t_w, w[:, 1:4])
        # frame grid t0 + k / rate, both ends included
        n = max(int(round((t_w[-1] - t_w[0]) * spec.rate)), 1)
        ts = t_w[0] + np.arange(n + 1) / spec.rate
        ts[-1] = t_w[-1]
        p, v = spline(ts), spline(ts, 1)
        p[0], p[-1] = w[0, 1:4], w[-1, 1:4]
        if w.shape[1] == 5:
            yaw = CubicSpline(t_w, np.unwrap(w[:, 4]))(ts)
    if np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)) == 0:
        raise ConfigError("degenerate trajectory: zero path length")
    if yaw is None:
        speed = np.hypot(v[:, 0], v[:, 1])
        yaw = np.arctan2(v[:, 1], v[:, 0])
        # hold the last heading through horizontal stops
        for i in np.flatnonzero(speed < 1e-9):
            yaw[i] = yaw[i - 1] if i > 0 else 0.0
        yaw = np.unwrap(yaw)
    s = ts - ts[0]
    pitch = spec.excitation * np.sin(2 * np.pi * 0.23 * s)
    roll = spec.excitation * np.sin(2 * np.pi * 0.31 * s + 1.0)
    R_wb = _rot_zyx(yaw, pitch, roll)
    q = np.array([matrix_to_quat(R) for R in R_wb])
    return Trajectory(ts, q, p)


# ---------------------------------------------------------------------------
# landmarks and observations
# ---------------------------------------------------------------------------

def gen_landmarks(traj: Trajectory, world: WorldSpec, rng) -> np.ndarray:
    """Uniform points in the trajectory bounding box grown by the margin."""
    lo = traj.p.min(axis=0) - np.asarray(world.margin)
    hi = traj.p.max(axis=0) + np.asarray(world.margin)
    if np.any(hi - lo <= 0):
        raise ConfigError("landmark volume is degenerate")
    return rng.uniform(lo, hi, size=(world.n_landmarks, 3))


def _world_to_body_arrays(traj: Trajectory):
    R_bw = np.transpose(quat_to_matrix(traj.q_wb), (0, 2, 1))
    t_bw = -np.einsum("nij,nj->ni", R_bw, traj.p)
    return R_bw, t_bw


def gen_observations(traj: Trajectory, landmarks: np.ndarray, sensor: SensorSpec, rng) -> Observations:
    """Visibility is decided on the noiseless projection; noise is added afterwards."""
    K, T = sensor.camera, sensor.T_cb
    R_bw, t_bw = _world_to_body_arrays(traj)
    cols = ([], [], [], [])
    for i in range(len(traj)):
        p_C = (landmarks @ R_bw[i].T + t_bw[i]) @ T.R.T + T.translation
        vis = np.flatnonzero(visible_mask(p_C, K))
        uv = project_batch(p_C[vis], K)
        cols[0].append(np.full(len(vis), i))
        cols[1].append(vis)
        cols[2].append(uv)
    fid = np.concatenate(cols[0]).astype(np.int64)
    lid = np.concatenate(cols[1]).astype(np.int64)
    uv = np.concatenate(cols[2]).reshape(-1, 2)
    uv = uv + rng.normal(0.0, 1.0, uv.shape) * sensor.sigma_px
    if sensor.outlier_fraction > 0:
        bad = rng.random(len(uv)) < sensor.outlier_fraction
        uv[bad] = rng.uniform([0, 0], [K.width, K.height], size=(int(bad.sum()), 2))
    return Observations(traj.timestamps[fid], fid, lid, uv, np.full(len(fid), float(sensor.sigma_px)))


# ---------------------------------------------------------------------------
# anchors and ranges
# ---------------------------------------------------------------------------

def schedule_anchor_drops(traj: Trajectory, world: WorldSpec) -> list:
    """Anchor drops at trajectory samples; ids count up from 1."""
    ts, p = traj.timestamps, traj.p
    if world.anchor_rule == "explicit":
        return [AnchorDrop(k + 1, float(r[0]), np.asarray(r[1:4], dtype=float))
                for k, r in enumerate(world.explicit_anchors)]
    cap = world.max_anchors if world.max_anchors is not None else len(ts)
    extra = None
    if world.init_drop is not None:
        extra = int(np.searchsorted(ts, ts[0] + world.init_drop - 1e-9))
    idx = [0]
    if world.anchor_rule == "period":
        k = 1
        while (i := int(np.searchsorted(ts, ts[0] + k * world.anchor_period - 1e-9))) < len(ts):
            idx.append(i)
            k += 1
        if extra is not None and extra < len(ts):
            idx = sorted(set(idx) | {extra})
    else:
        placed = [p[0]]
        for i in range(1, len(ts)):
            if i == extra or should_deploy_anchor(p[i], placed, world.anchor_distance):
                idx.append(i)
                placed.append(p[i])
    idx = idx[:cap]
    return [AnchorDrop(k + 1, float(ts[i]), p[i].copy()) for k, i in enumerate(idx)]


def gen_ranges(traj: Trajectory, drops: list, sensor: SensorSpec, rng) -> Ranges:
    """TWR ranges ``max(0, ||p_k - p_body|| + N(0, sigma^2))``.

    ``round_robin`` cycles deployed anchors at the aggregate rate, so each of
    n anchors is ranged at rate/n. ``frame_synchronous`` ranges every deployed
    anchor at every frame timestamp.
    """
    ts = traj.timestamps
    order = sorted(drops, key=lambda d: (d.deploy_time, d.anchor_id))
    times = np.array([d.deploy_time for d in order])
    pos = np.array([d.position for d in order]).reshape(-1, 3)
    ids = np.array([d.anchor_id for d in order], dtype=np.int64)
    if sensor.range_timing == "frame_synchronous":
        rows_t, rows_k = [], []
        for t in ts:
            n = int(np.searchsorted(times, t, side="right"))
            rows_t.extend([t] * n)
            rows_k.extend(range(n))
        epochs = np.array(rows_t)
        which = np.array(rows_k, dtype=np.int64)
        body = np.repeat(traj.p, [int(np.searchsorted(times, t, side="right")) for t in ts], axis=0)
    else:
        n_ep = int(np.floor((ts[-1] - ts[0]) * sensor.range_rate + 1e-9)) + 1
        epochs = ts[0] + np.arange(n_ep) / sensor.range_rate
        n_dep = np.searchsorted(times, epochs, side="right")
        keep = n_dep > 0
        epochs, n_dep = epochs[keep], n_dep[keep]
        which = np.empty(len(epochs), dtype=np.int64)
        cursor = 0
        for e, n in enumerate(n_dep):
            which[e] = cursor % n
            cursor += 1
        body = CubicSpline(ts, traj.p)(epochs) if len(epochs) else np.zeros((0, 3))
    if len(epochs) == 0:
        return Ranges(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    truth = np.linalg.norm(pos[which] - body, axis=1)
    D = np.maximum(0.0, truth + rng.normal(0.0, 1.0, len(truth)) * sensor.sigma_uwb)
    return Ranges(epochs, ids[which], D, np.full(len(D), float(sensor.sigma_uwb)))


# ---------------------------------------------------------------------------
# loop edges
# ---------------------------------------------------------------------------

def gen_loop_edges(traj: Trajectory, world: WorldSpec, rng, kf_every: int = 1) -> list:
    """Ground-truth relative poses between revisits, optionally perturbed.

    Endpoints are frame ids on the ``kf_every`` grid. The most recent frame
    that comes back within ``loop_radius`` of an earlier one is used first.
    """
    edges = []
    ts, p = traj.timestamps, traj.p
    grid = np.arange(0, len(ts), kf_every)
    last_j = np.inf
    for j in grid[::-1]:
        if len(edges) >= world.loop_closures:
            break
        if ts[j] > last_j - world.loop_min_gap / 2:
            continue
        cand = grid[ts[grid] <= ts[j] - world.loop_min_gap]
        if not len(cand):
            continue
        d = np.linalg.norm(p[cand] - p[j], axis=1)
        i = int(cand[np.argmin(d)])
        if d.min() > world.loop_radius:
            continue
        T_ij = compose(traj.pose(i), inverse(traj.pose(int(j))))
        noise = np.r_[rng.normal(size=3) * world.loop_sigma_t, rng.normal(size=3) * world.loop_sigma_r]
        edges.append(LoopEdge(i, int(j), boxplus(T_ij, noise), world.loop_weight))
        last_j = ts[j]
    return edges[::-1]


# ---------------------------------------------------------------------------
# whole dataset
# ---------------------------------------------------------------------------

def simulate(traj_spec: TrajectorySpec, sensor: SensorSpec, world: WorldSpec, seed: int,
             kf_every: int = 5) -> Dataset:
    """Generate every stream; each stream draws from its own child seed."""
    s_lm, s_obs, s_rng, s_loop = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))
    traj = gen_trajectory(traj_spec)
    landmarks = gen_landmarks(traj, world, s_lm)
    obs = gen_observations(traj, landmarks, sensor, s_obs)
    drops = schedule_anchor_drops(traj, world)
    ranges = gen_ranges(traj, drops, sensor, s_rng)
    edges = gen_loop_edges(traj, world, s_loop, kf_every) if world.loop_closures else []
    return Dataset(traj, obs, ranges, drops, edges, sensor.camera, sensor.T_cb)


def reference_anchor_specs(rate: float = 20.0) -> tuple:
    """Loop through the five reference anchor positions, one every 10 s, back to the first at 50 s."""
    wp = [[10.0 * k, *REFERENCE_ANCHORS_GT[k]] for k in range(5)] + [[50.0, *REFERENCE_ANCHORS_GT[0]]]
    traj = TrajectorySpec(kind="waypoints", rate=rate, waypoints=wp)
    world = WorldSpec(anchor_rule="explicit",
                      explicit_anchors=[[10.0 * k, *REFERENCE_ANCHORS_GT[k]] for k in range(5)])
    return traj, world
