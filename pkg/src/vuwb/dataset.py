"""In-memory dataset streams and their on-disk text formats.

Directory layout::

    groundtruth.txt   timestamp tx ty tz qx qy qz qw   (body->world, w last)
    observations.csv  timestamp,frame_id,landmark_id,u_px,v_px,sigma_px
    ranges.csv        timestamp,anchor_id,range_m,sigma_m
    anchors_gt.csv    anchor_id,deploy_time,x,y,z
    loop_edges.csv    kf_i,kf_j,tx,ty,tz,qx,qy,qz,qw,weight
    manifest.json     seed, config hash, embedded config, calibration

Floats are written with 17 significant digits so a reload is bit-exact.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, MapFormatError
from .liegeom import PoseSE3, Rotation
from .sensor_models import CameraIntrinsics
from .slam.map import Anchor, Keyframe, LoopEdge, MapState

FMT = "%.17g"
MAP_FORMAT_VERSION = 1

FILES = ("groundtruth.txt", "observations.csv", "ranges.csv", "anchors_gt.csv", "loop_edges.csv")
OBS_HEADER = "timestamp,frame_id,landmark_id,u_px,v_px,sigma_px"
RANGE_HEADER = "timestamp,anchor_id,range_m,sigma_m"
ANCHOR_GT_HEADER = "anchor_id,deploy_time,x,y,z"
ANCHOR_EST_HEADER = "anchor_id,x,y,z,fixed"
LOOP_HEADER = "kf_i,kf_j,tx,ty,tz,qx,qy,qz,qw,weight"
TUM_HEADER = "# timestamp tx ty tz qx qy qz qw"


@dataclass
class Trajectory:
    """Timestamped poses kept in file form: body->world quaternion (w first) and body centre.

    Keeping the file form avoids a lossy conversion on every save/load.
    """
    timestamps: np.ndarray
    q_wb: np.ndarray
    p: np.ndarray

    def __len__(self):
        return len(self.timestamps)

    def pose(self, i) -> PoseSE3:
        """World->body pose of sample ``i``."""
        rot = Rotation(self.q_wb[i]).inverse()
        return PoseSE3(rot, -(rot.matrix @ self.p[i]))

    def positions(self) -> np.ndarray:
        return self.p

    @classmethod
    def from_poses(cls, timestamps, poses) -> Trajectory:
        q = np.array([p.rotation.inverse().q for p in poses]).reshape(-1, 4)
        pos = np.array([-(p.R.T @ p.translation) for p in poses]).reshape(-1, 3)
        return cls(np.asarray(timestamps, dtype=float), q, pos)


@dataclass
class Observations:
    timestamp: np.ndarray
    frame_id: np.ndarray
    landmark_id: np.ndarray
    uv: np.ndarray
    sigma: np.ndarray

    def __len__(self):
        return len(self.timestamp)

    def by_frame(self) -> dict:
        """frame id -> (landmark ids, pixels, sigmas), rows kept in file order."""
        out = {}
        if not len(self):
            return out
        order = np.argsort(self.frame_id, kind="stable")
        fids = self.frame_id[order]
        starts = np.flatnonzero(np.r_[True, fids[1:] != fids[:-1]])
        ends = np.r_[starts[1:], len(fids)]
        for s, e in zip(starts, ends):
            idx = order[s:e]
            out[int(fids[s])] = (self.landmark_id[idx], self.uv[idx], self.sigma[idx])
        return out


@dataclass
class Ranges:
    timestamp: np.ndarray
    anchor_id: np.ndarray
    range: np.ndarray
    sigma: np.ndarray

    def __len__(self):
        return len(self.timestamp)


@dataclass
class AnchorDrop:
    anchor_id: int
    deploy_time: float
    position: np.ndarray


@dataclass
class Dataset:
    groundtruth: Trajectory
    observations: Observations
    ranges: Ranges
    anchors: list
    loop_edges: list = field(default_factory=list)
    camera: CameraIntrinsics | None = None
    T_cb: PoseSE3 | None = None
    manifest: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# low-level text helpers
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return FMT % float(x)


def _write_rows(path, header, rows):
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _read_csv(path, header, ncols) -> np.ndarray:
    if not os.path.isfile(path):
        raise DatasetError(f"missing file {path}")
    with open(path) as f:
        first = f.readline().strip()
        if first != header:
            raise DatasetError(f"{path}: expected header {header!r}, got {first!r}")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)   # header-only files are valid
                data = np.loadtxt(f, delimiter=",", ndmin=2, dtype=float)
        except ValueError as exc:
            raise DatasetError(f"{path}: {exc}") from None
    if data.size == 0:
        return np.zeros((0, ncols))
    if data.shape[1] != ncols:
        raise DatasetError(f"{path}: expected {ncols} columns, got {data.shape[1]}")
    return data


def _as_ids(col, path) -> np.ndarray:
    ids = col.astype(np.int64)
    if not np.array_equal(ids, col):
        raise DatasetError(f"{path}: non-integer id")
    return ids


# ---------------------------------------------------------------------------
# trajectories (TUM convention)
# ---------------------------------------------------------------------------

def write_tum(path, traj: Trajectory):
    """``timestamp tx ty tz qx qy qz qw`` with the body->world quaternion."""
    with open(path, "w", newline="\n") as f:
        f.write(TUM_HEADER + "\n")
        for ts, q, p in zip(traj.timestamps, traj.q_wb, traj.p):
            vals = (ts, p[0], p[1], p[2], q[1], q[2], q[3], q[0])
            f.write(" ".join(FMT % v for v in vals) + "\n")


def read_tum(path) -> Trajectory:
    if not os.path.isfile(path):
        raise DatasetError(f"missing file {path}")
    rows = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{n}: expected 8 fields")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise DatasetError(f"{path}:{n}: bad number") from None
    data = np.array(rows).reshape(-1, 8)
    if len(data) and np.any(np.diff(data[:, 0]) <= 0):
        raise DatasetError(f"{path}: timestamps must increase")
    q_wb = np.column_stack([data[:, 7], data[:, 4:7]])
    if np.any(np.abs(np.linalg.norm(q_wb, axis=1) - 1.0) > 1e-6):
        raise DatasetError(f"{path}: quaternion not unit norm")
    return Trajectory(data[:, 0].copy(), q_wb, data[:, 1:4].copy())


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def camera_to_dict(K: CameraIntrinsics) -> dict:
    return {k: getattr(K, k) for k in ("fu", "fv", "cu", "cv", "width", "height", "min_depth", "max_depth")}


def pose_to_dict(T: PoseSE3) -> dict:
    return {"q_wxyz": T.rotation.q.tolist(), "t": T.translation.tolist()}


def pose_from_dict(d) -> PoseSE3:
    return PoseSE3(Rotation(d["q_wxyz"]), d["t"])


def export_dataset(ds: Dataset, directory):
    os.makedirs(directory, exist_ok=True)
    write_tum(os.path.join(directory, "groundtruth.txt"), ds.groundtruth)
    o = ds.observations
    _write_rows(os.path.join(directory, "observations.csv"), OBS_HEADER,
                zip(o.timestamp, o.frame_id, o.landmark_id, o.uv[:, 0], o.uv[:, 1], o.sigma))
    r = ds.ranges
    _write_rows(os.path.join(directory, "ranges.csv"), RANGE_HEADER,
                zip(r.timestamp, r.anchor_id, r.range, r.sigma))
    _write_rows(os.path.join(directory, "anchors_gt.csv"), ANCHOR_GT_HEADER,
                ((a.anchor_id, a.deploy_time, *a.position) for a in ds.anchors))
    _write_rows(os.path.join(directory, "loop_edges.csv"), LOOP_HEADER,
                ((e.i, e.j, *e.T_ij.translation, *e.T_ij.rotation.q[1:], e.T_ij.rotation.q[0], e.weight)
                 for e in ds.loop_edges))
    manifest = dict(ds.manifest)
    if ds.camera is not None:
        manifest["camera"] = camera_to_dict(ds.camera)
    if ds.T_cb is not None:
        manifest["T_cb"] = pose_to_dict(ds.T_cb)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_anchor_gt(path) -> list:
    d = _read_csv(path, ANCHOR_GT_HEADER, 5)
    ids = _as_ids(d[:, 0], path)
    return [AnchorDrop(int(i), float(row[1]), row[2:5].copy()) for i, row in zip(ids, d)]


def load_dataset(directory) -> Dataset:
    if not os.path.isdir(directory):
        raise DatasetError(f"dataset directory {directory} does not exist")
    gt = read_tum(os.path.join(directory, "groundtruth.txt"))
    p = os.path.join(directory, "observations.csv")
    d = _read_csv(p, OBS_HEADER, 6)
    obs = Observations(d[:, 0].copy(), _as_ids(d[:, 1], p), _as_ids(d[:, 2], p), d[:, 3:5].copy(), d[:, 5].copy())
    p = os.path.join(directory, "ranges.csv")
    d = _read_csv(p, RANGE_HEADER, 4)
    if len(d) and np.any(np.diff(d[:, 0]) < 0):
        raise DatasetError(f"{p}: range stream must be sorted by timestamp")
    ranges = Ranges(d[:, 0].copy(), _as_ids(d[:, 1], p), d[:, 2].copy(), d[:, 3].copy())
    anchors = read_anchor_gt(os.path.join(directory, "anchors_gt.csv"))
    p = os.path.join(directory, "loop_edges.csv")
    d = _read_csv(p, LOOP_HEADER, 10)
    ij = _as_ids(d[:, :2], p)
    edges = [LoopEdge(int(a), int(b), PoseSE3(Rotation(np.r_[row[8], row[5:8]]), row[2:5].copy()), float(row[9]))
             for (a, b), row in zip(ij, d)]
    manifest, camera, T_cb = {}, None, None
    mpath = os.path.join(directory, "manifest.json")
    if os.path.isfile(mpath):
        try:
            with open(mpath) as f:
                manifest = json.load(f)
            if "camera" in manifest:
                camera = CameraIntrinsics(**manifest.pop("camera"))
            if "T_cb" in manifest:
                T_cb = pose_from_dict(manifest.pop("T_cb"))
        except (ValueError, TypeError, KeyError) as exc:
            raise DatasetError(f"{mpath}: {exc}") from None
    return Dataset(gt, obs, ranges, anchors, edges, camera, T_cb, manifest)


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------

def write_anchor_estimates(path, anchors):
    _write_rows(path, ANCHOR_EST_HEADER, ((a.id, *a.position, int(a.fixed)) for a in anchors))


def read_anchor_estimates(path) -> dict:
    """anchor id -> position; accepts the estimate or the ground-truth layout."""
    if not os.path.isfile(path):
        raise DatasetError(f"missing file {path}")
    with open(path) as f:
        header = f.readline().strip()
    if header == ANCHOR_GT_HEADER:
        return {a.anchor_id: a.position for a in read_anchor_gt(path)}
    d = _read_csv(path, ANCHOR_EST_HEADER, 5)
    return {int(i): row[1:4].copy() for i, row in zip(_as_ids(d[:, 0], path), d)}


def map_to_dict(m: MapState, camera=None, T_cb=None) -> dict:
    out = {
        "format_version": MAP_FORMAT_VERSION,
        "keyframes": [{"id": kf.id, "timestamp": kf.timestamp, **pose_to_dict(kf.pose)}
                      for kf in m.keyframes.values()],
        "landmarks": [{"id": int(k), "p": v.tolist()} for k, v in m.landmarks.items()],
        "anchors": [{"id": a.id, "p": a.position.tolist(), "fixed": a.fixed, "deploy_time": a.deploy_time}
                    for a in m.anchors.values()],
    }
    if camera is not None:
        out["camera"] = camera_to_dict(camera)
    if T_cb is not None:
        out["T_cb"] = pose_to_dict(T_cb)
    return out


def save_map(path, m: MapState, camera=None, T_cb=None):
    with open(path, "w") as f:
        json.dump(map_to_dict(m, camera, T_cb), f, indent=1)
        f.write("\n")


def load_map(path) -> MapState:
    try:
        with open(path) as f:
            d = json.load(f)
        if d.get("format_version") != MAP_FORMAT_VERSION:
            raise MapFormatError(f"{path}: unsupported map format version {d.get('format_version')!r}")
        m = MapState()
        for k in d["keyframes"]:
            m.keyframes[int(k["id"])] = Keyframe(int(k["id"]), float(k["timestamp"]), pose_from_dict(k))
        for lm in d["landmarks"]:
            p = np.asarray(lm["p"], dtype=float)
            if p.shape != (3,):
                raise ValueError("landmark position must have 3 components")
            m.landmarks[int(lm["id"])] = p
        for a in d["anchors"]:
            p = np.asarray(a["p"], dtype=float)
            if p.shape != (3,):
                raise ValueError("anchor position must have 3 components")
            m.anchors[int(a["id"])] = Anchor(int(a["id"]), p, bool(a["fixed"]), float(a["deploy_time"]))
    except MapFormatError:
        raise
    except FileNotFoundError:
        raise MapFormatError(f"map file {path} not found") from None
    except (ValueError, TypeError, KeyError) as exc:
        raise MapFormatError(f"{path}: {exc}") from None
    return m
