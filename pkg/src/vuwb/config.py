"""Run configuration: one JSON document covering simulation, pipeline and solvers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .dataset import camera_to_dict, pose_from_dict, pose_to_dict
from .errors import ConfigError
from .sensor_models import CameraIntrinsics
from .sim import SensorSpec, TrajectorySpec, WorldSpec
from .slam.pipeline import PipelineConfig
from .solver import SolverConfig

SCHEMA_VERSION = 1
SOLVER_STAGES = ("tracking", "local", "full")
_TUPLE_FIELDS = {"box", "margin"}


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    world: WorldSpec = field(default_factory=WorldSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict:
        sensor = {f.name: getattr(self.sensor, f.name) for f in dataclasses.fields(SensorSpec)}
        sensor["camera"] = camera_to_dict(self.sensor.camera)
        sensor["T_cb"] = pose_to_dict(self.sensor.T_cb)
        pipeline = {f.name: getattr(self.pipeline, f.name) for f in dataclasses.fields(PipelineConfig)
                    if f.name not in SOLVER_STAGES}
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "out": self.out,
            "trajectory": _plain(dataclasses.asdict(self.trajectory)),
            "sensor": _plain(sensor),
            "world": _plain(dataclasses.asdict(self.world)),
            "pipeline": _plain(pipeline),
            "solver": {s: dataclasses.asdict(getattr(self.pipeline, s)) for s in SOLVER_STAGES},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """SHA-256 of the canonical JSON, ignoring the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _section(cls, data, name, skip=()):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    kw = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def from_dict(d) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - {"schema_version", "seed", "out", "trajectory", "sensor", "world", "pipeline", "solver"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    out = d.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError("out must be a string or null")

    sensor = dict(d.get("sensor", {}))
    try:
        if "camera" in sensor:
            sensor["camera"] = CameraIntrinsics(**sensor["camera"])
        if "T_cb" in sensor:
            sensor["T_cb"] = pose_from_dict(sensor["T_cb"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"section 'sensor': {exc}") from None

    solver = d.get("solver", {})
    if not isinstance(solver, dict) or set(solver) - set(SOLVER_STAGES):
        raise ConfigError(f"section 'solver' accepts only {list(SOLVER_STAGES)}")
    stages = {s: _section(SolverConfig, v, f"solver.{s}") for s, v in solver.items()}
    pipeline = _section(PipelineConfig, d.get("pipeline", {}), "pipeline", skip=SOLVER_STAGES)
    for s, v in stages.items():
        setattr(pipeline, s, v)
    return RunConfig(seed, out, _section(TrajectorySpec, d.get("trajectory", {}), "trajectory"),
                     _section(SensorSpec, sensor, "sensor"), _section(WorldSpec, d.get("world", {}), "world"),
                     pipeline)


def loads(text: str) -> RunConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON: {exc}") from None
    return from_dict(d)


def load(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def canonical(seed: int = 0) -> RunConfig:
    """Reference scenario: 50 s lissajous over 15 m x 20 m, five anchors one per 10 s,
    100 Hz round-robin ranging, 1 px / 1 cm noise, sparser keyframes for speed."""
    return RunConfig(seed=seed, pipeline=PipelineConfig(kf_every=10, kf_min_translation=1.0))


def noiseless(seed: int = 0) -> RunConfig:
    """Canonical scenario with all noise removed and ranges taken at the frame instants."""
    cfg = canonical(seed)
    cfg.sensor = SensorSpec(sigma_px=0.0, sigma_uwb=0.0, range_timing="frame_synchronous")
    return cfg
