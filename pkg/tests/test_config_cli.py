import json
import os

import numpy as np
import pytest

from vuwb import config
from vuwb.cli import main
from vuwb.dataset import Trajectory, read_tum, write_tum
from vuwb.errors import ConfigError
from vuwb.sim import REFERENCE_ANCHORS_EST, REFERENCE_ANCHORS_GT

OUTPUTS = ("map.json", "trajectory.txt", "keyframes.txt", "anchors_est.csv", "events.jsonl", "solver_trace.csv")


def _small_config(seed=5):
    cfg = config.canonical(seed)
    cfg.trajectory.duration = 30.0
    cfg.world.n_landmarks = 500
    cfg.world.anchor_period = 5.0
    return cfg


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Simulate once, explore once; shared by the CLI tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(_small_config().to_json())
    assert main(["simulate", "--config", str(cfg_path), "--out", str(root / "ds")]) == 0
    assert main(["explore", "--dataset", str(root / "ds"), "--config", str(cfg_path), "--out", str(root / "run")]) == 0
    return root


# -- config ---------------------------------------------------------------------

def test_config_round_trip():
    cfg = config.canonical(7)
    again = config.loads(cfg.to_json())
    assert again.to_json() == cfg.to_json() and again.hash() == cfg.hash()
    cfg.out = "/elsewhere"
    assert cfg.hash() == again.hash()
    cfg.seed = 8
    assert cfg.hash() != again.hash()


def test_shipped_configs_load():
    here = os.path.join(os.path.dirname(__file__), "..", "configs")
    assert config.load(os.path.join(here, "canonical.json")).to_json() == config.canonical().to_json()
    assert config.load(os.path.join(here, "noiseless.json")).to_json() == config.noiseless().to_json()


@pytest.mark.parametrize("patch", [{"bogus": 1}, {"world": {"bogus": 1}}, {"solver": {"tracking": {"bogus": 1}}},
                                   {"schema_version": 2}, {"seed": -1}, {"seed": 2 ** 64},
                                   {"pipeline": {"covisibility_theta": 0}}, {"trajectory": {"kind": "spiral"}}])
def test_config_rejections(patch):
    d = config.canonical().to_dict()
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            for k2, v2 in v.items():
                if isinstance(v2, dict):
                    d[k][k2] = {**d[k][k2], **v2}
                else:
                    d[k][k2] = v2
        else:
            d[k] = v
    with pytest.raises(ConfigError):
        config.from_dict(d)


def test_malformed_config_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{oops")
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "ds")]) == 3
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "ds")]) == 3


# -- simulate / explore / localize ------------------------------------------------

def test_simulate_is_deterministic(tmp_path, run):
    cfg_path = run / "cfg.json"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "again")]) == 0
    for name in os.listdir(run / "ds"):
        a, b = (run / "ds" / name).read_text(), (tmp_path / "again" / name).read_text()
        if name == "manifest.json":
            a, b = json.loads(a), json.loads(b)
            a.pop("created"), b.pop("created")
        assert a == b, name


def test_explore_outputs(run):
    out = run / "run"
    assert all((out / f).is_file() for f in OUTPUTS + ("manifest.json",))
    assert (out / "solver_trace.csv").read_text().startswith("stage,call,iteration,cost\n")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == _small_config().hash() and manifest["seed"] == 5
    events = [json.loads(l) for l in (out / "events.jsonl").read_text().splitlines()]
    assert sum(e["event"] == "anchor_deployed" for e in events) == 6


def test_explore_then_evaluate(run, tmp_path, capsys):
    rc = main(["evaluate", "--est", str(run / "run" / "trajectory.txt"), "--gt", str(run / "ds" / "groundtruth.txt"),
               "--est-anchors", str(run / "run" / "anchors_est.csv"),
               "--gt-anchors", str(run / "ds" / "anchors_gt.csv"), "--out", str(tmp_path)])
    assert rc == 0 and "ATE mean" in capsys.readouterr().out
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert m["ate"]["mean"] < 0.05 and m["anchors"]["mean"] < 0.1 and m["scale_error"] < 0.01
    assert (tmp_path / "errors.csv").read_text().startswith("timestamp,error_m\n")


def test_localize_keeps_map_bytes(run, tmp_path):
    map_path = run / "run" / "map.json"
    before = map_path.read_bytes()
    rc = main(["localize", "--dataset", str(run / "ds"), "--map", str(map_path), "--config", str(run / "cfg.json"),
               "--out", str(tmp_path)])
    assert rc == 0 and map_path.read_bytes() == before
    assert len(read_tum(tmp_path / "trajectory.txt")) > 0


def test_missing_ranges_exit_code(run, tmp_path):
    ds = tmp_path / "ds"
    ds.mkdir()
    for name in os.listdir(run / "ds"):
        if name != "ranges.csv":
            (ds / name).write_bytes((run / "ds" / name).read_bytes())
    assert main(["explore", "--dataset", str(ds), "--out", str(tmp_path / "o")]) == 4


def test_corrupted_map_exit_code(run, tmp_path):
    bad = tmp_path / "map.json"
    bad.write_text('{"format_version": 1')
    assert main(["localize", "--dataset", str(run / "ds"), "--map", str(bad), "--out", str(tmp_path / "o")]) == 5


# -- evaluate ----------------------------------------------------------------------

def _gt_traj(n=200, shift=0.0):
    t = np.arange(n) * 0.05 + shift
    s = t - shift
    p = np.column_stack([7.5 * np.sin(0.3 * s), 10 * np.sin(0.6 * s), np.sin(0.9 * s)])
    return Trajectory(t, np.tile([1.0, 0, 0, 0], (n, 1)), p)


def _write_anchor_gt(path, rows):
    with open(path, "w") as f:
        f.write("anchor_id,deploy_time,x,y,z\n")
        for k, p in enumerate(rows, 1):
            f.write(f"{k},{10.0 * (k - 1)},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")


def test_evaluate_identical_is_zero(tmp_path):
    write_tum(tmp_path / "gt.txt", _gt_traj())
    assert main(["evaluate", "--est", str(tmp_path / "gt.txt"), "--gt", str(tmp_path / "gt.txt"),
                 "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert m["ate"]["max"] < 1e-9 and m["scale_error"] < 1e-9


def test_evaluate_reference_anchor_table(tmp_path):
    write_tum(tmp_path / "gt.txt", _gt_traj())
    _write_anchor_gt(tmp_path / "gt_a.csv", REFERENCE_ANCHORS_GT)
    _write_anchor_gt(tmp_path / "est_a.csv", REFERENCE_ANCHORS_EST)
    assert main(["evaluate", "--est", str(tmp_path / "gt.txt"), "--gt", str(tmp_path / "gt.txt"),
                 "--est-anchors", str(tmp_path / "est_a.csv"), "--gt-anchors", str(tmp_path / "gt_a.csv"),
                 "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert abs(m["anchors"]["mean"] - 0.025) <= 0.001


def test_evaluate_disjoint_timestamps(tmp_path):
    write_tum(tmp_path / "est.txt", _gt_traj())
    write_tum(tmp_path / "gt.txt", _gt_traj(shift=100.0))
    assert main(["evaluate", "--est", str(tmp_path / "est.txt"), "--gt", str(tmp_path / "gt.txt"),
                 "--out", str(tmp_path / "o")]) == 7
