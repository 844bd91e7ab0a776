import json
import os

import numpy as np
import pytest

from vuwb.dataset import (FILES, export_dataset, load_dataset, load_map, read_anchor_estimates, read_tum, save_map,
                          write_anchor_estimates, write_tum)
from vuwb.errors import DatasetError, MapFormatError
from vuwb.liegeom import PoseSE3, Rotation
from vuwb.sim import SensorSpec, TrajectorySpec, WorldSpec, simulate
from vuwb.slam.map import Anchor, Keyframe, MapState


@pytest.fixture(scope="module")
def small_ds():
    return simulate(TrajectorySpec(duration=5.0), SensorSpec(), WorldSpec(n_landmarks=50, loop_closures=0), seed=3)


def test_export_load_round_trip_is_bit_exact(tmp_path, small_ds):
    export_dataset(small_ds, tmp_path)
    assert all((tmp_path / f).is_file() for f in FILES)
    ds = load_dataset(tmp_path)
    assert np.array_equal(ds.groundtruth.timestamps, small_ds.groundtruth.timestamps)
    assert np.array_equal(ds.groundtruth.q_wb, small_ds.groundtruth.q_wb)
    assert np.array_equal(ds.groundtruth.p, small_ds.groundtruth.p)
    assert np.array_equal(ds.observations.uv, small_ds.observations.uv)
    assert np.array_equal(ds.observations.landmark_id, small_ds.observations.landmark_id)
    assert np.array_equal(ds.ranges.range, small_ds.ranges.range)
    assert np.array_equal(ds.ranges.timestamp, small_ds.ranges.timestamp)
    assert [a.anchor_id for a in ds.anchors] == [a.anchor_id for a in small_ds.anchors]
    assert ds.camera == small_ds.camera
    assert ds.T_cb == small_ds.T_cb


def test_export_is_deterministic(tmp_path, small_ds):
    export_dataset(small_ds, tmp_path / "a")
    export_dataset(small_ds, tmp_path / "b")
    for f in FILES + ("manifest.json",):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_tum_uses_w_last_and_round_trips(tmp_path, small_ds):
    path = tmp_path / "t.txt"
    write_tum(path, small_ds.groundtruth)
    first = [l for l in path.read_text().splitlines() if not l.startswith("#")][0].split()
    q = small_ds.groundtruth.q_wb[0]
    assert float(first[7]) == q[0] and float(first[4]) == q[1]
    tr = read_tum(path)
    assert np.array_equal(tr.p, small_ds.groundtruth.p)


def test_missing_ranges_file(tmp_path, small_ds):
    export_dataset(small_ds, tmp_path)
    os.remove(tmp_path / "ranges.csv")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_bad_header(tmp_path, small_ds):
    export_dataset(small_ds, tmp_path)
    (tmp_path / "ranges.csv").write_text("time,id,r,s\n")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_unsorted_ranges_rejected(tmp_path, small_ds):
    export_dataset(small_ds, tmp_path)
    (tmp_path / "ranges.csv").write_text("timestamp,anchor_id,range_m,sigma_m\n1,1,2,0.01\n0.5,1,2,0.01\n")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def _toy_map():
    m = MapState()
    m.add_keyframe(Keyframe(0, 0.0, PoseSE3.identity(), np.array([1, 2]), np.zeros((2, 2)), np.ones(2)))
    m.add_keyframe(Keyframe(5, 0.25, PoseSE3(Rotation.from_rotvec([0.1, 0.2, 0.3]), [1 / 3, 2.0, 0.0]),
                            np.array([1]), np.zeros((1, 2)), np.ones(1)))
    m.landmarks[1] = np.array([0.1, 0.2, 3.0])
    m.landmarks[2] = np.array([np.pi, -1.0, 7.0])
    m.anchors[1] = Anchor(1, np.zeros(3), True, 0.0)
    m.anchors[2] = Anchor(2, np.array([1e-17, 2.5, 1 / 7]), False, 10.0)
    return m


def test_map_round_trip(tmp_path):
    m = _toy_map()
    save_map(tmp_path / "map.json", m)
    m2 = load_map(tmp_path / "map.json")
    assert list(m2.keyframes) == [0, 5]
    assert m2.keyframes[5].pose == m.keyframes[5].pose
    assert np.array_equal(m2.landmarks[2], m.landmarks[2])
    assert np.array_equal(m2.anchors[2].position, m.anchors[2].position)
    assert m2.anchors[1].fixed and not m2.anchors[2].fixed
    save_map(tmp_path / "map2.json", m2)
    assert (tmp_path / "map.json").read_bytes() == (tmp_path / "map2.json").read_bytes()


def test_corrupted_map(tmp_path):
    p = tmp_path / "map.json"
    p.write_text("{not json")
    with pytest.raises(MapFormatError):
        load_map(p)
    save_map(p, _toy_map())
    d = json.loads(p.read_text())
    d["format_version"] = 99
    p.write_text(json.dumps(d))
    with pytest.raises(MapFormatError):
        load_map(p)
    del d["format_version"]
    p.write_text(json.dumps({"format_version": 1, "keyframes": []}))
    with pytest.raises(MapFormatError):
        load_map(p)


def test_anchor_estimates_round_trip(tmp_path):
    m = _toy_map()
    write_anchor_estimates(tmp_path / "a.csv", m.anchors.values())
    got = read_anchor_estimates(tmp_path / "a.csv")
    assert set(got) == {1, 2}
    assert np.array_equal(got[2], m.anchors[2].position)
