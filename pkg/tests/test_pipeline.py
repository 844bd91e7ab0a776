import numpy as np
import pytest

from vuwb import eval as ev
from vuwb.dataset import Dataset, Observations, Ranges, Trajectory, map_to_dict
from vuwb.errors import ConfigError, InitializationError
from vuwb.sim import SensorSpec, TrajectorySpec, WorldSpec, default_camera, default_T_cb, simulate
from vuwb.slam.map import Anchor, MapState
from vuwb.slam.pipeline import PipelineConfig, run_exploration, run_localization

CFG = PipelineConfig(kf_every=10, kf_min_translation=1.0)


def _empty_obs():
    z = np.zeros(0)
    return Observations(z, z.astype(np.int64), z.astype(np.int64), np.zeros((0, 2)), z)


@pytest.fixture(scope="module")
def noiseless():
    ds = simulate(TrajectorySpec(duration=30.0), SensorSpec(sigma_px=0.0, sigma_uwb=0.0,
                                                            range_timing="frame_synchronous"),
                  WorldSpec(n_landmarks=300, anchor_period=5.0), seed=11)
    return ds, run_exploration(ds, CFG)


def test_noiseless_exploration_is_exact(noiseless):
    ds, res = noiseless
    assert ev.ate(res.trajectory, ds.groundtruth).max <= 1e-6
    est = {a: an.position for a, an in res.map.anchors.items()}
    gt = {d.anchor_id: d.position for d in ds.anchors}
    assert set(est) == set(gt)
    # the map lives in the first keyframe's frame; compare through the trajectory alignment
    _, mean = ev.anchor_errors(est, gt, ev.align_trajectories(res.trajectory, ds.groundtruth))
    assert mean <= 1e-6
    assert res.map.anchors[1].fixed and np.array_equal(res.map.anchors[1].position, np.zeros(3))
    assert ev.scale_error(res.trajectory, ds.groundtruth) <= 1e-6 and res.scale > 0


def test_keyframe_ids_are_frame_ids(noiseless):
    ds, res = noiseless
    for k, kf in res.map.keyframes.items():
        assert kf.timestamp == ds.groundtruth.timestamps[k]


def test_localization_leaves_map_untouched(noiseless):
    ds, res = noiseless
    before = map_to_dict(res.map)
    loc = run_localization(ds, res.map, CFG)
    assert map_to_dict(res.map) == before
    assert ev.ate(loc.trajectory, ds.groundtruth).max <= 1e-5


def test_ranges_only_localization():
    """No camera data: every pose comes from multilateration against the map anchors."""
    ds = simulate(TrajectorySpec(duration=20.0), SensorSpec(sigma_uwb=0.01, range_timing="frame_synchronous"),
                  WorldSpec(n_landmarks=10, anchor_rule="explicit",
                            explicit_anchors=[[0, 0, 0, 0], [0, 8, 0, 4], [0, 0, 10, -3], [0, -8, -10, 3],
                                              [0, 5, -5, -2]]), seed=12)
    m = MapState()
    for d in ds.anchors:
        m.anchors[d.anchor_id] = Anchor(d.anchor_id, d.position.copy(), d.anchor_id == 1)
    ds = Dataset(ds.groundtruth, _empty_obs(), ds.ranges, ds.anchors, camera=ds.camera, T_cb=ds.T_cb)
    loc = run_localization(ds, m, CFG)
    assert len(loc.trajectory) == len(ds.groundtruth)
    assert all(e["event"] != "tracking_lost" for e in loc.events)
    err = np.linalg.norm(loc.trajectory.p - ds.groundtruth.p, axis=1)
    assert np.percentile(err, 95) <= 0.05


def test_stationary_vehicle_fails_initialization():
    n = 100
    t = np.arange(n) * 0.05
    gt = Trajectory(t, np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros((n, 3)))
    drops = []
    ranges = Ranges(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
    ds = Dataset(gt, _empty_obs(), ranges, drops, camera=default_camera(), T_cb=default_T_cb())
    with pytest.raises(InitializationError):
        run_exploration(ds, CFG)


@pytest.mark.parametrize("kw", [dict(covisibility_theta=0), dict(init_kf_count=1), dict(kf_every=0),
                                dict(sigma_uwb=0.0)])
def test_pipeline_config_validation(kw):
    with pytest.raises(ConfigError):
        PipelineConfig(**kw)
