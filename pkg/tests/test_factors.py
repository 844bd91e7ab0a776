import numpy as np
import pytest

from vuwb.errors import BehindCameraError, DegenerateRangeError
from vuwb.factors import (HuberLoss, RangeFactor, ReprojectionFactor, huber_weight, range_batch,
                          range_error, range_jac_anchor, range_jac_pose, reproj_batch, reproj_error,
                          reproj_jac_landmark, reproj_jac_pose)
from vuwb.liegeom import PoseSE3
from vuwb.sensor_models import body_center, pinhole_project, range_truth, world_to_camera

from conftest import random_pose, random_rotation
from jacobian_check import check_all, jacobian_error, random_scene

I = PoseSE3.identity()


def test_reproj_error_examples(camera, rng):
    assert np.array_equal(reproj_error(I, I, camera, [0, 0, 1], [320, 240]), [0, 0])
    np.testing.assert_allclose(reproj_error(I, I, camera, [0, 0, 1], [330, 240]), [10, 0])
    for _ in range(50):
        X, T_cb, K, p_l, _ = random_scene(rng)
        dz = rng.normal(size=2)
        z = pinhole_project(world_to_camera(X, T_cb, p_l), K) + dz
        np.testing.assert_allclose(reproj_error(X, T_cb, K, p_l, z), dz, atol=1e-9)


def test_reproj_behind_camera(camera):
    with pytest.raises(BehindCameraError):
        reproj_jac_pose(I, I, camera, [0, 0, -1])
    with pytest.raises(BehindCameraError):
        reproj_error(I, I, camera, [0, 0, -1], [0, 0])


def test_reproj_jac_pose_on_axis(camera):
    # f/z with x = y = 0, z = 1
    J = reproj_jac_pose(I, I, camera, [0, 0, 1])
    np.testing.assert_allclose(J[:, :3], [[-500, 0, 0], [0, -500, 0]])
    J10 = reproj_jac_pose(I, I, camera, [0, 0, 10])
    np.testing.assert_allclose(J10[:, :3], J[:, :3] / 10)


def test_reproj_jac_landmark_identity(camera, rng):
    p = np.array([0.3, -0.2, 4.0])
    x, y, z = p
    P = np.array([[500 / z, 0, -500 * x / z**2], [0, 500 / z, -500 * y / z**2]])
    np.testing.assert_allclose(reproj_jac_landmark(I, I, camera, p), -P)


def test_reproj_jac_landmark_world_rotation(camera, rng):
    # Rotating the world by Q: X' = X Q^T, p' = Q p gives J' = J Q^T
    X, T_cb, K, p_l, _ = random_scene(rng)
    Q = random_rotation(rng)
    Xr = PoseSE3(X.rotation @ Q.inverse(), X.translation)
    J = reproj_jac_landmark(X, T_cb, K, p_l)
    Jr = reproj_jac_landmark(Xr, T_cb, K, Q.apply(p_l))
    np.testing.assert_allclose(Jr, J @ Q.matrix.T, atol=1e-9)


def test_range_error_examples(rng):
    assert range_error(I, [3, 4, 0], 5.0) == 0.0
    assert range_error(I, [3, 4, 0], 5.1) == pytest.approx(0.1, abs=1e-12)
    for _ in range(50):
        X = random_pose(rng)
        p_k = rng.uniform(-10, 10, 3)
        D = range_truth(p_k, body_center(X)) + 0.01
        assert range_error(X, p_k, D) == pytest.approx(0.01, abs=1e-12)


def test_range_jacobian_examples(rng):
    J = range_jac_pose(I, [10, 0, 0])
    np.testing.assert_allclose(J, [[-1, 0, 0, 0, 0, 0]])
    np.testing.assert_allclose(range_jac_pose(I, [20, 0, 0]), J)
    np.testing.assert_allclose(range_jac_anchor(I, [1, 0, 0]), [[-1, 0, 0]])
    for _ in range(100):
        X = random_pose(rng)
        J = range_jac_anchor(X, rng.uniform(-10, 10, 3))
        assert np.linalg.norm(J) == pytest.approx(1.0)


def test_range_degenerate():
    with pytest.raises(DegenerateRangeError):
        range_jac_pose(I, [0, 0, 0])
    with pytest.raises(DegenerateRangeError):
        range_jac_anchor(I, [1e-7, 0, 0])


def test_all_jacobians_match_finite_differences():
    worst = check_all(np.random.default_rng(7), n=1000)
    for name, err in worst.items():
        assert err <= 1e-5, name


def test_finite_difference_helper_scaling():
    # the small-entry branch judges on an absolute 1e-8 scale
    assert jacobian_error([1e-4], [1e-4 + 5e-9]) == pytest.approx(5e-6)
    assert jacobian_error([2.0], [2.0 + 2e-5]) == pytest.approx(1e-5)


def test_batch_matches_scalar(rng):
    scenes = [random_scene(rng) for _ in range(20)]
    T_cb, K = scenes[0][1], scenes[0][2]
    X = [s[0] for s in scenes]
    R = np.array([x.R for x in X])
    t = np.array([x.translation for x in X])
    p_l = []
    for x in X:
        p_C = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 5)])
        p_B = T_cb.R.T @ (p_C - T_cb.translation)
        p_l.append(x.R.T @ (p_B - x.translation))
    p_l = np.array(p_l)
    z = rng.uniform(0, 400, (20, 2))
    e, Jp, Jl, valid = reproj_batch(R, t, p_l, z, K, T_cb)
    assert valid.all()
    for i in range(20):
        np.testing.assert_allclose(e[i], reproj_error(X[i], T_cb, K, p_l[i], z[i]), atol=1e-9)
        np.testing.assert_allclose(Jp[i], reproj_jac_pose(X[i], T_cb, K, p_l[i]), atol=1e-9)
        np.testing.assert_allclose(Jl[i], reproj_jac_landmark(X[i], T_cb, K, p_l[i]), atol=1e-9)
    p_k = np.array([s[4] for s in scenes])
    D = rng.uniform(0, 10, 20)
    e, Jp, Ja, valid = range_batch(R, t, p_k, D)
    for i in range(20):
        assert e[i] == pytest.approx(range_error(X[i], p_k[i], D[i]), abs=1e-12)
        np.testing.assert_allclose(Jp[i], range_jac_pose(X[i], p_k[i]), atol=1e-12)
        np.testing.assert_allclose(Ja[i], range_jac_anchor(X[i], p_k[i]), atol=1e-12)


def test_batch_flags_invalid(camera):
    R = np.eye(3)[None]
    e, Jp, Jl, valid = reproj_batch(R, np.zeros((1, 3)), np.array([[0, 0, -1.0]]), np.zeros((1, 2)),
                                    camera, I)
    assert not valid[0] and np.all(e == 0) and np.all(Jp == 0)
    e, Jp, Ja, valid = range_batch(R, np.zeros((1, 3)), np.zeros((1, 3)), np.array([0.0]))
    assert not valid[0]


def test_huber_examples():
    assert huber_weight(0.0, 1.0) == (0.0, 1.0)
    d = 1.7
    rho, w = huber_weight(d * d, d)
    assert rho == pytest.approx(d * d) and w == 1.0
    rho, w = huber_weight((2 * d) ** 2, d)
    assert rho == pytest.approx(3 * d * d) and w == pytest.approx(0.5)
    assert HuberLoss(d)(0.25) == huber_weight(0.25, d)


def test_huber_is_c1_and_downweights():
    d = 1.345
    r = np.linspace(0, 10, 2001)
    rho, w = huber_weight(r * r, d)
    assert np.all(w <= 1.0)
    eps = 1e-7
    lo = huber_weight((d - eps) ** 2, d)[0]
    hi = huber_weight((d + eps) ** 2, d)[0]
    assert abs(hi - lo) < 1e-6
    # derivative with respect to r is 2 r w on both sides of the knee
    drho = np.gradient(rho, r)
    np.testing.assert_allclose(drho[1:-1], (2 * r * w)[1:-1], atol=1e-2)


def test_factor_validation():
    with pytest.raises(ValueError):
        ReprojectionFactor(0, 0, (1, 2), 0.0)
    with pytest.raises(ValueError):
        RangeFactor(0, 0, -1.0, 0.01)
    with pytest.raises(ValueError):
        RangeFactor(0, 0, 1.0, 0.0)
    with pytest.raises(ValueError):
        HuberLoss(0.0)
