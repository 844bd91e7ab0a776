import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vuwb.liegeom import (PoseSE3, Rotation, boxplus, boxplus_batch, compose, inverse, skew,
                          so3_exp, so3_log, transform_point)

from conftest import random_pose, random_rotation, rodrigues

vec3 = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_skew_examples(rng):
    assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    np.testing.assert_array_equal(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])
    v = rng.normal(size=3)
    np.testing.assert_allclose(skew(v) @ v, 0, atol=1e-15)


@given(vec3, vec3)
def test_skew_is_cross_product(v, u):
    np.testing.assert_allclose(skew(v) @ u, np.cross(v, u), atol=1e-9)
    np.testing.assert_array_equal(skew(v).T, -skew(v))


def test_exp_examples():
    np.testing.assert_array_equal(so3_exp([0, 0, 0]).matrix, np.eye(3))
    np.testing.assert_allclose(so3_exp([0, 0, np.pi / 2]).apply([1, 0, 0]), [0, 1, 0], atol=1e-15)


def test_exp_matches_rodrigues_and_round_trips(rng):
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3) / np.linalg.norm(w)
        R = so3_exp(w)
        np.testing.assert_allclose(R.matrix, rodrigues(w), atol=1e-12)
        np.testing.assert_allclose(so3_log(R), w, atol=1e-9)
        np.testing.assert_allclose((so3_exp(-w) @ R).matrix, np.eye(3), atol=1e-12)


def test_exp_log_round_trip_1000_up_to_pi(rng):
    worst = 0.0
    for _ in range(1000):
        w = rng.normal(size=3)
        w *= rng.uniform(1e-6, np.pi - 1e-3) / np.linalg.norm(w)
        worst = max(worst, np.abs(so3_log(so3_exp(w)) - w).max())
    assert worst <= 1e-8


def test_log_examples():
    np.testing.assert_array_equal(so3_log(Rotation.identity()), np.zeros(3))
    np.testing.assert_allclose(so3_log(Rotation.from_matrix(rodrigues([0, 0, np.pi / 2]))),
                               [0, 0, np.pi / 2], atol=1e-12)


def test_log_near_pi(rng):
    for _ in range(50):
        w = rng.normal(size=3)
        w *= (np.pi - 1e-4) / np.linalg.norm(w)
        R = Rotation.from_matrix(rodrigues(w))
        np.testing.assert_allclose(so3_log(R), w, atol=1e-6)


def test_log_at_pi_is_deterministic():
    R = Rotation.from_matrix(np.diag([1.0, -1.0, -1.0]))
    w = so3_log(R)
    np.testing.assert_allclose(w, [np.pi, 0, 0], atol=1e-12)
    # equal diagonal: tie goes to the lowest index
    R = Rotation.from_matrix(rodrigues(np.pi * np.array([1.0, 1.0, 0.0]) / np.sqrt(2)))
    assert np.linalg.norm(so3_log(R)) == pytest.approx(np.pi)
    np.testing.assert_allclose(so3_exp(so3_log(R)).matrix, R.matrix, atol=1e-12)


def test_rotation_invariants(rng):
    for _ in range(100):
        R = random_rotation(rng).matrix
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1) <= 1e-9


def test_boxplus_zero_and_translation(rng):
    X = random_pose(rng)
    Y = boxplus(X, np.zeros(6))
    np.testing.assert_allclose(Y.matrix(), X.matrix(), atol=1e-15)
    Z = boxplus(PoseSE3.identity(), [1, 2, 3, 0, 0, 0])
    np.testing.assert_array_equal(Z.translation, [1, 2, 3])
    np.testing.assert_array_equal(Z.R, np.eye(3))


def test_boxplus_first_order_effect(rng):
    # p_B' = p_B + dt - skew(p_B) dw to first order
    for _ in range(1000):
        X = random_pose(rng)
        p = rng.uniform(-5, 5, 3)
        d = rng.normal(size=6)
        d *= 1e-6 / np.linalg.norm(d)
        pB = transform_point(X, p)
        moved = transform_point(boxplus(X, d), p)
        np.testing.assert_allclose(moved, pB + d[:3] - skew(pB) @ d[3:], atol=1e-9)


def test_boxplus_batch_matches_scalar(rng):
    poses = [random_pose(rng) for _ in range(10)]
    d = rng.normal(size=(10, 6)) * 0.3
    q = np.array([p.rotation.q for p in poses])
    t = np.array([p.translation for p in poses])
    qb, tb = boxplus_batch(q, t, d)
    for i, p in enumerate(poses):
        y = boxplus(p, d[i])
        np.testing.assert_allclose(qb[i], y.rotation.q, atol=1e-15)
        np.testing.assert_allclose(tb[i], y.translation, atol=1e-14)


def test_quaternion_stays_normalised(rng):
    X = random_pose(rng)
    for _ in range(10_000):
        X = boxplus(X, rng.normal(size=6) * 0.1)
    assert abs(np.linalg.norm(X.rotation.q) - 1) <= 1e-9


def test_group_operations(rng):
    T = random_pose(rng)
    np.testing.assert_allclose(compose(T, PoseSE3.identity()).matrix(), T.matrix(), atol=1e-15)
    assert inverse(PoseSE3.identity()) == PoseSE3.identity()
    np.testing.assert_allclose(inverse(inverse(T)).matrix(), T.matrix(), atol=1e-9)
    for _ in range(100):
        A, B, C = random_pose(rng), random_pose(rng), random_pose(rng)
        p = rng.uniform(-5, 5, 3)
        np.testing.assert_allclose(compose(A, B).matrix(), A.matrix() @ B.matrix(), atol=1e-9)
        np.testing.assert_allclose(compose(compose(A, B), C).matrix(),
                                   compose(A, compose(B, C)).matrix(), atol=1e-9)
        np.testing.assert_allclose(transform_point(compose(A, B), p),
                                   transform_point(A, transform_point(B, p)), atol=1e-9)
        np.testing.assert_allclose(transform_point(inverse(A), transform_point(A, p)), p, atol=1e-9)


@settings(max_examples=200)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_matrix_quaternion_round_trip(q):
    R = Rotation(q)
    R2 = Rotation.from_matrix(R.matrix)
    np.testing.assert_allclose(R2.matrix, R.matrix, atol=1e-9)
