import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egonn.geometry import (FULL_QUANTIZATION, TOY_QUANTIZATION, PoseSE3, QuantizationSpec,
                            augment_global, augment_local, cart_to_cyl, cyl_to_cart,
                            decimate_trajectory, quantize, random_yaw_rotation, remove_ground,
                            se3_apply, se3_inverse, se3_relative)

finite = st.floats(-100, 100, allow_nan=False)


def random_pose(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    return PoseSE3(R, rng.uniform(-20, 20, 3))


@pytest.mark.parametrize("p, expected", [
    ((3, 4, 2), (5, math.atan2(4, 3), 2)),
    ((1, 0, 7), (1, 0, 7)),
    ((0, 1, 0), (1, math.pi / 2, 0)),
    ((0, 0, 3), (0, 0, 3)),
    ((-1, -1e-18, 0), (1, math.pi, 0)),
])
def test_cart_to_cyl_examples(p, expected):
    np.testing.assert_allclose(cart_to_cyl(np.array([p]))[0], expected, atol=1e-12)


def test_theta_range_is_half_open():
    theta = cart_to_cyl(np.array([[1.0, -1e-300, 0.0], [1.0, -1e-12, 0.0]]))[:, 1]
    assert np.all((theta >= 0) & (theta < 2 * math.pi))


@pytest.mark.parametrize("c, expected", [
    ((1, 0, 0), (1, 0, 0)),
    ((5, math.pi, 2), (-5, 0, 2)),
    ((2, math.pi / 2, -1), (0, 2, -1)),
])
def test_cyl_to_cart_examples(c, expected):
    np.testing.assert_allclose(cyl_to_cart(np.array([c]))[0], expected, atol=1e-12)


@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=20))
def test_cyl_round_trip(points):
    p = np.array(points, dtype=float)
    p = p[np.hypot(p[:, 0], p[:, 1]) > 1e-9]
    np.testing.assert_allclose(cyl_to_cart(cart_to_cyl(p)), p, atol=1e-12, rtol=1e-12)


def test_remove_ground():
    out = remove_ground(np.array([[0, 0, -1.0], [0, 0, 0.5]]), -0.9)
    np.testing.assert_array_equal(out, [[0, 0, 0.5]])
    cloud = np.random.default_rng(0).normal(size=(50, 3))
    np.testing.assert_array_equal(remove_ground(cloud, -np.inf), cloud)
    assert remove_ground(cloud, 100.0).shape == (0, 3)
    # strict inequality: points exactly at the threshold are ground
    assert len(remove_ground(np.array([[0, 0, -0.9]]), -0.9)) == 0


def test_remove_ground_order_independent():
    cloud = np.random.default_rng(1).normal(size=(100, 3))
    perm = np.random.default_rng(2).permutation(100)
    a = remove_ground(cloud, 0.0)
    b = remove_ground(cloud[perm], 0.0)
    assert sorted(map(tuple, a)) == sorted(map(tuple, b))


def test_quantization_spec_validation():
    with pytest.raises(ValueError):
        QuantizationSpec(0.3, 0.7, 0.2)  # 2π/0.7 is not an integer
    with pytest.raises(ValueError):
        QuantizationSpec(0.0, math.radians(1), 0.2)
    assert FULL_QUANTIZATION.n_theta == 360
    assert TOY_QUANTIZATION.n_theta == 384


def test_quantize_examples():
    q = FULL_QUANTIZATION
    np.testing.assert_array_equal(quantize(np.array([[0.65, 0.0, 0.0]]), q), [[2, 0, 0]])
    same = quantize(np.array([[0.65, 0.0, 0.01], [0.66, 0.001, 0.02]]), q)
    assert len(same) == 1


def test_quantize_order_and_duplicate_invariance():
    rng = np.random.default_rng(3)
    cloud = rng.uniform(-20, 20, (300, 3))
    base = quantize(cloud, TOY_QUANTIZATION)
    shuffled = np.concatenate([cloud, cloud[:50]])[rng.permutation(350)]
    np.testing.assert_array_equal(quantize(shuffled, TOY_QUANTIZATION), base)


@pytest.mark.parametrize("k", [1, 7, 32, 95])
def test_quantize_rotation_is_cyclic_shift(k):
    q = TOY_QUANTIZATION
    rng = np.random.default_rng(k)
    # keep points away from bin borders so rotation round-off cannot change bins
    cyl = np.column_stack([rng.uniform(1, 30, 200),
                           (rng.integers(0, q.n_theta, 200) + rng.uniform(0.1, 0.9, 200)) * q.theta_step,
                           rng.uniform(-2, 5, 200)])
    cloud = cyl_to_cart(cyl)
    rotated = random_yaw_rotation(cloud, k * q.theta_step)
    expected = quantize(cloud, q)
    expected[:, 1] = (expected[:, 1] + k) % q.n_theta
    got = quantize(rotated, q)
    assert set(map(tuple, got)) == set(map(tuple, expected))


def test_se3_examples():
    cloud = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(se3_apply(PoseSE3.identity(), cloud), cloud)
    np.testing.assert_allclose(PoseSE3.from_yaw(math.pi / 2).apply([[1, 0, 0]]), [[0, 1, 0]], atol=1e-12)
    T = random_pose(np.random.default_rng(1))
    rel = se3_relative(T, T)
    np.testing.assert_allclose(rel.matrix(), np.eye(4), atol=1e-12)


def test_pose_validation():
    with pytest.raises(ValueError):
        PoseSE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        PoseSE3(np.eye(3) * 1.001, np.zeros(3))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_se3_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
    cloud = rng.normal(size=(20, 3)) * 10
    np.testing.assert_allclose(a.compose(b).compose(c).matrix(), a.compose(b.compose(c)).matrix(), atol=1e-9)
    np.testing.assert_allclose(a.compose(se3_inverse(a)).matrix(), np.eye(4), atol=1e-9)
    np.testing.assert_allclose(se3_apply(se3_inverse(a), se3_apply(a, cloud)), cloud, atol=1e-9)
    np.testing.assert_allclose(se3_relative(a, b).matrix(), np.linalg.inv(a.matrix()) @ b.matrix(), atol=1e-9)
    np.testing.assert_allclose(a.compose(b).apply(cloud), a.apply(b.apply(cloud)), atol=1e-9)


def test_augment_global_identity_and_rotation():
    cloud = np.random.default_rng(0).normal(size=(100, 3))
    rng = np.random.default_rng(1)
    out = augment_global(cloud, rng, sigma=0.0, cuboid_side=(0.0, 0.0), rotate=False)
    np.testing.assert_array_equal(out, cloud)
    flipped = random_yaw_rotation(cloud, math.pi)
    np.testing.assert_allclose(flipped[:, :2], -cloud[:, :2], atol=1e-12)
    np.testing.assert_array_equal(flipped[:, 2], cloud[:, 2])


def test_augment_global_deterministic_and_removes_minority():
    rng = np.random.default_rng(0)
    cloud = rng.uniform(-30, 30, (5000, 3))
    a = augment_global(cloud, np.random.default_rng(7))
    b = augment_global(cloud, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()
    assert len(a) > 0.5 * len(cloud)
    # rotation preserves radial distances of surviving points up to jitter
    assert np.all(np.abs(np.linalg.norm(a[:, :2], axis=1)) < 30 * math.sqrt(2) + 1)


def test_augment_local():
    cloud = np.random.default_rng(0).normal(size=(50, 3)) * 10
    out, T = augment_local(cloud, np.random.default_rng(3))
    np.testing.assert_allclose(T.inverse().apply(out), cloud, atol=1e-9)
    out0, T0 = augment_local(cloud, np.random.default_rng(3), max_translation=0.0, rotate=False)
    np.testing.assert_allclose(T0.matrix(), np.eye(4), atol=0)
    np.testing.assert_array_equal(out0, cloud)
    rng = np.random.default_rng(4)
    norms = [np.linalg.norm(augment_local(np.zeros((1, 3)), rng)[1].translation[:2]) for _ in range(10_000)]
    assert max(norms) <= 5.0
    assert all(abs(augment_local(np.zeros((1, 3)), rng)[1].translation[2]) == 0 for _ in range(100))


def test_decimate_trajectory():
    poses = [PoseSE3.from_yaw(0, (x, 0, 0)) for x in (0, 0.1, 0.25, 0.5)]
    assert decimate_trajectory(poses, 0.2) == [0, 2, 3]
    assert decimate_trajectory(poses, 0.0) == [0, 1, 2, 3]
    assert decimate_trajectory([PoseSE3.identity()] * 5, 0.2) == [0]
    assert decimate_trajectory([], 0.2) == []
    with pytest.raises(ValueError):
        decimate_trajectory(poses, -1)
