import math

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import matrix_of, poses, random_pose
from fidmap.se3 import (
    Pose,
    box_minus,
    compact,
    compose,
    expand_compact,
    inverse,
    predict_gravity,
    relative_pose,
    rot_x,
    rot_z,
    translation,
)


def test_compose_identity_and_translations(rng):
    p = random_pose(rng)
    assert compose(Pose.identity(), p).allclose(p, 1e-12)
    assert compose(translation(1, 2, 3), translation(4, 5, 6)).allclose(translation(5, 7, 9))


def test_compose_rotation_then_translation():
    out = compose(rot_z(math.pi / 2), translation(1, 0, 0))
    np.testing.assert_allclose(out.p, [0, 1, 0], atol=1e-15)
    assert out.allclose(rot_z(math.pi / 2, p=(0, 1, 0)), 1e-12)


def test_compose_matches_matrix_product(rng):
    for _ in range(200):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(matrix_of(compose(a, b)), matrix_of(a) @ matrix_of(b), atol=1e-12)


def test_compose_associative(rng):
    for _ in range(1000):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        left, right = compose(compose(a, b), c), compose(a, compose(b, c))
        np.testing.assert_allclose(left.p, right.p, atol=1e-12)
        np.testing.assert_allclose(left.q, right.q, atol=1e-12)


def test_inverse_examples():
    assert inverse(Pose.identity()).allclose(Pose.identity())
    assert inverse(translation(1, 0, 0)).allclose(translation(-1, 0, 0))
    a = rot_z(math.pi / 2, p=(1, 0, 0))
    np.testing.assert_allclose(matrix_of(inverse(a)), np.linalg.inv(matrix_of(a)), atol=1e-12)
    np.testing.assert_allclose(inverse(a).p, [0, 1, 0], atol=1e-15)


def test_inverse_two_sided(rng):
    for _ in range(200):
        a = random_pose(rng)
        for out in (compose(a, inverse(a)), compose(inverse(a), a)):
            np.testing.assert_allclose(out.p, 0, atol=1e-12)
            np.testing.assert_allclose(out.q, 0, atol=1e-12)


def test_relative_pose_examples():
    p = rot_x(0.3, p=(1, 2, 3))
    assert relative_pose(p, p).allclose(Pose.identity(), 1e-12)
    assert relative_pose(Pose.identity(), translation(2, 0, 0)).allclose(translation(2, 0, 0))
    out = relative_pose(rot_z(math.pi / 2), translation(0, 1, 0))
    np.testing.assert_allclose(out.p, [1, 0, 0], atol=1e-15)
    assert out.allclose(rot_z(-math.pi / 2, p=(1, 0, 0)), 1e-12)


def test_box_minus_examples():
    np.testing.assert_array_equal(box_minus(rot_x(0.2), rot_x(0.2)), np.zeros(6))
    np.testing.assert_allclose(box_minus(translation(1, 0, 0), Pose.identity()), [1, 0, 0, 0, 0, 0])
    r = box_minus(rot_z(math.radians(2)), rot_z(math.radians(1)))
    np.testing.assert_allclose(r, [0, 0, 0, 0, 0, 0.0087265], atol=1e-7)
    assert r[5] == pytest.approx(math.sin(math.radians(0.5)), abs=1e-15)


def test_box_minus_small_angle_is_half_angle(rng):
    for deg in (0.1, 1.0, 2.5, 4.9):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        base = random_pose(rng)
        turned = compose(base, Pose.from_rotvec(np.zeros(3), axis * math.radians(deg)))
        r = box_minus(turned, base)
        assert np.linalg.norm(r[3:]) == pytest.approx(math.radians(deg) / 2, rel=0.01)


def test_box_minus_is_hemisphere_invariant():
    a = Pose.from_quat([0, 0, 0], [0.1, 0.2, 0.3, 0.9])
    b = Pose.from_quat([0, 0, 0], [-0.1, -0.2, -0.3, -0.9])
    np.testing.assert_allclose(box_minus(a, b), 0, atol=1e-15)


def test_predict_gravity_examples():
    g = np.array([0.0, 0.0, -1.0])
    np.testing.assert_allclose(predict_gravity(Pose.identity(), g), g)
    np.testing.assert_allclose(predict_gravity(rot_z(1.234), g), g, atol=1e-15)
    np.testing.assert_allclose(predict_gravity(rot_x(math.pi / 2), g), [0, -1, 0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(poses)
def test_predict_gravity_unit_norm(x):
    g_world = np.array([0.3, -0.4, -0.866])
    g = predict_gravity(x, g_world / np.linalg.norm(g_world))
    assert abs(np.linalg.norm(g) - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(poses)
def test_compact_round_trip(x):
    assert x.q.shape == (3,)
    full = expand_compact(x.q)
    assert full[3] >= 0
    np.testing.assert_allclose(compact(full), x.q, atol=1e-15)
    assert Pose(x.p, compact(full)).allclose(x, 1e-15)


@settings(max_examples=200, deadline=None)
@given(poses, poses)
def test_box_minus_zero_iff_equal(a, b):
    assert np.linalg.norm(box_minus(a, a)) < 1e-12
    # compare as transforms: at w = 0, q and -q are the same rotation
    if not np.allclose(matrix_of(a), matrix_of(b), atol=1e-6):
        assert np.linalg.norm(box_minus(a, b)) > 0


def test_negative_scalar_quaternion_is_flipped():
    x = Pose.from_quat([0, 0, 0], [0, 0, 0.6, -0.8])
    np.testing.assert_allclose(x.quat, [0, 0, -0.6, 0.8])


def test_invalid_compact_quaternion():
    with pytest.raises(ValueError):
        Pose([0, 0, 0], [0.8, 0.8, 0.0])
