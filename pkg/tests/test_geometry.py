"""Transform algebra and pinhole model against explicit 4x4 matrix oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reconbench.geometry import (
    BehindCamera,
    CameraIntrinsics,
    NonPositiveDepth,
    RigidTransform,
    SimilarityTransform,
    backproject,
    chain_tracker_to_camera,
    compose,
    invert,
    matrix_to_quat,
    project,
    quat_to_matrix,
    rotation_angle,
)

from conftest import random_rigid, random_rotation, random_similarity

K = CameraIntrinsics(fx=500.0, fy=480.0, cx=320.0, cy=240.0, width=640, height=480)


def transforms_close(a, b, tol=1e-9):
    return (
        np.abs(a.matrix() - b.matrix()).max() < tol
        and abs(a.scale - b.scale) < tol
    )


class TestCompose:
    def test_identity_left(self, rng):
        t = random_rigid(rng)
        assert transforms_close(compose(RigidTransform.identity(), t), t)

    def test_inverse_gives_identity(self, rng):
        t = random_similarity(rng)
        assert transforms_close(compose(t, invert(t)), SimilarityTransform.identity())

    def test_matches_homogeneous_product(self, rng):
        # oracle: explicit 4x4 matrix multiplication
        for _ in range(20):
            a = random_similarity(rng)
            b = random_similarity(rng)
            expected = a.matrix() @ b.matrix()
            got = compose(a, b).matrix()
            assert np.abs(got - expected).max() < 1e-9

    def test_rigid_pair_stays_rigid(self, rng):
        a, b = random_rigid(rng), random_rigid(rng)
        assert isinstance(compose(a, b), RigidTransform)

    def test_mixed_pair_is_similarity(self, rng):
        out = compose(random_rigid(rng), random_similarity(rng))
        assert isinstance(out, SimilarityTransform)

    def test_associative(self, rng):
        chain = [random_similarity(rng, trans_scale=10.0) for _ in range(10)]
        left = chain[0]
        for t in chain[1:]:
            left = compose(left, t)
        right = chain[-1]
        for t in chain[-2::-1]:
            right = compose(t, right)
        assert np.abs(left.matrix() - right.matrix()).max() < 1e-8

    def test_apply_matches_matrix(self, rng):
        t = random_similarity(rng)
        pts = rng.normal(size=(50, 3))
        hom = np.concatenate([pts, np.ones((50, 1))], axis=1)
        expected = (t.matrix() @ hom.T).T[:, :3]
        assert np.abs(t.apply(pts) - expected).max() < 1e-9


class TestInvert:
    def test_identity(self):
        assert transforms_close(invert(RigidTransform.identity()), RigidTransform.identity())

    def test_pure_translation(self):
        t = RigidTransform(np.eye(3), [1.0, -2.0, 3.0])
        assert np.allclose(invert(t).translation, [-1.0, 2.0, -3.0])

    def test_matches_matrix_inverse(self, rng):
        # oracle: general 4x4 inverse
        for _ in range(20):
            t = random_similarity(rng)
            expected = np.linalg.inv(t.matrix())
            assert np.abs(invert(t).matrix() - expected).max() < 1e-9

    def test_double_inverse_roundtrip(self, rng):
        for _ in range(10):
            t = random_similarity(rng)
            assert transforms_close(invert(invert(t)), t)


class TestOrthonormality:
    def test_drifted_rotation_is_renormalized(self, rng):
        r = random_rotation(rng) + rng.normal(scale=1e-6, size=(3, 3))
        t = RigidTransform(r, np.zeros(3))
        assert np.abs(t.rotation.T @ t.rotation - np.eye(3)).max() < 1e-12

    def test_preserved_through_long_chains(self, rng):
        t = random_rigid(rng)
        for _ in range(200):
            t = compose(t, random_rigid(rng))
        assert np.abs(t.rotation.T @ t.rotation - np.eye(3)).max() < 1e-9

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            RigidTransform(np.full((3, 3), np.nan), np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3), [np.inf, 0, 0])


class TestChainTrackerToCamera:
    def test_all_identity(self):
        i = RigidTransform.identity()
        assert transforms_close(chain_tracker_to_camera(i, i, i, i), i)

    def test_cancellation(self, rng):
        i = RigidTransform.identity()
        t = random_rigid(rng)
        assert transforms_close(chain_tracker_to_camera(i, i, t, t), i)

    def test_matches_four_factor_product(self, rng):
        # oracle: chained homogeneous products
        for _ in range(10):
            v_t_a, a_t_t, e_t_t, e_t_c = (random_rigid(rng) for _ in range(4))
            expected = (
                v_t_a.matrix() @ a_t_t.matrix()
                @ np.linalg.inv(e_t_t.matrix()) @ e_t_c.matrix()
            )
            got = chain_tracker_to_camera(v_t_a, a_t_t, e_t_t, e_t_c)
            assert np.abs(got.matrix() - expected).max() < 1e-9


class TestQuaternions:
    def test_roundtrip(self, rng):
        for _ in range(50):
            r = random_rotation(rng)
            assert np.abs(quat_to_matrix(matrix_to_quat(r)) - r).max() < 1e-9

    def test_identity(self):
        assert np.allclose(quat_to_matrix([1, 0, 0, 0]), np.eye(3))

    def test_half_turn_about_z(self):
        q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        assert np.abs(quat_to_matrix(q) - expected).max() < 1e-12


class TestBackproject:
    def test_principal_ray(self):
        p = backproject([K.cx, K.cy], 10.0, K, RigidTransform.identity())
        assert np.allclose(p, [0.0, 0.0, 10.0])

    def test_one_focal_length_off_axis(self):
        # oracle: pinhole by hand, x/z = (u - cx)/fx = 1
        p = backproject([K.cx + K.fx, K.cy], 10.0, K, RigidTransform.identity())
        assert np.allclose(p, [10.0, 0.0, 10.0], atol=1e-9)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(NonPositiveDepth):
            backproject([10.0, 10.0], 0.0, K, RigidTransform.identity())
        with pytest.raises(NonPositiveDepth):
            backproject([10.0, 10.0], -1.0, K, RigidTransform.identity())

    def test_roundtrip_through_project(self, rng):
        t = random_rigid(rng, trans_scale=10.0)
        pix = np.column_stack([
            rng.uniform(0, K.width - 1, 40), rng.uniform(0, K.height - 1, 40)])
        depth = rng.uniform(5.0, 500.0, 40)
        pts = backproject(pix, depth, K, t)
        pix2, depth2 = project(pts, K, t)
        assert np.abs(pix2 - pix).max() < 1e-6
        assert np.abs(depth2 - depth).max() < 1e-6


class TestProject:
    def test_on_axis(self):
        pix, z = project([0.0, 0.0, 25.0], K, RigidTransform.identity())
        assert np.allclose(pix, [K.cx, K.cy])
        assert z == pytest.approx(25.0)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project([0.0, 0.0, -5.0], K, RigidTransform.identity())
        with pytest.raises(BehindCamera):
            project([0.0, 0.0, 0.0], K, RigidTransform.identity())

    def test_roundtrip_through_backproject(self, rng):
        t = random_rigid(rng, trans_scale=10.0)
        pts_cam = np.column_stack([
            rng.normal(size=30), rng.normal(size=30), rng.uniform(5, 100, 30)])
        pts = t.apply(pts_cam)
        pix, z = project(pts, K, t)
        back = backproject(pix, z, K, t)
        assert np.abs(back - pts).max() < 1e-6


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, width=10, height=10)

    def test_contains(self):
        assert K.contains(np.array([0.0, 0.0]))
        assert K.contains(np.array([K.width - 1.0, K.height - 1.0]))
        assert not K.contains(np.array([K.width + 1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_property_invert_roundtrip(seed):
    r = np.random.default_rng(seed)
    t = random_similarity(r)
    m = invert(invert(t)).matrix()
    assert np.abs(m - t.matrix()).max() < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_property_compose_invert_is_identity(seed):
    r = np.random.default_rng(seed)
    t = random_similarity(r)
    m = compose(invert(t), t).matrix()
    assert np.abs(m - np.eye(4)).max() < 1e-9


def test_rotation_angle():
    assert rotation_angle(np.eye(3)) == 0.0
    c, s = np.cos(0.3), np.sin(0.3)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    assert rotation_angle(rz) == pytest.approx(0.3, abs=1e-12)
