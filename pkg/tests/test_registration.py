"""Rigid transforms and point-to-plane ICP on a static orchard scene.

The scene (undulating ground, trunks, posts) is centered on its centroid so
a 10 degree rotation does not turn into metres of lever-arm translation.
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orchard4d.core import FruitLandmark, PointCloud, rotation_angle_deg
from orchard4d.errors import InvalidInputError, RegistrationFailure
from orchard4d.registration import (
    ICPParams,
    RigidTransform,
    apply,
    estimate_normals,
    icp_align,
    voxel_downsample,
)
from orchard4d.simulator import OrchardSpec, _rng, generate, static_scene


@pytest.fixture(scope="module")
def scene():
    spec = OrchardSpec(n_trees=2, fruits_per_tree=(5, 5))
    pts = static_scene(generate(spec), spec, _rng(0, 99), noise=0.0)
    return pts - pts.mean(axis=0)


def random_transform(rng, max_deg=10.0, max_t=0.3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t *= rng.uniform(0, max_t) / np.linalg.norm(t)
    return RigidTransform.from_rotvec(axis * np.radians(rng.uniform(0, max_deg)), t)


def errors(est: RigidTransform, truth: RigidTransform):
    return rotation_angle_deg(est.R @ truth.R.T), float(np.linalg.norm(est.translation - truth.translation))


def test_identity_alignment(scene):
    res = icp_align(PointCloud(scene), PointCloud(scene))
    rot, tr = errors(res.transform, RigidTransform.identity())
    assert rot < 1e-6 and tr < 1e-9
    assert res.rms < 1e-9


def test_known_transforms_recovered_noise_free(scene):
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = random_transform(rng)
        res = icp_align(PointCloud(scene), PointCloud(T.apply(scene)))
        rot, tr = errors(res.transform, T)
        assert rot <= 0.1 and tr <= 0.002


def test_rms_history_non_increasing(scene):
    T = RigidTransform.from_rotvec([0, 0, np.radians(8)], [0.2, -0.1, 0.05])
    res = icp_align(PointCloud(scene), PointCloud(T.apply(scene)))
    h = res.history
    assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_disjoint_clouds_fail(scene):
    far = PointCloud(scene + [50.0, 0, 0])
    with pytest.raises(RegistrationFailure):
        icp_align(PointCloud(scene), far)


def test_too_few_points_rejected():
    with pytest.raises(InvalidInputError):
        icp_align(PointCloud(np.zeros((10, 3))), PointCloud(np.zeros((10, 3))))


def test_tight_correspondence_distance_fails_on_large_offset(scene):
    params = ICPParams(max_correspondence_distance=0.01, min_inlier_fraction=0.9)
    with pytest.raises(RegistrationFailure):
        icp_align(PointCloud(scene), PointCloud(scene + [0.25, 0, 0]), params=params)


def test_voxel_downsample_averages_cells():
    pts = np.array([[0.01, 0.01, 0.01], [0.03, 0.03, 0.03], [0.2, 0, 0]])
    out = voxel_downsample(pts, 0.05)
    assert np.allclose(sorted(map(tuple, out)), [(0.02, 0.02, 0.02), (0.2, 0, 0)])


def test_plane_normals():
    rng = np.random.default_rng(1)
    pts = np.column_stack((rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200), np.zeros(200)))
    n = estimate_normals(pts, 10)
    assert np.allclose(np.abs(n[:, 2]), 1.0)


# ----------------------------------------------------------------------- apply


def lm(p):
    return FruitLandmark(0, p, 0.07)


def test_apply_identity_and_translation():
    L = [lm([1.0, 2.0, 3.0])]
    assert np.array_equal(apply(RigidTransform.identity(), L)[0].position, [1, 2, 3])
    moved = apply(RigidTransform.from_rotvec([0, 0, 0], [0.5, -1, 2]), L)[0]
    assert np.allclose(moved.position, [1.5, 1, 5])
    assert moved.diameter == 0.07


def test_apply_yaw():
    out = apply(RigidTransform.from_rotvec([0, 0, np.pi / 2], [0, 0, 0]), [lm([1.0, 0, 0])])
    assert np.allclose(out[0].position, [0, 1, 0], atol=1e-15)


angles = st.floats(-np.pi, np.pi)
offsets = st.floats(-10, 10)


@given(st.tuples(angles, angles, angles), st.tuples(offsets, offsets, offsets), st.tuples(offsets, offsets, offsets))
def test_apply_inverse_round_trip(rv, t, p):
    T = RigidTransform.from_rotvec(np.array(rv) / 2, t)
    back = apply(T.inverse(), apply(T, [lm(p)]))[0]
    assert np.allclose(back.position, p, atol=1e-9)


@given(st.tuples(angles, angles, angles), st.tuples(offsets, offsets, offsets))
def test_compose_matches_matrices(rv, t):
    A = RigidTransform.from_rotvec(np.array(rv) / 2, t)
    B = RigidTransform.from_rotvec([0.1, -0.2, 0.3], [1, 2, 3])
    assert np.allclose(A.compose(B).matrix, A.matrix @ B.matrix, atol=1e-9)
