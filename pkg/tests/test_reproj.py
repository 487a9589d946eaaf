"""Box-constrained reprojection refinement.

Views are identity-oriented cameras strung along x at z = 0 looking at
fruits near z = 2, so a 0.1 m lateral error is fx * 0.1 / 2 = 25 px.
"""

import numpy as np
import pytest

from orchard4d.core import FruitLandmark, PixelObs, Pose, project_points, rotvec_to_matrix
from orchard4d.reproj import (
    ReprojectionProblem,
    _apply_pose_step,
    jacobian,
    optimize,
    refine_landmarks,
    residuals,
    robust_cost,
)


def views(n=5, spacing=0.1, tilt=0.0, seed=None):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        R = rotvec_to_matrix(rng.normal(scale=tilt, size=3)) if seed is not None else np.eye(3)
        out.append(Pose.from_matrix(R, [spacing * (i - (n - 1) / 2), 0, 0], i, 0.2 * i))
    return out


def problem_for(truth, init, poses, K, **kw):
    truth = np.atleast_2d(truth)
    frames, fruits, pix = [], [], []
    for i, p in enumerate(poses):
        uv, _, vis = project_points(truth, p, K)
        for j in np.flatnonzero(vis):
            frames.append(i)
            fruits.append(j)
            pix.append(uv[j])
    return ReprojectionProblem(K, tuple(poses), frames, fruits, pix, np.atleast_2d(init), **kw)


def numeric_jacobian(prob, X, poses, h=1e-6):
    cols = []
    for k in range(X.size):
        e = np.zeros(X.size)
        e[k] = h
        cols.append((residuals(prob, (X.ravel() + e).reshape(-1, 3), poses) - residuals(prob, (X.ravel() - e).reshape(-1, 3), poses)) / (2 * h))
    if prob.optimize_poses:
        for k in range(6 * (len(poses) - 1)):
            e = np.zeros(6 * (len(poses) - 1))
            e[k] = h
            cols.append((residuals(prob, X, _apply_pose_step(poses, e)) - residuals(prob, X, _apply_pose_step(poses, -e))) / (2 * h))
    return np.column_stack(cols)


# ------------------------------------------------------------------ residuals


def test_exact_geometry_zero_residual(K):
    X = np.array([[0.05, -0.1, 2.0], [-0.2, 0.1, 2.3]])
    prob = problem_for(X, X, views(), K)
    assert np.allclose(residuals(prob), 0, atol=1e-9)


def test_lateral_displacement_is_25_px(K):
    truth = np.array([[0.0, 0.0, 2.0]])
    prob = problem_for(truth, truth + [0.1, 0, 0], [Pose.identity()], K)
    assert np.linalg.norm(residuals(prob)) == pytest.approx(25.0, abs=1e-9)


def test_behind_camera_residual_is_capped(K):
    prob = ReprojectionProblem(K, (Pose.identity(),), [0], [0], [[320.0, 240.0]], [[0.0, 0.0, -1.0]])
    r = residuals(prob)
    assert np.all(np.isfinite(r))
    assert np.linalg.norm(r) == pytest.approx(K.diagonal)


def test_far_off_residual_is_capped(K):
    prob = ReprojectionProblem(K, (Pose.identity(),), [0], [0], [[320.0, 240.0]], [[50.0, 0.0, 1.0]])
    assert np.linalg.norm(residuals(prob)) == pytest.approx(K.diagonal)


def test_invalid_problem_rejected(K):
    with pytest.raises(ValueError):
        ReprojectionProblem(K, (Pose.identity(),), [0], [0], [[1.0, 1.0]], [[0, 0, 2.0]], box_halfwidth=0.0)
    with pytest.raises(ValueError):
        ReprojectionProblem(K, (Pose.identity(),), [3], [0], [[1.0, 1.0]], [[0, 0, 2.0]])


# ------------------------------------------------------------------- jacobian


@pytest.mark.parametrize("optimize_poses", [False, True])
def test_jacobian_matches_central_differences(K, optimize_poses):
    rng = np.random.default_rng(42)
    for trial in range(25):
        poses = views(4, tilt=0.05, seed=trial)
        truth = np.column_stack((rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.2, 0.2, 3), rng.uniform(1.5, 2.5, 3)))
        X = truth + rng.normal(scale=0.03, size=truth.shape)
        prob = problem_for(truth, X, poses, K, optimize_poses=optimize_poses)
        J = jacobian(prob, X, poses).toarray()
        Jn = numeric_jacobian(prob, X, poses)
        assert np.abs(J - Jn).max() <= 1e-4 * np.abs(Jn).max()


# ------------------------------------------------------------------ optimizer


def test_zero_residual_start_is_unchanged(K):
    X = np.array([[0.0, 0.05, 2.0]])
    res = optimize(problem_for(X, X, views(), K))
    assert np.array_equal(res.positions, X)
    assert res.iterations == 0 and res.cost == 0.0


def test_recovers_five_cm_perturbation(K):
    truth = np.array([[0.03, -0.05, 2.1]])
    res = optimize(problem_for(truth, truth + [0.05, 0, 0], views(), K, box_halfwidth=0.2))
    assert np.linalg.norm(res.positions - truth) < 1e-3


def test_active_box_clamps_to_face(K):
    truth = np.array([[0.3, 0.0, 2.0]])
    init = np.array([[0.0, 0.0, 2.0]])
    prob = problem_for(truth, init, views(), K, box_halfwidth=0.1)
    res = optimize(prob)
    assert res.positions[0, 0] == pytest.approx(0.1, abs=1e-12)
    assert res.cost < res.initial_cost


def test_cost_history_monotone_and_box_exact(K):
    rng = np.random.default_rng(9)
    for trial in range(30):
        truth = np.column_stack((rng.uniform(-0.4, 0.4, 6), rng.uniform(-0.3, 0.3, 6), rng.uniform(1.5, 2.5, 6)))
        init = truth + rng.normal(scale=0.15, size=truth.shape)
        prob = problem_for(truth, init, views(6), K, box_halfwidth=0.1)
        res = optimize(prob)
        assert all(b <= a for a, b in zip(res.history, res.history[1:]))
        assert res.cost <= res.initial_cost
        # exact: compare against the stored box, not a re-rounded |X - X0|
        assert np.all((res.positions >= prob.lower) & (res.positions <= prob.upper))
        assert np.abs(res.positions - init).max() <= 0.1 + 1e-15


def test_single_landmark_decouples_from_joint(K):
    rng = np.random.default_rng(4)
    truth = np.column_stack((rng.uniform(-0.3, 0.3, 4), rng.uniform(-0.2, 0.2, 4), rng.uniform(1.8, 2.4, 4)))
    init = truth + rng.normal(scale=0.04, size=truth.shape)
    poses = views(5)
    joint = optimize(problem_for(truth, init, poses, K)).positions
    for j in range(4):
        solo = optimize(problem_for(truth[j], init[j], poses, K)).positions
        assert np.allclose(solo[0], joint[j], atol=1e-9)


def test_single_view_fruit_passes_through(K):
    X = np.array([[0.0, 0.0, 2.0]])
    prob = problem_for(X, X + [0.05, 0, 0], [Pose.identity()], K)
    assert np.array_equal(optimize(prob).positions, X + [0.05, 0, 0])


def test_joint_pose_refinement_reduces_cost(K):
    truth = np.column_stack((np.linspace(-0.4, 0.4, 8), np.tile([-0.1, 0.1], 4), np.linspace(1.8, 2.4, 8)))
    poses = views(5)
    prob0 = problem_for(truth, truth, poses, K)
    noisy = tuple([poses[0]] + [Pose.from_matrix(p.R, p.translation + [0.01, -0.01, 0], p.frame_id, p.timestamp) for p in poses[1:]])
    prob = ReprojectionProblem(K, noisy, prob0.obs_frame, prob0.obs_fruit, prob0.obs_pixel, truth + 0.01, optimize_poses=True)
    res = optimize(prob)
    assert res.cost < 0.05 * res.initial_cost
    assert np.allclose(res.poses[0].translation, poses[0].translation)
    assert np.all((res.positions >= prob.lower) & (res.positions <= prob.upper))


def test_huber_cost_is_robust(K):
    truth = np.array([[0.0, 0.0, 2.0]])
    prob = problem_for(truth, truth + [0.1, 0, 0], [Pose.identity()], K, huber_scale=3.0)
    assert robust_cost(prob) == pytest.approx(3.0 * 25.0 - 4.5)


def test_refine_landmarks_updates_positions_only(K):
    poses = views(5)
    truth = np.array([0.02, 0.0, 2.0])
    obs = []
    for p in poses:
        uv, _, _ = project_points(truth[None], p, K)
        obs.append(PixelObs(p.frame_id, tuple(uv[0]), p.frame_id))
    lm = FruitLandmark(3, truth + [0.03, -0.02, 0.0], 0.07, 5, tuple(obs))
    (out,), res = refine_landmarks([lm], poses, K)
    assert np.linalg.norm(out.position - truth) < 1e-3
    assert (out.fruit_id, out.diameter, out.source_track, out.pixel_obs) == (3, 0.07, 5, lm.pixel_obs)
    assert refine_landmarks([], poses, K)[0] == []
