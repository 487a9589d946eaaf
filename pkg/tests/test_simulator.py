"""Synthetic orchard generation and rendering against independent checks.

Rendering oracle: a fruit of radius r at camera depth z projects to a disk of
radius fx * r / z about its projected center, so the centroid of an
unclipped mask, pushed back along its pixel ray to depth z, lands on the
fruit center up to rasterization error.
"""

import dataclasses

import numpy as np
import pytest

from conftest import small_spec
from orchard4d.associate import visual_cost
from orchard4d.errors import InvalidInputError
from orchard4d.simulator import (
    _CAM_R,
    SessionSpec,
    camera_path,
    generate,
    full_scale_spec,
    render_session,
    simulate,
    spec_from_dict,
    spec_to_dict,
    standard_pair_spec,
    truth_pairs,
)


def world_arrays(w):
    return [w.base_positions, w.base_diameters, w.latents, *w.session_positions, *w.session_diameters]


def test_same_seed_identical_worlds_and_sessions():
    spec = small_spec(seed=5)
    w1, s1, t1 = simulate(spec)
    w2, s2, t2 = simulate(spec)
    for a, b in zip(world_arrays(w1), world_arrays(w2)):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(s1, s2):
        assert [d.mask.runs.tobytes() for d in a.detections] == [d.mask.runs.tobytes() for d in b.detections]
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
        assert all(a.scans[f].points.tobytes() == b.scans[f].points.tobytes() for f in a.scans)
    assert t1[1].det_fruit == t2[1].det_fruit


def test_different_seed_different_world():
    assert not np.array_equal(generate(small_spec(seed=1)).base_positions, generate(small_spec(seed=2)).base_positions)


def test_no_growth_no_drift_sessions_identical():
    w = generate(small_spec(growth_sag=0.3))
    assert np.array_equal(w.session_positions[0], w.session_positions[1])
    assert np.array_equal(w.session_diameters[0], w.session_diameters[1])


def test_growth_scales_diameters_and_sags():
    spec = small_spec(sessions=(SessionSpec("a"), SessionSpec("b", growth_scale=1.2)), growth_sag=0.2)
    w = generate(spec)
    assert np.allclose(w.session_diameters[1], 1.2 * w.session_diameters[0])
    dz = w.session_positions[1][:, 2] - w.session_positions[0][:, 2]
    assert np.all(dz <= 0) and dz.min() < 0
    assert np.allclose(w.session_positions[1][:, :2], w.session_positions[0][:, :2])


def test_full_scale_fruit_count():
    w = generate(full_scale_spec())
    assert 1650 <= w.n_fruits <= 2000
    assert len(np.unique(w.tree_batch)) >= 20


def test_removal_exact_count():
    spec = small_spec(fruits_per_tree=(21, 21), sessions=(SessionSpec("a"), SessionSpec("b", removal_fraction=0.5)))
    w, sessions, truths = simulate(spec)
    assert len(truths[1].removed) == 10
    seen = set(truths[1].det_fruit.values())
    assert not seen & set(truths[1].removed)
    assert truths[0].removed == ()


def test_zero_miss_rate_detects_every_unclipped_fruit(small_pair):
    spec, world, sessions, truths = small_pair
    K = spec.intrinsics
    s, t = sessions[0], truths[0]
    by_frame = {}
    for d in s.detections:
        by_frame.setdefault(d.frame_id, set()).add(t.det_fruit[d.det_id])
    for pose in s.poses:
        pc = pose.to_camera(t.positions)
        z = pc[:, 2]
        u = K.fx * pc[:, 0] / z + K.cx
        v = K.fy * pc[:, 1] / z + K.cy
        r = K.fx * t.diameters / 2 / z
        inside = (z > 0.3) & (u - r >= 0) & (u + r < K.width - 1) & (v - r >= 0) & (v + r < K.height - 1)
        assert set(np.flatnonzero(inside)) <= by_frame.get(pose.frame_id, set())


def test_miss_rate_drops_detections():
    full = simulate(small_spec(seed=3))[1][0]
    spec = small_spec(seed=3, sessions=(SessionSpec("a", miss_detection_rate=0.3), SessionSpec("b")))
    missed = simulate(spec)[1][0]
    ratio = len(missed.detections) / len(full.detections)
    assert 0.55 < ratio < 0.85


def test_zero_embedding_noise_gives_zero_visual_cost(small_pair):
    _, _, sessions, truths = small_pair
    s, t = sessions[0], truths[0]
    first = {}
    for d in s.detections:
        f = t.det_fruit[d.det_id]
        e = s.embedding(d.embedding_id)
        if f in first:
            assert visual_cost(first[f], e) == 0.0
        else:
            first[f] = e


def test_embeddings_closer_within_fruit_than_across():
    spec = small_spec(embedding_noise=0.3)
    _, sessions, truths = simulate(spec)[0:3]
    s, t = sessions[0], truths[0]
    E = np.array([s.embedding(d.embedding_id) for d in s.detections])
    f = np.array([t.det_fruit[d.det_id] for d in s.detections])
    D = np.linalg.norm(E[:, None] - E[None], axis=2)
    same = f[:, None] == f[None]
    off = ~np.eye(len(f), dtype=bool)
    assert D[same & off].mean() < 0.5 * D[~same].mean()


def test_mask_centroid_back_projects_to_fruit_center(small_pair):
    spec, _, sessions, truths = small_pair
    K = spec.intrinsics
    s, t = sessions[0], truths[0]
    poses = s.pose_by_frame
    checked = 0
    for d in s.detections:
        r0, c0, r1, c1 = d.mask.bbox
        if r0 == 0 or c0 == 0 or r1 == K.height - 1 or c1 == K.width - 1:
            continue  # clipped by the image border
        pose = poses[d.frame_id]
        center = t.positions[t.det_fruit[d.det_id]]
        z = pose.to_camera(center[None])[0, 2]
        u, v = d.centroid_px
        ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        back = pose.to_world((ray * z)[None])[0]
        assert np.linalg.norm(back - center) < 0.01
        checked += 1
    assert checked > 20


def test_scans_are_sensor_frame_and_land_on_fruit(small_pair):
    _, _, sessions, truths = small_pair
    s, t = sessions[0], truths[0]
    f = s.poses[len(s.poses) // 2].frame_id
    scan = s.scans[f]
    assert scan.frame == "sensor"
    world = s.pose_by_frame[f].to_world(scan.points)
    d = np.linalg.norm(world[:, None] - t.positions[None], axis=2) - t.diameters / 2
    on_fruit = np.abs(d).min(axis=1) < 1e-6
    assert on_fruit.sum() > 100


def test_perturbation_applied_to_session_geometry():
    spec = small_spec(sessions=(SessionSpec("a"), SessionSpec("b", rotation_deg=(0, 0, 5), translation=(0.3, 0, 0))))
    w, sessions, truths = simulate(spec)
    G = truths[1].transform
    assert np.allclose(truths[1].positions, G.apply(w.session_positions[1]))
    cams = [c for _, c in camera_path(spec, 1)]
    got = np.array([p.translation for p in sessions[1].poses])
    assert np.allclose(got, G.apply(np.array(cams)))
    assert np.allclose(sessions[1].poses[0].R, G.R @ _CAM_R)


def test_truth_pairs_injective_and_respect_removal():
    _, _, truths = simulate(standard_pair_spec(seed=1))[0:3]
    n = len(truths[0].positions)
    pairs = truth_pairs(truths[0], truths[1], n)
    assert len({a for a, _ in pairs}) == len(pairs) == len({b for _, b in pairs})
    assert not {b for _, b in pairs} & set(truths[1].removed)
    assert len(pairs) == n - len(truths[1].removed)


def test_standard_pair_shape():
    w = generate(standard_pair_spec())
    assert w.n_fruits == 50


@pytest.mark.parametrize(
    "bad",
    [
        {"sessions": [{"date_tag": "a", "removal_fraction": 1.2}]},
        {"sessions": [{"date_tag": "a", "growth_scale": 1.2}, {"date_tag": "b", "growth_scale": 1.1}]},
        {"sessions": [{"date_tag": "a"}, {"date_tag": "a"}]},
        {"n_trees": 0},
        {"fruit_diameter": [0.09, 0.05]},
        {"colour": "red"},
        {"sessions": [{"date_tag": "a", "wind": 3}]},
    ],
)
def test_invalid_specs_rejected(bad):
    with pytest.raises(InvalidInputError):
        spec_from_dict(bad)


def test_spec_dict_round_trip():
    spec = standard_pair_spec(seed=4)
    again = spec_from_dict(spec_to_dict(spec))
    assert spec_to_dict(again) == spec_to_dict(spec)
    assert dataclasses.replace(again, intrinsics=spec.intrinsics) == spec


def test_render_respects_frame_rate_and_speed():
    spec = small_spec()
    w = generate(spec)
    s, t = render_session(w, 0, spec)
    ts = np.array([p.timestamp for p in s.poses])
    assert np.allclose(np.diff(ts), 1 / spec.frame_rate)
    xs = np.array([t.station_x[p.frame_id] for p in s.poses])
    assert np.allclose(np.diff(xs), spec.speed / spec.frame_rate)
