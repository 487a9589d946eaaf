"""Cross-session association: cost terms, entropy gating, voting and baselines.

Toy sessions put fruits at hand-picked 3D positions and image pixels, and
give every detection of a fruit the same embedding, so each cost entry can
be computed by hand.
"""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import toy_session, truth_landmarks
from orchard4d.associate import (
    GATED,
    CostWeights,
    HistogramParams,
    TopologyDescriptor,
    associate,
    baseline_histogram,
    baseline_position,
    cylinder_histograms,
    descriptor,
    entropy,
    majority_vote,
    position_cost,
    run_method,
    select_references,
    stage1_match,
    stage2_match,
    topology_cost,
    view_match,
    visual_cost,
)
from orchard4d.core import NO_MATCH, Vote
from orchard4d.errors import InvalidInputError
from orchard4d.registration import RigidTransform
from orchard4d.simulator import truth_pairs

I = RigidTransform.identity()


def frames_only(session_id, frame_embeddings):
    return toy_session(session_id, [], {}, {}, frame_embeddings)


def rot(v, deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return (c * v[0] - s * v[1], s * v[0] + c * v[1])


# ------------------------------------------------------------------ view match


def test_view_match_exact_copy():
    a = frames_only("a", {0: (0.3, 0.7)})
    b = frames_only("b", {4: (1.0, 0.0), 9: (0.3, 0.7)})
    assert view_match(0, a, b) == 9


def test_view_match_nearest():
    a = frames_only("a", {0: (1.0, 0.0)})
    b = frames_only("b", {0: (0.0, 1.0), 1: (0.9, 0.1)})
    assert view_match(0, a, b) == 1


def test_view_match_tie_goes_to_lower_frame():
    a = frames_only("a", {0: (0.0, 0.0)})
    b = frames_only("b", {7: (0.0, 1.0), 3: (1.0, 0.0)})
    assert view_match(0, a, b) == 3


def test_view_match_missing_embedding():
    a = frames_only("a", {0: (1.0, 0.0)})
    with pytest.raises(InvalidInputError):
        view_match(5, a, a)
    with pytest.raises(InvalidInputError):
        view_match(0, a, frames_only("b", {0: (1.0, 0.0, 0.0)}))


# ------------------------------------------------------------------ cost terms


def test_visual_cost_examples():
    assert visual_cost([1, 2, 3], [1, 2, 3]) == 0
    assert visual_cost([3, 0], [0, 4]) == 5
    assert visual_cost(np.zeros(8), np.zeros(8)) == 0
    with pytest.raises(InvalidInputError):
        visual_cost([1, 2], [1, 2, 3])


def test_position_cost_examples():
    assert position_cost([1, 2, 3], [1, 2, 3], I) == 0
    assert position_cost([0, 0, 0], [0.31, 0, 0], I, 0.3) == GATED
    assert position_cost([0, 0, 0], [0.1, 0, 0], I) == pytest.approx(0.1)
    T = RigidTransform.from_rotvec([0, 0, 0], [0.5, 0, 0])
    assert position_cost([0, 0, 0], [0.5, 0, 0], T) == 0


def test_topology_examples():
    v = np.array([[10.0, 0], [0, 10], [-10, 0], [0, -10], [7, 7]])
    d = TopologyDescriptor(tuple(range(5)), v)
    assert topology_cost(d, d, 10) == 0
    one = v.copy()
    one[0] = rot(v[0], 90)
    assert topology_cost(d, TopologyDescriptor(d.anchors, one), 10) == 1
    mixed = np.array([rot(v[k], a) for k, a in enumerate([15, -15, 5, -5, 5])])
    assert topology_cost(d, TopologyDescriptor(d.anchors, mixed), 10) == 2


def test_topology_skips_short_vectors():
    a = TopologyDescriptor((1, 2), [[1.0, 0.0], [10.0, 0]])
    b = TopologyDescriptor((1, 2), [[0.0, 1.0], [0.0, 10]])
    assert topology_cost(a, b, 10) == 1


def test_topology_requires_shared_anchors():
    with pytest.raises(InvalidInputError):
        topology_cost(TopologyDescriptor((1,), [[1, 0]]), TopologyDescriptor((2,), [[1, 0]]))


def test_descriptor_drops_invisible_anchors():
    d = descriptor({0: (100, 100), 1: (110, 100), 3: (100, 80)}, 0, [1, 2, 3])
    assert d.anchors == (1, 3)
    assert np.allclose(d.vectors, [[10, 0], [0, -20]])


vecs = st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=0, max_size=6)


@given(vecs, st.randoms(use_true_random=False), st.floats(1, 179))
def test_topology_symmetric_and_zero_on_self(va, rnd, thr):
    vb = [(x + rnd.uniform(-20, 20), y + rnd.uniform(-20, 20)) for x, y in va]
    a = TopologyDescriptor(tuple(range(len(va))), np.array(va).reshape(-1, 2))
    b = TopologyDescriptor(a.anchors, np.array(vb).reshape(-1, 2))
    assert topology_cost(a, a, thr) == 0
    assert topology_cost(a, b, thr) == topology_cost(b, a, thr)


def test_entropy_closed_forms():
    assert entropy([4, 4, 4]) == 0.0
    assert entropy([1, 2]) == pytest.approx(1.0, abs=1e-15)
    assert entropy(["a", "a", "b"]) == pytest.approx(math.log2(3) - 2 / 3, abs=1e-15)
    assert entropy([]) == 0.0


def test_weights_validation():
    for kw in ({"gate_distance": 0}, {"angle_threshold": 180}, {"entropy_threshold": -1}, {"normalization": "z"}):
        with pytest.raises(InvalidInputError):
            CostWeights(**kw)


# ------------------------------------------------------------ references, votes


def votes(*ids, cost=0.1):
    return [Vote(b, k, cost) for k, b in enumerate(ids)]


def test_reference_selection_rules():
    table = {0: votes(5, 5, 5), 1: votes(6, 7), 2: votes(8, 8, 9), 3: votes(NO_MATCH, NO_MATCH, NO_MATCH), 4: []}
    assert select_references(table, 0.8) == [(0, 5)]


def test_reference_conflict_keeps_lower_entropy():
    table = {0: votes(5, 5, 5, 5, 5, 5, 6), 1: votes(5, 5, 5)}
    assert select_references(table, 0.8) == [(1, 5)]


def test_majority_vote_two_of_three():
    m = majority_vote({2: votes(0, 0, 1)})
    assert m.final_matches == ((2, 0),)


def test_empty_votes_unmatched():
    m = majority_vote({0: [], 1: votes(3)}, fruits_b=[3, 4])
    assert m.final_matches == ((1, 3),)
    assert m.unmatched_a == (0,)
    assert m.unmatched_b == (4,)


def test_two_two_tie_goes_to_lower_cost():
    table = {0: [Vote(1, 0, 0.4), Vote(1, 1, 0.4), Vote(2, 2, 0.1), Vote(2, 3, 0.2)]}
    assert majority_vote(table).final_matches == ((0, 2),)


def test_no_match_can_win_the_vote():
    table = {0: votes(NO_MATCH, NO_MATCH, 3)}
    assert majority_vote(table).final_matches == ()
    assert majority_vote(table, vote_no_match=False).final_matches == ((0, 3),)


def test_vote_conflict_goes_to_more_votes():
    m = majority_vote({0: votes(7, 7), 1: votes(7, 7, 7)})
    assert m.final_matches == ((1, 7),)
    assert m.unmatched_a == (0,)


# ------------------------------------------------------------- per-image stages


def one_fruit(session_id, pos, emb=(1.0, 0.0)):
    px = {f: {0: (320.0 + 5 * f, 240.0)} for f in range(4)}
    return toy_session(session_id, [pos], px, {0: emb}, {f: (float(f), 1.0) for f in range(4)})


def test_single_fruit_votes_every_view():
    a = one_fruit("a", (0, 0, 2.0))
    b = one_fruit("b", (0.02, 0, 2.0))
    table = stage1_match(a, b, I)
    assert [v.fruit_b for v in table[0]] == [0, 0, 0, 0]
    assert [v.frame_b for v in table[0]] == [0, 1, 2, 3]


def test_everything_beyond_gate_is_unmatched():
    a = one_fruit("a", (0, 0, 2.0))
    b = one_fruit("b", (1.0, 0, 2.0))
    table = stage1_match(a, b, I)
    assert {v.fruit_b for v in table[0]} == {NO_MATCH}
    assert associate(a, b).final_matches == ()


def swap_scene():
    """Fruits 0 and 1 trade places between sessions; appearance stays with identity."""
    emb = {0: (1.0, 0, 0), 1: (0, 1.0, 0), 2: (0, 0, 1.0)}
    px = {f: {0: (300.0, 240.0), 1: (330.0, 240.0), 2: (400.0, 240.0)} for f in range(3)}
    fe = {f: (float(f), 0.0) for f in range(3)}
    a = toy_session("a", [(0, 0, 2.0), (0.06, 0, 2.0), (0.2, 0, 2.0)], px, emb, fe)
    b = toy_session("b", [(0.06, 0, 2.0), (0, 0, 2.0), (0.2, 0, 2.0)], px, emb, fe)
    return a, b


def test_matches_follow_appearance_over_small_drift():
    a, b = swap_scene()
    table = stage1_match(a, b, I)
    assert {v.fruit_b for v in table[0]} == {0}
    assert {v.fruit_b for v in table[1]} == {1}
    assert associate(a, b).final_matches == ((0, 0), (1, 1), (2, 2))


def test_position_baseline_fails_on_swap():
    a, b = swap_scene()
    m = baseline_position(a, b, I)
    assert (0, 1) in m.final_matches and (1, 0) in m.final_matches


def star_scene(b_rotation_deg):
    """Target fruit 0 amid four references; B's reference pixels rotated about the target."""
    center = np.array([320.0, 240.0])
    offs = [(100.0, 0.0), (0.0, 100.0), (-100.0, 0.0), (0.0, -100.0)]
    pos = [(0, 0, 2.0), (0.6, 0, 2.0), (0, 0.6, 2.0), (-0.6, 0, 2.0), (0, -0.6, 2.0)]
    emb = {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (0.0, 2.0), 3: (0.0, 3.0), 4: (0.0, 4.0)}
    pa = {0: tuple(center), **{k + 1: tuple(center + o) for k, o in enumerate(offs)}}
    turned = [rot(o, b_rotation_deg) if k < 3 else o for k, o in enumerate(offs)]
    pb = {0: tuple(center), **{k + 1: tuple(center + o) for k, o in enumerate(turned)}}
    fe = {f: (float(f), 0.0) for f in range(3)}
    a = toy_session("a", pos, {f: pa for f in range(3)}, emb, fe)
    b = toy_session("b", pos, {f: pb for f in range(3)}, {**emb, 0: (1.0, 0.05)}, fe)
    return a, b


def test_reference_pairs_cost_zero():
    a, b = star_scene(0.0)
    table = stage2_match(a, b, I, [(1, 1), (2, 2)])
    assert all(v.fruit_b == 1 and v.cost == 0.0 for v in table[1])
    assert {v.fruit_b for v in table[0]} == {0}


def test_inconsistent_topology_rejects_impostor():
    a, b = star_scene(30.0)
    refs = [(1, 1), (2, 2), (3, 3), (4, 4)]
    assert {v.fruit_b for v in stage1_match(a, b, I)[0]} == {0}
    table = stage2_match(a, b, I, refs)
    assert {v.fruit_b for v in table[0]} == {NO_MATCH}


def test_no_references_reduces_to_stage1():
    a, b = swap_scene()
    assert stage2_match(a, b, I, []) == stage1_match(a, b, I)


def test_self_match_toy():
    a, _ = swap_scene()
    m = associate(a, a)
    assert m.final_matches == ((0, 0), (1, 1), (2, 2))
    assert m.status == "ok"


# --------------------------------------------------------------- simulated pair


def test_self_match_on_simulated_session(small_pair):
    _, _, sessions, truths = small_pair
    a = truth_landmarks(sessions[0], truths[0])
    m = associate(a, a)
    assert m.final_matches == tuple((lm.fruit_id, lm.fruit_id) for lm in a.landmarks)


def test_simulated_pair_is_matched_exactly(small_pair):
    _, world, sessions, truths = small_pair
    a, b = (truth_landmarks(s, t) for s, t in zip(sessions, truths))
    T = truths[1].transform.compose(truths[0].transform.inverse())
    ids_a = {lm.fruit_id for lm in a.landmarks}
    ids_b = {lm.fruit_id for lm in b.landmarks}
    expected = tuple((x, y) for x, y in truth_pairs(truths[0], truths[1], world.n_fruits) if x in ids_a and y in ids_b)
    for method in ("proposed", "position", "histogram"):
        assert run_method(method, a, b, T).final_matches == expected


def conjugate(session, G: RigidTransform):
    poses = [p.transformed(G.R, G.translation) for p in session.poses]
    lms = [lm for lm in session.landmarks]
    from dataclasses import replace

    return replace(session, poses=tuple(poses), landmarks=tuple(replace(lm, position=G.apply(lm.position[None])[0]) for lm in lms))


@pytest.mark.parametrize("seed", range(3))
def test_conjugation_invariance(small_pair, seed):
    _, _, sessions, truths = small_pair
    a, b = (truth_landmarks(s, t) for s, t in zip(sessions, truths))
    T = truths[1].transform.compose(truths[0].transform.inverse())
    rng = np.random.default_rng(seed)
    G = RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3))
    H = RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3))
    T2 = H.compose(T).compose(G.inverse())
    base = associate(a, b, T)
    moved = associate(conjugate(a, G), conjugate(b, H), T2)
    assert moved.final_matches == base.final_matches
    assert moved.references == base.references


# -------------------------------------------------------------------- baselines


def test_baselines_identical_sessions():
    a, _ = swap_scene()
    for fn in (baseline_position, baseline_histogram):
        assert fn(a, a, I).final_matches == ((0, 0), (1, 1), (2, 2))


def test_baseline_beyond_gate_unmatched():
    a = one_fruit("a", (0, 0, 2.0))
    b = one_fruit("b", (0.5, 0, 2.0))
    assert baseline_position(a, b, I).final_matches == ()
    assert baseline_histogram(a, b, I).final_matches == ()


def test_isolated_fruits_decided_by_position():
    a = toy_session("a", [(0, 0, 2.0), (5, 0, 2.0)], {}, {}, {0: (0.0, 0.0)})
    b = toy_session("b", [(5.05, 0, 2.0), (0.05, 0, 2.0)], {}, {}, {0: (0.0, 0.0)})
    h = cylinder_histograms(np.array([lm.position for lm in a.landmarks]))
    assert h.sum() == 0
    assert baseline_histogram(a, b, I).final_matches == ((0, 1), (1, 0))


def test_cylinder_histogram_bins():
    p = HistogramParams(azimuth_bins=4, height_bins=2, radius_bins=2, radius=1.0)
    pts = np.array([[0, 0, 0], [0.25, 0.01, 0.5], [-0.75, 0.01, -0.5], [3.0, 0, 0], [0, 0, 2.0]])
    h = cylinder_histograms(pts, p).reshape(len(pts), 4, 2, 2)
    assert h[0].sum() == 2  # the far point and the one above the cylinder are excluded
    assert h[0, 0, 1, 0] == 1  # azimuth ~0, upper half, inner ring
    assert h[0, 1, 0, 1] == 1  # azimuth ~180 deg, lower half, outer ring


def test_unknown_method():
    a, _ = swap_scene()
    with pytest.raises(InvalidInputError):
        run_method("nearest", a, a, I)
