"""Cross-session fruit association.

The proposed matcher works image by image. Every image of session A is paired
with its most similar image of session B, and the fruits visible in both are
matched with a cost mixing appearance and registered 3D distance. Each
per-image match is one vote for the A fruit. Fruits whose stage-1 votes agree
(low entropy) become references; a second pass adds a topology penalty based
on the image directions from each fruit to those references. The final match
of every A fruit is its majority vote.

Two global baselines are provided for comparison: pure gated position
matching and position plus a cylindrical neighbour-count histogram.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .assignment import UNMATCHED, assign_with_unmatched
from .core import NO_MATCH, FruitLandmark, SessionMap, TemporalMatchSet, Vote
from .errors import InvalidInputError
from .registration import RigidTransform

log = logging.getLogger(__name__)

GATED = math.inf
MIN_VECTOR_PX = 2.0


@dataclass(frozen=True)
class CostWeights:
    gate_distance: float = 0.3
    entropy_threshold: float = 0.8
    angle_threshold: float = 10.0
    normalization: str = "minmax"
    topology_weight: float = 0.5
    no_match_cost: float = 1.0
    vote_no_match: bool = True

    def __post_init__(self):
        if not self.gate_distance > 0:
            raise InvalidInputError("gate_distance must be positive")
        if not self.entropy_threshold >= 0:
            raise InvalidInputError("entropy_threshold must be non-negative")
        if not 0 < self.angle_threshold < 180:
            raise InvalidInputError("angle_threshold must be in (0, 180) degrees")
        if self.normalization not in ("minmax", "none"):
            raise InvalidInputError(f"unknown normalization {self.normalization!r}")
        if self.topology_weight < 0 or not self.no_match_cost > 0:
            raise InvalidInputError("topology_weight must be >= 0 and no_match_cost > 0")


@dataclass(frozen=True, eq=False)
class TopologyDescriptor:
    """Pixel vectors from a target fruit to the references visible with it."""

    anchors: tuple
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 2)
        if v.shape[0] != len(self.anchors):
            raise InvalidInputError("one vector per anchor required")
        object.__setattr__(self, "anchors", tuple(self.anchors))
        object.__setattr__(self, "vectors", v)


# ------------------------------------------------------------------ cost terms


def view_match(frame_a: int, session_a: SessionMap, session_b: SessionMap) -> int:
    """Frame of B whose global embedding is nearest to frame ``frame_a`` of A."""
    ea = session_a.frame_embedding(frame_a)
    fb, emb = _frame_table(session_b)
    if emb.shape[1] != ea.shape[0]:
        raise InvalidInputError("frame embedding dimensions differ between sessions")
    return int(fb[int(np.argmin(np.linalg.norm(emb - ea, axis=1)))])


def _frame_table(session: SessionMap) -> tuple[np.ndarray, np.ndarray]:
    if not session.frame_embedding_index:
        raise InvalidInputError(f"session {session.session_id} has no frame embeddings")
    fids = np.array(sorted(session.frame_embedding_index), dtype=np.int64)
    rows = [session.frame_embedding_index[f] for f in fids]
    return fids, session.frame_embeddings[rows]


def visual_cost(e_i, e_j) -> float:
    a = np.asarray(e_i, dtype=np.float64).ravel()
    b = np.asarray(e_j, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"embedding dimensions differ: {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b))


def position_cost(p_i, p_j, transform: RigidTransform, gate_distance: float = 0.3) -> float:
    """Registered distance, or :data:`GATED` beyond ``gate_distance``."""
    pi = p_i.position if isinstance(p_i, FruitLandmark) else p_i
    pj = p_j.position if isinstance(p_j, FruitLandmark) else p_j
    d = float(np.linalg.norm(transform.apply(np.asarray(pi, dtype=np.float64)[None])[0] - pj))
    return GATED if d > gate_distance else d


def _angles_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = np.einsum("ij,ij->i", a, b)
    return np.degrees(np.abs(np.arctan2(cross, dot)))


def topology_cost(d_a: TopologyDescriptor, d_b: TopologyDescriptor, angle_threshold: float = 10.0) -> int:
    """Number of shared anchors whose two vectors differ in direction by more than the threshold."""
    if d_a.anchors != d_b.anchors:
        raise InvalidInputError("descriptors must share anchor ordering")
    if not d_a.anchors:
        return 0
    ok = (np.linalg.norm(d_a.vectors, axis=1) >= MIN_VECTOR_PX) & (np.linalg.norm(d_b.vectors, axis=1) >= MIN_VECTOR_PX)
    return int(np.count_nonzero(_angles_deg(d_a.vectors[ok], d_b.vectors[ok]) > angle_threshold))


def entropy(labels: Iterable) -> float:
    """Shannon entropy in bits of the empirical distribution of ``labels``."""
    counts = np.array(list(Counter(labels).values()), dtype=np.float64)
    if counts.size <= 1:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


# ------------------------------------------------------------- per-image views


@dataclass(frozen=True, eq=False)
class _View:
    """Landmarks visible in one image with their pixel, embedding and position."""

    frame_id: int
    ids: np.ndarray
    pixels: np.ndarray
    embeddings: np.ndarray
    positions: np.ndarray


def _views(session: SessionMap) -> dict[int, _View]:
    by_frame: dict[int, list] = {}
    for lm in session.landmarks:
        for o in lm.pixel_obs:
            by_frame.setdefault(o.frame_id, []).append((lm, o))
    dets = session.detection_by_id
    out = {}
    for fid, items in by_frame.items():
        items.sort(key=lambda it: it[0].fruit_id)
        embs = []
        for lm, o in items:
            det = dets.get(o.det_id)
            if det is None:
                raise InvalidInputError(f"landmark {lm.fruit_id} references unknown detection {o.det_id}")
            embs.append(session.embedding(det.embedding_id))
        out[fid] = _View(
            fid,
            np.array([lm.fruit_id for lm, _ in items], dtype=np.int64),
            np.array([o.pixel for _, o in items], dtype=np.float64),
            np.array(embs, dtype=np.float64),
            np.array([lm.position for lm, _ in items], dtype=np.float64),
        )
    return out


def _minmax(block: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros_like(block)
    if valid.any():
        lo, hi = block[valid].min(), block[valid].max()
        if hi - lo > 1e-12:
            out[valid] = (block[valid] - lo) / (hi - lo)
    return out


def _stage_cost(
    va: _View,
    vb: _View,
    transform: RigidTransform,
    w: CostWeights,
    references: Mapping[int, int] | None = None,
) -> np.ndarray:
    """Cost of matching every fruit of ``va`` to every fruit of ``vb`` (``inf`` = gated)."""
    pa = transform.apply(va.positions)
    pos = np.linalg.norm(pa[:, None, :] - vb.positions[None, :, :], axis=2)
    valid = pos <= w.gate_distance
    if va.embeddings.shape[1] != vb.embeddings.shape[1]:
        raise InvalidInputError("embedding dimensions differ between sessions")
    vis = np.linalg.norm(va.embeddings[:, None, :] - vb.embeddings[None, :, :], axis=2)
    if w.normalization == "minmax":
        cost = _minmax(pos, valid) + _minmax(vis, valid)
    else:
        cost = pos + vis
    if references:
        col_of = {int(b): j for j, b in enumerate(vb.ids)}
        row_of = {int(a): i for i, a in enumerate(va.ids)}
        anchors = [(row_of[a], col_of[b]) for a, b in sorted(references.items()) if a in row_of and b in col_of]
        if anchors and w.topology_weight > 0:
            cost = cost + w.topology_weight * _topology_block(va, vb, anchors, w.angle_threshold)
        for i, j in anchors:
            cost[i, j] = 0.0
            valid[i, j] = True
    cost[~valid] = GATED
    return cost


def _topology_block(va: _View, vb: _View, anchors, angle_threshold: float) -> np.ndarray:
    """Violated-anchor counts for every (row, column) pair, vectorized over anchors."""
    ri = np.array([i for i, _ in anchors])
    cj = np.array([j for _, j in anchors])
    # vectors from every target to every anchor: (rows, anchors, 2) and (cols, anchors, 2)
    a = va.pixels[ri][None, :, :] - va.pixels[:, None, :]
    b = vb.pixels[cj][None, :, :] - vb.pixels[:, None, :]
    na = np.linalg.norm(a, axis=2)
    nb = np.linalg.norm(b, axis=2)
    cross = a[:, None, :, 0] * b[None, :, :, 1] - a[:, None, :, 1] * b[None, :, :, 0]
    dot = a[:, None, :, 0] * b[None, :, :, 0] + a[:, None, :, 1] * b[None, :, :, 1]
    ang = np.degrees(np.abs(np.arctan2(cross, dot)))
    ok = (na[:, None, :] >= MIN_VECTOR_PX) & (nb[None, :, :] >= MIN_VECTOR_PX)
    return np.count_nonzero(ok & (ang > angle_threshold), axis=2).astype(np.float64)


def descriptor(view_pixels: Mapping[int, tuple], target: int, anchors: Sequence[int]) -> TopologyDescriptor:
    """Descriptor of ``target`` from a ``fruit_id -> pixel`` map of one image.

    Anchors not visible in the image are dropped.
    """
    p = np.asarray(view_pixels[target], dtype=np.float64)
    vis = [a for a in anchors if a in view_pixels]
    return TopologyDescriptor(tuple(vis), np.array([np.subtract(view_pixels[a], p) for a in vis]).reshape(-1, 2))


# ------------------------------------------------------------------ the stages


def _match_views(
    session_a: SessionMap,
    session_b: SessionMap,
    transform: RigidTransform,
    w: CostWeights,
    references: Mapping[int, int] | None,
) -> dict[int, list[Vote]]:
    views_a, views_b = _views(session_a), _views(session_b)
    fb, emb_b = _frame_table(session_b)
    table: dict[int, list[Vote]] = {lm.fruit_id: [] for lm in session_a.landmarks}
    for fa in sorted(views_a):
        va = views_a[fa]
        ea = session_a.frame_embedding(fa)
        if emb_b.shape[1] != ea.shape[0]:
            raise InvalidInputError("frame embedding dimensions differ between sessions")
        frame_b = int(fb[int(np.argmin(np.linalg.norm(emb_b - ea, axis=1)))])
        vb = views_b.get(frame_b)
        if vb is None:
            for i in va.ids:
                table[int(i)].append(Vote(NO_MATCH, frame_b, w.no_match_cost))
            continue
        cost = _stage_cost(va, vb, transform, w, references)
        for i, j in assign_with_unmatched(cost, w.no_match_cost):
            fid = int(va.ids[i])
            if j == UNMATCHED:
                table[fid].append(Vote(NO_MATCH, frame_b, w.no_match_cost))
            else:
                table[fid].append(Vote(int(vb.ids[j]), frame_b, float(cost[i, j])))
    return table


def stage1_match(
    session_a: SessionMap, session_b: SessionMap, transform: RigidTransform, weights: CostWeights | None = None
) -> dict[int, list[Vote]]:
    """Per-image votes using appearance and registered position."""
    return _match_views(session_a, session_b, transform, weights or CostWeights(), None)


def select_references(table: Mapping[int, Sequence[Vote]], entropy_threshold: float = 0.8) -> list[tuple[int, int]]:
    """Fruits whose votes agree: entropy below threshold and a real B fruit as the mode.

    When two A fruits claim the same B fruit the lower-entropy one is kept
    (ties: more votes, then lower A id).
    """
    cands = []
    for fa in sorted(table):
        votes = table[fa]
        if not votes:
            continue
        labels = [v.fruit_b for v in votes]
        h = entropy(labels)
        if h >= entropy_threshold:
            continue
        mode = _mode(votes)
        if mode == NO_MATCH:
            continue
        cands.append((h, -len(votes), fa, mode))
    cands.sort()
    taken, refs = set(), []
    for _, _, fa, fb in cands:
        if fb in taken:
            continue
        taken.add(fb)
        refs.append((fa, fb))
    return sorted(refs)


def stage2_match(
    session_a: SessionMap,
    session_b: SessionMap,
    transform: RigidTransform,
    references: Sequence[tuple[int, int]],
    weights: CostWeights | None = None,
) -> dict[int, list[Vote]]:
    """Per-image votes with the topology penalty and zero-cost reference pairs."""
    return _match_views(session_a, session_b, transform, weights or CostWeights(), dict(references))


def _mode(votes: Sequence[Vote]) -> int:
    """Most frequent B id; ties to lowest summed cost, then lowest id."""
    count: Counter = Counter()
    agg: dict[int, float] = {}
    for v in votes:
        count[v.fruit_b] += 1
        agg[v.fruit_b] = agg.get(v.fruit_b, 0.0) + v.cost
    return min(count, key=lambda b: (-count[b], agg[b], b))


def majority_vote(
    table: Mapping[int, Sequence[Vote]],
    session_a: str = "A",
    session_b: str = "B",
    fruits_b: Iterable[int] = (),
    references: Sequence[tuple[int, int]] = (),
    vote_no_match: bool = True,
    status: str = "ok",
) -> TemporalMatchSet:
    """Resolve each fruit's votes and enforce a one-to-one result.

    With ``vote_no_match`` the no-match symbol competes in the vote, so a fruit
    unmatched in most views stays unmatched. Conflicts over one B fruit go to
    the claim with more votes (then lower summed cost, then lower A id).
    """
    claims = []
    for fa in sorted(table):
        votes = list(table[fa])
        if not vote_no_match:
            votes = [v for v in votes if v.fruit_b != NO_MATCH]
        if not votes:
            continue
        winner = _mode(votes)
        if winner == NO_MATCH:
            continue
        support = [v for v in votes if v.fruit_b == winner]
        claims.append((-len(support), sum(v.cost for v in support), fa, winner))
    claims.sort()
    used_b, final = set(), []
    for _, _, fa, fb in claims:
        if fb in used_b:
            continue
        used_b.add(fb)
        final.append((fa, fb))
    matched_a = {a for a, _ in final}
    frozen = {int(k): tuple(v) for k, v in sorted(table.items())}
    return TemporalMatchSet(
        session_a,
        session_b,
        vote_table=frozen,
        final_matches=final,
        references=references,
        unmatched_a=[a for a in frozen if a not in matched_a],
        unmatched_b=[b for b in fruits_b if b not in used_b],
        status=status,
    )


def associate(
    session_a: SessionMap,
    session_b: SessionMap,
    transform: RigidTransform | None = None,
    weights: CostWeights | None = None,
) -> TemporalMatchSet:
    """Two-stage association of the landmarks of ``session_a`` to those of ``session_b``.

    ``transform`` maps A coordinates into B coordinates (identity by default).
    """
    w = weights or CostWeights()
    T = transform or RigidTransform.identity()
    m1 = stage1_match(session_a, session_b, T, w)
    refs = select_references(m1, w.entropy_threshold)
    status = "ok"
    if refs:
        m2 = stage2_match(session_a, session_b, T, refs, w)
    else:
        log.warning("%s -> %s: no reference fruits; second stage equals the first", session_a.session_id, session_b.session_id)
        m2, status = m1, "no-references"
    return majority_vote(
        m2,
        session_a.session_id,
        session_b.session_id,
        [lm.fruit_id for lm in session_b.landmarks],
        refs,
        w.vote_no_match,
        status,
    )


# -------------------------------------------------------------------- baselines


def _global_match(session_a, session_b, cost: np.ndarray, unmatched_cost, method: str) -> TemporalMatchSet:
    ids_a = [lm.fruit_id for lm in session_a.landmarks]
    ids_b = [lm.fruit_id for lm in session_b.landmarks]
    final = []
    if ids_a and ids_b:
        for i, j in assign_with_unmatched(cost, unmatched_cost):
            if j != UNMATCHED:
                final.append((ids_a[i], ids_b[j]))
    ma = {a for a, _ in final}
    mb = {b for _, b in final}
    return TemporalMatchSet(
        session_a.session_id,
        session_b.session_id,
        final_matches=final,
        unmatched_a=[a for a in ids_a if a not in ma],
        unmatched_b=[b for b in ids_b if b not in mb],
        status=method,
    )


def _positions(session: SessionMap) -> np.ndarray:
    return np.array([lm.position for lm in session.landmarks], dtype=np.float64).reshape(-1, 3)


def baseline_position(
    session_a: SessionMap, session_b: SessionMap, transform: RigidTransform | None = None, gate: float = 0.3
) -> TemporalMatchSet:
    """One global assignment on registered 3D distance; pairs beyond ``gate`` are forbidden."""
    T = transform or RigidTransform.identity()
    pa, pb = T.apply(_positions(session_a)), _positions(session_b)
    d = np.linalg.norm(pa[:, None] - pb[None], axis=2)
    d[d > gate] = GATED
    return _global_match(session_a, session_b, d, gate, "baseline-position")


@dataclass(frozen=True)
class HistogramParams:
    azimuth_bins: int = 8
    height_bins: int = 3
    radius_bins: int = 3
    radius: float = 1.0
    gate: float = 0.3
    unmatched_cost: float = 1.0


def cylinder_histograms(positions: np.ndarray, params: HistogramParams = HistogramParams()) -> np.ndarray:
    """Counts of neighbouring fruits in a vertical-axis cylindrical grid around each fruit.

    The cylinder has the given radius and a height of twice that radius,
    centred on the fruit. Returned shape is ``(n, azimuth * height * radius)``.
    """
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = P.shape[0]
    nb = params.azimuth_bins * params.height_bins * params.radius_bins
    out = np.zeros((n, nb))
    if n < 2:
        return out
    rel = P[None, :, :] - P[:, None, :]
    rho = np.hypot(rel[..., 0], rel[..., 1])
    dz = rel[..., 2]
    inside = (rho < params.radius) & (np.abs(dz) < params.radius) & ~np.eye(n, dtype=bool)
    az = np.mod(np.arctan2(rel[..., 1], rel[..., 0]), 2 * np.pi)
    ia = np.minimum((az / (2 * np.pi) * params.azimuth_bins).astype(np.int64), params.azimuth_bins - 1)
    ih = np.clip(((dz + params.radius) / (2 * params.radius) * params.height_bins).astype(np.int64), 0, params.height_bins - 1)
    ir = np.clip((rho / params.radius * params.radius_bins).astype(np.int64), 0, params.radius_bins - 1)
    flat = (ia * params.height_bins + ih) * params.radius_bins + ir
    rows, cols = np.nonzero(inside)
    np.add.at(out, (rows, flat[rows, cols]), 1.0)
    return out


def baseline_histogram(
    session_a: SessionMap,
    session_b: SessionMap,
    transform: RigidTransform | None = None,
    params: HistogramParams | None = None,
) -> TemporalMatchSet:
    """Global assignment on normalized position plus normalized L1 histogram distance."""
    p = params or HistogramParams()
    T = transform or RigidTransform.identity()
    pa, pb = T.apply(_positions(session_a)), _positions(session_b)
    # histograms are computed in B's frame so the azimuth bins line up
    ha, hb = cylinder_histograms(pa, p), cylinder_histograms(pb, p)
    d = np.linalg.norm(pa[:, None] - pb[None], axis=2)
    valid = d <= p.gate
    l1 = np.abs(ha[:, None, :] - hb[None, :, :]).sum(axis=2)
    cost = _minmax(d, valid) + _minmax(l1, valid)
    cost[~valid] = GATED
    return _global_match(session_a, session_b, cost, p.unmatched_cost, "baseline-histogram")


METHODS = ("proposed", "position", "histogram")


def run_method(method: str, session_a, session_b, transform, weights: CostWeights | None = None, hist: HistogramParams | None = None):
    w = weights or CostWeights()
    if method == "proposed":
        return associate(session_a, session_b, transform, w)
    if method == "position":
        return baseline_position(session_a, session_b, transform, w.gate_distance)
    if method == "histogram":
        hp = hist or HistogramParams(gate=w.gate_distance)
        return baseline_histogram(session_a, session_b, transform, hp)
    raise InvalidInputError(f"unknown association method {method!r}; choose from {METHODS}")
