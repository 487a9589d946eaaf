"""Counting, association and sizing metrics against synthetic ground truth."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import FruitLandmark, SessionMap, TemporalMatchSet
from .errors import InvalidInputError


@dataclass(frozen=True)
class CountReport:
    estimated: int
    truth: int
    abs_error: int
    pct_error: float
    per_batch: tuple = ()
    batch_mean_abs_error: float = 0.0
    batch_std_abs_error: float = 0.0
    batch_mean_pct_error: float = 0.0

    @classmethod
    def from_counts(cls, estimated: int, truth: int, per_batch: Sequence[tuple[int, int, int]] = ()) -> "CountReport":
        if truth < 0 or estimated < 0:
            raise InvalidInputError("counts must be non-negative")
        abs_err = abs(estimated - truth)
        pct = abs_err / truth if truth else (0.0 if estimated == 0 else math.inf)
        rows = tuple((int(b), int(e), int(t)) for b, e, t in per_batch)
        errs = np.array([abs(e - t) for _, e, t in rows], dtype=np.float64)
        pcts = np.array([abs(e - t) / t for _, e, t in rows if t > 0], dtype=np.float64)
        return cls(
            estimated=int(estimated),
            truth=int(truth),
            abs_error=int(abs_err),
            pct_error=float(pct),
            per_batch=rows,
            batch_mean_abs_error=float(errs.mean()) if errs.size else 0.0,
            batch_std_abs_error=float(errs.std()) if errs.size else 0.0,
            batch_mean_pct_error=float(pcts.mean()) if pcts.size else 0.0,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_batch"] = [{"batch": b, "estimated": e, "truth": t} for b, e, t in self.per_batch]
        return d


@dataclass(frozen=True)
class AssociationReport:
    """``precision``/``f1`` are ``None`` when their denominator is zero."""

    tp: int
    fp: int
    fn: int
    precision: float | None
    f1: float | None

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "AssociationReport":
        prec = tp / (tp + fp) if tp + fp else None
        den = 2 * tp + fp + fn
        return cls(tp, fp, fn, prec, (2 * tp / den) if den else None)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ truth plumbing


def landmark_truth(landmarks: Sequence[FruitLandmark], det_fruit: Mapping[int, int]) -> dict[int, int]:
    """Map each landmark to the fruit most of its detections belong to (ties: lower fruit id)."""
    out = {}
    for lm in landmarks:
        c = Counter(det_fruit[o.det_id] for o in lm.pixel_obs if o.det_id in det_fruit)
        if c:
            out[lm.fruit_id] = min(c, key=lambda f: (-c[f], f))
    return out


def _representatives(landmarks: Sequence[FruitLandmark], mapping: Mapping[int, int]) -> dict[int, int]:
    """fruit id -> the landmark with most observations of it (ties: lower landmark id)."""
    best: dict[int, tuple] = {}
    for lm in landmarks:
        f = mapping.get(lm.fruit_id)
        if f is None:
            continue
        key = (-len(lm.pixel_obs), lm.fruit_id)
        if f not in best or key < best[f]:
            best[f] = key
    return {f: k[1] for f, k in best.items()}


def truth_pairs(
    landmarks_a: Sequence[FruitLandmark],
    map_a: Mapping[int, int],
    landmarks_b: Sequence[FruitLandmark],
    map_b: Mapping[int, int],
) -> list[tuple[int, int]]:
    """Injective landmark pairs ``(a, b)`` that observe the same physical fruit."""
    ra, rb = _representatives(landmarks_a, map_a), _representatives(landmarks_b, map_b)
    return sorted((ra[f], rb[f]) for f in ra if f in rb)


# ----------------------------------------------------------------- scoring


def score_counts(
    landmarks: Sequence[FruitLandmark],
    truth_batches: Mapping[int, int],
    tree_xy: np.ndarray,
    tree_batch: Sequence[int],
) -> CountReport:
    """Total and per-batch count errors.

    ``truth_batches`` maps every present truth fruit to its batch. Landmarks
    are assigned to the batch of their horizontally nearest tree.
    """
    trees = np.asarray(tree_xy, dtype=np.float64).reshape(len(tree_batch), -1)[:, :2]
    batch_of_tree = np.asarray(tree_batch, dtype=np.int64)
    est: Counter = Counter()
    if landmarks and trees.shape[0]:
        P = np.array([lm.position[:2] for lm in landmarks])
        nearest = np.argmin(np.linalg.norm(P[:, None] - trees[None], axis=2), axis=1)
        est.update(batch_of_tree[nearest].tolist())
    tru = Counter(truth_batches.values())
    batches = sorted(set(est) | set(tru) | set(batch_of_tree.tolist()))
    rows = [(b, est.get(b, 0), tru.get(b, 0)) for b in batches]
    return CountReport.from_counts(len(landmarks), len(truth_batches), rows)


def score_association(match_set: TemporalMatchSet, truth: Iterable[tuple[int, int]]) -> AssociationReport:
    """TP: predicted pairs in truth; FP: other predicted pairs; FN: truth A fruits left unmatched."""
    truth = [(int(a), int(b)) for a, b in truth]
    if len({a for a, _ in truth}) != len(truth) or len({b for _, b in truth}) != len(truth):
        raise InvalidInputError("truth pairs must be injective")
    tset = set(truth)
    pred = set(match_set.final_matches)
    matched_a = {a for a, _ in pred}
    tp = len(pred & tset)
    fp = len(pred - tset)
    fn = sum(1 for a, _ in truth if a not in matched_a)
    return AssociationReport.from_counts(tp, fp, fn)


def score_size(
    landmarks: Sequence[FruitLandmark],
    truth_diameters: Mapping[int, float] | Sequence[float],
    matches: Iterable[tuple[int, int]],
) -> tuple[float, float]:
    """Mean and population std of ``|estimated - true|`` diameter (meters) over ``(landmark, fruit)`` pairs."""
    by_id = {lm.fruit_id: lm for lm in landmarks}
    errs = [abs(by_id[a].diameter - float(truth_diameters[b])) for a, b in matches]
    if not errs:
        raise InvalidInputError("size scoring needs at least one matched fruit")
    e = np.array(errs)
    return float(e.mean()), float(e.std())


# ------------------------------------------------------------------ studies


def drop_landmarks(session: SessionMap, fraction: float, seed: int) -> SessionMap:
    """Copy of ``session`` with ``floor(fraction * n)`` landmarks deleted at random."""
    if not 0.0 <= fraction <= 0.5:
        raise InvalidInputError("removal fraction must be in [0, 0.5]")
    lms = list(session.landmarks)
    k = int(math.floor(fraction * len(lms) + 1e-9))
    if k == 0:
        return session
    rng = np.random.default_rng(np.random.SeedSequence([seed, int(round(fraction * 1000))]))
    gone = set(rng.choice(len(lms), size=k, replace=False).tolist())
    return session.with_landmarks([lm for i, lm in enumerate(lms) if i not in gone])


@dataclass(frozen=True)
class SweepRow:
    method: str
    fraction: float
    precision: float | None
    f1: float | None
    tp: int
    fp: int
    fn: int


def removal_sweep(
    session_a: SessionMap,
    session_b: SessionMap,
    truth: Sequence[tuple[int, int]],
    methods: Mapping[str, Callable[[SessionMap, SessionMap], TemporalMatchSet]],
    fractions: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    seed: int = 0,
) -> list[SweepRow]:
    """Delete a fraction of B's landmarks, rerun every method, score against the surviving truth."""
    rows = []
    for frac in fractions:
        b = drop_landmarks(session_b, frac, seed)
        kept = {lm.fruit_id for lm in b.landmarks}
        t = [(x, y) for x, y in truth if y in kept]
        for name in sorted(methods):
            rep = score_association(methods[name](session_a, b), t)
            rows.append(SweepRow(name, float(frac), rep.precision, rep.f1, rep.tp, rep.fp, rep.fn))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "fraction", "precision", "f1", "tp", "fp", "fn"])
    for r in rows:
        w.writerow([r.method, _fmt(r.fraction), _fmt(r.precision), _fmt(r.f1), r.tp, r.fp, r.fn])
    return buf.getvalue()


def growth_series(
    tags: Sequence[str],
    landmark_sets: Sequence[Sequence[FruitLandmark]],
    matches: Sequence[TemporalMatchSet],
) -> list[tuple[int, str, int, float]]:
    """Diameter of each fruit followed through consecutive-session matches.

    ``matches[k]`` links ``landmark_sets[k]`` to ``landmark_sets[k + 1]``.
    Returns ``(chain_id, tag, landmark_id, diameter)`` rows, one chain per
    landmark of the first session, ending where a match is missing.
    """
    if len(landmark_sets) != len(tags) or len(matches) != len(tags) - 1:
        raise InvalidInputError("need one landmark set per tag and one match set per consecutive pair")
    dia = [{lm.fruit_id: lm.diameter for lm in s} for s in landmark_sets]
    links = [m.match_dict for m in matches]
    rows = []
    for chain, lm in enumerate(sorted(landmark_sets[0], key=lambda l: l.fruit_id) if landmark_sets else []):
        cur = lm.fruit_id
        for k, tag in enumerate(tags):
            rows.append((chain, tag, cur, dia[k][cur]))
            if k < len(links):
                cur = links[k].get(cur)
                if cur is None:
                    break
    return rows


def growth_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain", "session", "landmark", "diameter_m"])
    for c, tag, lid, d in rows:
        w.writerow([c, tag, lid, f"{d:.6f}"])
    return buf.getvalue()
