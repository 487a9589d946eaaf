"""Shared fixtures: a standard camera, tiny hand-built sessions and one small simulated pair."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from orchard4d.core import Detection, FruitLandmark, Intrinsics, Mask, PixelObs, Pose, SessionMap
from orchard4d.simulator import OrchardSpec, SessionSpec, simulate

settings.register_profile(
    "repo", deadline=None, max_examples=60, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def K() -> Intrinsics:
    return Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def square_mask(frame_id: int, row: int, col: int, half: int = 3) -> Mask:
    rows, cols = np.mgrid[row - half : row + half + 1, col - half : col + half + 1]
    return Mask.from_pixels(frame_id, rows, cols)


def toy_session(
    session_id: str,
    positions,
    pixels_by_frame: dict,
    embeddings: dict,
    frame_embeddings: dict,
    K: Intrinsics | None = None,
) -> SessionMap:
    """Session with hand-chosen pixels and embeddings.

    ``pixels_by_frame[frame][fruit] = (u, v)``; ``embeddings[fruit]`` is the
    embedding every detection of that fruit gets.
    """
    K = K or Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    frames = sorted(set(pixels_by_frame) | set(frame_embeddings))
    poses = [Pose.identity(f, 0.2 * f) for f in frames]
    dets, obs = [], {j: [] for j in range(len(positions))}
    for f in frames:
        for j, (u, v) in sorted(pixels_by_frame.get(f, {}).items()):
            d = Detection(len(dets), f, square_mask(f, int(round(v)), int(round(u))), 1.0, len(dets), (u, v))
            dets.append(d)
            obs[j].append(PixelObs(f, (u, v), d.det_id))
    fruit_of_det = {}
    for j, lst in obs.items():
        for o in lst:
            fruit_of_det[o.det_id] = j
    emb = np.array([embeddings[fruit_of_det[d.det_id]] for d in dets], dtype=np.float64).reshape(len(dets), -1 if dets else 0)
    fe_ids = sorted(frame_embeddings)
    lms = [FruitLandmark(j, p, 0.08, j, tuple(obs[j])) for j, p in enumerate(positions)]
    return SessionMap(
        session_id,
        poses,
        K,
        dets,
        lms,
        emb,
        {d.det_id: i for i, d in enumerate(dets)},
        np.array([frame_embeddings[f] for f in fe_ids], dtype=np.float64),
        {f: i for i, f in enumerate(fe_ids)},
    )


def small_spec(seed: int = 0, **kw) -> OrchardSpec:
    base = dict(
        seed=seed,
        n_trees=1,
        fruits_per_tree=(8, 8),
        sessions=(SessionSpec("a"), SessionSpec("b")),
    )
    base.update(kw)
    return OrchardSpec(**base)


@pytest.fixture(scope="session")
def small_pair():
    """``(spec, world, sessions, truths)`` for a one-tree, eight-fruit noise-free pair."""
    spec = small_spec(seed=11)
    world, sessions, truths = simulate(spec)
    return spec, world, sessions, truths


def truth_landmarks(session: SessionMap, truth) -> SessionMap:
    """Session whose landmarks are the true fruits, observed at their detections' centroids."""
    obs: dict[int, list] = {}
    for d in sorted(session.detections, key=lambda d: (d.frame_id, d.det_id)):
        obs.setdefault(truth.det_fruit[d.det_id], []).append(PixelObs(d.frame_id, tuple(d.centroid_px), d.det_id))
    lms = [
        FruitLandmark(f, truth.positions[f], float(truth.diameters[f]), f, tuple(o)) for f, o in sorted(obs.items())
    ]
    return session.with_landmarks(lms)


# one PASS/FAIL line per acceptance check, echoed at the end of the run
ACCEPTANCE: list[str] = []


def verdict(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
