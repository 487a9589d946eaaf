"""Frame-to-frame fruit tracking on projected mask IoU.

Each live track carries the union of its detections' instance clouds. In
every new frame that cloud is projected into the image, rasterized into a mask and
compared with the detected masks; the resulting ``1 - IoU`` costs, augmented
with a constant "stay unmatched" block, are solved as an assignment problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .assignment import UNMATCHED, assign_with_unmatched
from .core import (
    Detection,
    FruitLandmark,
    Intrinsics,
    Mask,
    PixelObs,
    PointCloud,
    Pose,
    Track,
    bbox_overlap,
    mask_iou,
    project_points,
)
from .errors import EmptyProjectionError, InvalidInputError, SequencingError
from .fusion import MIN_POINTS, centroid, estimate_diameter

log = logging.getLogger(__name__)

_CLOSE = np.ones((3, 3), dtype=bool)
# floor for degenerate clouds (e.g. a single scan line); landmarks need diameter > 0
MIN_DIAMETER = 1e-4


@dataclass(frozen=True, eq=False)
class AssignmentProblem:
    """``m x (n + m)`` cost: IoU costs then an ``m x m`` block of ``1 - u``."""

    cost: np.ndarray
    iou_block_cols: int
    unmatched_cost: float

    def __post_init__(self):
        c = np.asarray(self.cost, dtype=np.float64)
        m = c.shape[0]
        if c.ndim != 2 or c.shape[1] != self.iou_block_cols + m:
            raise InvalidInputError("cost must be m x (n + m)")
        if c.size and (c.min() < 0 or c.max() > 1):
            raise InvalidInputError("costs must lie in [0, 1]")
        if not np.all(c[:, self.iou_block_cols :] == self.unmatched_cost):
            raise InvalidInputError("augmented block must be constant")
        c.flags.writeable = False
        object.__setattr__(self, "cost", c)

    @property
    def iou_cost(self) -> np.ndarray:
        return self.cost[:, : self.iou_block_cols]


def project_mask(cloud, pose: Pose, K: Intrinsics, frame_id: int | None = None) -> Mask:
    """Rasterize a world-frame cloud into the image of ``pose``.

    ``cloud`` may be a :class:`PointCloud` or a :class:`Track`. Hit pixels are
    closed with a 3x3 element (dilate then erode) to fill LiDAR sparsity holes.
    """
    if isinstance(cloud, Track):
        cloud = cloud.instance_cloud
    fid = pose.frame_id if frame_id is None else frame_id
    uv, _, vis = project_points(cloud.points, pose, K)
    if not vis.any():
        raise EmptyProjectionError("every point projects out of view")
    col = np.floor(uv[vis, 0] + 0.5).astype(np.int64)
    row = np.floor(uv[vis, 1] + 0.5).astype(np.int64)
    r0, c0 = row.min() - 2, col.min() - 2
    patch = np.zeros((row.max() - r0 + 3, col.max() - c0 + 3), dtype=bool)
    patch[row - r0, col - c0] = True
    patch = ndimage.binary_closing(patch, structure=_CLOSE)
    # clip to the image after closing so border pixels are not eroded away
    rr0, cc0 = max(r0, 0), max(c0, 0)
    rr1, cc1 = min(r0 + patch.shape[0], K.height), min(c0 + patch.shape[1], K.width)
    patch = patch[rr0 - r0 : rr1 - r0, cc0 - c0 : cc1 - c0]
    return Mask.from_dense(fid, patch, rr0, cc0)


def build_cost_matrix(projected: Sequence[Mask | None], dets: Sequence[Detection], u: float) -> AssignmentProblem:
    """IoU cost between projected track masks (rows) and detections (columns).

    A ``None`` row (track fell out of view) costs 1 against every detection.
    """
    if not 0.0 < u < 1.0:
        raise InvalidInputError(f"minimal IoU u must be in (0, 1), got {u}")
    m, n = len(projected), len(dets)
    cost = np.ones((m, n + m))
    cost[:, n:] = 1.0 - u
    for i, pm in enumerate(projected):
        if pm is None or pm.empty:
            continue
        for j, d in enumerate(dets):
            if bbox_overlap(pm, d.mask):
                cost[i, j] = 1.0 - mask_iou(pm, d.mask)
    return AssignmentProblem(cost, n, 1.0 - u)


def hungarian(problem: AssignmentProblem) -> list[tuple[int, int]]:
    """Minimum-cost assignment; rows landing in the augmented block are UNMATCHED."""
    n = problem.iou_block_cols
    return assign_with_unmatched(problem.iou_cost, problem.unmatched_cost) if n else [
        (i, UNMATCHED) for i in range(problem.cost.shape[0])
    ]


@dataclass(eq=False)
class _LiveTrack:
    track_id: int
    observations: list = field(default_factory=list)
    points: np.ndarray | None = None
    latest_mask: Mask | None = None
    last_frame: int = -1

    def merge_cloud(self, cloud: PointCloud) -> None:
        # overlapping accumulation windows return identical points; keep one copy
        pts = cloud.points if self.points is None else np.concatenate((self.points, cloud.points))
        self.points = np.unique(pts, axis=0)

    def freeze(self) -> Track:
        pts = self.points if self.points is not None else np.zeros((0, 3))
        return Track(self.track_id, tuple(self.observations), PointCloud(pts, "world"))


class Tracker:
    """Stateful single-session tracker; call :meth:`step` once per frame, in order."""

    def __init__(self, K: Intrinsics, u: float = 0.3, max_gap: int = 3):
        if not 0.0 < u < 1.0:
            raise InvalidInputError(f"minimal IoU u must be in (0, 1), got {u}")
        self.K = K
        self.u = u
        self.max_gap = max_gap
        self._tracks: list[_LiveTrack] = []
        self._active: list[_LiveTrack] = []
        self._last_frame: int | None = None

    @property
    def active_ids(self) -> list[int]:
        return [t.track_id for t in self._active]

    def _predict(self, t: _LiveTrack, pose: Pose) -> Mask | None:
        if t.points is not None:
            try:
                return project_mask(PointCloud(t.points, "world"), pose, self.K)
            except EmptyProjectionError:
                return None
        # no 3D support yet: fall back to the last detected mask
        return t.latest_mask

    def step(
        self,
        pose: Pose,
        dets: Sequence[Detection],
        clouds: Mapping[int, PointCloud | None] | None = None,
    ) -> tuple[list[int], list[int]]:
        """Advance by one frame. Returns ``(matched_track_ids, new_track_ids)``."""
        fid = pose.frame_id
        if self._last_frame is not None and fid <= self._last_frame:
            raise SequencingError(f"frame {fid} arrived after frame {self._last_frame}")
        self._last_frame = fid
        clouds = clouds or {}
        # frames may be skipped entirely; a track that missed more than max_gap is gone
        self._active = [t for t in self._active if fid - t.last_frame - 1 <= self.max_gap]
        active = self._active
        projected = [self._predict(t, pose) for t in active]
        pairs = hungarian(build_cost_matrix(projected, dets, self.u)) if dets else []
        matched, taken = [], set()
        for row, col in pairs:
            if col == UNMATCHED:
                continue
            self._append(active[row], dets[col], clouds.get(dets[col].det_id))
            matched.append(active[row].track_id)
            taken.add(col)
        new = []
        for j, d in enumerate(dets):
            if j in taken:
                continue
            t = _LiveTrack(len(self._tracks))
            self._tracks.append(t)
            self._append(t, d, clouds.get(d.det_id))
            self._active.append(t)
            new.append(t.track_id)
        self._active = [t for t in self._active if fid - t.last_frame <= self.max_gap]
        return matched, new

    @staticmethod
    def _append(t: _LiveTrack, det: Detection, cloud: PointCloud | None) -> None:
        t.observations.append((det.frame_id, det.det_id))
        t.last_frame = det.frame_id
        t.latest_mask = det.mask
        if cloud is not None and len(cloud):
            t.merge_cloud(cloud)

    def tracks(self) -> list[Track]:
        return [t.freeze() for t in self._tracks]


def _pair_iou(a: Track, b: Track, poses: Mapping[int, Pose], K: Intrinsics) -> float:
    first, second = (a, b) if a.frames[0] <= b.frames[0] else (b, a)
    best = 0.0
    for fid in {first.frames[-1], second.frames[0]}:
        pose = poses.get(fid)
        if pose is None:
            continue
        try:
            ma = project_mask(a.instance_cloud, pose, K)
            mb = project_mask(b.instance_cloud, pose, K)
        except EmptyProjectionError:
            continue
        best = max(best, mask_iou(ma, mb))
    return best


def reassociate(
    tracks: Sequence[Track],
    poses: Mapping[int, Pose],
    K: Intrinsics,
    dist_thresh: float = 0.2,
    iou_thresh: float = 0.3,
    min_points: int = MIN_POINTS,
) -> list[Track]:
    """Merge tracks of the same fruit split by an occlusion.

    Candidate pairs are visited nearest-first; a pair merges when the two
    groups' frame sets are disjoint and their clouds' projections into a
    shared image overlap with IoU above ``iou_thresh``. Groups grow by
    union-find, so merging is transitive but never creates a shared frame.
    """
    tracks = list(tracks)
    usable = [i for i, t in enumerate(tracks) if len(t.instance_cloud) >= min_points]
    parent = list(range(len(tracks)))
    frames = [set(t.frames) for t in tracks]

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if len(usable) > 1:
        cents = np.array([centroid(tracks[i].instance_cloud) for i in usable])
        pairs = cKDTree(cents).query_pairs(dist_thresh, output_type="ndarray")
        if len(pairs):
            d = np.linalg.norm(cents[pairs[:, 0]] - cents[pairs[:, 1]], axis=1)
            order = np.lexsort((pairs[:, 1], pairs[:, 0], d))
            for p, q in pairs[order]:
                i, j = usable[p], usable[q]
                ri, rj = find(i), find(j)
                if ri == rj or frames[ri] & frames[rj]:
                    continue
                if _pair_iou(tracks[i], tracks[j], poses, K) > iou_thresh:
                    lo, hi = min(ri, rj), max(ri, rj)
                    parent[hi] = lo
                    frames[lo] |= frames[hi]

    groups: dict[int, list[int]] = {}
    for i in range(len(tracks)):
        groups.setdefault(find(i), []).append(i)
    out = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) == 1:
            out.append(tracks[root])
            continue
        obs = sorted(o for i in members for o in tracks[i].observations)
        pts = np.unique(np.concatenate([tracks[i].instance_cloud.points for i in members]), axis=0)
        out.append(Track(tracks[root].track_id, tuple(obs), PointCloud(pts, "world")))
    return out


def longest_run(frames: Sequence[int]) -> int:
    """Length of the longest run of consecutive frame ids."""
    if not frames:
        return 0
    best = cur = 1
    for a, b in zip(frames, frames[1:]):
        cur = cur + 1 if b == a + 1 else 1
        best = max(best, cur)
    return best


def finalize(
    tracks: Sequence[Track],
    detections: Mapping[int, Detection],
    min_track_len: int = 4,
    min_points: int = MIN_POINTS,
) -> tuple[list[FruitLandmark], int]:
    """Turn tracks into landmarks, keeping those seen in ``min_track_len`` consecutive frames.

    Landmarks are numbered in order of their first observation. Tracks with
    no usable 3D support are dropped even if long enough.
    """
    kept = []
    for t in sorted(tracks, key=lambda t: (t.frames[0] if t.frames else -1, t.track_id)):
        if longest_run(t.frames) < min_track_len:
            continue
        if len(t.instance_cloud) < min_points:
            log.warning("track %d is long enough but has only %d points; skipped", t.track_id, len(t.instance_cloud))
            continue
        kept.append(t)
    landmarks = []
    for fid, t in enumerate(kept):
        obs = [
            PixelObs(f, tuple(detections[d].centroid_px), d) for f, d in t.observations if d in detections
        ]
        landmarks.append(
            FruitLandmark(
                fruit_id=fid,
                position=centroid(t.instance_cloud),
                diameter=max(estimate_diameter(t.instance_cloud, min_points=min_points), MIN_DIAMETER),
                source_track=t.track_id,
                pixel_obs=tuple(obs),
            )
        )
    return landmarks, len(landmarks)
