"""LiDAR/RGB fusion: per-fruit instance point clouds, centroids and diameters."""

from __future__ import annotations

import bisect
import logging
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .core import Detection, Intrinsics, PointCloud, Pose, SessionMap, project_points
from .errors import EmptyWindowError, InsufficientPointsError, InvalidInputError

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 1.5
MIN_POINTS = 5
MAD_K = 1.5
TRIM_FRACTION = 0.05
_T_EPS = 1e-9


class Accumulator:
    """Scans pre-transformed into the world frame, sorted by timestamp.

    Building one per session lets every frame reuse the same transformed
    scans instead of re-transforming them for each overlapping window.
    """

    def __init__(self, clouds: Iterable[tuple[float, PointCloud]], poses: Sequence[Pose]):
        by_time = {round(p.timestamp, 9): p for p in poses}
        stamps = sorted(by_time)
        items = []
        for t, cloud in clouds:
            if cloud.frame == "world":
                pts = cloud.points
            else:
                pose = by_time.get(round(t, 9))
                if pose is None:
                    i = bisect.bisect_left(stamps, t)
                    near = [stamps[k] for k in (i - 1, i) if 0 <= k < len(stamps)]
                    if not near or min(abs(s - t) for s in near) > 1e-3:
                        raise InvalidInputError(f"no pose at scan timestamp {t}")
                    pose = by_time[min(near, key=lambda s: abs(s - t))]
                pts = pose.to_world(cloud.points)
            items.append((float(t), pts))
        items.sort(key=lambda it: it[0])
        self._times = [t for t, _ in items]
        self._points = [p for _, p in items]

    def window(self, t: float, window: float = DEFAULT_WINDOW) -> PointCloud:
        lo = bisect.bisect_left(self._times, t - window / 2 - _T_EPS)
        hi = bisect.bisect_right(self._times, t + window / 2 + _T_EPS)
        if hi <= lo:
            raise EmptyWindowError(f"no scan within {window / 2:.3f} s of t={t:.3f}")
        return PointCloud(np.concatenate(self._points[lo:hi]), "world")


def accumulate(clouds, poses: Sequence[Pose], t: float, window: float = DEFAULT_WINDOW) -> PointCloud:
    """Union of every scan within ``window/2`` of ``t``, in world coordinates.

    ``clouds`` is an iterable of ``(timestamp, PointCloud)``; sensor-frame
    clouds are moved to the world frame with the pose sharing their timestamp.
    """
    return Accumulator(clouds, poses).window(t, window)


def depth_band(depth: np.ndarray, k: float = MAD_K) -> np.ndarray:
    """Boolean keep-mask for depths within ``k`` MADs of the median."""
    med = np.median(depth)
    mad = np.median(np.abs(depth - med))
    return np.abs(depth - med) <= k * mad + _T_EPS


def _label_image(dets: Sequence[Detection], K: Intrinsics) -> np.ndarray:
    img = np.full((K.height, K.width), -1, dtype=np.int32)
    for idx, d in enumerate(dets):
        for r, s, e in d.mask.runs:
            img[r, s:e] = idx
    return img


def extract_frame_clouds(
    acc: PointCloud,
    dets: Sequence[Detection],
    pose: Pose,
    K: Intrinsics,
    min_points: int = MIN_POINTS,
    mad_k: float = MAD_K,
) -> dict[int, PointCloud | None]:
    """Instance clouds for every detection of one frame (``None`` = too few points).

    Pixels claimed by several masks go to the later detection, which matches
    how masks are painted when rendered.
    """
    out: dict[int, PointCloud | None] = {d.det_id: None for d in dets}
    if not dets or len(acc) == 0:
        return out
    uv, depth, vis = project_points(acc.points, pose, K)
    idx = np.flatnonzero(vis)
    col = np.floor(uv[idx, 0] + 0.5).astype(np.intp)
    row = np.floor(uv[idx, 1] + 0.5).astype(np.intp)
    labels = _label_image(dets, K)[row, col]
    hit = labels >= 0
    idx, labels = idx[hit], labels[hit]
    order = np.argsort(labels, kind="stable")
    idx, labels = idx[order], labels[order]
    bounds = np.searchsorted(labels, np.arange(len(dets) + 1))
    for k, d in enumerate(dets):
        sel = idx[bounds[k] : bounds[k + 1]]
        if sel.size < min_points:
            continue
        sel = sel[depth_band(depth[sel], mad_k)]
        if sel.size >= min_points:
            out[d.det_id] = PointCloud(acc.points[sel], "world")
    return out


def extract_instance_cloud(
    acc: PointCloud,
    det: Detection,
    pose: Pose,
    K: Intrinsics,
    min_points: int = MIN_POINTS,
    mad_k: float = MAD_K,
) -> PointCloud:
    """Points of ``acc`` that project inside ``det.mask`` and survive the depth band."""
    if len(acc) == 0:
        raise InvalidInputError("accumulated cloud is empty")
    cloud = extract_frame_clouds(acc, [det], pose, K, min_points, mad_k)[det.det_id]
    if cloud is None:
        raise InsufficientPointsError(f"detection {det.det_id}: fewer than {min_points} points inside mask")
    return cloud


def centroid(cloud: PointCloud) -> np.ndarray:
    if len(cloud) == 0:
        raise InvalidInputError("centroid of an empty cloud")
    return cloud.points.mean(axis=0)


def estimate_diameter(cloud: PointCloud, trim: float = TRIM_FRACTION, min_points: int = MIN_POINTS) -> float:
    """Robust fruit diameter from an instance cloud.

    Drops the ``trim`` fraction of points farthest from the centroid, then
    averages the two largest world-axis extents. The smallest extent is left
    out because it is the one foreshortened by self-occlusion when only the
    camera-facing side of the fruit has returns.
    """
    pts = cloud.points
    if pts.shape[0] < min_points:
        raise InvalidInputError(f"need at least {min_points} points, got {pts.shape[0]}")
    dist = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    n_drop = int(np.floor(trim * pts.shape[0]))
    if n_drop:
        pts = pts[np.argsort(dist, kind="stable")[: pts.shape[0] - n_drop]]
    ext = np.sort(pts.max(axis=0) - pts.min(axis=0))
    return float(ext[1:].mean())


def session_instance_clouds(
    session: SessionMap,
    window: float = DEFAULT_WINDOW,
    min_points: int = MIN_POINTS,
    mad_k: float = MAD_K,
) -> Iterator[tuple[Pose, list[Detection], Mapping[int, PointCloud | None]]]:
    """Yield ``(pose, detections, clouds)`` frame by frame in frame order."""
    scans = [(session.pose_by_frame[f].timestamp, c) for f, c in sorted(session.scans.items())]
    acc = Accumulator(scans, session.poses)
    for pose in sorted(session.poses, key=lambda p: p.frame_id):
        dets = session.detections_by_frame.get(pose.frame_id, [])
        if not dets:
            yield pose, [], {}
            continue
        try:
            cloud = acc.window(pose.timestamp, window)
        except EmptyWindowError:
            log.debug("frame %d: empty accumulation window", pose.frame_id)
            yield pose, dets, {d.det_id: None for d in dets}
            continue
        yield pose, dets, extract_frame_clouds(cloud, dets, pose, session.intrinsics, min_points, mad_k)
