"""Domain types and geometric primitives shared by every pipeline stage.

Conventions: quaternions are ``(w, x, y, z)``; a :class:`Pose` maps camera
coordinates into the session world frame (``X_world = R @ X_cam + t``); the
camera looks down +z with +x right and +y down. Pixel ``(row, col)`` has its
center at ``(v, u) = (row, col)``. Mask runs are half-open ``[start, end)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels
from .errors import InvalidInputError

QUAT_TOL = 1e-9


def _frozen(a, dtype=np.float64, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.flags.writeable = False
    return arr


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to a unit quaternion with non-negative ``w``."""
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotvec_to_matrix(rv) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rv, dtype=np.float64)).as_matrix()


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_angle_deg(R) -> float:
    """Angle of a rotation matrix in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _check_quat(q: np.ndarray) -> None:
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise InvalidInputError(f"quaternion must be 4 finite numbers, got {q!r}")
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise InvalidInputError(f"quaternion not normalized (norm={np.linalg.norm(q)!r})")


@dataclass(frozen=True)
class Pose:
    """Camera pose in the session world frame."""

    rotation: np.ndarray
    translation: np.ndarray
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        q = _frozen(self.rotation, shape=(-1,))
        t = _frozen(self.translation, shape=(-1,))
        _check_quat(q)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvalidInputError(f"translation must be 3 finite numbers, got {t!r}")
        if not np.isfinite(self.timestamp):
            raise InvalidInputError("timestamp must be finite")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "frame_id", int(self.frame_id))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def from_matrix(cls, R, t, frame_id: int = 0, timestamp: float = 0.0) -> "Pose":
        return cls(matrix_to_quat(R), t, frame_id, timestamp)

    @classmethod
    def identity(cls, frame_id: int = 0, timestamp: float = 0.0) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3), frame_id, timestamp)

    @cached_property
    def R(self) -> np.ndarray:
        R = quat_to_matrix(self.rotation)
        R.flags.writeable = False
        return R

    def to_camera(self, points) -> np.ndarray:
        """World points ``(N, 3)`` into this camera's frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.R

    def to_world(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def transformed(self, R, t) -> "Pose":
        """This pose after a rigid change of world frame ``X' = R X + t``."""
        R = np.asarray(R, dtype=np.float64)
        return Pose.from_matrix(R @ self.R, R @ self.translation + np.asarray(t), self.frame_id, self.timestamp)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        vals = [self.fx, self.fy, self.cx, self.cy]
        if not all(np.isfinite(vals)):
            raise InvalidInputError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        col = np.floor(uv[..., 0] + 0.5)
        row = np.floor(uv[..., 1] + 0.5)
        return (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)


def project_points(points, pose: Pose, K: Intrinsics):
    """Vectorized pinhole projection of world points.

    Returns ``(uv, depth, visible)``: pixel coordinates ``(N, 2)`` (garbage
    where not visible), camera-frame depth, and the in-view flag.
    """
    pc = pose.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    front = depth > 0
    safe = np.where(front, depth, 1.0)
    uv = np.column_stack((K.fx * pc[:, 0] / safe + K.cx, K.fy * pc[:, 1] / safe + K.cy))
    visible = front & K.in_bounds(uv)
    return uv, depth, visible


def project(point, pose: Pose, K: Intrinsics):
    """Project one world point; ``None`` signals out of view."""
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidInputError(f"point must be 3 finite numbers, got {point!r}")
    uv, _, vis = project_points(p[None], pose, K)
    return uv[0] if vis[0] else None


# --------------------------------------------------------------------------- masks

_EMPTY_RUNS = np.zeros((0, 3), dtype=np.int32)


def _runs_from_keys(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if rows.size == 0:
        return _EMPTY_RUNS
    keys = np.unique(rows.astype(np.int64) << 32 | (cols.astype(np.int64) & 0xFFFFFFFF))
    r = keys >> 32
    c = keys & 0xFFFFFFFF
    brk = np.flatnonzero((np.diff(r) != 0) | (np.diff(c) != 1)) + 1
    starts = np.concatenate(([0], brk))
    ends = np.concatenate((brk, [keys.size]))
    return np.column_stack((r[starts], c[starts], c[ends - 1] + 1)).astype(np.int32)


@dataclass(frozen=True, eq=False)
class Mask:
    """Run-length encoded pixel set: rows of ``(row, start_col, end_col)``, end exclusive."""

    frame_id: int
    runs: np.ndarray = field(default_factory=lambda: _EMPTY_RUNS)

    def __post_init__(self):
        runs = np.array(self.runs, dtype=np.int32).reshape(-1, 3)
        if runs.size:
            if np.any(runs[:, 2] <= runs[:, 1]) or np.any(runs[:, :2] < 0):
                raise InvalidInputError("mask runs must be non-empty with non-negative coordinates")
            same_row = runs[1:, 0] == runs[:-1, 0]
            ordered = (runs[1:, 0] > runs[:-1, 0]) | (same_row & (runs[1:, 1] > runs[:-1, 2]))
            if not np.all(ordered):
                raise InvalidInputError("mask runs must be sorted and non-overlapping")
        runs.flags.writeable = False
        object.__setattr__(self, "runs", runs)
        object.__setattr__(self, "frame_id", int(self.frame_id))

    @classmethod
    def from_pixels(cls, frame_id: int, rows, cols) -> "Mask":
        return cls(frame_id, _runs_from_keys(np.asarray(rows).ravel(), np.asarray(cols).ravel()))

    @classmethod
    def from_dense(cls, frame_id: int, array, row0: int = 0, col0: int = 0) -> "Mask":
        """Encode a boolean image patch whose top-left pixel is ``(row0, col0)``."""
        a = np.asarray(array, dtype=bool)
        if a.size == 0:
            return cls(frame_id)
        padded = np.zeros((a.shape[0], a.shape[1] + 2), dtype=np.int8)
        padded[:, 1:-1] = a
        d = np.diff(padded, axis=1)
        sr, sc = np.nonzero(d == 1)
        er, ec = np.nonzero(d == -1)
        runs = np.column_stack((sr + row0, sc + col0, ec + col0))
        return cls(frame_id, runs)

    def pixels(self):
        """``(rows, cols)`` of every pixel in the mask, row-major order."""
        lengths = (self.runs[:, 2] - self.runs[:, 1]).astype(np.int64)
        total = int(lengths.sum())
        rows = np.repeat(self.runs[:, 0].astype(np.int64), lengths)
        offs = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        cols = np.repeat(self.runs[:, 1].astype(np.int64), lengths) + offs
        return rows, cols

    def to_dense(self, height: int, width: int) -> np.ndarray:
        img = np.zeros((height, width), dtype=bool)
        for r, s, e in self.runs:
            img[r, s:e] = True
        return img

    @cached_property
    def area(self) -> int:
        return int((self.runs[:, 2] - self.runs[:, 1]).sum())

    @property
    def empty(self) -> bool:
        return self.runs.shape[0] == 0

    @cached_property
    def bbox(self):
        """Inclusive ``(row_min, col_min, row_max, col_max)``."""
        if self.empty:
            raise InvalidInputError("empty mask has no bounding box")
        r = self.runs
        return (int(r[0, 0]), int(r[:, 1].min()), int(r[-1, 0]), int(r[:, 2].max()) - 1)

    @cached_property
    def centroid(self) -> np.ndarray:
        """Mean pixel position as ``(u, v)`` = (col, row)."""
        if self.empty:
            raise InvalidInputError("empty mask has no centroid")
        r = self.runs.astype(np.float64)
        n = r[:, 2] - r[:, 1]
        col_sum = ((r[:, 1] + r[:, 2] - 1) * n / 2.0).sum()
        row_sum = (r[:, 0] * n).sum()
        return np.array([col_sum, row_sum]) / n.sum()

    def within(self, width: int, height: int) -> bool:
        if self.empty:
            return True
        r = self.runs
        return bool(r[:, 0].max() < height and r[:, 2].max() <= width)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.runs, other.runs)

    __hash__ = None


def bbox_overlap(a: Mask, b: Mask) -> bool:
    ra0, ca0, ra1, ca1 = a.bbox
    rb0, cb0, rb1, cb1 = b.bbox
    return ra0 <= rb1 and rb0 <= ra1 and ca0 <= cb1 and cb0 <= ca1


def mask_iou(a: Mask, b: Mask) -> float:
    """Intersection over union of two non-empty masks."""
    if a.empty or b.empty:
        raise InvalidInputError("mask_iou requires non-empty masks")
    if not bbox_overlap(a, b):
        return 0.0
    inter = kernels.rle_intersection(a.runs, b.runs)
    return inter / (a.area + b.area - inter)


# ------------------------------------------------------------------ data records


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        pts = _frozen(self.points, shape=(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point cloud contains non-finite coordinates")
        if self.frame not in ("sensor", "world"):
            raise InvalidInputError(f"unknown coordinate frame tag {self.frame!r}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @classmethod
    def empty(cls, frame: str = "world") -> "PointCloud":
        return cls(np.zeros((0, 3)), frame)


@dataclass(frozen=True, eq=False)
class Detection:
    det_id: int
    frame_id: int
    mask: Mask
    confidence: float = 1.0
    embedding_id: int = -1
    centroid_px: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(f"confidence {self.confidence} outside [0, 1]")
        if self.mask.empty:
            raise InvalidInputError(f"detection {self.det_id} has an empty mask")
        c = self.mask.centroid if self.centroid_px is None else self.centroid_px
        c = _frozen(c, shape=(-1,))
        r0, c0, r1, c1 = self.mask.bbox
        if c.shape != (2,) or not (c0 - 0.5 <= c[0] <= c1 + 0.5 and r0 - 0.5 <= c[1] <= r1 + 0.5):
            raise InvalidInputError(f"detection {self.det_id} centroid outside its mask bounding box")
        object.__setattr__(self, "centroid_px", c)


class PixelObs(NamedTuple):
    frame_id: int
    pixel: tuple
    det_id: int = -1


@dataclass(frozen=True, eq=False)
class Track:
    track_id: int
    observations: tuple
    instance_cloud: PointCloud

    def __post_init__(self):
        obs = tuple((int(f), int(d)) for f, d in self.observations)
        frames = [f for f, _ in obs]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise InvalidInputError("track frame ids must be strictly increasing")
        object.__setattr__(self, "observations", obs)

    @property
    def frames(self) -> list[int]:
        return [f for f, _ in self.observations]


@dataclass(frozen=True, eq=False)
class FruitLandmark:
    fruit_id: int
    position: np.ndarray
    diameter: float
    source_track: int = -1
    pixel_obs: tuple = ()

    def __post_init__(self):
        p = _frozen(self.position, shape=(-1,))
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise InvalidInputError(f"landmark {self.fruit_id} position must be finite 3-vector")
        if not (np.isfinite(self.diameter) and self.diameter > 0):
            raise InvalidInputError(f"landmark {self.fruit_id} diameter must be positive")
        obs = tuple(
            PixelObs(int(o[0]), (float(o[1][0]), float(o[1][1])), int(o[2]) if len(o) > 2 else -1)
            for o in self.pixel_obs
        )
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "diameter", float(self.diameter))
        object.__setattr__(self, "pixel_obs", obs)

    @cached_property
    def obs_by_frame(self) -> dict:
        return {o.frame_id: o for o in self.pixel_obs}


@dataclass(frozen=True, eq=False)
class SessionMap:
    """Everything known about one data-collection session."""

    session_id: str
    poses: tuple
    intrinsics: Intrinsics
    detections: tuple = ()
    landmarks: tuple = ()
    embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    embedding_index: Mapping[int, int] = field(default_factory=dict)
    frame_embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    frame_embedding_index: Mapping[int, int] = field(default_factory=dict)
    registration_cloud: PointCloud = field(default_factory=PointCloud.empty)
    scans: Mapping[int, PointCloud] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        fids = [p.frame_id for p in self.poses]
        if len(set(fids)) != len(fids):
            raise InvalidInputError(f"session {self.session_id}: duplicate pose frame ids")

    @cached_property
    def pose_by_frame(self) -> dict:
        return {p.frame_id: p for p in self.poses}

    @cached_property
    def detections_by_frame(self) -> dict:
        out: dict[int, list] = {}
        for d in self.detections:
            out.setdefault(d.frame_id, []).append(d)
        return out

    @cached_property
    def detection_by_id(self) -> dict:
        return {d.det_id: d for d in self.detections}

    def embedding(self, embedding_id: int) -> np.ndarray:
        try:
            return self.embeddings[self.embedding_index[embedding_id]]
        except KeyError:
            raise InvalidInputError(f"session {self.session_id}: unknown embedding id {embedding_id}") from None

    def frame_embedding(self, frame_id: int) -> np.ndarray:
        try:
            return self.frame_embeddings[self.frame_embedding_index[frame_id]]
        except KeyError:
            raise InvalidInputError(f"session {self.session_id}: no frame embedding for frame {frame_id}") from None

    def with_landmarks(self, landmarks: Sequence[FruitLandmark]) -> "SessionMap":
        return replace(self, landmarks=tuple(landmarks))

    def validate(self) -> None:
        """Check cross-record invariants; raises :class:`InvalidInputError`."""
        frames = self.pose_by_frame
        for lm in self.landmarks:
            for o in lm.pixel_obs:
                if o.frame_id not in frames:
                    raise InvalidInputError(
                        f"landmark {lm.fruit_id} observed in frame {o.frame_id} which has no pose"
                    )
        for d in self.detections:
            if d.embedding_id not in self.embedding_index:
                raise InvalidInputError(f"detection {d.det_id} references missing embedding {d.embedding_id}")
            if not d.mask.within(self.intrinsics.width, self.intrinsics.height):
                raise InvalidInputError(f"detection {d.det_id} mask exceeds image bounds")


NO_MATCH = -1


class Vote(NamedTuple):
    """One per-view cross-session match: ``fruit_b`` seen in image ``frame_b``."""

    fruit_b: int
    frame_b: int
    cost: float


@dataclass(frozen=True, eq=False)
class TemporalMatchSet:
    session_a: str
    session_b: str
    vote_table: Mapping[int, tuple] = field(default_factory=dict)
    final_matches: tuple = ()
    references: tuple = ()
    unmatched_a: tuple = ()
    unmatched_b: tuple = ()
    status: str = "ok"

    def __post_init__(self):
        pairs = tuple((int(a), int(b)) for a, b in self.final_matches)
        if len({a for a, _ in pairs}) != len(pairs) or len({b for _, b in pairs}) != len(pairs):
            raise InvalidInputError("final matches must be injective in both coordinates")
        object.__setattr__(self, "final_matches", tuple(sorted(pairs)))
        object.__setattr__(self, "references", tuple(sorted((int(a), int(b)) for a, b in self.references)))
        object.__setattr__(self, "unmatched_a", tuple(sorted(int(a) for a in self.unmatched_a)))
        object.__setattr__(self, "unmatched_b", tuple(sorted(int(b) for b in self.unmatched_b)))

    @property
    def match_dict(self) -> dict:
        return dict(self.final_matches)
