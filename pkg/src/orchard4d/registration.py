"""Rigid alignment of two sessions' static-structure clouds (point-to-plane ICP)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import FruitLandmark, PointCloud, _check_quat, _frozen, matrix_to_quat, quat_to_matrix, rotvec_to_matrix
from .errors import InvalidInputError, RegistrationFailure

log = logging.getLogger(__name__)

_BACKTRACKS = 4


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> R x + t`` with ``R`` stored as a unit quaternion (w, x, y, z)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = _frozen(self.rotation, shape=(-1,))
        _check_quat(q)
        t = _frozen(self.translation, shape=(-1,))
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvalidInputError("translation must be 3 finite numbers")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t) -> "RigidTransform":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_rotvec(cls, rotvec, t) -> "RigidTransform":
        return cls.from_matrix(rotvec_to_matrix(rotvec), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def inverse(self) -> "RigidTransform":
        R = self.R
        return RigidTransform.from_matrix(R.T, -R.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``: ``x -> self(other(x))``."""
        R = self.R
        return RigidTransform.from_matrix(R @ other.R, R @ other.translation + self.translation)

    __matmul__ = compose


@dataclass(frozen=True)
class ICPParams:
    max_correspondence_distance: float = 0.5
    max_iterations: int = 50
    tolerance: float = 1e-6
    voxel_size: float = 0.05
    normal_neighbors: int = 10
    min_inlier_fraction: float = 0.2
    min_points: int = 100


@dataclass
class ICPResult:
    transform: RigidTransform
    rms: float
    iterations: int
    inlier_fraction: float
    history: list = field(default_factory=list)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Centroid of the points in every occupied voxel, in voxel-key order."""
    pts = np.asarray(points, dtype=np.float64)
    if voxel <= 0 or pts.shape[0] == 0:
        return pts
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    out = np.zeros((counts.size, 3))
    np.add.at(out, inv, pts)
    return out / counts[:, None]


def estimate_normals(points: np.ndarray, k: int = 10, tree: cKDTree | None = None) -> np.ndarray:
    """Unit normals from a plane fit to each point's ``k`` nearest neighbours."""
    tree = tree or cKDTree(points)
    k = min(k, points.shape[0])
    _, nn = tree.query(points, k=k)
    nbrs = points[nn]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def icp_align(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    params: ICPParams | None = None,
) -> ICPResult:
    """Estimate the transform mapping ``source`` coordinates into ``target`` coordinates.

    Raises :class:`RegistrationFailure` when fewer than
    ``params.min_inlier_fraction`` of the source points find a target
    neighbour within the correspondence distance at convergence.
    """
    params = params or ICPParams()
    if len(source) < params.min_points or len(target) < params.min_points:
        raise InvalidInputError(f"ICP needs at least {params.min_points} points per cloud")
    src = voxel_downsample(source.points, params.voxel_size)
    tgt = voxel_downsample(target.points, params.voxel_size)
    tree = cKDTree(tgt)
    normals = estimate_normals(tgt, params.normal_neighbors, tree)
    T = init or RigidTransform.identity()
    R, t = T.R, T.translation.copy()

    def correspond(R, t):
        moved = src @ R.T + t
        d, idx = tree.query(moved, distance_upper_bound=params.max_correspondence_distance)
        ok = np.isfinite(d)
        p, q, n = moved[ok], tgt[idx[ok]], normals[idx[ok]]
        resid = np.einsum("ij,ij->i", q - p, n)
        rms = float(np.sqrt(np.mean(resid**2))) if resid.size else math.inf
        return p, n, resid, rms, ok.mean()

    p, n, resid, rms, frac = correspond(R, t)
    history = [rms]
    it = 0
    for it in range(1, params.max_iterations + 1):
        if p.shape[0] < 6:
            break
        A = np.hstack((np.cross(p, n), n))
        x, *_ = np.linalg.lstsq(A, resid, rcond=None)
        # halve a step that raises the inlier RMS; give up after a few tries so the history stays monotone
        for _ in range(_BACKTRACKS + 1):
            dR = rotvec_to_matrix(x[:3])
            Rn, tn = dR @ R, dR @ t + x[3:]
            cand = correspond(Rn, tn)
            if cand[3] <= rms:
                break
            x = x / 2
        else:
            break
        R, t = Rn, tn
        p, n, resid, rms, frac = cand
        history.append(rms)
        if np.linalg.norm(x) < params.tolerance:
            break
    if frac < params.min_inlier_fraction or p.shape[0] < 6:
        raise RegistrationFailure(
            f"only {frac:.1%} of source points have a target neighbour within "
            f"{params.max_correspondence_distance} m"
        )
    return ICPResult(RigidTransform.from_matrix(R, t), rms, it, float(frac), history)


def apply(transform: RigidTransform, landmarks: Sequence[FruitLandmark]) -> list[FruitLandmark]:
    """Move landmark positions by ``transform``; diameters are unchanged."""
    if not landmarks:
        return []
    pos = transform.apply(np.array([lm.position for lm in landmarks]))
    return [replace(lm, position=pos[i]) for i, lm in enumerate(landmarks)]
