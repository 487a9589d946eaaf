"""Box-constrained refinement of fruit positions by reprojection error.

Minimizes the Huber-robustified pixel error between observed mask centroids
and projected fruit centers, keeping every fruit inside an axis-aligned box
of half-width ``d`` around its initial estimate. The solver is a damped
Gauss-Newton (Levenberg-Marquardt) iteration whose steps are clipped back
onto the box. With camera poses fixed the problem is block diagonal and each
fruit is solved independently, vectorized across fruits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .core import FruitLandmark, Intrinsics, Pose, rotvec_to_matrix
from .errors import InvalidInputError

log = logging.getLogger(__name__)

MAX_ITER = 100
REL_TOL = 1e-8
STEP_TOL = 1e-10
LAMBDA0 = 1e-3
LAMBDA_MAX = 1e12
_MIN_DEPTH = 1e-9


@dataclass(frozen=True, eq=False)
class ReprojectionProblem:
    """Observations ``obs_pixel[k]`` of fruit ``obs_fruit[k]`` in pose ``obs_frame[k]``."""

    K: Intrinsics
    poses: tuple
    obs_frame: np.ndarray
    obs_fruit: np.ndarray
    obs_pixel: np.ndarray
    initial_positions: np.ndarray
    box_halfwidth: float = 0.15
    optimize_poses: bool = False
    huber_scale: float = 3.0

    def __post_init__(self):
        if not self.box_halfwidth > 0:
            raise InvalidInputError("box half-width d must be positive")
        obs_frame = np.asarray(self.obs_frame, dtype=np.int64).ravel()
        obs_fruit = np.asarray(self.obs_fruit, dtype=np.int64).ravel()
        pix = np.asarray(self.obs_pixel, dtype=np.float64).reshape(-1, 2)
        x0 = np.asarray(self.initial_positions, dtype=np.float64).reshape(-1, 3)
        if not (obs_frame.size == obs_fruit.size == pix.shape[0]):
            raise InvalidInputError("observation arrays differ in length")
        if obs_frame.size and (obs_frame.min() < 0 or obs_frame.max() >= len(self.poses)):
            raise InvalidInputError("observation frame index out of range")
        if obs_fruit.size and (obs_fruit.min() < 0 or obs_fruit.max() >= x0.shape[0]):
            raise InvalidInputError("observation fruit index out of range")
        if not (np.all(np.isfinite(pix)) and np.all(np.isfinite(x0))):
            raise InvalidInputError("non-finite observations or initial positions")
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "obs_frame", obs_frame)
        object.__setattr__(self, "obs_fruit", obs_fruit)
        object.__setattr__(self, "obs_pixel", pix)
        object.__setattr__(self, "initial_positions", x0)

    @classmethod
    def from_landmarks(
        cls,
        landmarks: Sequence[FruitLandmark],
        poses: Sequence[Pose],
        K: Intrinsics,
        **kwargs,
    ) -> "ReprojectionProblem":
        poses = sorted(poses, key=lambda p: p.frame_id)
        index = {p.frame_id: i for i, p in enumerate(poses)}
        frames, fruits, pix = [], [], []
        for j, lm in enumerate(landmarks):
            for o in lm.pixel_obs:
                frames.append(index[o.frame_id])
                fruits.append(j)
                pix.append(o.pixel)
        x0 = np.array([lm.position for lm in landmarks]).reshape(-1, 3)
        return cls(K, tuple(poses), np.array(frames), np.array(fruits), np.array(pix).reshape(-1, 2), x0, **kwargs)

    @property
    def n_fruits(self) -> int:
        return self.initial_positions.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return self.initial_positions - self.box_halfwidth

    @property
    def upper(self) -> np.ndarray:
        return self.initial_positions + self.box_halfwidth


@dataclass
class OptimizeResult:
    positions: np.ndarray
    poses: tuple
    cost: float
    initial_cost: float
    iterations: int
    status: str = "converged"
    history: list = field(default_factory=list)


# ---------------------------------------------------------------- residual model


def _pose_arrays(poses: Sequence[Pose]):
    R = np.array([p.R for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.translation for p in poses]).reshape(-1, 3)
    return R, t


def _model(problem: ReprojectionProblem, positions, poses, with_jac: bool):
    """Capped residuals ``(k, 2)`` and, optionally, per-observation Jacobian blocks."""
    K = problem.K
    R, t = _pose_arrays(poses)
    Ri, ti = R[problem.obs_frame], t[problem.obs_frame]
    X = np.asarray(positions, dtype=np.float64).reshape(-1, 3)[problem.obs_fruit]
    pc = np.einsum("kji,kj->ki", Ri, X - ti)  # R^T (X - t)
    z = pc[:, 2]
    front = z > _MIN_DEPTH
    zs = np.where(front, z, 1.0)
    proj = np.column_stack((K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy))
    r = problem.obs_pixel - proj
    cap = K.diagonal
    r[~front] = cap / np.sqrt(2.0)
    norm = np.linalg.norm(r, axis=1)
    over = front & (norm > cap)
    scale = np.where(over, cap / np.where(norm > 0, norm, 1.0), 1.0)
    r_capped = r * scale[:, None]
    if not with_jac:
        return r_capped, None, None
    k = r.shape[0]
    dproj = np.zeros((k, 2, 3))
    dproj[:, 0, 0] = K.fx / zs
    dproj[:, 0, 2] = -K.fx * pc[:, 0] / zs**2
    dproj[:, 1, 1] = K.fy / zs
    dproj[:, 1, 2] = -K.fy * pc[:, 1] / zs**2
    dr_dpc = -dproj
    # capped observations: d(r * c/|r|) = (c/|r|)(I - r_hat r_hat^T) dr
    if over.any():
        rh = r[over] / norm[over, None]
        P = np.eye(2)[None] - rh[:, :, None] * rh[:, None, :]
        dr_dpc[over] = scale[over, None, None] * np.einsum("kab,kbc->kac", P, dr_dpc[over])
    dr_dpc[~front] = 0.0
    J_X = np.einsum("kac,kjc->kaj", dr_dpc, Ri)  # dr/dpc @ R^T
    sk = np.zeros((k, 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -pc[:, 2], pc[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = pc[:, 2], -pc[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -pc[:, 1], pc[:, 0]
    J_w = np.einsum("kac,kcd->kad", dr_dpc, sk)
    J_t = -J_X
    return r_capped, J_X, np.concatenate((J_w, J_t), axis=2)


def residuals(problem: ReprojectionProblem, positions=None, poses=None) -> np.ndarray:
    """Stacked pixel residuals ``x_obs - proj(X)``, capped at the image diagonal."""
    positions = problem.initial_positions if positions is None else positions
    poses = problem.poses if poses is None else poses
    r, _, _ = _model(problem, positions, poses, with_jac=False)
    return r.ravel()


def jacobian(problem: ReprojectionProblem, positions=None, poses=None) -> sparse.csr_matrix:
    """Analytic Jacobian of :func:`residuals`.

    Columns are the fruit positions, followed (when ``optimize_poses``) by a
    rotation-vector and translation increment for every pose except the first,
    which fixes the gauge. Pose increments act as ``R <- R exp(w)``, ``t <- t + dt``.
    """
    positions = problem.initial_positions if positions is None else positions
    poses = problem.poses if poses is None else poses
    _, J_X, J_p = _model(problem, positions, poses, with_jac=True)
    k = problem.obs_fruit.size
    m = problem.n_fruits
    rows = np.repeat(np.arange(2 * k).reshape(k, 2), 3, axis=1)
    cols = (3 * problem.obs_fruit)[:, None, None] + np.arange(3)[None, None, :]
    cols = np.broadcast_to(cols, (k, 2, 3)).reshape(k, 6)
    data = [J_X.reshape(k, 6)]
    row_l, col_l = [rows], [cols]
    ncols = 3 * m
    if problem.optimize_poses and len(poses) > 1:
        ncols += 6 * (len(poses) - 1)
        keep = problem.obs_frame > 0
        prow = np.repeat(np.arange(2 * k).reshape(k, 2), 6, axis=1)[keep]
        pcol = 3 * m + 6 * (problem.obs_frame[keep] - 1)[:, None, None] + np.arange(6)[None, None, :]
        pcol = np.broadcast_to(pcol, (keep.sum(), 2, 6)).reshape(-1, 12)
        data.append(J_p[keep].reshape(-1, 12))
        row_l.append(prow)
        col_l.append(pcol)
    J = sparse.coo_matrix(
        (np.concatenate([d.ravel() for d in data]), (np.concatenate([r.ravel() for r in row_l]), np.concatenate([c.ravel() for c in col_l]))),
        shape=(2 * k, ncols),
    )
    return J.tocsr()


def huber(norms: np.ndarray, delta: float):
    """Per-observation Huber loss and IRLS weight on residual norms."""
    quad = norms <= delta
    loss = np.where(quad, 0.5 * norms**2, delta * norms - 0.5 * delta**2)
    weight = np.where(quad, 1.0, delta / np.where(norms > 0, norms, 1.0))
    return loss, weight


def robust_cost(problem: ReprojectionProblem, positions=None, poses=None) -> float:
    r = residuals(problem, positions, poses).reshape(-1, 2)
    return float(huber(np.linalg.norm(r, axis=1), problem.huber_scale)[0].sum())


def _apply_pose_step(poses: Sequence[Pose], step: np.ndarray) -> tuple:
    out = [poses[0]]
    for i, p in enumerate(poses[1:]):
        w, dt = step[6 * i : 6 * i + 3], step[6 * i + 3 : 6 * i + 6]
        out.append(Pose.from_matrix(p.R @ rotvec_to_matrix(w), p.translation + dt, p.frame_id, p.timestamp))
    return tuple(out)


# ------------------------------------------------------------------------ solvers


def optimize(problem: ReprojectionProblem, max_iter: int = MAX_ITER) -> OptimizeResult:
    """Refine positions (and poses if enabled) under the box constraint.

    Fruits observed in fewer than two frames are passed through unchanged.
    Returned positions satisfy the box exactly.
    """
    counts = np.bincount(problem.obs_fruit, minlength=problem.n_fruits)
    if problem.optimize_poses:
        return _optimize_joint(problem, counts >= 2, max_iter)
    return _optimize_blocks(problem, counts >= 2, max_iter)


def _optimize_blocks(problem: ReprojectionProblem, free: np.ndarray, max_iter: int) -> OptimizeResult:
    m = problem.n_fruits
    delta = problem.huber_scale
    lo, hi = problem.lower, problem.upper
    X = problem.initial_positions.copy()
    fruit = problem.obs_fruit

    def per_fruit_cost(Xc):
        r, _, _ = _model(problem, Xc, problem.poses, with_jac=False)
        loss, _ = huber(np.linalg.norm(r, axis=1), delta)
        return np.bincount(fruit, weights=loss, minlength=m)

    cost = per_fruit_cost(X)
    initial = float(cost.sum())
    lam = np.full(m, LAMBDA0)
    iters = np.zeros(m, dtype=np.int64)
    active = free & (cost > 0)
    singular = np.zeros(m, dtype=bool)
    history = [initial]
    need_lin = active.copy()
    H = np.zeros((m, 3, 3))
    g = np.zeros((m, 3))
    while active.any():
        if need_lin.any():
            r, J_X, _ = _model(problem, X, problem.poses, with_jac=True)
            _, w = huber(np.linalg.norm(r, axis=1), delta)
            Hk = np.einsum("k,kai,kaj->kij", w, J_X, J_X)
            gk = np.einsum("k,kai,ka->ki", w, J_X, r)
            sel = need_lin[fruit]
            Hn = np.zeros((m, 3, 3))
            gn = np.zeros((m, 3))
            np.add.at(Hn, fruit[sel], Hk[sel])
            np.add.at(gn, fruit[sel], gk[sel])
            H[need_lin], g[need_lin] = Hn[need_lin], gn[need_lin]
            need_lin[:] = False
        idx = np.flatnonzero(active)
        D = np.einsum("kii->ki", H[idx])
        A = H[idx] + lam[idx, None, None] * (np.eye(3)[None] * np.maximum(D, 1e-12)[:, :, None])
        step = np.zeros((idx.size, 3))
        ok = np.abs(np.linalg.det(A)) > 1e-300
        if ok.any():
            try:
                step[ok] = -np.linalg.solve(A[ok], g[idx[ok]][:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                ok[:] = False
        ok &= np.all(np.isfinite(step), axis=1)
        Xn = X.copy()
        Xn[idx] = np.clip(X[idx] + step, lo[idx], hi[idx])
        new_cost = per_fruit_cost(Xn)[idx]
        accept = ok & (new_cost < cost[idx])
        acc_idx, rej_idx = idx[accept], idx[~accept]
        moved = np.linalg.norm(Xn[acc_idx] - X[acc_idx], axis=1)
        rel = (cost[acc_idx] - new_cost[accept]) / np.maximum(cost[acc_idx], 1e-300)
        X[acc_idx] = Xn[acc_idx]
        cost[acc_idx] = new_cost[accept]
        lam[acc_idx] = np.maximum(lam[acc_idx] / 3.0, 1e-12)
        iters[acc_idx] += 1
        need_lin[acc_idx] = True
        done = (rel < REL_TOL) | (moved < STEP_TOL) | (iters[acc_idx] >= max_iter) | (cost[acc_idx] <= 0)
        active[acc_idx[done]] = False
        lam[rej_idx] *= 4.0
        dead = rej_idx[lam[rej_idx] > LAMBDA_MAX]
        singular[dead[(iters[dead] == 0) & ~ok[np.searchsorted(idx, dead)]]] = True
        active[dead] = False
        history.append(float(cost.sum()))
    status = "converged"
    if singular.any():
        X[singular] = problem.initial_positions[singular]
        status = "warning: singular normal equations for fruits " + ",".join(map(str, np.flatnonzero(singular)))
        log.warning(status)
    X = np.clip(X, lo, hi)
    return OptimizeResult(X, problem.poses, float(cost.sum()), initial, int(iters.max(initial=0)), status, history)


def _optimize_joint(problem: ReprojectionProblem, free: np.ndarray, max_iter: int) -> OptimizeResult:
    m = problem.n_fruits
    lo, hi = problem.lower, problem.upper
    X = problem.initial_positions.copy()
    poses = problem.poses
    n_pose = 6 * (len(poses) - 1)
    free_cols = np.concatenate((np.repeat(free, 3), np.ones(n_pose, dtype=bool)))
    cost = robust_cost(problem, X, poses)
    initial = cost
    history = [cost]
    lam = LAMBDA0
    it = 0
    status = "converged"
    relinearize = True
    while it < max_iter and cost > 0:
        if relinearize:
            r = residuals(problem, X, poses).reshape(-1, 2)
            _, w = huber(np.linalg.norm(r, axis=1), problem.huber_scale)
            J = jacobian(problem, X, poses)[:, free_cols]
            W = sparse.diags(np.repeat(w, 2))
            H = (J.T @ W @ J).tocsc()
            g = J.T @ (W @ r.ravel())
            diag = np.maximum(H.diagonal(), 1e-12)
            relinearize = False
        A = H + lam * sparse.diags(diag)
        try:
            step = -spsolve(A.tocsc(), g)
            ok = bool(np.all(np.isfinite(step)))
        except (RuntimeError, np.linalg.LinAlgError):
            ok = False
        if ok:
            full = np.zeros(free_cols.size)
            full[free_cols] = step
            Xn = np.clip(X + full[: 3 * m].reshape(-1, 3), lo, hi)
            pn = _apply_pose_step(poses, full[3 * m :]) if n_pose else poses
            new_cost = robust_cost(problem, Xn, pn)
        if ok and new_cost < cost:
            moved = np.linalg.norm(np.concatenate(((Xn - X).ravel(), full[3 * m :])))
            rel = (cost - new_cost) / cost
            X, poses, cost = Xn, pn, new_cost
            lam = max(lam / 3.0, 1e-12)
            it += 1
            history.append(cost)
            relinearize = True
            if rel < REL_TOL or moved < STEP_TOL:
                break
        else:
            lam *= 4.0
            if lam > LAMBDA_MAX:
                if it == 0 and not ok:
                    status = "warning: singular normal equations"
                    log.warning(status)
                    return OptimizeResult(problem.initial_positions.copy(), problem.poses, initial, initial, 0, status, history)
                break
    return OptimizeResult(np.clip(X, lo, hi), poses, cost, initial, it, status, history)


def refine_landmarks(
    landmarks: Sequence[FruitLandmark],
    poses: Sequence[Pose],
    K: Intrinsics,
    box_halfwidth: float = 0.15,
    optimize_poses: bool = False,
    huber_scale: float = 3.0,
) -> tuple[list[FruitLandmark], OptimizeResult]:
    """Run :func:`optimize` over a session's landmarks and return updated copies."""
    if not landmarks:
        return [], OptimizeResult(np.zeros((0, 3)), tuple(poses), 0.0, 0.0, 0)
    problem = ReprojectionProblem.from_landmarks(
        landmarks, poses, K, box_halfwidth=box_halfwidth, optimize_poses=optimize_poses, huber_scale=huber_scale
    )
    res = optimize(problem)
    return [replace(lm, position=res.positions[j]) for j, lm in enumerate(landmarks)], res
