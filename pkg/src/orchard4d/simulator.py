"""Synthetic multi-session orchard datasets with ground truth.

A single row of trees is scanned by a camera+LiDAR moving parallel to the
row. Fruits are spheres placed on a fruiting wall, canopy occluders are
vertical disks in front of it, and a flat wall of foliage sits behind. Every
frame is rendered with a painter's z-buffer of projected disks: masks are the
visible part of each fruit disk, LiDAR returns are surface samples that land
on their own object in the z-buffer. Detection embeddings are a persistent
per-fruit latent vector plus view noise; frame embeddings encode the camera's
station along the row.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Detection, Intrinsics, Mask, PointCloud, Pose, SessionMap
from .errors import InvalidInputError
from .registration import RigidTransform

# camera looks along world +y; image x = world x, image y (down) = world -z
_CAM_R = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])

WALL_Y = 0.45
OCCLUDER_Y = (-0.6, -0.4)
FRUIT_Y = (-0.25, 0.1)
FRUIT_Z = (1.15, 2.45)


def _pair(v, name) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in v)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{name} must be a [min, max] pair") from None
    if lo > hi:
        raise InvalidInputError(f"{name}: min exceeds max")
    return lo, hi


@dataclass(frozen=True)
class SessionSpec:
    date_tag: str
    growth_scale: float = 1.0
    position_drift_sigma: float = 0.0
    removal_fraction: float = 0.0
    miss_detection_rate: float = 0.0
    rotation_deg: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    occluder_density: float = 0.0
    appearance_change: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.removal_fraction < 1.0:
            raise InvalidInputError(f"session {self.date_tag}: removal_fraction must be in [0, 1)")
        if not 0.0 <= self.miss_detection_rate < 1.0:
            raise InvalidInputError(f"session {self.date_tag}: miss_detection_rate must be in [0, 1)")
        if self.growth_scale <= 0 or self.position_drift_sigma < 0 or self.occluder_density < 0:
            raise InvalidInputError(f"session {self.date_tag}: growth/drift/occluders must be non-negative")
        if self.appearance_change < 0:
            raise InvalidInputError(f"session {self.date_tag}: appearance_change must be non-negative")
        rot = tuple(float(x) for x in self.rotation_deg)
        tr = tuple(float(x) for x in self.translation)
        if len(rot) != 3 or len(tr) != 3:
            raise InvalidInputError(f"session {self.date_tag}: perturbation needs 3 rotation and 3 translation values")
        object.__setattr__(self, "rotation_deg", rot)
        object.__setattr__(self, "translation", tr)

    @property
    def perturbation(self) -> RigidTransform:
        return RigidTransform.from_rotvec(np.radians(self.rotation_deg), self.translation)


@dataclass(frozen=True)
class OrchardSpec:
    seed: int = 0
    n_trees: int = 4
    fruits_per_tree: tuple = (25, 35)
    fruit_diameter: tuple = (0.065, 0.085)
    tree_spacing: float = 1.5
    cluster_size: tuple = (1, 1)
    sessions: tuple = (SessionSpec("s0"), SessionSpec("s1"))
    speed: float = 0.5
    frame_rate: float = 5.0
    standoff: float = 2.0
    camera_height: float = 1.8
    lidar_density: float = 6000.0
    background_density: float = 300.0
    lidar_noise: float = 0.0
    embedding_dim: int = 16
    embedding_noise: float = 0.0
    frame_embedding_dim: int = 32
    frame_embedding_noise: float = 0.0
    min_visible_fraction: float = 0.5
    mutual_occlusion: bool = False
    growth_sag: float = 0.05
    min_mask_pixels: int = 20
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480))

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidInputError("n_trees must be at least 1")
        fpt = _pair(self.fruits_per_tree, "fruits_per_tree")
        dia = _pair(self.fruit_diameter, "fruit_diameter")
        cl = _pair(self.cluster_size, "cluster_size")
        if fpt[0] < 0 or dia[0] <= 0 or cl[0] < 1:
            raise InvalidInputError("fruits_per_tree >= 0, fruit_diameter > 0 and cluster_size >= 1 required")
        sessions = tuple(s if isinstance(s, SessionSpec) else SessionSpec(**s) for s in self.sessions)
        if not sessions:
            raise InvalidInputError("at least one session is required")
        tags = [s.date_tag for s in sessions]
        if len(set(tags)) != len(tags):
            raise InvalidInputError("session date tags must be unique")
        growth = [s.growth_scale for s in sessions]
        if growth[0] < 1.0 or any(b < a for a, b in zip(growth, growth[1:])):
            raise InvalidInputError("growth_scale must be >= 1 and non-decreasing across sessions")
        for name in ("speed", "frame_rate", "standoff", "tree_spacing", "lidar_density"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.embedding_dim < 1 or self.frame_embedding_dim < 2:
            raise InvalidInputError("embedding dimensions must be positive")
        if min(self.lidar_noise, self.embedding_noise, self.frame_embedding_noise, self.background_density, self.growth_sag) < 0:
            raise InvalidInputError("noise levels and densities must be non-negative")
        object.__setattr__(self, "fruits_per_tree", (int(fpt[0]), int(fpt[1])))
        object.__setattr__(self, "fruit_diameter", dia)
        object.__setattr__(self, "cluster_size", (int(cl[0]), int(cl[1])))
        object.__setattr__(self, "sessions", sessions)

    @property
    def row_length(self) -> float:
        return (self.n_trees - 1) * self.tree_spacing


@dataclass(frozen=True, eq=False)
class World:
    """Ground truth shared by all sessions (orchard frame)."""

    tree_x: np.ndarray
    tree_batch: np.ndarray
    fruit_tree: np.ndarray
    base_positions: np.ndarray
    base_diameters: np.ndarray
    latents: np.ndarray
    session_positions: tuple
    session_diameters: tuple
    session_latents: tuple
    removed: tuple
    occluders: tuple
    frame_phase: np.ndarray
    frame_wavelength: np.ndarray
    structure: dict

    @property
    def n_fruits(self) -> int:
        return self.base_positions.shape[0]


@dataclass(frozen=True, eq=False)
class SessionTruth:
    session_id: str
    det_fruit: dict
    removed: tuple
    transform: RigidTransform
    positions: np.ndarray
    diameters: np.ndarray
    station_x: dict


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _batches(n_trees: int, rng) -> np.ndarray:
    sizes = []
    left = n_trees
    while left > 0:
        if left <= 3:
            sizes.append(left)
            break
        s = int(rng.integers(2, 4))
        if left - s == 1:
            s = 2 if s == 3 else 3
        sizes.append(s)
        left -= s
    return np.repeat(np.arange(len(sizes)), sizes)


def _overlaps_in_pass(spec: OrchardSpec, cand: np.ndarray, others: np.ndarray, radius: float) -> bool:
    """True if any candidate's image disk touches an existing fruit's at some camera station.

    The camera moves along x, so the horizontal pixel offset between two
    fruits is linear in the camera position while the vertical offset is
    constant. The smallest separation is found on the interval of stations
    where both fruits are in view.
    """
    if others.shape[0] == 0:
        return False
    K = spec.intrinsics
    margin = 3.0
    for c in cand:
        near = others[np.abs(others[:, 0] - c[0]) < 3.0]
        if near.shape[0] == 0:
            continue
        d1 = c[1] + spec.standoff
        d2 = near[:, 1] + spec.standoff
        rp = K.fx * radius / d1 + K.fx * radius / d2 + margin
        b = K.fy * ((spec.camera_height - c[2]) / d1 - (spec.camera_height - near[:, 2]) / d2)
        lo = np.maximum(c[0] - d1 * (K.width - K.cx) / K.fx, near[:, 0] - d2 * (K.width - K.cx) / K.fx)
        hi = np.minimum(c[0] + d1 * K.cx / K.fx, near[:, 0] + d2 * K.cx / K.fx)
        slope = 1.0 / d1 - 1.0 / d2
        a0 = c[0] / d1 - near[:, 0] / d2
        with np.errstate(divide="ignore", invalid="ignore"):
            x_star = np.where(np.abs(slope) > 1e-12, a0 / slope, lo)
        x = np.clip(x_star, lo, hi)
        a = K.fx * (a0 - x * slope)
        touching = (lo <= hi) & (np.hypot(a, b) < rp)
        if touching.any():
            return True
    return False


_CLEARANCE = 1.04


def _place_fruits(spec: OrchardSpec, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rejection-sample fruit clusters per tree.

    Fruits never intersect in any session: centres stay ``_CLEARANCE`` times
    the sum of the largest grown radii apart. Cluster members touch at that
    distance and share one depth, so they cannot hide one another.
    """
    g = max(s.growth_scale for s in spec.sessions)
    half_w = 0.45 * spec.tree_spacing
    occ_radius = g * spec.fruit_diameter[1] / 2
    pos = np.zeros((0, 3))
    dia = np.zeros(0)
    tree: list[int] = []
    for k in range(spec.n_trees):
        x0 = k * spec.tree_spacing
        target = int(rng.integers(spec.fruits_per_tree[0], spec.fruits_per_tree[1] + 1))
        placed = 0
        attempts = 0
        while placed < target and attempts < 200 * max(target, 1):
            attempts += 1
            size = min(int(rng.integers(spec.cluster_size[0], spec.cluster_size[1] + 1)), target - placed)
            d = rng.uniform(*spec.fruit_diameter, size)
            members = [np.array([rng.uniform(x0 - half_w, x0 + half_w), rng.uniform(*FRUIT_Y), rng.uniform(*FRUIT_Z)])]
            for m in range(1, size):
                j = int(rng.integers(0, m))
                ang = rng.uniform(0, 2 * np.pi)
                gap = _CLEARANCE * g * (d[m] + d[j]) / 2 * 1.01
                members.append(members[j] + gap * np.array([np.cos(ang), 0.0, np.sin(ang)]))
            cand = np.array(members)
            if np.any(np.abs(cand[:, 0] - x0) > half_w + 0.1) or np.any(cand[:, 2] < FRUIT_Z[0]) or np.any(cand[:, 2] > FRUIT_Z[1]):
                continue
            all_pos = np.vstack((pos, cand))
            all_d = np.concatenate((dia, d))
            new = np.arange(pos.shape[0], all_pos.shape[0])
            dist = np.linalg.norm(all_pos[new][:, None] - all_pos[None], axis=2)
            need = _CLEARANCE * g * (all_d[new][:, None] + all_d[None]) / 2
            dist[np.arange(size), new] = np.inf
            if np.any(dist < need):
                continue
            if not spec.mutual_occlusion and _overlaps_in_pass(spec, cand, pos, occ_radius):
                continue
            pos, dia = all_pos, all_d
            tree.extend([k] * size)
            placed += size
    return pos, dia, np.array(tree, dtype=np.int64)


def _structure(spec: OrchardSpec, rng) -> dict:
    n = spec.n_trees
    trunks = np.column_stack(
        (np.arange(n) * spec.tree_spacing + rng.normal(0, 0.05, n), rng.normal(0.2, 0.04, n), rng.uniform(0.06, 0.1, n))
    )
    post_x = np.arange(-0.5 * spec.tree_spacing, spec.row_length + spec.tree_spacing, 4.3 * spec.tree_spacing)
    posts = np.column_stack((post_x + rng.normal(0, 0.1, post_x.size), np.full(post_x.size, 0.25)))
    return {"trunks": trunks, "posts": posts, "ground_phase": rng.uniform(0, 2 * np.pi, 3)}


def generate(spec: OrchardSpec) -> World:
    """Deterministic ground-truth world for ``spec``."""
    rng = _rng(spec.seed, 0)
    pos, dia, tree = _place_fruits(spec, rng)
    n = pos.shape[0]
    # how far each fruit's branch bends per unit of added fruit mass
    compliance = rng.uniform(0.0, 1.0, n)
    latents = rng.normal(size=(n, spec.embedding_dim))
    latents /= np.maximum(np.linalg.norm(latents, axis=1, keepdims=True), 1e-12)
    order = rng.permutation(n)
    s_pos, s_dia, s_lat, removed = [], [], [], []
    for si, ss in enumerate(spec.sessions):
        srng = _rng(spec.seed, 1, si)
        sag = np.zeros_like(pos)
        sag[:, 2] = -spec.growth_sag * compliance * (ss.growth_scale**3 - 1.0)
        drift = srng.normal(0.0, ss.position_drift_sigma, pos.shape) if ss.position_drift_sigma > 0 else 0.0
        s_pos.append(pos + sag + drift)
        s_dia.append(dia * ss.growth_scale)
        lat = latents
        if ss.appearance_change > 0:
            lat = latents + srng.normal(0.0, ss.appearance_change / np.sqrt(spec.embedding_dim), latents.shape)
        s_lat.append(lat)
        removed.append(tuple(sorted(int(i) for i in order[: int(math.floor(ss.removal_fraction * n))])))
    occluders = []
    x_lo, x_hi = -spec.tree_spacing, spec.row_length + spec.tree_spacing
    for si, ss in enumerate(spec.sessions):
        orng = _rng(spec.seed, 2, si)
        k = int(round(ss.occluder_density * (x_hi - x_lo) * (FRUIT_Z[1] - FRUIT_Z[0])))
        occ = np.column_stack(
            (
                orng.uniform(x_lo, x_hi, k),
                orng.uniform(*OCCLUDER_Y, k),
                orng.uniform(FRUIT_Z[0], FRUIT_Z[1], k),
                orng.uniform(0.04, 0.09, k),
            )
        )
        occluders.append(occ)
    half = spec.frame_embedding_dim // 2
    frame_wavelength = np.geomspace(0.5, 4.0 * max(spec.row_length, 10.0), half)
    frame_phase = rng.uniform(0, 2 * np.pi, half)
    return World(
        tree_x=np.arange(spec.n_trees) * spec.tree_spacing,
        tree_batch=_batches(spec.n_trees, rng),
        fruit_tree=tree,
        base_positions=pos,
        base_diameters=dia,
        latents=latents,
        session_positions=tuple(s_pos),
        session_diameters=tuple(s_dia),
        session_latents=tuple(s_lat),
        removed=tuple(removed),
        occluders=tuple(occluders),
        frame_phase=frame_phase,
        frame_wavelength=frame_wavelength,
        structure=_structure(spec, rng),
    )


def frame_embedding(world: World, station_x: float) -> np.ndarray:
    ang = 2 * np.pi * station_x / world.frame_wavelength + world.frame_phase
    return np.concatenate((np.cos(ang), np.sin(ang))) / np.sqrt(world.frame_wavelength.size)


def camera_path(spec: OrchardSpec, session_index: int) -> list[tuple[float, np.ndarray]]:
    """``(timestamp, camera position)`` per frame, orchard frame."""
    rng = _rng(spec.seed, 3, session_index)
    K = spec.intrinsics
    half_fov = spec.standoff * (K.width / 2) / K.fx
    x0 = -half_fov - 0.6 * spec.tree_spacing - rng.uniform(0, spec.speed / spec.frame_rate)
    x1 = spec.row_length + half_fov + 0.6 * spec.tree_spacing
    n = int(np.ceil((x1 - x0) * spec.frame_rate / spec.speed)) + 1
    out = []
    for i in range(n):
        t = i / spec.frame_rate
        out.append((t, np.array([x0 + spec.speed * t, -spec.standoff, spec.camera_height])))
    return out


def _paint(ids, depth_order, centers_px, radii_px, labels):
    """Painter's algorithm: draw disks far to near into ``ids``."""
    H, W = ids.shape
    for k in depth_order:
        u, v = centers_px[k]
        rad = radii_px[k]
        r0, r1 = max(int(np.floor(v - rad)), 0), min(int(np.ceil(v + rad)) + 1, H)
        c0, c1 = max(int(np.floor(u - rad)), 0), min(int(np.ceil(u + rad)) + 1, W)
        if r0 >= r1 or c0 >= c1:
            continue
        rr = np.arange(r0, r1)[:, None]
        cc = np.arange(c0, c1)[None, :]
        disk = (rr - v) ** 2 + (cc - u) ** 2 <= rad * rad
        ids[r0:r1, c0:c1][disk] = labels[k]


def _sphere_samples(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def render_session(world: World, session_index: int, spec: OrchardSpec) -> tuple[SessionMap, SessionTruth]:
    """Render one session's frames, detections, scans, embeddings and truth."""
    ss = spec.sessions[session_index]
    K = spec.intrinsics
    G = ss.perturbation
    rng = _rng(spec.seed, 4, session_index)
    pos = world.session_positions[session_index]
    rad = world.session_diameters[session_index] / 2.0
    lat = world.session_latents[session_index]
    present = np.ones(world.n_fruits, dtype=bool)
    present[list(world.removed[session_index])] = False
    occ = world.occluders[session_index]
    obj_pos = np.vstack((pos[present], occ[:, :3]))
    obj_rad = np.concatenate((rad[present], occ[:, 3]))
    obj_fruit = np.concatenate((np.flatnonzero(present), -np.ones(len(occ), dtype=np.int64)))
    obj_label = np.arange(obj_pos.shape[0], dtype=np.int32)

    poses, detections, emb_rows, scans, frame_emb = [], [], [], {}, []
    det_fruit, station = {}, {}
    det_id = 0
    for fid, (t, cam) in enumerate(camera_path(spec, session_index)):
        pose_orchard = Pose.from_matrix(_CAM_R, cam, fid, t)
        pc = pose_orchard.to_camera(obj_pos)
        z = pc[:, 2]
        front = z > 0.3
        zs = np.where(front, z, 1.0)
        u = K.fx * pc[:, 0] / zs + K.cx
        v = K.fy * pc[:, 1] / zs + K.cy
        rpx = K.fx * obj_rad / zs
        inview = front & (u + rpx >= 0) & (u - rpx < K.width) & (v + rpx >= 0) & (v - rpx < K.height)
        idx = np.flatnonzero(inview)
        ids = np.full((K.height, K.width), -1, dtype=np.int32)
        order = idx[np.argsort(-z[idx], kind="stable")]
        _paint(ids, order, np.column_stack((u, v)), rpx, obj_label)

        # detections
        fruit_objs = idx[obj_fruit[idx] >= 0]
        for k in sorted(fruit_objs, key=lambda k: obj_fruit[k]):
            r = rpx[k]
            r0, r1 = max(int(np.floor(v[k] - r)), 0), min(int(np.ceil(v[k] + r)) + 1, K.height)
            c0, c1 = max(int(np.floor(u[k] - r)), 0), min(int(np.ceil(u[k] + r)) + 1, K.width)
            if r0 >= r1 or c0 >= c1:
                continue
            patch = ids[r0:r1, c0:c1] == obj_label[k]
            area = int(patch.sum())
            if area < spec.min_mask_pixels or area < spec.min_visible_fraction * np.pi * r * r:
                continue
            if ss.miss_detection_rate > 0 and rng.random() < ss.miss_detection_rate:
                continue
            fruit = int(obj_fruit[k])
            mask = Mask.from_dense(fid, patch, r0, c0)
            detections.append(Detection(det_id, fid, mask, float(rng.uniform(0.6, 1.0)), det_id))
            emb = lat[fruit]
            if spec.embedding_noise > 0:
                emb = emb + rng.normal(0.0, spec.embedding_noise / np.sqrt(spec.embedding_dim), emb.shape)
            emb_rows.append(emb)
            det_fruit[det_id] = fruit
            det_id += 1

        # lidar scan
        pts = []
        for k in idx:
            n_full = spec.lidar_density * (2.0 / z[k]) ** 2 * (
                4 * np.pi * obj_rad[k] ** 2 if obj_fruit[k] >= 0 else np.pi * obj_rad[k] ** 2
            )
            n_s = int(rng.poisson(n_full))
            if n_s == 0:
                continue
            if obj_fruit[k] >= 0:
                dirs = _sphere_samples(rng, n_s)
                p = obj_pos[k] + obj_rad[k] * dirs
                p = p[np.einsum("ij,ij->i", cam - p, dirs) > 0]
            else:
                a = rng.uniform(0, 2 * np.pi, n_s)
                rr = obj_rad[k] * np.sqrt(rng.uniform(0, 1, n_s))
                p = obj_pos[k] + np.column_stack((rr * np.cos(a), np.zeros(n_s), rr * np.sin(a)))
            pts.append((k, p))
        half_w = (WALL_Y - cam[1]) * (K.width / 2) / K.fx
        half_h = (WALL_Y - cam[1]) * (K.height / 2) / K.fy
        n_bg = int(rng.poisson(spec.background_density * 4 * half_w * half_h * (2.0 / (WALL_Y - cam[1])) ** 2))
        bg = np.column_stack(
            (
                rng.uniform(cam[0] - half_w, cam[0] + half_w, n_bg),
                np.full(n_bg, WALL_Y),
                rng.uniform(cam[2] - half_h, cam[2] + half_h, n_bg),
            )
        )
        pts.append((-1, bg))
        kept = []
        for k, p in pts:
            if p.shape[0] == 0:
                continue
            pcam = pose_orchard.to_camera(p)
            ok = pcam[:, 2] > 0
            cu = np.floor(K.fx * pcam[:, 0] / np.where(ok, pcam[:, 2], 1) + K.cx + 0.5).astype(np.int64)
            cv = np.floor(K.fy * pcam[:, 1] / np.where(ok, pcam[:, 2], 1) + K.cy + 0.5).astype(np.int64)
            ok &= (cu >= 0) & (cu < K.width) & (cv >= 0) & (cv < K.height)
            want = -1 if k < 0 else obj_label[k]
            ok[ok] &= ids[cv[ok], cu[ok]] == want
            kept.append(pcam[ok])
        cloud = np.concatenate(kept) if kept else np.zeros((0, 3))
        if spec.lidar_noise > 0:
            cloud = cloud + rng.normal(0.0, spec.lidar_noise, cloud.shape)
        scans[fid] = PointCloud(cloud, "sensor")

        fe = frame_embedding(world, cam[0])
        if spec.frame_embedding_noise > 0:
            fe = fe + rng.normal(0.0, spec.frame_embedding_noise / np.sqrt(fe.size), fe.shape)
        frame_emb.append(fe)
        station[fid] = float(cam[0])
        poses.append(Pose.from_matrix(G.R @ _CAM_R, G.apply(cam[None])[0], fid, t))

    reg = G.apply(static_scene(world, spec, _rng(spec.seed, 5, session_index)))
    emb = np.array(emb_rows).reshape(-1, spec.embedding_dim)
    session = SessionMap(
        session_id=ss.date_tag,
        poses=tuple(poses),
        intrinsics=K,
        detections=tuple(detections),
        embeddings=emb,
        embedding_index={i: i for i in range(emb.shape[0])},
        frame_embeddings=np.array(frame_emb),
        frame_embedding_index={p.frame_id: i for i, p in enumerate(poses)},
        registration_cloud=PointCloud(reg, "world"),
        scans=scans,
    )
    truth = SessionTruth(
        session_id=ss.date_tag,
        det_fruit=det_fruit,
        removed=world.removed[session_index],
        transform=G,
        positions=G.apply(pos),
        diameters=world.session_diameters[session_index],
        station_x=station,
    )
    return session, truth


def static_scene(world: World, spec: OrchardSpec, rng, noise: float = 0.003) -> np.ndarray:
    """Point samples of the static structure (ground, trunks, posts), orchard frame."""
    st = world.structure
    x_lo, x_hi = -2.0, spec.row_length + 2.0
    y_lo, y_hi = -2.5, 1.5
    ph = st["ground_phase"]
    n_g = int(35 * (x_hi - x_lo) * (y_hi - y_lo))
    gx, gy = rng.uniform(x_lo, x_hi, n_g), rng.uniform(y_lo, y_hi, n_g)
    gz = 0.05 * np.sin(gx / 1.9 + ph[0]) + 0.04 * np.sin(gy / 0.9 + ph[1]) + 0.03 * np.sin((gx + gy) / 1.3 + ph[2])
    parts = [np.column_stack((gx, gy, gz))]
    for x, y, r in st["trunks"]:
        n = 350
        a, h = rng.uniform(0, 2 * np.pi, n), rng.uniform(0.0, 1.1, n)
        parts.append(np.column_stack((x + r * np.cos(a), y + r * np.sin(a), h)))
    for x, y in st["posts"]:
        n = 500
        face = rng.integers(0, 4, n)
        s, h = rng.uniform(-0.05, 0.05, n), rng.uniform(0.0, 2.6, n)
        off = np.where(face[:, None] < 2, np.column_stack((np.where(face == 0, -0.05, 0.05), s)), np.column_stack((s, np.where(face == 2, -0.05, 0.05))))
        parts.append(np.column_stack((x + off[:, 0], y + off[:, 1], h)))
    pts = np.concatenate(parts)
    return pts + rng.normal(0.0, noise, pts.shape) if noise > 0 else pts


def simulate(spec: OrchardSpec) -> tuple[World, list[SessionMap], list[SessionTruth]]:
    world = generate(spec)
    sessions, truths = [], []
    for i in range(len(spec.sessions)):
        s, t = render_session(world, i, spec)
        sessions.append(s)
        truths.append(t)
    return world, sessions, truths


def truth_pairs(truth_a: SessionTruth, truth_b: SessionTruth, n_fruits: int) -> list[tuple[int, int]]:
    """Fruit-id correspondences between two sessions (identity minus removals)."""
    gone = set(truth_a.removed) | set(truth_b.removed)
    return [(i, i) for i in range(n_fruits) if i not in gone]


def spec_from_dict(d: dict) -> OrchardSpec:
    """Build an :class:`OrchardSpec` from parsed JSON, rejecting unknown keys."""
    d = dict(d)
    known = set(OrchardSpec.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise InvalidInputError(f"unknown spec keys: {sorted(unknown)}")
    sess = d.pop("sessions", None)
    if sess is not None:
        s_known = set(SessionSpec.__dataclass_fields__)
        out = []
        for i, s in enumerate(sess):
            if not isinstance(s, dict) or "date_tag" not in s:
                raise InvalidInputError(f"sessions[{i}] must be an object with a date_tag")
            bad = set(s) - s_known
            if bad:
                raise InvalidInputError(f"sessions[{i}]: unknown keys {sorted(bad)}")
            out.append(SessionSpec(**s))
        d["sessions"] = tuple(out)
    if "intrinsics" in d and isinstance(d["intrinsics"], dict):
        d["intrinsics"] = Intrinsics(**d["intrinsics"])
    try:
        return OrchardSpec(**d)
    except TypeError as e:
        raise InvalidInputError(str(e)) from None


def standard_pair_spec(
    seed: int = 0,
    removal_fraction: float = 0.1,
    embedding_noise: float = 0.3,
    mutual_occlusion: bool = False,
) -> OrchardSpec:
    """Two-tree, 50-fruit session pair used for association studies.

    Clustered fruits, independent 2 cm drift in both sessions, 20% growth
    with branch droop, a 3 degree / 20 cm frame perturbation on B and
    ``removal_fraction`` of the fruits gone from B.
    """
    return OrchardSpec(
        seed=seed,
        n_trees=2,
        fruits_per_tree=(25, 25),
        cluster_size=(2, 5),
        embedding_noise=embedding_noise,
        growth_sag=0.2,
        mutual_occlusion=mutual_occlusion,
        sessions=(
            SessionSpec("a", position_drift_sigma=0.02),
            SessionSpec(
                "b",
                growth_scale=1.2,
                position_drift_sigma=0.02,
                removal_fraction=removal_fraction,
                rotation_deg=(0.0, 0.0, 3.0),
                translation=(0.2, -0.1, 0.05),
            ),
        ),
    )


def full_scale_spec(seed: int = 0, corrupted: bool = False) -> OrchardSpec:
    """60 trees, about 1800 fruits; ``corrupted`` adds missed detections and occlusion."""
    if corrupted:
        sessions = (
            SessionSpec("a", miss_detection_rate=0.1, occluder_density=5.0),
            SessionSpec(
                "b", miss_detection_rate=0.1, occluder_density=5.0, rotation_deg=(0.0, 0.0, 0.3), translation=(0.2, -0.1, 0.03)
            ),
        )
    else:
        sessions = (SessionSpec("a"), SessionSpec("b", rotation_deg=(0.0, 0.0, 0.3), translation=(0.2, -0.1, 0.03)))
    return OrchardSpec(seed=seed, n_trees=60, fruits_per_tree=(25, 35), mutual_occlusion=corrupted, sessions=sessions)


def spec_to_dict(spec: OrchardSpec) -> dict:
    d = asdict(spec)
    d["sessions"] = [asdict(s) for s in spec.sessions]
    return json.loads(json.dumps(d))


def write_dataset(root, spec: OrchardSpec, write_scans: bool = True) -> dict:
    """Simulate ``spec`` and write every session plus ``truth/``. Returns a summary."""
    from . import io as dio

    world = generate(spec)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tdir = root / "truth"
    (tdir / "sessions").mkdir(parents=True, exist_ok=True)
    (tdir / "pairs").mkdir(exist_ok=True)
    dio.write_json(tdir / "spec.json", spec_to_dict(spec))
    dio.write_jsonl(
        tdir / "fruits.jsonl",
        (
            {
                "fruit_id": i,
                "tree": int(world.fruit_tree[i]),
                "batch": int(world.tree_batch[world.fruit_tree[i]]),
                "position": [float(v) for v in world.base_positions[i]],
                "diameter": float(world.base_diameters[i]),
            }
            for i in range(world.n_fruits)
        ),
    )
    summary = {"fruits": world.n_fruits, "trees": spec.n_trees, "sessions": {}}
    truths = []
    for si, ss in enumerate(spec.sessions):
        session, truth = render_session(world, si, spec)
        truths.append(truth)
        dio.write_session(root / ss.date_tag, session, write_scans=write_scans)
        sdir = tdir / "sessions" / ss.date_tag
        sdir.mkdir(parents=True, exist_ok=True)
        dio.write_jsonl(
            sdir / "det_truth.jsonl",
            ({"frame_id": d.frame_id, "det_id": d.det_id, "fruit_id": truth.det_fruit[d.det_id]} for d in session.detections),
        )
        present = set(range(world.n_fruits)) - set(truth.removed)
        dio.write_jsonl(
            sdir / "fruits.jsonl",
            (
                {
                    "fruit_id": i,
                    "position": [float(v) for v in truth.positions[i]],
                    "diameter": float(truth.diameters[i]),
                    "present": i in present,
                }
                for i in range(world.n_fruits)
            ),
        )
        dio.write_json(sdir / "removed.json", list(truth.removed))
        trees = truth.transform.apply(np.column_stack((world.tree_x, np.zeros_like(world.tree_x), np.zeros_like(world.tree_x))))
        dio.write_json(
            sdir / "trees.json",
            {"position": [[float(v) for v in p] for p in trees], "batch": [int(b) for b in world.tree_batch]},
        )
        dio.write_json(sdir / "frame_transform.json", dio.transform_to_json(truth.transform))
        summary["sessions"][ss.date_tag] = {
            "frames": len(session.poses),
            "detections": len(session.detections),
            "present_fruits": len(present),
        }
    for ta, tb in zip(truths, truths[1:]):
        dio.write_json(tdir / "pairs" / f"{ta.session_id}__{tb.session_id}.json", truth_pairs(ta, tb, world.n_fruits))
    dio.write_json(tdir / "summary.json", summary)
    return summary
