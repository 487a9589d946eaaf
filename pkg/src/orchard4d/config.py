"""Every tunable of the pipeline in one flat, JSON-serializable dataclass."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import InvalidInputError
from .registration import ICPParams


@dataclass(frozen=True)
class PipelineConfig:
    # fusion
    window: float = 1.5
    min_points: int = 5
    mad_k: float = 1.5
    # tracking
    u: float = 0.3
    max_gap: int = 3
    min_track_len: int = 4
    reassoc_distance: float = 0.2
    # reprojection refinement
    d: float = 0.15
    huber_scale: float = 3.0
    optimize_poses: bool = False
    refine: bool = True
    # registration
    icp_max_correspondence_distance: float = 0.5
    icp_max_iterations: int = 50
    icp_tolerance: float = 1e-6
    icp_voxel_size: float = 0.05
    icp_normal_neighbors: int = 10
    icp_min_inlier_fraction: float = 0.2
    # cross-session association
    gate_distance: float = 0.3
    entropy_threshold: float = 0.8
    angle_threshold: float = 10.0
    topology_weight: float = 0.5
    no_match_cost: float = 1.0
    vote_no_match: bool = True
    hist_azimuth_bins: int = 8
    hist_height_bins: int = 3
    hist_radius_bins: int = 3
    hist_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.window > 0, "window must be positive"),
            (self.min_points >= 1, "min_points must be >= 1"),
            (self.mad_k > 0, "mad_k must be positive"),
            (0 < self.u < 1, "u must be in (0, 1)"),
            (self.max_gap >= 0, "max_gap must be >= 0"),
            (self.min_track_len >= 1, "min_track_len must be >= 1"),
            (self.reassoc_distance > 0, "reassoc_distance must be positive"),
            (self.d > 0, "d must be positive"),
            (self.huber_scale > 0, "huber_scale must be positive"),
            (self.icp_max_correspondence_distance > 0, "icp_max_correspondence_distance must be positive"),
            (self.icp_max_iterations >= 1, "icp_max_iterations must be >= 1"),
            (0 <= self.icp_min_inlier_fraction <= 1, "icp_min_inlier_fraction must be in [0, 1]"),
            (self.gate_distance > 0, "gate_distance must be positive"),
            (self.entropy_threshold >= 0, "entropy_threshold must be >= 0"),
            (0 < self.angle_threshold < 180, "angle_threshold must be in (0, 180)"),
            (self.topology_weight >= 0, "topology_weight must be >= 0"),
            (self.no_match_cost > 0, "no_match_cost must be positive"),
            (min(self.hist_azimuth_bins, self.hist_height_bins, self.hist_radius_bins) >= 1, "histogram bins must be >= 1"),
            (self.hist_radius > 0, "hist_radius must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidInputError(f"config: {msg}")

    @property
    def icp(self) -> ICPParams:
        return ICPParams(
            max_correspondence_distance=self.icp_max_correspondence_distance,
            max_iterations=self.icp_max_iterations,
            tolerance=self.icp_tolerance,
            voxel_size=self.icp_voxel_size,
            normal_neighbors=self.icp_normal_neighbors,
            min_inlier_fraction=self.icp_min_inlier_fraction,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        bad = sorted(set(d) - set(known))
        if bad:
            raise InvalidInputError(f"config: unknown keys {bad}")
        return cls(**{k: _coerce(known[k].type, k, v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidInputError(f"{path}: cannot read config: {e}") from None
        if not isinstance(data, dict):
            raise InvalidInputError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def override(self, assignments) -> "PipelineConfig":
        """Apply ``key=value`` strings (values parsed as JSON when possible)."""
        known = {f.name: f for f in fields(self)}
        upd = {}
        for a in assignments:
            key, sep, raw = a.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise InvalidInputError(f"config: bad override {a!r}")
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            upd[key] = _coerce(known[key].type, key, val)
        return replace(self, **upd)


def _coerce(typ, key, v):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if not isinstance(v, bool):
                raise TypeError
            return v
        if typ == "int":
            if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                raise TypeError
            return int(v)
        if typ == "float":
            if isinstance(v, bool):
                raise TypeError
            return float(v)
    except (TypeError, ValueError):
        pass
    else:
        return v
    raise InvalidInputError(f"config: {key} expects {typ}, got {v!r}")
