"""Glue: per-session localization, session registration, cross-session association."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .config import PipelineConfig
from .core import SessionMap
from .fusion import session_instance_clouds
from .registration import ICPResult, icp_align
from .reproj import OptimizeResult, refine_landmarks
from .tracker import Tracker, finalize, reassociate

log = logging.getLogger(__name__)


@dataclass
class LocalizeResult:
    session: SessionMap
    n_tracks: int
    n_merged: int
    refine: OptimizeResult | None


def localize(session: SessionMap, cfg: PipelineConfig | None = None) -> LocalizeResult:
    """Count and place the fruits of one session; returns the session with landmarks."""
    cfg = cfg or PipelineConfig()
    tracker = Tracker(session.intrinsics, u=cfg.u, max_gap=cfg.max_gap)
    for pose, dets, clouds in session_instance_clouds(session, cfg.window, cfg.min_points, cfg.mad_k):
        tracker.step(pose, dets, clouds)
    tracks = tracker.tracks()
    merged = reassociate(
        tracks, session.pose_by_frame, session.intrinsics, cfg.reassoc_distance, cfg.u, cfg.min_points
    )
    landmarks, _ = finalize(merged, session.detection_by_id, cfg.min_track_len, cfg.min_points)
    result = None
    if cfg.refine and landmarks:
        landmarks, result = refine_landmarks(
            landmarks, session.poses, session.intrinsics, cfg.d, cfg.optimize_poses, cfg.huber_scale
        )
    log.info("%s: %d tracks, %d after merging, %d landmarks", session.session_id, len(tracks), len(merged), len(landmarks))
    return LocalizeResult(session.with_landmarks(landmarks), len(tracks), len(tracks) - len(merged), result)


def register_sessions(a: SessionMap, b: SessionMap, cfg: PipelineConfig | None = None) -> ICPResult:
    """Transform taking session ``a`` coordinates into session ``b`` coordinates."""
    cfg = cfg or PipelineConfig()
    return icp_align(a.registration_cloud, b.registration_cloud, params=cfg.icp)
