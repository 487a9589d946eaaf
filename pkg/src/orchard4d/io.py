"""On-disk dataset format.

A session directory holds::

    intrinsics.json            fx, fy, cx, cy, width, height
    poses.jsonl                frame_id, timestamp, translation[3], quaternion[4] (w first)
    detections.jsonl           frame_id, det_id, confidence, mask [[row, start, end], ...], embedding_id
    embeddings.f32             row-major little-endian float32
    embeddings.idx.json        dim, rows, index {id: row}
    frame_embeddings.f32       same layout, keyed by frame_id
    frame_embeddings.idx.json
    clouds/<frame_id>.xyz      "x y z" per line, meters, sensor frame
    registration_cloud.xyz     static structure, session frame

Every reader raises :class:`DatasetError` naming the file (and line, for
line-oriented files) on malformed content.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .core import Detection, FruitLandmark, Intrinsics, Mask, PointCloud, Pose, SessionMap, TemporalMatchSet, Vote
from .errors import DatasetError, InputError
from .registration import RigidTransform

CLOUD_DIR = "clouds"


def dump_json(obj: Any) -> str:
    """Canonical JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dump_json(obj), encoding="utf-8")


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n")


def read_json(path) -> Any:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError("file not found", p) from None
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot read: {e}", p) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON: {e.msg}", p, e.lineno) from None


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    p = Path(path)
    try:
        fh = open(p, encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError("file not found", p) from None
    with fh:
        try:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetError(f"invalid JSON: {e.msg}", p, lineno) from None
                if not isinstance(rec, dict):
                    raise DatasetError("each line must be a JSON object", p, lineno)
                yield lineno, rec
        except UnicodeDecodeError as e:
            raise DatasetError(f"not UTF-8: {e}", p) from None


def _field(rec: Mapping, key: str, path, line):
    try:
        return rec[key]
    except KeyError:
        raise DatasetError(f"missing field {key!r}", path, line) from None


# ------------------------------------------------------------------ point files


def write_xyz(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        if pts.size:
            np.savetxt(fh, pts, fmt="%.6f")


def read_xyz(path) -> np.ndarray:
    p = Path(path)
    try:
        text = p.read_text(encoding="ascii")
    except FileNotFoundError:
        raise DatasetError("file not found", p) from None
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot read: {e}", p) from None
    if not text.strip():
        return np.zeros((0, 3))
    lines = text.splitlines()
    try:
        flat = np.array(text.split(), dtype=np.float64)
    except ValueError:
        flat = None
    if flat is not None and flat.size == 3 * sum(1 for ln in lines if ln.strip()) and np.all(np.isfinite(flat)):
        return flat.reshape(-1, 3)
    # slow path: find the offending line
    for lineno, ln in enumerate(lines, 1):
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 3:
            raise DatasetError(f"expected 3 values, got {len(parts)}", p, lineno)
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise DatasetError("non-numeric value", p, lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError("non-finite value", p, lineno)
    raise DatasetError("malformed point file", p)


# ---------------------------------------------------------------- embeddings


def write_embeddings(stem, ids: Sequence[int], table: np.ndarray) -> None:
    """Write ``<stem>.f32`` and ``<stem>.idx.json``; row ``k`` belongs to ``ids[k]``."""
    arr = np.ascontiguousarray(np.asarray(table, dtype="<f4"))
    rows, dim = (arr.shape if arr.ndim == 2 else (0, 0))
    Path(f"{stem}.f32").write_bytes(arr.tobytes())
    write_json(f"{stem}.idx.json", {"dim": int(dim), "rows": int(rows), "index": {str(int(i)): k for k, i in enumerate(ids)}})


def read_embeddings(stem) -> tuple[np.ndarray, dict[int, int]]:
    idx_path = Path(f"{stem}.idx.json")
    meta = read_json(idx_path)
    try:
        dim, rows = int(meta["dim"]), int(meta["rows"])
        index = {int(k): int(v) for k, v in meta["index"].items()}
    except (KeyError, TypeError, ValueError, AttributeError):
        raise DatasetError("index needs integer 'dim', 'rows' and an 'index' object", idx_path) from None
    data_path = Path(f"{stem}.f32")
    try:
        raw = data_path.read_bytes()
    except FileNotFoundError:
        raise DatasetError("file not found", data_path) from None
    if len(raw) != 4 * dim * rows:
        raise DatasetError(f"expected {rows} x {dim} float32 values, found {len(raw) // 4}", data_path)
    if any(not 0 <= r < rows for r in index.values()):
        raise DatasetError("index row out of range", idx_path)
    return np.frombuffer(raw, dtype="<f4").reshape(rows, dim).astype(np.float64), index


# ------------------------------------------------------------------- session


def write_session(root, session: SessionMap, write_scans: bool = True) -> Path:
    d = Path(root)
    d.mkdir(parents=True, exist_ok=True)
    K = session.intrinsics
    write_json(d / "intrinsics.json", {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height})
    write_jsonl(
        d / "poses.jsonl",
        (
            {
                "frame_id": p.frame_id,
                "timestamp": p.timestamp,
                "translation": [float(v) for v in p.translation],
                "quaternion": [float(v) for v in p.rotation],
            }
            for p in sorted(session.poses, key=lambda p: p.frame_id)
        ),
    )
    write_jsonl(
        d / "detections.jsonl",
        (
            {
                "frame_id": det.frame_id,
                "det_id": det.det_id,
                "confidence": det.confidence,
                "mask": det.mask.runs.tolist(),
                "embedding_id": det.embedding_id,
            }
            for det in session.detections
        ),
    )
    inv = sorted(session.embedding_index.items(), key=lambda kv: kv[1])
    write_embeddings(d / "embeddings", [i for i, _ in inv], session.embeddings[[r for _, r in inv]] if inv else np.zeros((0, 0)))
    finv = sorted(session.frame_embedding_index.items(), key=lambda kv: kv[1])
    write_embeddings(
        d / "frame_embeddings",
        [i for i, _ in finv],
        session.frame_embeddings[[r for _, r in finv]] if finv else np.zeros((0, 0)),
    )
    write_xyz(d / "registration_cloud.xyz", session.registration_cloud.points)
    if write_scans:
        cdir = d / CLOUD_DIR
        cdir.mkdir(exist_ok=True)
        for fid, cloud in sorted(session.scans.items()):
            write_xyz(cdir / f"{fid:06d}.xyz", cloud.points)
    return d


def read_intrinsics(path) -> Intrinsics:
    data = read_json(path)
    try:
        return Intrinsics(**{k: data[k] for k in ("fx", "fy", "cx", "cy", "width", "height")})
    except (KeyError, TypeError) as e:
        raise DatasetError(f"intrinsics need fx, fy, cx, cy, width, height ({e})", path) from None
    except InputError as e:
        raise DatasetError(str(e), path) from None


def read_poses(path) -> list[Pose]:
    out = []
    for line, rec in iter_jsonl(path):
        try:
            out.append(
                Pose(
                    _field(rec, "quaternion", path, line),
                    _field(rec, "translation", path, line),
                    int(_field(rec, "frame_id", path, line)),
                    float(_field(rec, "timestamp", path, line)),
                )
            )
        except DatasetError:
            raise
        except (InputError, TypeError, ValueError) as e:
            raise DatasetError(str(e), path, line) from None
    return out


def read_detections(path) -> list[Detection]:
    out = []
    seen = set()
    for line, rec in iter_jsonl(path):
        try:
            fid = int(_field(rec, "frame_id", path, line))
            det_id = int(_field(rec, "det_id", path, line))
            runs = np.asarray(_field(rec, "mask", path, line), dtype=np.int64).reshape(-1, 3)
            det = Detection(
                det_id,
                fid,
                Mask(fid, runs),
                float(rec.get("confidence", 1.0)),
                int(rec.get("embedding_id", -1)),
            )
        except DatasetError:
            raise
        except (InputError, TypeError, ValueError) as e:
            raise DatasetError(str(e), path, line) from None
        if det_id in seen:
            raise DatasetError(f"duplicate det_id {det_id}", path, line)
        seen.add(det_id)
        out.append(det)
    return out


def read_session(root, load_scans: bool = True, load_registration: bool = True) -> SessionMap:
    """Load a session directory. Cross-reference errors name the offending file."""
    d = Path(root)
    if not d.is_dir():
        raise DatasetError("session directory not found", d)
    K = read_intrinsics(d / "intrinsics.json")
    poses = read_poses(d / "poses.jsonl")
    dets = read_detections(d / "detections.jsonl")
    emb, emb_idx = read_embeddings(d / "embeddings")
    femb, femb_idx = read_embeddings(d / "frame_embeddings")
    reg = PointCloud.empty()
    if load_registration and (d / "registration_cloud.xyz").exists():
        reg = PointCloud(read_xyz(d / "registration_cloud.xyz"), "world")
    scans = {}
    if load_scans and (d / CLOUD_DIR).is_dir():
        for f in sorted((d / CLOUD_DIR).glob("*.xyz")):
            try:
                fid = int(f.stem)
            except ValueError:
                raise DatasetError("cloud file name must be an integer frame id", f) from None
            scans[fid] = PointCloud(read_xyz(f), "sensor")
    try:
        session = SessionMap(
            session_id=d.name,
            poses=poses,
            intrinsics=K,
            detections=dets,
            embeddings=emb,
            embedding_index=emb_idx,
            frame_embeddings=femb,
            frame_embedding_index=femb_idx,
            registration_cloud=reg,
            scans=scans,
        )
    except InputError as e:
        raise DatasetError(str(e), d / "poses.jsonl") from None
    frames = session.pose_by_frame
    for det in dets:
        if det.frame_id not in frames:
            raise DatasetError(f"detection {det.det_id} refers to frame {det.frame_id} with no pose", d / "detections.jsonl")
        if det.embedding_id not in emb_idx:
            raise DatasetError(f"detection {det.det_id} refers to missing embedding {det.embedding_id}", d / "detections.jsonl")
        if not det.mask.within(K.width, K.height):
            raise DatasetError(f"detection {det.det_id} mask exceeds the image", d / "detections.jsonl")
    for fid in scans:
        if fid not in frames:
            raise DatasetError(f"cloud for frame {fid} has no pose", d / CLOUD_DIR)
    return session


# ------------------------------------------------------------- pipeline outputs


def landmarks_to_json(session_id: str, landmarks: Sequence[FruitLandmark], extra: Mapping | None = None) -> dict:
    out = {
        "session_id": session_id,
        "count": len(landmarks),
        "landmarks": [
            {
                "fruit_id": lm.fruit_id,
                "position": [float(v) for v in lm.position],
                "diameter": lm.diameter,
                "source_track": lm.source_track,
                "track_frames": [o.frame_id for o in lm.pixel_obs],
                "pixel_obs": [[o.frame_id, o.pixel[0], o.pixel[1], o.det_id] for o in lm.pixel_obs],
            }
            for lm in landmarks
        ],
    }
    if extra:
        out.update(extra)
    return out


def read_landmarks(path) -> tuple[str, list[FruitLandmark]]:
    data = read_json(path)
    try:
        items = data["landmarks"]
        out = [
            FruitLandmark(
                int(r["fruit_id"]),
                r["position"],
                float(r["diameter"]),
                int(r.get("source_track", -1)),
                tuple((int(o[0]), (float(o[1]), float(o[2])), int(o[3])) for o in r.get("pixel_obs", ())),
            )
            for r in items
        ]
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise DatasetError(f"malformed landmark record ({e!r})", path) from None
    except InputError as e:
        raise DatasetError(str(e), path) from None
    ids = [lm.fruit_id for lm in out]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate fruit_id", path)
    return str(data.get("session_id", "")), out


def transform_to_json(T: RigidTransform, **extra) -> dict:
    d = {"quaternion": [float(v) for v in T.rotation], "translation": [float(v) for v in T.translation]}
    d.update(extra)
    return d


def read_transform(path) -> RigidTransform:
    data = read_json(path)
    try:
        return RigidTransform(data["quaternion"], data["translation"])
    except (KeyError, TypeError) as e:
        raise DatasetError(f"transform needs quaternion and translation ({e!r})", path) from None
    except InputError as e:
        raise DatasetError(str(e), path) from None


def matches_to_json(m: TemporalMatchSet, method: str) -> dict:
    return {
        "session_a": m.session_a,
        "session_b": m.session_b,
        "method": method,
        "status": m.status,
        "final_matches": [list(p) for p in m.final_matches],
        "references": [list(p) for p in m.references],
        "unmatched_a": list(m.unmatched_a),
        "unmatched_b": list(m.unmatched_b),
        "vote_table": {str(k): [[v.fruit_b, v.frame_b, v.cost] for v in votes] for k, votes in m.vote_table.items()},
    }


def read_matches(path) -> TemporalMatchSet:
    data = read_json(path)
    try:
        return TemporalMatchSet(
            data["session_a"],
            data["session_b"],
            vote_table={int(k): tuple(Vote(int(a), int(b), float(c)) for a, b, c in v) for k, v in data.get("vote_table", {}).items()},
            final_matches=[tuple(p) for p in data["final_matches"]],
            references=[tuple(p) for p in data.get("references", [])],
            unmatched_a=data.get("unmatched_a", []),
            unmatched_b=data.get("unmatched_b", []),
            status=data.get("status", "ok"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed match file ({e!r})", path) from None
    except InputError as e:
        raise DatasetError(str(e), path) from None


# ------------------------------------------------------------------- truth


class Truth:
    """Lazy reader for a dataset's ``truth/`` directory."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError("truth directory not found", self.root)

    def det_fruit(self, tag: str) -> dict[int, int]:
        p = self.root / "sessions" / tag / "det_truth.jsonl"
        out = {}
        for line, r in iter_jsonl(p):
            try:
                out[int(r["det_id"])] = int(r["fruit_id"])
            except (KeyError, TypeError, ValueError):
                raise DatasetError("record needs integer det_id and fruit_id", p, line) from None
        return out

    def fruits(self, tag: str) -> list[dict]:
        p = self.root / "sessions" / tag / "fruits.jsonl"
        return [r for _, r in iter_jsonl(p)]

    def batches(self) -> dict[int, int]:
        p = self.root / "fruits.jsonl"
        return {int(r["fruit_id"]): int(r["batch"]) for _, r in iter_jsonl(p)}

    def trees(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        d = read_json(self.root / "sessions" / tag / "trees.json")
        return np.asarray(d["position"], dtype=np.float64).reshape(-1, 3), np.asarray(d["batch"], dtype=np.int64)

    def removed(self, tag: str) -> list[int]:
        return [int(x) for x in read_json(self.root / "sessions" / tag / "removed.json")]

    def transform(self, tag: str) -> RigidTransform:
        return read_transform(self.root / "sessions" / tag / "frame_transform.json")

    def spec(self) -> dict:
        return read_json(self.root / "spec.json")
