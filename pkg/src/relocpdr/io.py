"""Readers and writers for the on-disk formats.

Floats are written with ``repr`` so every file round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_GATE,
    FeatureMapDB,
    FrameRecord,
    ImuLog,
    Intrinsics,
    Pose6,
    Position2,
    RelocObservation,
    StepEvent,
)

IMU_HEADER = ["t", "ax", "ay", "az", "gx", "gy", "gz"]
TRUTH_HEADER = ["k", "t", "x_true", "y_true", "psi_true"]


def _fmt(v) -> str:
    return repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty CSV file")
        rows = [r for r in reader if r]
    return [h.strip() for h in header], rows


# -- IMU ---------------------------------------------------------------------


def write_imu_csv(path, log: ImuLog):
    rows = (
        [_fmt(t)] + [_fmt(v) for v in a] + [_fmt(v) for v in g]
        for t, a, g in zip(log.t, log.accel, log.gyro)
    )
    _write_rows(path, IMU_HEADER, rows)


def read_imu_csv(path) -> ImuLog:
    header, rows = _read_csv(path)
    if header != IMU_HEADER:
        raise ValueError(f"{path}: expected header {','.join(IMU_HEADER)}, got {','.join(header)}")
    data = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, 7)
    return ImuLog(data[:, 0], data[:, 1:4], data[:, 4:7])


# -- map ---------------------------------------------------------------------


def map_to_dict(db: FeatureMapDB) -> dict:
    intr = db.intrinsics
    return {
        "intrinsics": {
            "fx": intr.fx,
            "fy": intr.fy,
            "cx": intr.cx,
            "cy": intr.cy,
            "width": intr.width,
            "height": intr.height,
        },
        "map_scale": db.map_scale,
        "frames": [
            {
                "id": int(f.id),
                "rotation": f.pose.rotation.tolist(),
                "translation": f.pose.translation.tolist(),
                "global": f.global_desc.tolist(),
                "keypoints": f.keypoints.tolist(),
                "descriptors": f.descriptors.tolist(),
                "landmark_ids": f.landmark_ids.tolist(),
            }
            for f in db.frames
        ],
        "landmarks": [{"id": int(k), "xyz": v.tolist()} for k, v in sorted(db.landmarks.items())],
        "covisibility": [
            {"frame": int(k), "frames": sorted(int(v) for v in vs)} for k, vs in sorted(db.covisibility.items())
        ],
    }


def map_from_dict(doc: dict) -> FeatureMapDB:
    for key in ("frames", "landmarks", "covisibility", "intrinsics"):
        if key not in doc:
            raise ValueError(f"map document lacks '{key}'")
    frames = [
        FrameRecord(
            id=int(f["id"]),
            pose=Pose6(np.array(f["rotation"]), np.array(f["translation"])),
            global_desc=np.array(f["global"], dtype=float),
            keypoints=np.array(f["keypoints"], dtype=float).reshape(-1, 2),
            descriptors=np.array(f["descriptors"], dtype=float),
            landmark_ids=np.array(f["landmark_ids"], dtype=np.int64),
        )
        for f in doc["frames"]
    ]
    landmarks = {int(lm["id"]): np.array(lm["xyz"], dtype=float) for lm in doc["landmarks"]}
    covis = {int(c["frame"]): set(c["frames"]) for c in doc["covisibility"]}
    # scale is fixed to metric after load
    return FeatureMapDB(frames, landmarks, Intrinsics(**doc["intrinsics"]), covis, map_scale=1.0)


def write_map_json(path, db: FeatureMapDB):
    with open(path, "w") as fh:
        json.dump(map_to_dict(db), fh)


def read_map_json(path) -> FeatureMapDB:
    with open(path) as fh:
        return map_from_dict(json.load(fh))


# -- JSON-lines --------------------------------------------------------------


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _read_jsonl(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def _finite_or_none(v):
    v = float(v)
    return v if np.isfinite(v) else None


def observation_to_dict(obs: RelocObservation) -> dict:
    """``success`` means a pose was recovered; a failed query has null x, y."""
    x, y = _finite_or_none(obs.position.x), _finite_or_none(obs.position.y)
    return {
        "k": obs.k,
        "x": x,
        "y": y,
        "inliers": obs.inliers,
        "success": x is not None and y is not None and obs.inliers > 0,
        "accepted": obs.accepted,
        "source": obs.source,
    }


def observation_from_dict(d: dict, source=None, gate: int = DEFAULT_GATE) -> RelocObservation:
    def num(v):
        return float("nan") if v is None else float(v)

    inliers = int(d["inliers"])
    return RelocObservation(
        k=int(d["k"]),
        position=Position2(num(d["x"]), num(d["y"])),
        inliers=inliers,
        accepted=bool(d["accepted"]) if "accepted" in d else inliers > gate,
        source=source or d.get("source", "file"),
    )


def write_observations(path, observations):
    _write_jsonl(path, (observation_to_dict(o) for o in observations))


def read_observations(path, source=None, gate: int = DEFAULT_GATE):
    return [observation_from_dict(d, source, gate) for d in _read_jsonl(path)]


def write_steps(path, steps):
    _write_jsonl(
        path,
        (
            {
                "k": s.index,
                "t_peak": s.t_peak,
                "length": s.length,
                "heading": s.heading,
                "az_max": s.az_max,
                "az_min": s.az_min,
            }
            for s in steps
        ),
    )


def read_steps(path):
    return [
        StepEvent(int(d["k"]), d["t_peak"], d["length"], d["heading"], d["az_max"], d["az_min"])
        for d in _read_jsonl(path)
    ]


def write_queries(path, queries):
    """``queries`` is an iterable of (k, t, QueryFeatures)."""
    _write_jsonl(
        path,
        (
            {
                "k": int(k),
                "t": float(t),
                "global": q.global_desc.tolist(),
                "keypoints": q.keypoints.tolist(),
                "descriptors": q.descriptors.tolist(),
            }
            for k, t, q in queries
        ),
    )


def read_queries(path, intrinsics: Intrinsics):
    from .relocalizer import QueryFeatures

    out = []
    for d in _read_jsonl(path):
        q = QueryFeatures(
            np.array(d["global"], dtype=float),
            np.array(d["keypoints"], dtype=float).reshape(-1, 2),
            np.array(d["descriptors"], dtype=float),
            intrinsics,
        )
        out.append((int(d["k"]), float(d["t"]), q))
    return out


def write_solver_log(path, records):
    _write_jsonl(path, records)


def read_solver_log(path):
    return _read_jsonl(path)


# -- trajectories --------------------------------------------------------------


def write_trajectory_csv(path, k, t, xy, xy_true=None):
    k = np.asarray(k, dtype=int)
    t = np.asarray(t, dtype=float)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    header = ["k", "t", "x", "y"]
    if xy_true is not None:
        xy_true = np.asarray(xy_true, dtype=float).reshape(-1, 2)
        header += ["x_true", "y_true"]
    rows = []
    for i in range(len(k)):
        row = [str(int(k[i])), _fmt(t[i]), _fmt(xy[i, 0]), _fmt(xy[i, 1])]
        if xy_true is not None:
            row += [_fmt(xy_true[i, 0]), _fmt(xy_true[i, 1])]
        rows.append(row)
    _write_rows(path, header, rows)


def read_trajectory_csv(path) -> dict:
    """Return a dict of column arrays; ``x_true``/``y_true`` present only if stored."""
    header, rows = _read_csv(path)
    if header[:4] != ["k", "t", "x", "y"]:
        raise ValueError(f"{path}: expected columns k,t,x,y")
    cols = {h: [] for h in header}
    for r in rows:
        for h, v in zip(header, r):
            cols[h].append(v)
    out = {"k": np.array(cols["k"], dtype=int)}
    for h in header[1:]:
        out[h] = np.array(cols[h], dtype=float)
    return out


def write_truth_csv(path, k, t, xy, psi):
    rows = (
        [str(int(ki)), _fmt(ti), _fmt(p[0]), _fmt(p[1]), _fmt(h)]
        for ki, ti, p, h in zip(k, t, np.asarray(xy).reshape(-1, 2), psi)
    )
    _write_rows(path, TRUTH_HEADER, rows)


def read_truth_csv(path) -> dict:
    header, rows = _read_csv(path)
    if header != TRUTH_HEADER:
        raise ValueError(f"{path}: expected header {','.join(TRUTH_HEADER)}")
    data = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, 5)
    return {
        "k": data[:, 0].astype(int),
        "t": data[:, 1],
        "x_true": data[:, 2],
        "y_true": data[:, 3],
        "psi_true": data[:, 4],
    }


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
