"""Deterministic synthetic walks, IMU logs, feature maps, queries and outliers.

Every generator is a pure function of its config and an explicit
``numpy.random.Generator``; ``streams(seed)`` hands out the independent
per-purpose generators used by the scenario runner.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import (
    GLOBAL_DIM,
    LOCAL_DIM,
    FeatureMapDB,
    FrameRecord,
    ImuLog,
    Intrinsics,
    Pose6,
    RelocObservation,
    camera_rotation_for_heading,
    unit,
    wrap_angle,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

GRAVITY = 9.80665
MAP_DESC_NOISE = 0.02
PIXEL_NOISE = 0.5
MIN_DEPTH = 0.5
MAX_DEPTH = 15.0
GLOBAL_SMOOTHING = 1.1


class ConfigError(ValueError):
    """Invalid scenario file; ``lineno`` points at the offending line when known."""

    def __init__(self, message, lineno=None, path=None):
        where = f"{path or '<config>'}:{lineno}: " if lineno else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.lineno = lineno


@dataclass(frozen=True)
class ScenarioConfig:
    waypoints: tuple
    name: str = "scenario"
    cadence: float = 1.8
    step_mean: float = 0.7
    step_sigma: float = 0.03
    K: float = 0.48
    fs: float = 100.0
    stand_time: float = 1.0
    accel_sigma: float = 0.05
    gyro_sigma: float = 0.002
    gyro_bias: float = 0.0008
    frames_per_m: float = 1.0
    landmarks_per_frame: int = 12
    camera_height: float = 1.4
    dropout: float = 0.0
    desc_noise: float = 0.0
    outlier_rate: float = 0.0
    outlier_offset: float = 50.0
    outlier_min_offset: float = -1.0
    seed: int = 0

    def __post_init__(self):
        wp = tuple(tuple(float(c) for c in p) for p in self.waypoints)
        object.__setattr__(self, "waypoints", wp)
        if len(wp) < 2 or any(len(p) != 2 for p in wp):
            raise ValueError("waypoints must be at least two (x, y) pairs")
        for name in ("dropout", "outlier_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("step_sigma", "accel_sigma", "gyro_sigma", "desc_noise", "outlier_offset"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.cadence <= 0 or self.step_mean <= 0 or self.fs <= 0 or self.K <= 0:
            raise ValueError("cadence, step_mean, fs and K must be positive")

    @property
    def min_offset(self) -> float:
        return 0.5 * self.outlier_offset if self.outlier_min_offset < 0 else self.outlier_min_offset

    def quiet(self) -> "ScenarioConfig":
        """Same scenario with all sensor noise, degradation and outliers removed."""
        return replace(
            self, step_sigma=0.0, accel_sigma=0.0, gyro_sigma=0.0, gyro_bias=0.0,
            dropout=0.0, desc_noise=0.0, outlier_rate=0.0,
        )


def _key_line(text: str, key: str):
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return i
    return None


def parse_scenario(text: str, path=None) -> ScenarioConfig:
    """Parse a flat TOML scenario; errors carry the offending line number."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        # errors "at end of document" point past the last line
        lineno = int(m.group(1)) if m else max(1, len(text.splitlines()))
        raise ConfigError(str(exc), lineno, path) from None
    if "waypoints" not in doc:
        raise ConfigError("missing required key 'waypoints'", None, path)
    known = {f.name for f in fields(ScenarioConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'", _key_line(text, key), path)
    try:
        return ScenarioConfig(**doc)
    except (TypeError, ValueError) as exc:
        bad = next((k for k in doc if k in str(exc)), "waypoints")
        raise ConfigError(str(exc), _key_line(text, bad), path) from None


def bundled_scenarios() -> dict:
    root = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.toml"))}


def load_scenario(path_or_name) -> ScenarioConfig:
    p = Path(path_or_name)
    if not p.exists():
        bundled = bundled_scenarios()
        if str(path_or_name) in bundled:
            p = bundled[str(path_or_name)]
        elif p.stem in bundled and not p.parent.parts:
            p = bundled[p.stem]
        else:
            raise FileNotFoundError(f"scenario {path_or_name} not found")
    return parse_scenario(p.read_text(), path=str(p))


def streams(seed: int) -> dict:
    """Independent generators for each simulation stage."""
    names = ("walk", "imu", "map", "query", "outliers", "reloc")
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# -- walk --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-step truth. Index 0 of ``positions``/``headings`` is the start."""

    positions: np.ndarray
    headings: np.ndarray
    lengths: np.ndarray
    t_start: np.ndarray
    t_peak: np.ndarray
    step_samples: int
    n_samples: int
    fs: float
    start_index: np.ndarray = field(default=None)

    @property
    def num_steps(self) -> int:
        return len(self.lengths)

    @property
    def times(self) -> np.ndarray:
        """Timestamp per truth row: start time for row 0, then the step peak times."""
        return np.concatenate([[self.t_start[0] if self.num_steps else 0.0], self.t_peak])

    def __eq__(self, other):
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("positions", "headings", "lengths", "t_start", "t_peak")
        ) and (self.step_samples, self.n_samples, self.fs) == (other.step_samples, other.n_samples, other.fs)


def _polyline(waypoints):
    wp = np.asarray(waypoints, dtype=float)
    seg = np.diff(wp, axis=0)
    seglen = np.linalg.norm(seg, axis=1)
    if np.any(seglen <= 0) or seglen.sum() <= 0:
        raise ValueError("degenerate polyline: repeated consecutive waypoints")
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    return wp, seg, seglen, cum


def point_on_polyline(waypoints, s):
    """Position and segment heading at arc length(s) ``s``."""
    wp, seg, seglen, cum = _polyline(waypoints)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seglen[idx]
    pts = wp[idx] + frac[..., None] * seg[idx]
    heading = np.arctan2(seg[idx, 1], seg[idx, 0])
    return pts, heading


def path_length(waypoints) -> float:
    return float(_polyline(waypoints)[3][-1])


def step_samples(cfg: ScenarioConfig) -> int:
    """Samples per step, a multiple of 4 so peak and valley fall on samples."""
    return max(8, 4 * int(round(cfg.fs / cfg.cadence / 4.0)))


def generate_walk(cfg: ScenarioConfig, rng: np.random.Generator) -> GroundTruth:
    """Walk each polyline segment in a whole number of steps.

    Step lengths are drawn around ``step_mean`` and rescaled to fill the
    segment, so no step straddles a corner; the turn itself is spread over
    the first step of the next segment by the synthesized yaw rate.
    """
    wp, seg, seglen, _ = _polyline(cfg.waypoints)
    pts = [wp[0]]
    for a, b, d, length in zip(wp[:-1], wp[1:], seg, seglen):
        n = max(1, int(round(length / cfg.step_mean)))
        draws = cfg.step_mean + cfg.step_sigma * rng.standard_normal(n)
        draws = np.clip(draws, 0.5 * cfg.step_mean, 1.5 * cfg.step_mean)
        frac = np.cumsum(draws) / draws.sum()
        frac[-1] = 1.0
        pts.extend(a + frac[:, None] * d)
        pts[-1] = b
    positions = np.array(pts)
    n = len(positions) - 1
    inc = np.diff(positions, axis=0)
    lengths = np.linalg.norm(inc, axis=1)
    headings = np.arctan2(inc[:, 1], inc[:, 0])
    headings = np.concatenate([[headings[0]], headings])

    ns = step_samples(cfg)
    stand = int(round(cfg.stand_time * cfg.fs))
    start_index = stand + ns * np.arange(n)
    t_start = start_index / cfg.fs
    t_peak = (start_index + ns // 4) / cfg.fs
    return GroundTruth(
        positions=positions,
        headings=headings,
        lengths=lengths,
        t_start=t_start,
        t_peak=t_peak,
        step_samples=ns,
        n_samples=2 * stand + ns * n + 1,
        fs=cfg.fs,
        start_index=start_index,
    )


def gait_amplitude(length, K: float):
    """Half peak-to-peak vertical acceleration that maps to ``length`` under K * dA^(1/4)."""
    return 0.5 * (np.asarray(length, dtype=float) / K) ** 4


def synthesize_imu(truth: GroundTruth, cfg: ScenarioConfig, rng: np.random.Generator) -> ImuLog:
    """100 Hz specific force and angular rate of a level, handheld phone.

    Each step carries one full sine cycle of vertical acceleration (peak at
    a quarter, valley at three quarters of the step). Heading changes are
    delivered as a Hann-shaped yaw-rate bump spanning the previous peak to
    this step's peak.
    """
    n = truth.n_samples
    ns = truth.step_samples
    dt = 1.0 / truth.fs
    t = np.arange(n) * dt
    a_v = np.zeros(n)
    wz = np.zeros(n)
    amp = gait_amplitude(truth.lengths, cfg.K)
    phase = np.sin(2.0 * np.pi * np.arange(ns) / ns)
    hann = 1.0 - np.cos(2.0 * np.pi * np.arange(ns + 1) / ns)
    peak_idx = truth.start_index + ns // 4
    for k in range(truth.num_steps):
        s0 = truth.start_index[k]
        a_v[s0 : s0 + ns] = amp[k] * phase
        if k > 0:
            dpsi = wrap_angle(truth.headings[k + 1] - truth.headings[k])
            if dpsi != 0.0:
                p0 = peak_idx[k - 1]
                wz[p0 : p0 + ns + 1] += dpsi / (ns * dt) * hann
    accel = np.zeros((n, 3))
    accel[:, 2] = GRAVITY + a_v
    gyro = np.zeros((n, 3))
    gyro[:, 2] = wz
    if cfg.accel_sigma > 0:
        accel += cfg.accel_sigma * rng.standard_normal((n, 3))
    if cfg.gyro_sigma > 0:
        gyro += cfg.gyro_sigma * rng.standard_normal((n, 3))
    gyro[:, 2] += cfg.gyro_bias
    return ImuLog(t, accel, gyro)


# -- map and queries -------------------------------------------------------


def camera_pose(position, heading: float, height: float) -> Pose6:
    return Pose6(camera_rotation_for_heading(heading), np.array([position[0], position[1], height]))


def _visible(pose: Pose6, points: np.ndarray, intr: Intrinsics):
    R_cw, t_cw = pose.world_to_camera()
    Xc = points @ R_cw.T + t_cw
    z = Xc[:, 2]
    ok = (z > MIN_DEPTH) & (z < MAX_DEPTH)
    px = np.full((len(points), 2), np.nan)
    px[ok] = intr.project(Xc[ok])
    ok[ok] = intr.in_image(px[ok])
    return ok, px


def smooth_descriptors(noise: np.ndarray, width: float = GLOBAL_SMOOTHING) -> np.ndarray:
    """Unit descriptors correlated along the frame sequence.

    Each row is a Gaussian-weighted sum (std ``width`` frames) of iid rows,
    so neighbouring frames look alike and distant ones are near-orthogonal.
    """
    n = len(noise)
    if n == 0:
        return noise
    i = np.arange(n)
    W = np.exp(-0.5 * ((i[:, None] - i[None, :]) / width) ** 2)
    W[W < 1e-6] = 0.0
    return unit(W @ noise)


def generate_feature_map(cfg: ScenarioConfig, rng: np.random.Generator, intrinsics=None) -> FeatureMapDB:
    """Map frames spaced along the path, each seeding landmarks in its view."""
    intr = intrinsics or Intrinsics()
    total = path_length(cfg.waypoints)
    n_frames = max(1, int(round(total * cfg.frames_per_m)))
    s = (np.arange(n_frames) + 0.5) * total / n_frames
    pts, heads = point_on_polyline(cfg.waypoints, s)
    poses = [camera_pose(p, h, cfg.camera_height) for p, h in zip(pts, heads)]

    half_w = 0.9 * (intr.width / 2) / intr.fx
    landmark_xyz = []
    for pose, h in zip(poses, heads):
        m = cfg.landmarks_per_frame
        depth = rng.uniform(3.0, 12.0, m)
        lateral = rng.uniform(-half_w, half_w, m) * depth
        height = rng.uniform(0.2, 3.0, m)
        fwd = np.array([math.cos(h), math.sin(h)])
        left = np.array([-math.sin(h), math.cos(h)])
        xy = pose.translation[:2] + depth[:, None] * fwd + lateral[:, None] * left
        landmark_xyz.append(np.column_stack([xy, height]))
    landmark_xyz = np.vstack(landmark_xyz) if landmark_xyz else np.zeros((0, 3))
    landmark_desc = unit(rng.standard_normal((len(landmark_xyz), LOCAL_DIM)))
    global_desc = smooth_descriptors(rng.standard_normal((n_frames, GLOBAL_DIM)))

    frames = []
    used = set()
    for i, pose in enumerate(poses):
        ok, px = _visible(pose, landmark_xyz, intr)
        ids = np.flatnonzero(ok)
        desc = unit(landmark_desc[ids] + MAP_DESC_NOISE * rng.standard_normal((len(ids), LOCAL_DIM)))
        frames.append(FrameRecord(i, pose, global_desc[i], px[ids], desc, ids))
        used.update(ids.tolist())
    landmarks = {int(j): landmark_xyz[j] for j in sorted(used)}
    return FeatureMapDB(frames, landmarks, intr)


@dataclass(frozen=True)
class Degradation:
    dropout: float = 0.0
    desc_noise: float = 0.0


def landmark_appearance(db: FeatureMapDB) -> dict:
    """Mean observed descriptor per landmark, renormalized."""
    cache = getattr(db, "_appearance", None)
    if cache is not None:
        return cache
    acc = {}
    for f in db.frames:
        for j, d in zip(f.landmark_ids.tolist(), f.descriptors):
            if j >= 0:
                acc.setdefault(j, []).append(d)
    cache = {j: unit(np.mean(v, axis=0)) for j, v in acc.items()}
    db._appearance = cache
    return cache


def _landmark_arrays(db: FeatureMapDB):
    cache = getattr(db, "_landmark_arrays", None)
    if cache is None:
        app = landmark_appearance(db)
        ids = np.array(sorted(app), dtype=np.int64)
        xyz = np.array([db.landmarks[j] for j in ids.tolist()]).reshape(-1, 3)
        desc = np.array([app[j] for j in ids.tolist()]).reshape(-1, LOCAL_DIM)
        cache = (ids, xyz, desc)
        db._landmark_arrays = cache
    return cache


def render_query(pose: Pose6, db: FeatureMapDB, degradation: Degradation, rng: np.random.Generator):
    """Synthesize query features observed from ``pose`` against ``db``.

    Returns ``(query, landmark_ids)``; the ids are ground truth for tests.
    """
    from .relocalizer import QueryFeatures

    intr = db.intrinsics
    ids, xyz, desc = _landmark_arrays(db)
    if len(db) == 0 or len(ids) == 0:
        return QueryFeatures(unit(rng.standard_normal(GLOBAL_DIM)), np.zeros((0, 2)), np.zeros((0, LOCAL_DIM)), intr), ids[:0]
    ok, px = _visible(pose, xyz, intr)
    sel = np.flatnonzero(ok)
    keep = rng.random(len(sel)) >= degradation.dropout
    sel = sel[keep]
    px = px[sel] + PIXEL_NOISE * rng.standard_normal((len(sel), 2))
    inside = intr.in_image(px)
    sel, px = sel[inside], px[inside]
    sigma = math.hypot(MAP_DESC_NOISE, degradation.desc_noise)
    qdesc = unit(desc[sel] + sigma * rng.standard_normal((len(sel), LOCAL_DIM))) if len(sel) else np.zeros((0, LOCAL_DIM))

    centers = np.array([f.pose.translation for f in db.frames])
    nearest = int(np.argmin(np.linalg.norm(centers - pose.translation, axis=1)))
    gsigma = math.hypot(MAP_DESC_NOISE, degradation.desc_noise)
    gd = unit(db.frames[nearest].global_desc + gsigma * rng.standard_normal(GLOBAL_DIM))
    return QueryFeatures(gd, px, qdesc, intr), ids[sel]


def render_queries(truth: GroundTruth, db: FeatureMapDB, cfg: ScenarioConfig, rng: np.random.Generator):
    """One query per true step, taken at the step's peak time and end position."""
    deg = Degradation(cfg.dropout, cfg.desc_noise)
    out = []
    for k in range(1, truth.num_steps + 1):
        pose = camera_pose(truth.positions[k], truth.headings[k], cfg.camera_height)
        q, _ = render_query(pose, db, deg, rng)
        out.append((k, float(truth.t_peak[k - 1]), q))
    return out


def inject_outliers(observations, rate: float, magnitude: float, rng: np.random.Generator, min_magnitude=None):
    """Displace each accepted fix with probability ``rate``; inlier counts are kept.

    Offsets have a uniform random direction and a norm uniform in
    ``[min_magnitude, magnitude]`` (default lower bound: half the magnitude).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    lo = 0.5 * magnitude if min_magnitude is None else float(min_magnitude)
    out = []
    for obs in observations:
        if obs.accepted and rng.random() < rate:
            r = rng.uniform(lo, magnitude)
            a = rng.uniform(-math.pi, math.pi)
            pos = (obs.position.x + r * math.cos(a), obs.position.y + r * math.sin(a))
            obs = RelocObservation(obs.k, pos, obs.inliers, obs.accepted, obs.source)
        out.append(obs)
    return out


@dataclass(frozen=True, eq=False)
class SimulatedData:
    config: ScenarioConfig
    truth: GroundTruth
    imu: ImuLog
    db: FeatureMapDB
    queries: list


def simulate(cfg: ScenarioConfig, seed=None) -> SimulatedData:
    rngs = streams(cfg.seed if seed is None else seed)
    truth = generate_walk(cfg, rngs["walk"])
    imu = synthesize_imu(truth, cfg, rngs["imu"])
    db = generate_feature_map(cfg, rngs["map"])
    queries = render_queries(truth, db, cfg, rngs["query"])
    return SimulatedData(cfg, truth, imu, db, queries)
