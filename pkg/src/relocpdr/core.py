"""Shared value types and frame conventions.

All positions are world-frame meters. The map frame is the world frame. A
``Pose6`` stores the camera-to-world transform, so its translation is the
camera center in world coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

GLOBAL_DIM = 64
LOCAL_DIM = 32
DEFAULT_GATE = 25

SOURCES = ("pipeline", "file", "simulator")


def wrap_angle(a):
    """Normalize an angle (scalar or array) to (-pi, pi]."""
    if np.ndim(a) == 0:
        w = math.pi - (math.pi - float(a)) % (2.0 * math.pi)
        return w + 2.0 * math.pi if w <= -math.pi else w
    a = np.asarray(a, dtype=float)
    w = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return w


class Position2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: tuple
    gyro: tuple


@dataclass(frozen=True, eq=False)
class ImuLog:
    """Columnar IMU log: ``t`` (N,), ``accel`` (N, 3) m/s^2, ``gyro`` (N, 3) rad/s."""

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        if not (len(t) == len(accel) == len(gyro)):
            raise ValueError("t, accel and gyro must have the same length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("IMU timestamps must strictly increase")
        if not (np.all(np.isfinite(accel)) and np.all(np.isfinite(gyro))):
            raise ValueError("IMU samples must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", gyro)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> ImuSample:
        return ImuSample(float(self.t[i]), tuple(self.accel[i]), tuple(self.gyro[i]))

    def __eq__(self, other):
        if not isinstance(other, ImuLog):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.accel, other.accel)
            and np.array_equal(self.gyro, other.gyro)
        )

    @classmethod
    def from_samples(cls, samples) -> "ImuLog":
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.t for s in samples]),
            np.array([s.accel for s in samples]),
            np.array([s.gyro for s in samples]),
        )


@dataclass(frozen=True)
class StepEvent:
    index: int
    t_peak: float
    length: float
    heading: float
    az_max: float
    az_min: float

    def __post_init__(self):
        if self.length < 0:
            raise ValueError("step length must be non-negative")
        if self.az_max < self.az_min:
            raise ValueError("az_max must be >= az_min")

    @property
    def increment(self) -> np.ndarray:
        """Horizontal displacement (S cos psi, S sin psi) of this step."""
        return np.array([self.length * math.cos(self.heading), self.length * math.sin(self.heading)])


@dataclass(frozen=True, eq=False)
class Pose6:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not special orthogonal")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, Pose6):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    @classmethod
    def identity(cls) -> "Pose6":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_world_to_camera(cls, R_cw, t_cw) -> "Pose6":
        R_cw = np.asarray(R_cw, dtype=float)
        return cls(R_cw.T, -R_cw.T @ np.asarray(t_cw, dtype=float))

    def world_to_camera(self):
        """Return (R_cw, t_cw) such that X_cam = R_cw @ X_world + t_cw."""
        R_cw = self.rotation.T
        return R_cw, -R_cw @ self.translation


def camera_rotation_for_heading(heading: float) -> np.ndarray:
    """Camera-to-world rotation for a level camera looking along ``heading``.

    Camera axes follow the pinhole convention: x right, y down, z forward.
    """
    c, s = math.cos(heading), math.sin(heading)
    forward = [c, s, 0.0]
    right = [s, -c, 0.0]
    down = [0.0, 0.0, -1.0]
    return np.array([right, down, forward]).T


def project_pose_to_xy(pose: Pose6) -> Position2:
    """Horizontal position of a camera pose in the world frame."""
    return Position2(float(pose.translation[0]), float(pose.translation[1]))


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 400.0
    cy: float = 300.0
    width: int = 800
    height: int = 600

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, X_cam: np.ndarray) -> np.ndarray:
        """Project camera-frame points (n, 3) to pixels (n, 2)."""
        X_cam = np.asarray(X_cam, dtype=float)
        z = X_cam[..., 2]
        return np.stack(
            [self.fx * X_cam[..., 0] / z + self.cx, self.fy * X_cam[..., 1] / z + self.cy], axis=-1
        )

    def in_image(self, px: np.ndarray) -> np.ndarray:
        return (px[..., 0] >= 0) & (px[..., 0] < self.width) & (px[..., 1] >= 0) & (px[..., 1] < self.height)


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """One mapped image: pose, global descriptor and keypoints.

    ``landmark_ids`` holds -1 for keypoints without a triangulated landmark.
    """

    id: int
    pose: Pose6
    global_desc: np.ndarray
    keypoints: np.ndarray
    descriptors: np.ndarray
    landmark_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "global_desc", np.asarray(self.global_desc, dtype=float).reshape(-1))
        object.__setattr__(self, "keypoints", np.asarray(self.keypoints, dtype=float).reshape(-1, 2))
        desc = np.asarray(self.descriptors, dtype=float)
        desc = desc.reshape(len(self.keypoints), -1) if len(self.keypoints) else desc.reshape(0, LOCAL_DIM)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "landmark_ids", np.asarray(self.landmark_ids, dtype=np.int64).reshape(-1))
        if len(self.landmark_ids) != len(self.keypoints):
            raise ValueError(f"frame {self.id}: one landmark id per keypoint required")

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.pose == other.pose
            and np.array_equal(self.global_desc, other.global_desc)
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.descriptors, other.descriptors)
            and np.array_equal(self.landmark_ids, other.landmark_ids)
        )


class FeatureMapDB:
    """Frames with known poses, 3D landmarks and covisibility links.

    Read-only after construction; derived lookup tables are built once.
    """

    def __init__(self, frames, landmarks, intrinsics: Intrinsics, covisibility=None, map_scale=1.0):
        self.frames = list(frames)
        self.landmarks = {int(k): np.asarray(v, dtype=float).reshape(3) for k, v in dict(landmarks).items()}
        self.intrinsics = intrinsics
        self.map_scale = 1.0 if map_scale is None else float(map_scale)
        self._by_id = {f.id: i for i, f in enumerate(self.frames)}
        if len(self._by_id) != len(self.frames):
            raise ValueError("duplicate frame ids")
        self.frame_landmarks = {
            f.id: frozenset(int(j) for j in f.landmark_ids if j >= 0) for f in self.frames
        }
        for f in self.frames:
            missing = self.frame_landmarks[f.id] - self.landmarks.keys()
            if missing:
                raise ValueError(f"frame {f.id} references unknown landmarks {sorted(missing)[:5]}")
        if covisibility is None:
            covisibility = self._covisibility_from_landmarks()
        self.covisibility = {int(k): frozenset(int(v) for v in vs) for k, vs in dict(covisibility).items()}
        for f in self.frames:
            self.covisibility.setdefault(f.id, frozenset())
        for a, vs in self.covisibility.items():
            for b in vs:
                if a not in self.covisibility.get(b, ()):
                    raise ValueError(f"covisibility not symmetric between {a} and {b}")
        if self.frames:
            self.frame_ids = np.array([f.id for f in self.frames], dtype=np.int64)
            self.global_matrix = np.stack([f.global_desc for f in self.frames])
        else:
            self.frame_ids = np.zeros(0, dtype=np.int64)
            self.global_matrix = np.zeros((0, GLOBAL_DIM))

    def __len__(self):
        return len(self.frames)

    def frame(self, frame_id: int) -> FrameRecord:
        return self.frames[self._by_id[frame_id]]

    def _covisibility_from_landmarks(self):
        observers = {}
        for f in self.frames:
            for j in self.frame_landmarks[f.id]:
                observers.setdefault(j, set()).add(f.id)
        covis = {f.id: set() for f in self.frames}
        for ids in observers.values():
            for a in ids:
                covis[a].update(ids)
        for a in covis:
            covis[a].discard(a)
        return covis

    def shared_landmarks(self, a: int, b: int) -> int:
        return len(self.frame_landmarks[a] & self.frame_landmarks[b])

    def __eq__(self, other):
        if not isinstance(other, FeatureMapDB):
            return NotImplemented
        return (
            self.frames == other.frames
            and self.landmarks.keys() == other.landmarks.keys()
            and all(np.array_equal(v, other.landmarks[k]) for k, v in self.landmarks.items())
            and self.covisibility == other.covisibility
            and self.intrinsics == other.intrinsics
            and self.map_scale == other.map_scale
        )


@dataclass(frozen=True)
class RelocObservation:
    k: int
    position: Position2
    inliers: int
    accepted: bool
    source: str = "pipeline"

    def __post_init__(self):
        if self.inliers < 0:
            raise ValueError("inlier count must be non-negative")
        if self.source not in SOURCES:
            raise ValueError(f"unknown observation source {self.source!r}")
        object.__setattr__(self, "position", Position2(float(self.position[0]), float(self.position[1])))
        if self.inliers > 0 and not all(math.isfinite(v) for v in self.position):
            raise ValueError("position must be finite when inliers > 0")

    @classmethod
    def gated(cls, k, position, inliers, gate=DEFAULT_GATE, source="pipeline") -> "RelocObservation":
        return cls(int(k), Position2(*position), int(inliers), int(inliers) > gate, source)


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    max_error: float
    loop_error: float
    errors: tuple = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "max_error": self.max_error, "loop_error": self.loop_error}


def unit(v: np.ndarray, axis=-1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def position_array(positions) -> np.ndarray:
    """Stack an iterable of Position2 (or pairs) into an (n, 2) array."""
    arr = np.asarray(list(positions), dtype=float)
    return arr.reshape(-1, 2)

