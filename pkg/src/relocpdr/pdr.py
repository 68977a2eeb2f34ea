"""Pedestrian dead reckoning: step detection, step length, heading, position."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.ndimage import maximum_filter1d

from .core import ImuLog, Position2, StepEvent, wrap_angle

FILTER_ORDER = 4
MIN_FILTER_SAMPLES = 12


@dataclass(frozen=True)
class PdrConfig:
    """Thresholds and constants for the PDR chain.

    ``vertical`` selects how a_z is obtained for the step-length model:
    ``"gravity"`` projects onto the mean specific-force direction of the step
    window, ``"body_z"`` uses the raw body z axis.
    """

    delta_min: float = 0.8
    delta_max: float = 6.0
    delta_t: float = 0.3
    window: int = 31
    cutoff: float = 3.0
    K: float = 0.48
    g: float = 9.80665
    psi0: float = 0.0
    vertical: str = "gravity"

    def __post_init__(self):
        if not 0 < self.delta_min < self.delta_max:
            raise ValueError("need 0 < delta_min < delta_max")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.K <= 0:
            raise ValueError("K must be positive")
        if self.vertical not in ("gravity", "body_z"):
            raise ValueError("vertical must be 'gravity' or 'body_z'")


def lowpass_filter(samples, cutoff: float, fs: float) -> np.ndarray:
    """Zero-phase fourth-order Butterworth low-pass (forward-backward SOS)."""
    x = np.asarray(samples, dtype=float)
    if not 0 < cutoff < fs / 2:
        raise ValueError(f"cutoff {cutoff} Hz must lie in (0, fs/2 = {fs / 2} Hz)")
    if len(x) < MIN_FILTER_SAMPLES:
        raise ValueError(f"series of length {len(x)} is shorter than the {MIN_FILTER_SAMPLES}-sample warm-up")
    sos = signal.butter(FILTER_ORDER, cutoff, btype="low", fs=fs, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    return signal.sosfiltfilt(sos, x, padlen=padlen)


def step_peak_indices(filtered, cfg: PdrConfig, fs: float) -> np.ndarray:
    """Sample indices of accepted gait peaks in a filtered magnitude series."""
    d = np.asarray(filtered, dtype=float) - cfg.g
    if len(d) == 0:
        return np.zeros(0, dtype=int)
    wmax = maximum_filter1d(d, size=cfg.window, mode="nearest")
    rising = np.ones(len(d), dtype=bool)
    rising[1:] = d[1:] > d[:-1]
    cand = np.flatnonzero((d > cfg.delta_min) & (d < cfg.delta_max) & (d >= wmax) & rising)
    kept = []
    for i in cand:
        # spacing from the sample count, so exactly delta_t apart is rejected
        if not kept or (i - kept[-1]) / fs > cfg.delta_t:
            kept.append(i)
    return np.asarray(kept, dtype=int)


def detect_steps(filtered, cfg: PdrConfig, fs: float, t0: float = 0.0) -> np.ndarray:
    """Peak times (s) satisfying the band, spacing and window-maximum rules."""
    return t0 + step_peak_indices(filtered, cfg, fs) / fs


def estimate_step_length(az_max: float, az_min: float, K: float) -> float:
    if az_max < az_min:
        raise ValueError(f"az_max ({az_max}) < az_min ({az_min})")
    return K * (az_max - az_min) ** 0.25


# Quaternions are (w, x, y, z) tuples of floats, body-to-world.


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _qexp(rx, ry, rz):
    angle = math.sqrt(rx * rx + ry * ry + rz * rz)
    if angle < 1e-12:
        return (1.0, 0.5 * rx, 0.5 * ry, 0.5 * rz)
    s = math.sin(0.5 * angle) / angle
    return (math.cos(0.5 * angle), s * rx, s * ry, s * rz)


def yaw_of(q) -> float:
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def attitude_from_yaw(psi: float):
    return (math.cos(0.5 * psi), 0.0, 0.0, math.sin(0.5 * psi))


def integrate_attitude(gyro, t, attitude):
    """Propagate a quaternion with the midpoint rule over consecutive samples."""
    gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
    t = np.asarray(t, dtype=float).reshape(-1)
    if len(t) < 2:
        return attitude
    mid = 0.5 * (gyro[1:] + gyro[:-1]) * np.diff(t)[:, None]
    q = attitude
    for rx, ry, rz in mid.tolist():
        q = _qmul(q, _qexp(rx, ry, rz))
    return q


def update_heading(gyro, t, psi_prev: float, attitude_prev=None):
    """Integrate angular rate over one step interval and return (psi_k, attitude).

    ``attitude_prev`` defaults to a level attitude with yaw ``psi_prev``.
    """
    if attitude_prev is None:
        attitude_prev = attitude_from_yaw(psi_prev)
    if len(np.atleast_1d(t)) < 2:
        return psi_prev, attitude_prev
    att = integrate_attitude(gyro, t, attitude_prev)
    dpsi = wrap_angle(yaw_of(att) - yaw_of(attitude_prev))
    return wrap_angle(psi_prev + dpsi), att


def dead_reckon(p_prev, length: float, heading: float) -> Position2:
    return Position2(p_prev[0] + length * math.cos(heading), p_prev[1] + length * math.sin(heading))


def _vertical_series(accel, cfg: PdrConfig, lo: int, hi: int) -> np.ndarray:
    seg = accel[lo:hi]
    if cfg.vertical == "body_z":
        return seg[:, 2]
    gdir = seg.mean(axis=0)
    gdir = gdir / np.linalg.norm(gdir)
    return seg @ gdir


def run_pdr(log: ImuLog, cfg: PdrConfig = PdrConfig(), start=Position2(0.0, 0.0)):
    """Run the full PDR chain over an IMU log.

    Returns ``(steps, positions)`` where ``positions[k - 1]`` is the
    dead-reckoned position after step ``k``.
    """
    if len(log) == 0:
        return [], np.zeros((0, 2))
    if len(log) < MIN_FILTER_SAMPLES:
        raise ValueError(f"IMU log of {len(log)} samples is too short")
    fs = 1.0 / float(np.median(np.diff(log.t)))
    magnitude = np.linalg.norm(log.accel, axis=1)
    filtered = lowpass_filter(magnitude, cfg.cutoff, fs)
    peaks = step_peak_indices(filtered, cfg, fs)

    n = len(log)
    half = cfg.window // 2
    default_span = int(round(np.median(np.diff(peaks)))) if len(peaks) > 1 else int(round(fs))

    steps = []
    positions = np.zeros((len(peaks), 2))
    pos = Position2(float(start[0]), float(start[1]))
    psi = wrap_angle(cfg.psi0)
    att = attitude_from_yaw(psi)
    prev = 0
    for k, p in enumerate(peaks, start=1):
        nxt = peaks[k] if k < len(peaks) else min(n, p + default_span)
        lo, hi = max(0, p - half), max(nxt, p + 1)
        az = _vertical_series(log.accel, cfg, lo, hi)
        az_max = float(az[: min(p + half + 1, hi) - lo].max())
        az_min = float(az[p - lo :].min())
        az_min = min(az_min, az_max)
        length = estimate_step_length(az_max, az_min, cfg.K)

        psi, att = update_heading(log.gyro[prev : p + 1], log.t[prev : p + 1], psi, att)
        prev = p

        pos = dead_reckon(pos, length, psi)
        positions[k - 1] = pos
        steps.append(StepEvent(k, float(log.t[p]), length, psi, az_max, az_min))
    return steps, positions
