"""End-to-end runs: PDR, relocalization per step, gating and fusion.

Three modes are compared:

* ``pdr``    dead reckoning only,
* ``dw``     weighted-average baseline: each accepted fix is blended with
             the PDR prediction using w = min(1, M / M_ref), no graph,
* ``robust`` the Tukey-robust pose graph solved incrementally.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import FeatureMapDB, ImuLog, Position2, RelocObservation
from .fusion import FusionConfig, FusionGraph
from .pdr import PdrConfig, run_pdr
from .relocalizer import RelocConfig, relocalize
from .simulator import inject_outliers

log = logging.getLogger(__name__)

MODES = ("pdr", "dw", "robust")
MATCH_TOL = 0.25  # s, step peak vs query timestamp


@dataclass(frozen=True)
class RunConfig:
    mode: str = "robust"
    pdr: PdrConfig = field(default_factory=PdrConfig)
    reloc: RelocConfig = field(default_factory=RelocConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    outlier_rate: float = 0.0
    outlier_offset: float = 50.0
    outlier_min_offset: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(eq=False)
class RunResult:
    mode: str
    steps: list
    k: np.ndarray
    t: np.ndarray
    trajectory: np.ndarray  # (K, 2), one row per detected step
    observations: list = field(default_factory=list)
    solver_log: list = field(default_factory=list)
    pdr_trajectory: np.ndarray | None = None


def match_steps_to_queries(step_times, query_times, tol: float = MATCH_TOL) -> dict:
    """One-to-one nearest-time assignment ``step index -> query index``."""
    step_times = np.asarray(step_times, dtype=float)
    query_times = np.asarray(query_times, dtype=float)
    if len(step_times) == 0 or len(query_times) == 0:
        return {}
    order = np.argsort(query_times, kind="stable")
    qt = query_times[order]
    pos = np.clip(np.searchsorted(qt, step_times), 1, len(qt) - 1) if len(qt) > 1 else np.zeros(len(step_times), int)
    cand = {}
    for i, t in enumerate(step_times):
        j = int(pos[i])
        best = min((j - 1, j) if len(qt) > 1 else (0,), key=lambda c: (abs(qt[c] - t), c))
        d = abs(qt[best] - t)
        if d <= tol:
            q = int(order[best])
            if q not in cand or d < cand[q][1]:
                cand[q] = (i, d)
    return {i: q for q, (i, _) in sorted(cand.items(), key=lambda kv: kv[1][0])}


def relocalize_steps(steps, queries, db: FeatureMapDB, cfg: RelocConfig, rng, gate: int) -> list:
    """Relocalization observation for every step that triggered a query."""
    pairs = match_steps_to_queries([s.t_peak for s in steps], [t for _, t, _ in queries])
    out = []
    for i in sorted(pairs):
        _, _, q = queries[pairs[i]]
        res = relocalize(q, db, cfg, rng)
        pos = res.position if res.pose is not None else Position2(math.nan, math.nan)
        M = res.inliers if res.pose is not None else 0
        out.append(RelocObservation.gated(steps[i].index, pos, M, gate, "pipeline"))
    return out


def pdr_increments(steps) -> np.ndarray:
    return np.array([[s.length * math.cos(s.heading), s.length * math.sin(s.heading)] for s in steps]).reshape(-1, 2)


def fold(start, increments) -> np.ndarray:
    inc = np.asarray(increments, dtype=float).reshape(-1, 2)
    out = np.empty_like(inc)
    x, y = float(start[0]), float(start[1])
    for i, (dx, dy) in enumerate(inc):
        x, y = x + dx, y + dy
        out[i] = (x, y)
    return out


def dw_fuse(steps, observations, start, m_ref: float = 100.0) -> np.ndarray:
    """Weighted-average baseline: est = w z + (1 - w)(prev + PDR increment)."""
    by_k = {}
    for o in observations:
        if o.accepted:
            by_k[o.k] = o
    inc = pdr_increments(steps)
    out = np.empty_like(inc)
    x, y = float(start[0]), float(start[1])
    for i, s in enumerate(steps):
        x, y = x + inc[i, 0], y + inc[i, 1]
        o = by_k.get(s.index)
        if o is not None:
            w = min(1.0, o.inliers / m_ref)
            x = w * o.position.x + (1.0 - w) * x
            y = w * o.position.y + (1.0 - w) * y
        out[i] = (x, y)
    return out


def robust_fuse(steps, observations, cfg: FusionConfig, start=None):
    """Feed steps and gated fixes in step order through the incremental graph.

    With a known ``start`` the prior sits on node 0; otherwise the first
    accepted fix becomes the prior. Returns (trajectory, graph).
    """
    graph = FusionGraph(cfg, start=(0.0, 0.0) if start is None else start)
    if start is not None:
        graph.add_prior(0, start, shift=False)
    by_k = {}
    for o in observations:
        by_k.setdefault(o.k, []).append(o)
    for s in steps:
        graph.add_step(s)
        for o in by_k.get(s.index, ()):
            if graph.prior is None:
                if o.inliers > cfg.gate:
                    graph.add_prior(s.index, o.position)
                    graph.optimize_incremental()
                continue
            if graph.gate_and_add_reloc(o):
                graph.optimize_incremental()
    return graph.current_trajectory(), graph


def run(
    imu: ImuLog,
    db: FeatureMapDB | None,
    queries,
    cfg: RunConfig,
    seed_rngs: dict,
    start=None,
    observations=None,
) -> RunResult:
    """Run one mode. ``seed_rngs`` supplies the ``reloc`` and ``outliers`` streams.

    ``observations`` may be given to skip relocalization (e.g. loaded from a file).
    """
    pdr_start = Position2(0.0, 0.0) if start is None else Position2(*start)
    steps, pdr_xy = run_pdr(imu, cfg.pdr, start=pdr_start)
    k = np.array([s.index for s in steps], dtype=int)
    t = np.array([s.t_peak for s in steps], dtype=float)
    log.info("pdr: %d steps", len(steps))
    if cfg.mode == "pdr":
        return RunResult("pdr", steps, k, t, pdr_xy, [], [], pdr_xy)

    gate = cfg.fusion.gate
    if observations is None:
        if db is None:
            raise ValueError("a map is required to relocalize")
        observations = relocalize_steps(steps, queries, db, cfg.reloc, seed_rngs["reloc"], gate)
    accepted = sum(o.accepted for o in observations)
    log.info("reloc: %d observations, %d above gate", len(observations), accepted)
    if cfg.outlier_rate > 0:
        observations = inject_outliers(
            observations, cfg.outlier_rate, cfg.outlier_offset, seed_rngs["outliers"], cfg.outlier_min_offset
        )

    if cfg.mode == "dw":
        if start is None:
            first = next((o for o in observations if o.accepted), None)
            base = pdr_start if first is None else first.position
            # shift the dead-reckoning origin so the first fix is met exactly
            if first is not None:
                idx = int(np.flatnonzero(k == first.k)[0])
                off = np.asarray(first.position) - pdr_xy[idx]
                base = (pdr_start[0] + off[0], pdr_start[1] + off[1])
        else:
            base = pdr_start
        traj = dw_fuse(steps, observations, base, cfg.fusion.m_ref)
        return RunResult("dw", steps, k, t, traj, observations, [], pdr_xy)

    traj, graph = robust_fuse(steps, observations, cfg.fusion, start)
    return RunResult("robust", steps, k, t, traj, observations, graph.solver_log, pdr_xy)


def truth_for_steps(step_times, truth_t, truth_xy, tol: float = MATCH_TOL) -> np.ndarray:
    """True position for each detected step: the true step nearest in time.

    Rows with no true step within ``tol`` fall back to the nearest one.
    """
    step_times = np.asarray(step_times, dtype=float)
    truth_t = np.asarray(truth_t, dtype=float)
    truth_xy = np.asarray(truth_xy, dtype=float).reshape(-1, 2)
    if len(truth_t) == 0:
        raise ValueError("empty ground truth")
    j = np.searchsorted(truth_t, step_times)
    j = np.clip(j, 1, len(truth_t) - 1) if len(truth_t) > 1 else np.zeros(len(step_times), dtype=int)
    if len(truth_t) > 1:
        left = np.abs(step_times - truth_t[j - 1]) <= np.abs(truth_t[j] - step_times)
        j = np.where(left, j - 1, j)
    return truth_xy[j]
