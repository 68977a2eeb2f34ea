"""Command line entry point: simulate, relocalize, run, evaluate, plot.

Exit codes: 0 on success, 2 for bad configuration or arguments, 1 for
any other failure (missing files, malformed inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from .core import RelocObservation
from .fusion import FusionConfig
from .metrics import evaluate, plot_series
from .pdr import PdrConfig, run_pdr
from .pipeline import MODES, RunConfig, run, truth_for_steps
from .relocalizer import RelocConfig, relocalize
from .simulator import ConfigError, ScenarioConfig, load_scenario, simulate, streams

log = logging.getLogger("relocpdr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

SIM_FILES = {"imu": "imu.csv", "map": "map.json", "queries": "queries.jsonl", "truth": "truth.csv"}


@dataclass(frozen=True)
class RunManifest:
    scenario: str
    seeds: tuple
    mode: str
    out: str
    data: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


def _setup_logging():
    level = os.environ.get("RELOC_PDR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# -- simulate --------------------------------------------------------------------


def write_simulation(sim, out: Path):
    io.ensure_dir(out)
    tr = sim.truth
    io.write_imu_csv(out / SIM_FILES["imu"], sim.imu)
    io.write_map_json(out / SIM_FILES["map"], sim.db)
    io.write_queries(out / SIM_FILES["queries"], sim.queries)
    io.write_truth_csv(out / SIM_FILES["truth"], range(tr.num_steps + 1), tr.times, tr.positions, tr.headings)


def cmd_simulate(args) -> int:
    cfg = load_scenario(args.config)
    seed = cfg.seed if args.seed is None else args.seed[0]
    sim = simulate(cfg, seed)
    write_simulation(sim, Path(args.out))
    log.info("simulated %d steps, %d frames -> %s", sim.truth.num_steps, len(sim.db), args.out)
    return EXIT_OK


# -- reloc -----------------------------------------------------------------------


def cmd_reloc(args) -> int:
    db = io.read_map_json(_require(Path(args.map), "map"))
    queries = io.read_queries(_require(Path(args.queries), "queries"), db.intrinsics)
    seed = 0 if args.seed is None else args.seed[0]
    rng = streams(seed)["reloc"]
    cfg = RelocConfig()
    obs = []
    for k, _, q in queries:
        res = relocalize(q, db, cfg, rng)
        if res.pose is None:
            obs.append(RelocObservation.gated(k, (math.nan, math.nan), 0, args.gate))
        else:
            obs.append(RelocObservation.gated(k, res.position, res.inliers, args.gate))
    io.ensure_dir(Path(args.out).parent)
    io.write_observations(args.out, obs)
    return EXIT_OK


# -- run -------------------------------------------------------------------------


def _load_inputs(cfg: ScenarioConfig, seed: int, data: str | None):
    """IMU, map, queries and truth either from a simulate directory or simulated now."""
    if data is None:
        sim = simulate(cfg, seed)
        tr = sim.truth
        truth = {"t": tr.t_peak, "xy": tr.positions[1:], "start": tr.positions[0], "psi0": float(tr.headings[0])}
        return sim.imu, sim.db, sim.queries, truth
    d = Path(data)
    imu = io.read_imu_csv(_require(d / SIM_FILES["imu"], "IMU log"))
    db = io.read_map_json(_require(d / SIM_FILES["map"], "map"))
    queries = io.read_queries(_require(d / SIM_FILES["queries"], "queries"), db.intrinsics)
    truth = None
    if (d / SIM_FILES["truth"]).exists():
        tt = io.read_truth_csv(d / SIM_FILES["truth"])
        xy = np.column_stack([tt["x_true"], tt["y_true"]])
        truth = {"t": tt["t"][1:], "xy": xy[1:], "start": xy[0], "psi0": float(tt["psi_true"][0])}
    return imu, db, queries, truth


def run_one(manifest: RunManifest, cfg: ScenarioConfig, seed: int, out: Path, observations=None) -> dict:
    imu, db, queries, truth = _load_inputs(cfg, seed, manifest.data)
    start = None if truth is None else tuple(float(v) for v in truth["start"])
    psi0 = 0.0 if truth is None else truth["psi0"]
    rc = RunConfig(
        mode=manifest.mode,
        pdr=PdrConfig(K=cfg.K, psi0=psi0),
        reloc=RelocConfig(),
        fusion=FusionConfig(),
        outlier_rate=cfg.outlier_rate,
        outlier_offset=cfg.outlier_offset,
        outlier_min_offset=cfg.min_offset,
    )
    res = run(imu, db, queries, rc, streams(seed), start=start, observations=observations)

    io.ensure_dir(out)
    xy_true = None if truth is None else truth_for_steps(res.t, truth["t"], truth["xy"])
    io.write_trajectory_csv(out / "trajectory.csv", res.k, res.t, res.trajectory, xy_true)
    io.write_steps(out / "steps.jsonl", res.steps)
    io.write_observations(out / "observations.jsonl", res.observations)
    io.write_solver_log(out / "solver_log.jsonl", res.solver_log)
    summary = {
        "mode": res.mode,
        "seed": seed,
        "scenario": cfg.name,
        "steps": len(res.steps),
        "observations": len(res.observations),
        "accepted": sum(o.accepted for o in res.observations),
    }
    if xy_true is not None:
        summary.update(evaluate(res.trajectory, xy_true).as_dict())
    _dump_json(out / "metrics.json", summary)
    return summary


def cmd_run(args) -> int:
    cfg = load_scenario(args.config)
    seeds = tuple(args.seed) if args.seed else (cfg.seed,)
    manifest = RunManifest(str(args.config), seeds, args.mode, str(args.out), args.data)
    observations = None
    if args.observations:
        observations = io.read_observations(_require(Path(args.observations), "observations"), source="file")
    out = io.ensure_dir(args.out)
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        summary = run_one(manifest, cfg, seed, target, observations)
        log.info("seed %d: %s", seed, summary)
        print(json.dumps(summary, sort_keys=True))
    _dump_json(out / "manifest.json", {**asdict(manifest), "seeds": list(seeds)})
    return EXIT_OK


# -- eval / plot -----------------------------------------------------------------


def _trajectory_with_truth(traj_path: Path, truth_path: Path | None):
    traj = io.read_trajectory_csv(_require(traj_path, "trajectory"))
    est = np.column_stack([traj["x"], traj["y"]])
    if truth_path is not None:
        tt = io.read_truth_csv(_require(truth_path, "ground truth"))
        keep = tt["k"] >= 1
        k_truth = tt["k"][keep]
        if len(k_truth) != len(traj["k"]) or np.any(k_truth != traj["k"]):
            raise ValueError("step indices of trajectory and ground truth do not match")
        return traj, est, np.column_stack([tt["x_true"][keep], tt["y_true"][keep]])
    if "x_true" not in traj:
        raise ValueError(f"{traj_path} has no x_true/y_true columns; pass --truth")
    return traj, est, np.column_stack([traj["x_true"], traj["y_true"]])


def cmd_eval(args) -> int:
    _, est, truth = _trajectory_with_truth(Path(args.trajectory), Path(args.truth) if args.truth else None)
    report = evaluate(est, truth).as_dict()
    if args.out:
        _dump_json(args.out, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    run_dir = Path(args.run)
    traj, est, truth = _trajectory_with_truth(run_dir / "trajectory.csv", None)
    obs_path = run_dir / "observations.jsonl"
    obs = io.read_observations(obs_path) if obs_path.exists() else []
    series = plot_series(traj["k"], est, truth, obs)
    _dump_json(Path(args.out) if args.out else run_dir / "plot_data.json", series)
    return EXIT_OK


def cmd_pdr(args) -> int:
    imu = io.read_imu_csv(_require(Path(args.imu), "IMU log"))
    steps, xy = run_pdr(imu, PdrConfig(psi0=args.psi0))
    out = io.ensure_dir(args.out)
    io.write_steps(out / "steps.jsonl", steps)
    io.write_trajectory_csv(out / "trajectory.csv", [s.index for s in steps], [s.t_peak for s in steps], xy)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relocpdr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate IMU log, map, queries and ground truth")
    s.add_argument("--config", required=True, help="scenario TOML file or bundled scenario name")
    s.add_argument("--seed", type=int, nargs=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reloc", help="relocalize query features against a map")
    s.add_argument("--map", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, nargs=1)
    s.add_argument("--gate", type=int, default=25)
    s.set_defaults(func=cmd_reloc)

    s = sub.add_parser("run", help="PDR, relocalization and fusion end to end")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=MODES, default="robust")
    s.add_argument("--seed", type=int, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="directory written by 'simulate' (default: simulate in memory)")
    s.add_argument("--observations", help="JSON-lines observations to use instead of relocalizing")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="error statistics of a trajectory")
    s.add_argument("--trajectory", required=True)
    s.add_argument("--truth")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="plot-ready series for a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("pdr", help="dead reckoning only, from an IMU CSV")
    s.add_argument("--imu", required=True)
    s.add_argument("--psi0", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pdr)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
