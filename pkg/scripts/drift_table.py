"""Error table of PDR-only, DW and robust fusion over scenarios and seeds.

    python scripts/drift_table.py --scenarios corridor overcast night --seeds 5
"""

import argparse
import json
import time

import numpy as np

from relocpdr.metrics import evaluate
from relocpdr.pdr import PdrConfig, run_pdr
from relocpdr.pipeline import RunConfig, relocalize_steps, run, truth_for_steps
from relocpdr.simulator import load_scenario, simulate, streams

MODES = ("pdr", "dw", "robust")


def run_seed(cfg, seed):
    sim = simulate(cfg, seed)
    tr = sim.truth
    start = tuple(tr.positions[0])
    base = RunConfig(
        pdr=PdrConfig(K=cfg.K, psi0=float(tr.headings[0])),
        outlier_rate=cfg.outlier_rate,
        outlier_offset=cfg.outlier_offset,
        outlier_min_offset=cfg.min_offset,
    )
    # relocalize once, every mode sees the same observations and outliers
    steps, _ = run_pdr(sim.imu, base.pdr, start=start)
    obs = relocalize_steps(steps, sim.queries, sim.db, base.reloc, streams(seed)["reloc"], base.fusion.gate)
    out = {}
    for mode in MODES:
        rc = RunConfig(mode, base.pdr, base.reloc, base.fusion, base.outlier_rate, base.outlier_offset, base.outlier_min_offset)
        res = run(sim.imu, None, [], rc, streams(seed), start=start, observations=obs)
        truth = truth_for_steps(res.t, tr.t_peak, tr.positions[1:])
        out[mode] = evaluate(res.trajectory, truth)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", nargs="+", default=["corridor", "overcast", "night"])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--json", help="also write the per-seed numbers here")
    args = ap.parse_args()

    rows = {}
    print(f"{'scenario':<10} {'mode':<7} {'rmse':>14} {'max':>14} {'loop':>14}")
    for name in args.scenarios:
        cfg = load_scenario(name)
        t0 = time.perf_counter()
        per_seed = [run_seed(cfg, s) for s in range(1, args.seeds + 1)]
        for mode in MODES:
            stats = {k: np.array([getattr(r[mode], k) for r in per_seed]) for k in ("rmse", "max_error", "loop_error")}
            rows[f"{name}/{mode}"] = {k: v.tolist() for k, v in stats.items()}
            cells = " ".join(f"{v.mean():7.3f}±{v.std():<6.3f}" for v in stats.values())
            print(f"{name:<10} {mode:<7} {cells}")
        print(f"{'':<10} ({time.perf_counter() - t0:.1f} s, {args.seeds} seeds)")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
