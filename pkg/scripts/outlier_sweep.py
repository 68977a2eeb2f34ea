"""Max error of DW and robust fusion as the fraction of corrupted fixes grows.

    python scripts/outlier_sweep.py --scenario night --rates 0 0.1 0.3 0.5 --seeds 3
"""

import argparse
from dataclasses import replace

import numpy as np

from relocpdr.metrics import evaluate
from relocpdr.pdr import PdrConfig, run_pdr
from relocpdr.pipeline import RunConfig, relocalize_steps, run, truth_for_steps
from relocpdr.simulator import load_scenario, simulate, streams


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="night")
    ap.add_argument("--rates", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--offset", type=float, help="maximum outlier offset in metres (default: scenario)")
    args = ap.parse_args()

    cfg = load_scenario(args.scenario)
    offset = cfg.outlier_offset if args.offset is None else args.offset
    cache = {}
    print(f"{'rate':>5} {'dw max':>10} {'robust max':>11} {'robust rmse':>12}")
    for rate in args.rates:
        dw, rob, rmse = [], [], []
        for seed in range(1, args.seeds + 1):
            if seed not in cache:
                sim = simulate(cfg, seed)
                pdr = PdrConfig(K=cfg.K, psi0=float(sim.truth.headings[0]))
                start = tuple(sim.truth.positions[0])
                steps, _ = run_pdr(sim.imu, pdr, start=start)
                obs = relocalize_steps(steps, sim.queries, sim.db, RunConfig().reloc, streams(seed)["reloc"], 25)
                cache[seed] = (sim, pdr, start, obs)
            sim, pdr, start, obs = cache[seed]
            base = RunConfig(pdr=pdr, outlier_rate=rate, outlier_offset=offset, outlier_min_offset=min(cfg.min_offset, offset))
            r = run(sim.imu, None, [], base, streams(seed), start=start, observations=obs)
            d = run(sim.imu, None, [], replace(base, mode="dw"), streams(seed), start=start, observations=obs)
            truth = truth_for_steps(r.t, sim.truth.t_peak, sim.truth.positions[1:])
            er, ed = evaluate(r.trajectory, truth), evaluate(d.trajectory, truth)
            dw.append(ed.max_error)
            rob.append(er.max_error)
            rmse.append(er.rmse)
        print(f"{rate:5.2f} {np.mean(dw):10.2f} {np.mean(rob):11.2f} {np.mean(rmse):12.3f}")


if __name__ == "__main__":
    main()
