"""Trajectory error statistics and plot-ready series."""

from __future__ import annotations

import numpy as np

from .core import MetricsReport


def horizontal_errors(est, truth) -> np.ndarray:
    est = np.asarray(est, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    if est.shape != truth.shape:
        raise ValueError(f"trajectory has {len(est)} rows but ground truth has {len(truth)}")
    return np.linalg.norm(est - truth, axis=1)


def loop_error(est, truth) -> float:
    """Mismatch between estimated and true start-to-end closure distance."""
    est = np.asarray(est, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(est) == 0:
        return 0.0
    return float(abs(np.linalg.norm(est[-1] - est[0]) - np.linalg.norm(truth[-1] - truth[0])))


def evaluate(est, truth, k_est=None, k_truth=None) -> MetricsReport:
    """RMSE, max and loop error of a per-step trajectory against truth.

    When step indices are given they must agree row by row.
    """
    if k_est is not None and k_truth is not None:
        k_est, k_truth = np.asarray(k_est), np.asarray(k_truth)
        if k_est.shape != k_truth.shape or np.any(k_est != k_truth):
            raise ValueError("step indices of trajectory and ground truth do not match")
    err = horizontal_errors(est, truth)
    if len(err) == 0:
        return MetricsReport(0.0, 0.0, 0.0, ())
    rmse = float(np.sqrt(np.mean(err**2)))
    return MetricsReport(rmse, float(err.max()), loop_error(est, truth), tuple(float(e) for e in err))


def error_cdf(errors):
    """Sorted errors and their empirical CDF (last value 1.0)."""
    e = np.sort(np.asarray(errors, dtype=float))
    if len(e) == 0:
        return e, e
    return e, np.arange(1, len(e) + 1) / len(e)


def plot_series(k, est, truth, observations=()) -> dict:
    """Series for a trajectory overlay, per-step error and error CDF."""
    est = np.asarray(est, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    err = horizontal_errors(est, truth)
    xs, ps = error_cdf(err)
    overlay = {
        "estimate": {"x": est[:, 0].tolist(), "y": est[:, 1].tolist()},
        "truth": {"x": truth[:, 0].tolist(), "y": truth[:, 1].tolist()},
    }
    fixes = [o for o in observations if o.accepted]
    if fixes:
        overlay["reloc"] = {
            "k": [o.k for o in fixes],
            "x": [o.position.x for o in fixes],
            "y": [o.position.y for o in fixes],
        }
    return {
        "overlay": overlay,
        "error": {"k": [int(v) for v in k], "error": err.tolist()},
        "cdf": {"error": xs.tolist(), "p": ps.tolist()},
    }
