import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relocpdr.core import RelocObservation
from relocpdr.fusion import (
    TUKEY_DELTA,
    FusionConfig,
    FusionError,
    FusionGraph,
    RobustKernel,
    jacobian_reloc,
    jacobians_pdr,
    reloc_covariance,
    residual_pdr,
    residual_reloc,
    tukey_rho,
    tukey_weight,
)

from conftest import make_step, random_graph

D = TUKEY_DELTA


def chain(n, length=1.0, heading=0.0, cfg=FusionConfig(), prior=(0.0, 0.0)):
    g = FusionGraph(cfg, start=(0.0, 0.0))
    if prior is not None:
        g.add_prior(0, prior, shift=False)
    for k in range(1, n + 1):
        g.add_step(make_step(k, length, heading))
    return g


def obs(k, x, y, m=100):
    return RelocObservation.gated(k, (x, y), m)


# -- kernel ------------------------------------------------------------------------


def test_tukey_examples():
    assert tukey_rho(0.0) == 0.0
    assert tukey_rho(D) == pytest.approx(3.658204166666666, abs=1e-12)
    assert tukey_rho(10 * D) == D * D / 6
    assert tukey_rho(D / 2) == pytest.approx(D * D / 6 * 0.578125, abs=1e-12)


@given(st.floats(0, 100), st.floats(0.1, 20))
def test_tukey_bounded_and_weight_in_unit_interval(x, d):
    assert 0.0 <= tukey_rho(x, d) <= d * d / 6
    assert 0.0 <= tukey_weight(x, d) <= 1.0


@given(st.floats(0, 30), st.floats(0, 30))
def test_tukey_weight_non_increasing(a, b):
    lo, hi = sorted((a, b))
    assert tukey_weight(hi) <= tukey_weight(lo)


def test_tukey_vector_matches_scalar(rng):
    x = rng.uniform(0, 2 * D, 200)
    np.testing.assert_array_equal(tukey_rho(x), [tukey_rho(float(v)) for v in x])
    np.testing.assert_array_equal(tukey_weight(x), [tukey_weight(float(v)) for v in x])


def test_tukey_weight_is_derivative_over_x(rng):
    x = rng.uniform(0.1, D - 0.1, 50)
    h = 1e-6
    drho = (tukey_rho(x + h) - tukey_rho(x - h)) / (2 * h)
    np.testing.assert_allclose(drho / x, tukey_weight(x), rtol=1e-6)


def test_kernel_validation():
    with pytest.raises(ValueError):
        RobustKernel("huber")
    with pytest.raises(ValueError):
        RobustKernel("tukey", 0.0)
    assert RobustKernel("none").weight(100.0) == 1.0


# -- factors -----------------------------------------------------------------------


def test_reloc_covariance_examples():
    np.testing.assert_allclose(reloc_covariance(100), 0.09 * np.eye(2))
    np.testing.assert_allclose(reloc_covariance(200), 0.09 * np.eye(2))
    np.testing.assert_allclose(reloc_covariance(50), 0.36 * np.eye(2))


@given(st.integers(1, 1000), st.integers(1, 1000))
def test_reloc_covariance_monotone(a, b):
    lo, hi = sorted((a, b))
    assert reloc_covariance(hi)[0, 0] <= reloc_covariance(lo)[0, 0]


def test_residual_examples():
    np.testing.assert_array_equal(residual_pdr((1, 2), (3, 4), (4, 6)), (0, 0))
    np.testing.assert_array_equal(residual_reloc((1, 2), (1, 2)), (0, 0))
    np.testing.assert_array_equal(residual_pdr((1, 0), (0, 0), (0, 1)), (1, -1))


def _fd_jacobian(f, x, h=1e-6):
    J = np.zeros((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        J[:, i] = (f(x + e) - f(x - e)) / (2 * h)
    return J


@settings(max_examples=100)
@given(st.lists(st.floats(-100, 100), min_size=6, max_size=6))
def test_jacobians_match_finite_differences(v):
    z, a, b = np.array(v[:2]), np.array(v[2:4]), np.array(v[4:])
    Ja, Jb = jacobians_pdr()
    for J, num in (
        (Ja, _fd_jacobian(lambda p: residual_pdr(z, p, b), a)),
        (Jb, _fd_jacobian(lambda p: residual_pdr(z, a, p), b)),
        (jacobian_reloc(), _fd_jacobian(lambda p: residual_reloc(z, p), a)),
    ):
        assert np.linalg.norm(num - J) <= 1e-6 * np.linalg.norm(J)


# -- graph construction ---------------------------------------------------------------


def test_first_step_dead_reckons():
    g = chain(1)
    np.testing.assert_array_equal(g.estimates()[1], (1.0, 0.0))


def test_zero_length_step():
    g = chain(1)
    g.add_step(make_step(2, 0.0, 1.0))
    np.testing.assert_array_equal(g.estimates()[2], g.estimates()[1])
    assert g.pdr[2].z == (0.0, 0.0)


def test_structural_counts():
    g = chain(500)
    assert g.num_steps == 500 and g.num_nodes == 501
    assert g.num_factors == 501  # 500 PDR factors plus the prior


def test_index_gap_raises():
    g = chain(2)
    with pytest.raises(FusionError, match="does not follow"):
        g.add_step(make_step(4))


def test_single_prior_only():
    g = chain(1)
    with pytest.raises(FusionError):
        g.add_prior(1, (0, 0))


def test_prior_shift_moves_chain():
    g = FusionGraph()
    for k in range(1, 4):
        g.add_step(make_step(k))
    g.add_prior(2, (10.0, 5.0))
    np.testing.assert_allclose(g.estimates(), [[8, 5], [9, 5], [10, 5], [11, 5]])


def test_optimize_requires_prior():
    g = chain(3, prior=None)
    with pytest.raises(FusionError, match="prior"):
        g.optimize_batch()
    with pytest.raises(FusionError, match="prior"):
        g.optimize_incremental()


def test_singular_system_names_node():
    from dataclasses import replace

    g = chain(6)
    g.pdr[4] = replace(g.pdr[4], info=(0.0, 0.0, 0.0, 0.0))  # cut the chain before node 4
    with pytest.raises(FusionError, match="node 4"):
        g.optimize_batch()
    with pytest.raises(FusionError, match="node 4"):
        g.optimize_incremental()


# -- gating ----------------------------------------------------------------------------


def test_gate_threshold_is_strict():
    g = chain(5)
    g.optimize_incremental()
    before = g.estimates().copy()
    assert not g.gate_and_add_reloc(obs(3, 9.0, 9.0, 25))
    g.optimize_incremental()
    assert np.array_equal(g.estimates(), before)
    assert g.gate_and_add_reloc(obs(3, 3.5, 0.5, 26))
    g.optimize_incremental()
    assert not np.array_equal(g.estimates()[3], before[3])


def test_zero_inliers_rejected_and_unknown_node():
    g = chain(2)
    assert not g.gate_and_add_reloc(RelocObservation(1, (math.nan, math.nan), 0, False))
    assert len(g.relocs) == 0
    with pytest.raises(FusionError, match="unknown node"):
        g.gate_and_add_reloc(obs(9, 0, 0))


# -- batch -------------------------------------------------------------------------------


def test_consistent_chain_has_zero_cost():
    g = chain(20, 0.7, 0.3)
    dr = g.estimates().copy()
    g.gate_and_add_reloc(obs(10, *dr[10]))
    g.optimize_batch()
    assert g.cost() == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(g.estimates(), dr, atol=1e-12)


def test_three_node_weighted_least_squares_oracle():
    # equal covariances everywhere: the 0.1 m misfit spreads evenly over four residuals
    cfg = FusionConfig(sigma_pdr=0.3, sigma_prior=0.3, kernel=RobustKernel("none"))
    g = chain(2, cfg=cfg)
    g.gate_and_add_reloc(obs(2, 2.1, 0.0, 100))
    x = g.optimize_batch()
    np.testing.assert_allclose(x, [[0.025, 0], [1.05, 0], [2.075, 0]], atol=1e-12)


def test_three_node_tukey_fixed_point():
    cfg = FusionConfig(sigma_pdr=0.3, sigma_prior=0.3)
    g = chain(2, cfg=cfg)
    g.gate_and_add_reloc(obs(2, 2.1, 0.0, 100))
    x = g.optimize_batch()
    # at convergence the estimate solves the WLS system with the weight it induces
    w = tukey_weight(abs(2.1 - x[2, 0]) / 0.3)
    c = 0.1 * w / (3 * w + 1)  # shift at node 0 with reloc weight w
    np.testing.assert_allclose(x[:, 0], [c, 1 + 2 * c, 2 + 3 * c], atol=1e-9)


def test_far_outlier_is_ignored():
    clean = chain(100, 0.7)
    for k in (20, 50, 80):
        clean.gate_and_add_reloc(obs(k, 0.7 * k + 0.05, 0.02))
    dirty = clean.copy()
    dirty.gate_and_add_reloc(obs(60, 0.7 * 60 + 50.0, 0.0, 100))
    a, b = clean.optimize_batch(), dirty.optimize_batch()
    np.testing.assert_allclose(a, b, atol=1e-3)
    assert dirty.weights[-1] == 0.0


def test_cost_non_increasing_and_gradient_small(rng):
    g = chain(60, 0.7, 0.0)
    for k in range(5, 61, 5):
        off = 30.0 if k % 15 == 0 else 0.0
        g.gate_and_add_reloc(obs(k, 0.7 * k + off + rng.normal(0, 0.1), rng.normal(0, 0.3), 40))
    step = g.copy()
    step.config = FusionConfig(max_iters=1)
    costs = [step.cost()]
    for _ in range(40):
        step.optimize_batch()
        costs.append(step.cost())
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))
    g.optimize_batch()
    assert np.abs(g.gradient()).max() <= 1e-6


def test_zero_weight_factor_can_be_removed():
    g = chain(40, 0.7)
    for k in (10, 30):
        g.gate_and_add_reloc(obs(k, 0.7 * k, 0.1))
    without = g.copy()
    g.gate_and_add_reloc(obs(20, 14.0, 40.0))
    a = g.optimize_batch()
    b = without.optimize_batch()
    e = g._whitened(g.relocs[-1], a[20])
    assert e >= TUKEY_DELTA and g.weights[-1] == 0.0
    np.testing.assert_allclose(a, b, atol=1e-9)


# -- incremental ---------------------------------------------------------------------------


def test_step_without_reloc_affects_one_node():
    g = chain(10)
    g.optimize_incremental()
    g.add_step(make_step(11))
    g.optimize_incremental()
    assert g.solver_log[-1]["affected"] == 1


def test_reloc_affected_set_is_contiguous():
    g = chain(80, 0.7)
    g.optimize_incremental()
    before = g.estimates().copy()
    g.gate_and_add_reloc(obs(60, 0.7 * 60 + 0.8, 0.5))
    g.optimize_incremental()
    moved = np.flatnonzero(np.abs(g.estimates() - before).max(axis=1) > g.config.relin_threshold)
    assert 60 in moved
    assert np.array_equal(moved, np.arange(moved[0], moved[-1] + 1))
    assert g.solver_log[-1]["affected"] == len(moved)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_incremental_matches_batch(seed):
    g, events = random_graph(seed, 120)
    for kind, e in events:
        if kind == "step":
            g.add_step(e)
        else:
            g.gate_and_add_reloc(e)
        g.optimize_incremental()
    ref = g.copy()
    ref.optimize_batch()
    assert np.abs(g.estimates() - ref.estimates()).max() <= 1e-6


def test_incremental_matches_batch_on_corridor(corridor_sim):
    from relocpdr.pdr import PdrConfig, run_pdr
    from relocpdr.pipeline import robust_fuse

    steps, _ = run_pdr(corridor_sim.imu, PdrConfig())
    rng = np.random.default_rng(0)
    truth = corridor_sim.truth.positions
    fixes = [obs(s.index, *(truth[min(s.index, len(truth) - 1)] + rng.normal(0, 0.1, 2)), 60) for s in steps[::3]]
    _, g = robust_fuse(steps, fixes, FusionConfig(), start=tuple(truth[0]))
    ref = g.copy()
    ref.optimize_batch()
    assert np.abs(g.estimates() - ref.estimates()).max() <= 1e-6


# -- trajectory output ----------------------------------------------------------------------


def test_trajectory_equals_optimizer_output():
    g = chain(10, 0.5)
    g.gate_and_add_reloc(obs(5, 3.0, 0.4))
    x = g.optimize_incremental()
    np.testing.assert_array_equal(g.current_trajectory(), x[1:])
    np.testing.assert_array_equal(g.current_trajectory(include_start=True), x)


def test_trajectory_extends_by_dead_reckoning():
    g = chain(10, 0.5)
    g.gate_and_add_reloc(obs(10, 5.5, 0.5))
    x = g.optimize_incremental()
    g.add_step(make_step(11, 1.0, math.pi / 2))
    g.add_step(make_step(12, 1.0, 0.0))
    traj = g.current_trajectory()
    np.testing.assert_allclose(traj[-2], x[10] + (0.0, 1.0), atol=1e-15)
    np.testing.assert_allclose(traj[-1], x[10] + (1.0, 1.0), atol=1e-15)


def test_empty_trajectory():
    assert FusionGraph().current_trajectory().shape == (0, 2)


def test_solver_log_fields():
    g = chain(3)
    g.optimize_incremental()
    rec = g.solver_log[-1]
    assert {"iterations", "cost", "affected"} <= rec.keys()
