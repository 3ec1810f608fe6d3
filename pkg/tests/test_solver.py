import logging
import math

import numpy as np
import pytest

from dualtap.errors import EmptyDemand, UnreachableDemandedDestination
from dualtap.link_costs import ProxPlan, sigma_conj_array
from dualtap.network import Bpr, EdgeRecord, StableDynamics, build_network
from dualtap.reference import frank_wolfe_beckmann, qp_multiplier_oracle
from dualtap.shortest_paths import SubgradientOracle, compute_subgradient, dual_value
from dualtap.solver import (
    GapCheck,
    RunConfig,
    SolverState,
    capacity_multipliers,
    compute_gap,
    diagnostics_theorem1,
    md_step,
    primal_value,
    reconstruct_mode_A,
    reconstruct_mode_B,
    solve,
    violation_norm,
)

from instances import MIXED_PSI, MIXED_TOLL, two_link_beckmann, two_link_mixed


def _state_with_average(net, f_avg, step_sum=2.0):
    state = SolverState.start(net)
    state.k = 1
    state.step_sum = step_sum
    state.f_sum = np.asarray(f_avg, dtype=float) * step_sum
    state.t_sum = net.free_time * step_sum
    return state


def test_reconstruction_examples():
    net = build_network(2, [
        EdgeRecord(0, 0, 1, StableDynamics(1.0, 0.5)),
        EdgeRecord(1, 0, 1, StableDynamics(1.0, 0.5)),
        EdgeRecord(2, 0, 1, Bpr(1.0, 1.0, 1.0)),
    ], [(0, 1, 1.0)])
    state = _state_with_average(net, [0.3, 0.9, 0.7])
    a = reconstruct_mode_A(net, state)
    b = reconstruct_mode_B(net, state)
    np.testing.assert_allclose(a, [0.3, 0.5, 0.7], rtol=1e-15)
    np.testing.assert_allclose(capacity_multipliers(net, state.f_avg), [0.2, 0.0, 0.0], rtol=1e-15)
    np.testing.assert_allclose(b, [0.3, 0.9, 0.7], rtol=1e-15)
    assert a[2] == b[2]
    assert violation_norm(net, b) == pytest.approx(0.4, rel=1e-14)
    assert violation_norm(net, a) == 0.0


def test_closed_form_equals_qp_oracle():
    rng = np.random.default_rng(0)
    f_avg = rng.uniform(0, 2, 2000)
    cap = rng.uniform(0, 2, 2000)
    S = 3.7
    _, s = qp_multiplier_oracle(f_avg, cap, S)
    net_s = np.maximum(0.0, cap - f_avg)
    np.testing.assert_array_equal(s, net_s)
    np.testing.assert_array_equal(cap - s, np.where(cap - f_avg >= 0, f_avg, cap))


def test_primal_value_examples():
    net = two_link_mixed()
    assert primal_value(net, np.zeros(2)) == 0.0
    assert primal_value(net, np.array([0.5, 0.5])) == pytest.approx(MIXED_PSI, rel=1e-15)
    single = build_network(2, [EdgeRecord(0, 0, 1, Bpr(1.0, 1.0, 1.0))], [(0, 1, 1.0)])
    assert primal_value(single, np.array([1.0])) == pytest.approx(1.2, rel=1e-15)


def test_zero_gap_at_analytic_equilibrium():
    net = two_link_mixed()
    t = np.array([MIXED_TOLL, MIXED_TOLL])
    assert dual_value(net, t) + primal_value(net, np.array([0.5, 0.5])) == pytest.approx(0, abs=1e-9)


def test_md_step_first_iteration():
    net = two_link_mixed()
    plan = ProxPlan(net)
    state = SolverState.start(net)
    sub = compute_subgradient(net, state.t)
    md_step(state, sub, 0.1, plan)
    # both links cost 1 at t0; the tie goes to edge 0 with flow 1 = M
    assert state.k == 1 and state.step_sum == 0.1
    np.testing.assert_array_equal(state.f_sum, [0.1, 0.0])
    np.testing.assert_array_equal(state.t_sum, [0.1, 0.1])
    # stable edge: max(1, 1 - 0.1 * (-1 + 0.5)) = 1.05; BPR edge stays at t0
    np.testing.assert_allclose(state.t, [1.05, 1.0], rtol=1e-15)


def test_diagnostics_formula():
    net = two_link_mixed()
    z = np.zeros(2)
    check = GapCheck(N=1, dual_value=0.0, primal_value=0.0, gap=0.0, violation_norm=0.0,
                     t_bar=net.free_time + np.array([0.2, 0.0]), f_bar=np.array([0.5, 0.5]),
                     multipliers=z, step_sum=1.0, inv_m2_sum=1.0 + 0.25, last_M=2.0,
                     radius=0.0, radius_max=0.0)
    d = diagnostics_theorem1(net, check, epsilon=0.1)
    assert d.M_tilde_sq == pytest.approx(1.6, rel=1e-15)
    # R^2 = 1/2 (tau_B(0.5) - 1)^2 + 1/2 (0.2)^2
    assert d.R_N_sq == pytest.approx(0.5 * 0.0625 ** 2 + 0.5 * 0.04, rel=1e-14)
    assert d.iteration_bound == pytest.approx(2 * 1.6 * d.R_N_sq / 0.01, rel=1e-14)
    const = GapCheck(**{**check.__dict__, "N": 4, "inv_m2_sum": 5 / 9.0})
    assert diagnostics_theorem1(net, const, 0.1).M_tilde_sq == pytest.approx(9.0, rel=1e-15)


def test_invariants_along_a_run():
    net = two_link_mixed()
    plan = ProxPlan(net)
    state = SolverState.start(net)
    with SubgradientOracle(net) as oracle:
        bests = []
        radii = []
        for k in range(2000):
            md_step(state, oracle(state.t), 1e-3, plan)
            tol = 1e-12 * np.maximum(1.0, net.free_time)
            assert np.all(state.t >= net.free_time - tol)
            radii.append(state.radius)
            if state.k % 100 == 0:
                check = compute_gap(net, state, "A", oracle)
                assert np.all(check.t_bar >= net.free_time - tol)
                assert np.all(check.f_bar[net.stable] <= net.capacity[net.stable])
                bests.append(check.gap)
    best_so_far = np.minimum.accumulate(bests)
    assert np.all(np.diff(best_so_far) <= 0)
    d_avg = state.t_bar - net.free_time
    assert max(radii) <= 4 * (2 * 0.5 * float(d_avg @ d_avg))


def test_pure_beckmann_matches_frank_wolfe():
    net = two_link_beckmann()
    report, trace = solve(net, RunConfig(epsilon=1e-3, max_iterations=3000))
    fw = frank_wolfe_beckmann(net, tol=1e-8)
    np.testing.assert_allclose(report.f_bar, fw.flow, atol=1e-3)
    assert np.all(trace.column("gap") >= -1e-9)
    assert report.primal_value == pytest.approx(fw.objective, abs=max(1e-3 * fw.objective, 2e-3))


def test_mode_b_pair_termination():
    net = two_link_mixed()
    cfg = RunConfig(epsilon=1e-3, mode="B", epsilon_tilde=1e-2, max_iterations=50_000)
    report, trace = solve(net, cfg)
    assert report.converged
    assert report.gap <= 1e-3 and report.violation_norm <= 1e-2
    # every earlier checkpoint failed at least one half of the pair
    for row in trace.rows[:-1]:
        assert row.gap > 1e-3 or row.violation_norm > 1e-2
    assert report.violation_norm == violation_norm(net, report.f_bar)


def test_mode_a_negative_gap_is_not_accepted(caplog):
    # clipping the averaged flow on a binding stable edge removes demand,
    # so the mode-A value can fall below the optimum; it must not certify
    net = two_link_mixed()
    with caplog.at_level(logging.WARNING, logger="dualtap.solver"):
        report, trace = solve(net, RunConfig(epsilon=1e-2, max_iterations=500))
    assert not report.converged
    assert trace.column("gap").min() < 0
    assert "negative mode-A gap" in caplog.text
    assert report.f_bar.sum() < 1.0


def test_relative_epsilon():
    net = two_link_beckmann()
    report, _ = solve(net, RunConfig(epsilon_relative=0.5, max_iterations=100))
    # first all-or-nothing flow puts the unit demand on link B: Psi = 1.2
    assert report.epsilon == pytest.approx(0.6, rel=1e-15)


def test_max_iterations_cap_reports_partial_result():
    net = two_link_mixed()
    report, trace = solve(net, RunConfig(epsilon=1e-9, max_iterations=7, gap_check_period=50))
    assert report.status == "not_converged"
    assert report.total_iterations == 7 and len(trace) == 1 and trace.rows[0].k == 6
    assert math.isfinite(report.gap)


def test_validation_errors():
    with pytest.raises(EmptyDemand):
        build_network(2, [EdgeRecord(0, 0, 1, Bpr(1.0, 1.0, 1.0))], [])
    net = build_network(2, [EdgeRecord(0, 0, 1, Bpr(1.0, 1.0, 1.0))], [(1, 0, 1.0)])
    with pytest.raises(UnreachableDemandedDestination):
        solve(net, RunConfig(epsilon=1.0))


def test_solve_is_deterministic_across_workers():
    net = two_link_mixed()
    a, ta = solve(net, RunConfig(epsilon=1e-3, max_iterations=300, worker_count=1))
    b, tb = solve(net, RunConfig(epsilon=1e-3, max_iterations=300, worker_count=2))
    assert a.f_bar.tobytes() == b.f_bar.tobytes()
    assert a.t_bar.tobytes() == b.t_bar.tobytes()
    assert [r.gap for r in ta] == [r.gap for r in tb]


def test_dual_value_of_average_uses_conjugates():
    net = two_link_mixed()
    state = _state_with_average(net, [0.5, 0.5])
    state.t_sum = np.array([MIXED_TOLL, MIXED_TOLL]) * state.step_sum
    with SubgradientOracle(net) as oracle:
        check = compute_gap(net, state, "A", oracle)
    assert check.dual_value == pytest.approx(-MIXED_TOLL + math.fsum(sigma_conj_array(net, check.t_bar)),
                                             rel=1e-15)
    assert check.gap == pytest.approx(0.0, abs=1e-9)
