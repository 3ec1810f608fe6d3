"""Composite mirror descent on the dual traffic-assignment problem.

The dual objective is ``Y(t) = -sum_w d_w T_w(t) + sum_e sigma*_e(t_e)``
over ``t_e >= t0_e``. Each iteration takes the all-or-nothing flow
``f^k`` at ``t^k`` as the (negated) subgradient, uses the step
``gamma_k = eps / M_k**2`` and solves the per-edge composite prox exactly.
Weighted averages of the pre-step points ``t^k`` and flows ``f^k``
(weights ``gamma_k``) give the dual estimate ``t_bar`` and one of two
primal reconstructions:

* mode ``"A"`` -- averaged flow on BPR edges; on stable-dynamics edges
  ``cap - s`` with ``s = max(0, cap - f_avg)`` the multiplier of the
  averaged capacity subproblem, i.e. the average clipped to capacity;
* mode ``"B"`` -- averaged flow on all edges (may exceed capacity; the
  excess norm is reported and is part of the stopping test).

The duality gap ``Y(t_bar) + Psi(f_bar)`` is evaluated every
``gap_check_period`` iterations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, UnreachableDemandedDestination, ZeroSubgradient
from .link_costs import ProxPlan, sigma_array, sigma_conj_array, tau_array
from .network import Network, validate_reachability
from .shortest_paths import SubgradientOracle, SubgradientResult

log = logging.getLogger(__name__)

MODES = ("A", "B")


@dataclass
class RunConfig:
    """Solver settings.

    Exactly one of ``epsilon`` (absolute gap target) and
    ``epsilon_relative`` (target as a fraction of ``|Psi|`` at the first
    all-or-nothing flow) must be given. ``epsilon_tilde`` bounds the
    capacity-violation norm and is required in mode ``"B"``.
    """

    epsilon: Optional[float] = None
    epsilon_relative: Optional[float] = None
    epsilon_tilde: Optional[float] = None
    max_iterations: int = 100_000
    gap_check_period: int = 50
    mode: str = "A"
    worker_count: int = 1
    seed: int = 0
    time_limit: Optional[float] = None
    gap_tolerance: float = 1e-9

    def __post_init__(self):
        if (self.epsilon is None) == (self.epsilon_relative is None):
            raise ConfigError("set exactly one of epsilon and epsilon_relative")
        for name in ("epsilon", "epsilon_relative", "epsilon_tilde", "time_limit"):
            v = getattr(self, name)
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a positive number, got {v}")
        self.mode = str(self.mode).upper()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be A or B, got {self.mode!r}")
        if self.mode == "B" and self.epsilon_tilde is None:
            raise ConfigError("mode B needs epsilon_tilde")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.gap_check_period < 1:
            raise ConfigError("gap_check_period must be >= 1")
        if self.worker_count < 1:
            raise ConfigError("worker_count must be >= 1")


@dataclass
class SolverState:
    """Iterate and running sums; ``k`` counts steps taken so far."""

    t: np.ndarray
    t0: np.ndarray
    k: int = 0
    step_sum: float = 0.0
    t_sum: np.ndarray = None
    f_sum: np.ndarray = None
    inv_m2_sum: float = 0.0
    last_M: float = float("nan")
    radius: float = 0.0
    radius_max: float = 0.0
    best_gap: float = math.inf

    def __post_init__(self):
        if self.t_sum is None:
            self.t_sum = np.zeros_like(self.t)
        if self.f_sum is None:
            self.f_sum = np.zeros_like(self.t)

    @classmethod
    def start(cls, net: Network) -> "SolverState":
        t0 = net.free_time.copy()
        return cls(t=t0.copy(), t0=t0)

    @property
    def t_bar(self) -> np.ndarray:
        return self.t_sum / self.step_sum

    @property
    def f_avg(self) -> np.ndarray:
        return self.f_sum / self.step_sum


def md_step(state: SolverState, subgrad: SubgradientResult, epsilon: float,
            plan: ProxPlan) -> SolverState:
    """One composite mirror-descent step from ``state.t`` (in place)."""
    M = subgrad.M
    if not M > 0:
        raise ZeroSubgradient("subgradient vanished (no demand loaded)")
    step = epsilon / (M * M)
    f = subgrad.flow
    state.t_sum += step * state.t
    state.f_sum += step * f
    state.step_sum += step
    state.inv_m2_sum += 1.0 / (M * M)
    state.last_M = M
    state.t = plan.step(state.t, -f, step)
    d = state.t - state.t0
    state.radius = 0.5 * float(d @ d)
    state.radius_max = max(state.radius_max, state.radius)
    state.k += 1
    return state


def capacity_multipliers(net: Network, f_avg: np.ndarray) -> np.ndarray:
    """Multipliers ``s_e = max(0, cap_e - f_avg_e)`` on stable edges, 0 elsewhere."""
    s = np.zeros_like(f_avg)
    st = net.stable
    s[st] = np.maximum(0.0, net.capacity[st] - f_avg[st])
    return s


def reconstruct_mode_A(net: Network, state: SolverState) -> np.ndarray:
    f = state.f_avg
    st = net.stable
    f[st] = net.capacity[st] - capacity_multipliers(net, f)[st]
    return f


def reconstruct_mode_B(net: Network, state: SolverState) -> np.ndarray:
    return state.f_avg


def violation_norm(net: Network, f: np.ndarray) -> float:
    """Euclidean norm of capacity excess over stable-dynamics edges."""
    st = net.stable
    excess = np.maximum(np.asarray(f)[st] - net.capacity[st], 0.0)
    return math.sqrt(math.fsum(excess * excess))


def primal_value(net: Network, f: np.ndarray) -> float:
    """``Psi(f)``: BPR potentials plus ``t0 * f`` on stable edges."""
    return math.fsum(sigma_array(net, f))


def dual_value_at(net: Network, t: np.ndarray, oracle) -> float:
    res = oracle(t)
    return -res.cost_sum + math.fsum(sigma_conj_array(net, t))


@dataclass(frozen=True)
class GapCheck:
    N: int
    dual_value: float
    primal_value: float
    gap: float
    violation_norm: float
    t_bar: np.ndarray
    f_bar: np.ndarray
    multipliers: np.ndarray
    step_sum: float
    inv_m2_sum: float
    last_M: float
    radius: float
    radius_max: float


def compute_gap(net: Network, state: SolverState, mode: str, oracle) -> GapCheck:
    """Gap ``Y(t_bar) + Psi(f_bar)`` and capacity-violation norm at the current averages."""
    if state.k == 0:
        raise ValueError("no step taken yet")
    t_bar = np.maximum(state.t_bar, net.free_time)
    f_avg = state.f_avg
    s = capacity_multipliers(net, f_avg)
    if mode == "A":
        f_bar = reconstruct_mode_A(net, state)
    else:
        f_bar = reconstruct_mode_B(net, state)
    dual = dual_value_at(net, t_bar, oracle)
    primal = primal_value(net, f_bar)
    gap = dual + primal
    return GapCheck(
        N=state.k - 1, dual_value=dual, primal_value=primal, gap=gap,
        violation_norm=violation_norm(net, f_bar), t_bar=t_bar, f_bar=f_bar,
        multipliers=s if mode == "A" else np.zeros_like(s),
        step_sum=state.step_sum, inv_m2_sum=state.inv_m2_sum, last_M=state.last_M,
        radius=state.radius, radius_max=state.radius_max,
    )


@dataclass(frozen=True)
class Diagnostics:
    """A-posteriori convergence quantities at the reported averaged point.

    ``R_N_sq`` uses the averaged tolls on stable edges in place of the
    exact inner minimiser, so ``iteration_bound`` is an estimate.
    """

    N: int
    M_tilde_sq: float
    R_N_sq: float
    iteration_bound: float
    radius_max: float
    radius_final: float
    R_sq_estimate: float
    radius_bound: float


def diagnostics_theorem1(net: Network, check: GapCheck, epsilon: float) -> Diagnostics:
    n_points = check.N + 1
    m_tilde_sq = n_points / check.inv_m2_sum
    bpr = ~net.stable
    d_bpr = tau_array(net, check.f_bar)[bpr] - net.free_time[bpr]
    d_st = check.t_bar[net.stable] - net.free_time[net.stable]
    r_sq = 0.5 * math.fsum(d_bpr * d_bpr) + 0.5 * math.fsum(d_st * d_st)
    d_avg = check.t_bar - net.free_time
    r_est = 0.5 * float(d_avg @ d_avg)
    return Diagnostics(
        N=check.N,
        M_tilde_sq=m_tilde_sq,
        R_N_sq=r_sq,
        iteration_bound=2.0 * m_tilde_sq * r_sq / epsilon ** 2,
        radius_max=check.radius_max,
        radius_final=check.radius,
        R_sq_estimate=r_est,
        radius_bound=2.0 * r_est,
    )


@dataclass(frozen=True)
class TraceRow:
    k: int
    dual_value: float
    primal_value: float
    gap: float
    best_gap: float
    M_k: float
    S_N: float
    violation_norm: float
    radius: float
    wall_time: float


@dataclass
class ConvergenceTrace:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])


@dataclass(frozen=True)
class EquilibriumReport:
    status: str  # "converged" | "not_converged"
    mode: str
    epsilon: float
    epsilon_tilde: Optional[float]
    iterations: int  # steps averaged into the reported point
    total_iterations: int
    t_bar: np.ndarray
    f_bar: np.ndarray
    dual_value: float
    primal_value: float
    gap: float
    violation_norm: float
    multipliers: np.ndarray
    diagnostics: Diagnostics
    worker_count: int
    wall_time: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _accepts(check: GapCheck, config: RunConfig, epsilon: float) -> bool:
    if config.mode == "A":
        # both sides of the certificate: a negative gap is not a certificate
        return -config.gap_tolerance <= check.gap <= epsilon
    return check.gap <= epsilon and check.violation_norm <= config.epsilon_tilde


def _merit(check: GapCheck, config: RunConfig, epsilon: float) -> float:
    if config.mode == "A":
        return check.gap if check.gap >= -config.gap_tolerance else math.inf
    return max(max(check.gap, 0.0) / epsilon, check.violation_norm / config.epsilon_tilde)


def solve(net: Network, config: RunConfig, oracle=None):
    """Run the method; returns ``(EquilibriumReport, ConvergenceTrace)``.

    Stops at the first checkpoint that passes the stopping test, at
    ``max_iterations`` or at ``time_limit``. Without convergence the
    status is ``"not_converged"`` and the best checkpoint is reported.
    """
    bad = validate_reachability(net)
    if bad:
        raise UnreachableDemandedDestination(*bad[0])
    own_oracle = oracle is None
    if own_oracle:
        oracle = SubgradientOracle(net, config.worker_count)
    try:
        return _solve(net, config, oracle)
    finally:
        if own_oracle:
            oracle.close()


def _solve(net, config, oracle):
    started = time.perf_counter()
    plan = ProxPlan(net)
    state = SolverState.start(net)
    trace = ConvergenceTrace()

    sub = oracle(state.t)
    if config.epsilon is not None:
        epsilon = float(config.epsilon)
    else:
        epsilon = config.epsilon_relative * abs(primal_value(net, sub.flow))
        if not epsilon > 0:
            raise ConfigError("relative epsilon resolves to zero")
        log.info("relative epsilon %g -> absolute %.17g", config.epsilon_relative, epsilon)

    best = None
    best_merit = math.inf
    converged = False
    warned = False
    while True:
        md_step(state, sub, epsilon, plan)
        elapsed = time.perf_counter() - started
        last = state.k >= config.max_iterations or (
            config.time_limit is not None and elapsed >= config.time_limit)
        if state.k % config.gap_check_period == 0 or last:
            check = compute_gap(net, state, config.mode, oracle)
            if config.mode == "A" and check.gap < -config.gap_tolerance and not warned:
                log.warning("negative mode-A gap %.6g at k=%d: certificate invalid "
                            "(clipped flows violate conservation)", check.gap, check.N)
                warned = True
            if check.gap >= -config.gap_tolerance:
                state.best_gap = min(state.best_gap, check.gap)
            trace.rows.append(TraceRow(
                k=check.N, dual_value=check.dual_value, primal_value=check.primal_value,
                gap=check.gap, best_gap=state.best_gap, M_k=state.last_M,
                S_N=state.step_sum, violation_norm=check.violation_norm,
                radius=state.radius, wall_time=time.perf_counter() - started,
            ))
            merit = _merit(check, config, epsilon)
            if best is None or merit <= best_merit:
                best, best_merit = check, merit
            if _accepts(check, config, epsilon):
                best, converged = check, True
                break
        if last:
            break
        sub = oracle(state.t)

    wall = time.perf_counter() - started
    report = EquilibriumReport(
        status="converged" if converged else "not_converged",
        mode=config.mode,
        epsilon=epsilon,
        epsilon_tilde=config.epsilon_tilde,
        iterations=best.N + 1,
        total_iterations=state.k,
        t_bar=best.t_bar,
        f_bar=best.f_bar,
        dual_value=best.dual_value,
        primal_value=best.primal_value,
        gap=best.gap,
        violation_norm=best.violation_norm,
        multipliers=best.multipliers,
        diagnostics=diagnostics_theorem1(net, best, epsilon),
        worker_count=getattr(oracle, "worker_count", 1),
        wall_time=wall,
    )
    log.info("%s after %d iterations: gap %.6g, violation %.3g",
             report.status, state.k, report.gap, report.violation_norm)
    return report, trace
