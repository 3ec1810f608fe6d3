"""Slow, independent ground-truth tools for small instances.

Nothing here calls into :mod:`dualtap.link_costs` or the Dijkstra
kernels: travel times and potentials are re-derived locally and shortest
paths come from scipy's csgraph, so the tests compare two separate
implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra as cs_dijkstra

from .errors import InfeasiblePathFlows, PathExplosion, RegimeError

DEFAULT_PATH_CAP = 10_000


# -- local cost formulas -------------------------------------------------------

def _bpr_time(net, f):
    return net.free_time * (1.0 + net.gamma * np.power(f / net.capacity, net.power))


def _bpr_potential(net, f):
    return net.free_time * (f + net.gamma * net.capacity / (net.power + 1.0)
                            * np.power(f / net.capacity, net.power + 1.0))


# -- paths ---------------------------------------------------------------------

@dataclass(frozen=True)
class PathSet:
    """Simple paths per OD pair; ``paths[i]`` lists edge-id tuples of ``ods[i]``."""

    ods: tuple  # (origin, dest, demand)
    paths: tuple

    @property
    def n_paths(self) -> int:
        return sum(len(p) for p in self.paths)

    def flat(self):
        """``(path_list, od_index_per_path)`` in OD order."""
        out, owner = [], []
        for i, ps in enumerate(self.paths):
            out.extend(ps)
            owner.extend([i] * len(ps))
        return out, np.array(owner, dtype=np.int64)

    def incidence(self, n_edges: int) -> np.ndarray:
        """Dense edge-path incidence matrix (``delta_ep``)."""
        paths, _ = self.flat()
        theta = np.zeros((n_edges, len(paths)))
        for j, p in enumerate(paths):
            for e in p:
                theta[e, j] = 1.0
        return theta


def enumerate_paths(net, cap: int = DEFAULT_PATH_CAP) -> PathSet:
    """All simple paths of every OD pair by depth-first search.

    Raises :class:`PathExplosion` as soon as the running total exceeds ``cap``.
    """
    total = 0
    ods, all_paths = [], []
    adj = [[(int(e), int(net.head[e])) for e in net.out_edges(u)] for u in range(net.n_nodes)]
    for od in sorted(net.demands, key=lambda d: (d.origin, d.dest)):
        found = []
        on_path = [False] * net.n_nodes
        on_path[od.origin] = True
        stack = [(od.origin, 0)]
        edges = []
        while stack:
            u, i = stack[-1]
            if i == len(adj[u]):
                stack.pop()
                on_path[u] = False
                if edges:
                    edges.pop()
                continue
            stack[-1] = (u, i + 1)
            e, v = adj[u][i]
            if on_path[v]:
                continue
            if v == od.dest:
                found.append(tuple(edges) + (e,))
                total += 1
                if total > cap:
                    raise PathExplosion(
                        f"more than {cap} simple paths; path enumeration is only meant "
                        "for small networks (raise the cap or use link-level checks)")
                continue
            on_path[v] = True
            edges.append(e)
            stack.append((v, 0))
        ods.append((od.origin, od.dest, od.demand))
        all_paths.append(tuple(found))
    return PathSet(tuple(ods), tuple(all_paths))


def bellman_ford(net, t, origin: int) -> np.ndarray:
    """Distances from ``origin`` by synchronous relaxation rounds (+inf if unreachable)."""
    t = np.asarray(t, dtype=float)
    dist = np.full(net.n_nodes, np.inf)
    dist[origin] = 0.0
    for _ in range(net.n_nodes - 1):
        new = dist.copy()
        np.minimum.at(new, net.head, dist[net.tail] + t)
        if np.array_equal(new, dist):
            break
        dist = new
    return dist


# -- Frank-Wolfe ---------------------------------------------------------------

@dataclass(frozen=True)
class FrankWolfeResult:
    flow: np.ndarray
    objective: float
    relative_gap: float
    iterations: int
    converged: bool


def _cheapest_parallel(net, t):
    """Sparse cost matrix keeping the cheapest edge (then lowest id) per node pair."""
    order = np.lexsort((np.arange(net.n_edges), t, net.head, net.tail))
    pair = net.tail[order] * net.n_nodes + net.head[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pair[1:] != pair[:-1]
    keep = order[first]
    mat = csr_matrix((t[keep], (net.tail[keep], net.head[keep])),
                     shape=(net.n_nodes, net.n_nodes))
    edge_of = {(int(net.tail[e]), int(net.head[e])): int(e) for e in keep}
    return mat, edge_of


def all_or_nothing(net, t) -> tuple:
    """Load every OD demand on one csgraph shortest path: ``(flow, sum_w d_w T_w)``."""
    t = np.asarray(t, dtype=float)
    mat, edge_of = _cheapest_parallel(net, t)
    origins = [int(o) for o in net.origins]
    dist, pred = cs_dijkstra(mat, directed=True, indices=origins, return_predecessors=True)
    flow = np.zeros(net.n_edges)
    cost = 0.0
    for i, o in enumerate(origins):
        dests, amounts = net.demands_from(i)
        for j, d in zip(dests, amounts):
            j = int(j)
            if not np.isfinite(dist[i, j]):
                raise InfeasiblePathFlows(f"destination {j} unreachable from {o}")
            cost += d * dist[i, j]
            v = j
            while v != o:
                u = int(pred[i, v])
                flow[edge_of[(u, v)]] += d
                v = u
    return flow, cost


def frank_wolfe_beckmann(net, tol: float = 1e-4, max_iter: int = 100_000,
                         line_search_steps: int = 40) -> FrankWolfeResult:
    """Classic Frank-Wolfe on the Beckmann potential (BPR edges only).

    Stops when ``<tau(f), f - y> / |Psi(f)| <= tol`` with ``y`` the
    all-or-nothing flow at ``tau(f)``. The step is found by bisection on
    the derivative of the potential along the search direction.
    """
    if net.stable.any():
        raise RegimeError("Frank-Wolfe needs every edge to be BPR; this network has "
                          f"{int(net.stable.sum())} stable-dynamics edge(s)")
    f, _ = all_or_nothing(net, net.free_time)
    rel = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        cost = _bpr_time(net, f)
        y, _ = all_or_nothing(net, cost)
        psi = math.fsum(_bpr_potential(net, f))
        rel = float(cost @ (f - y)) / abs(psi)
        if rel <= tol:
            return FrankWolfeResult(f, psi, rel, it - 1, True)
        d = y - f
        lo, hi = 0.0, 1.0
        if float(_bpr_time(net, y) @ d) <= 0:
            lo = 1.0
        else:
            for _ in range(line_search_steps):
                mid = 0.5 * (lo + hi)
                if float(_bpr_time(net, f + mid * d) @ d) < 0:
                    lo = mid
                else:
                    hi = mid
        alpha = 0.5 * (lo + hi) if lo < 1.0 else 1.0
        f = f + alpha * d
    psi = math.fsum(_bpr_potential(net, f))
    return FrankWolfeResult(f, psi, rel, it, False)


# -- capacity multiplier -------------------------------------------------------

def qp_multiplier_oracle(f_avg, capacity, step_sum, free_time=None):
    """Solve, per stable edge, the 1-D problem behind the clipped reconstruction.

    Per edge the objective is ``(cap - f_avg)(t - t0) + (t - t0)**2 / (2 S)``
    on ``t >= t0``. Its derivative at ``t0`` is ``cap - f_avg``; when that is
    nonnegative the bound is active (``t = t0``) and the multiplier is the
    derivative itself, otherwise the free minimiser ``t0 + S (f_avg - cap)``
    is feasible and the multiplier vanishes. Returns ``(t, s)`` arrays.
    """
    f_avg = np.atleast_1d(np.asarray(f_avg, dtype=float))
    cap = np.broadcast_to(np.asarray(capacity, dtype=float), f_avg.shape)
    t0 = np.zeros_like(f_avg) if free_time is None else np.broadcast_to(
        np.asarray(free_time, dtype=float), f_avg.shape)
    if not step_sum > 0:
        raise ValueError("step_sum must be positive")
    t = np.empty_like(f_avg)
    s = np.empty_like(f_avg)
    for i in range(f_avg.size):
        slope = cap[i] - f_avg[i]
        if slope >= 0:
            t[i], s[i] = t0[i], slope
        else:
            t[i], s[i] = t0[i] + step_sum * (f_avg[i] - cap[i]), 0.0
    return t, s


# -- Wardrop certification -----------------------------------------------------

@dataclass(frozen=True)
class WardropCertificate:
    """Equilibrium residuals.

    ``spread[w] = max used-path cost - min path cost``;
    ``complementarity[e] = (t_e - t0_e)(cap_e - f_e)`` on stable edges;
    ``capacity_excess`` and ``bpr_cost_mismatch = |t_e - tau_e(f_e)|``
    cover the remaining equilibrium conditions.
    """

    min_cost: np.ndarray
    max_used_cost: np.ndarray
    spread: np.ndarray
    stable_edges: np.ndarray
    complementarity: np.ndarray
    capacity_excess: np.ndarray
    bpr_cost_mismatch: np.ndarray
    link_flow: np.ndarray

    @property
    def max_residual(self) -> float:
        parts = [self.spread, np.abs(self.complementarity), self.capacity_excess,
                 self.bpr_cost_mismatch]
        return float(max((np.max(p) if p.size else 0.0) for p in parts))

    def is_equilibrium(self, tol: float) -> bool:
        return self.max_residual <= tol


def certify_wardrop(net, pathset: PathSet, x, t, used_tol: float = 1e-9,
                    feas_tol: float = 1e-9) -> WardropCertificate:
    """Residuals of the equilibrium conditions for path flows ``x`` and edge costs ``t``."""
    paths, owner = pathset.flat()
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.shape != (len(paths),):
        raise InfeasiblePathFlows(f"expected {len(paths)} path flows, got {x.shape}")
    if np.any(x < -feas_tol):
        raise InfeasiblePathFlows("negative path flow")
    n_od = len(pathset.ods)
    demand = np.array([od[2] for od in pathset.ods])
    served = np.bincount(owner, weights=x, minlength=n_od)
    bad = np.abs(served - demand) > feas_tol * np.maximum(1.0, demand)
    if bad.any():
        w = int(np.flatnonzero(bad)[0])
        raise InfeasiblePathFlows(f"OD {pathset.ods[w][:2]} receives {served[w]}, "
                                  f"demand {demand[w]}")
    theta = pathset.incidence(net.n_edges)
    f = theta @ x
    path_cost = theta.T @ t
    min_cost = np.full(n_od, np.inf)
    max_used = np.full(n_od, -np.inf)
    np.minimum.at(min_cost, owner, path_cost)
    used = x > used_tol
    np.maximum.at(max_used, owner[used], path_cost[used])
    spread = np.maximum(max_used - min_cost, 0.0)
    st = np.flatnonzero(net.stable)
    comp = (t[st] - net.free_time[st]) * (net.capacity[st] - f[st])
    excess = np.maximum(f[st] - net.capacity[st], 0.0)
    b = ~net.stable
    mismatch = np.abs(t[b] - _bpr_time(net, f)[b])
    return WardropCertificate(min_cost, max_used, spread, st, comp, excess, mismatch, f)


def decompose_link_flows(net, pathset: PathSet, f) -> tuple:
    """Path flows meeting every demand exactly and matching ``f`` in least L1.

    Returns ``(x, l1_residual)``. A small linear program; one arbitrary
    decomposition among possibly many.
    """
    f = np.asarray(f, dtype=float)
    theta = pathset.incidence(net.n_edges)
    _, owner = pathset.flat()
    m, p = theta.shape
    n_od = len(pathset.ods)
    demand = np.array([od[2] for od in pathset.ods])
    # variables: x (p), r_plus (m), r_minus (m)
    eye = np.eye(m)
    a_eq = np.block([
        [theta, eye, -eye],
        [coo_matrix((np.ones(p), (owner, np.arange(p))), shape=(n_od, p)).toarray(),
         np.zeros((n_od, 2 * m))],
    ])
    b_eq = np.concatenate([f, demand])
    c = np.concatenate([np.zeros(p), np.ones(2 * m)])
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise InfeasiblePathFlows(f"path decomposition failed: {res.message}")
    x = np.maximum(res.x[:p], 0.0)
    # renormalise so each OD is served exactly
    served = np.bincount(owner, weights=x, minlength=n_od)
    x = x * (demand / np.where(served > 0, served, 1.0))[owner]
    return x, float(res.fun)
