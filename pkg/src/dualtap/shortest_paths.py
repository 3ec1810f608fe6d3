"""All-or-nothing subgradient oracle.

For tolls ``t`` the oracle returns ``sum_w d_w T_w(t)`` (``T_w`` the
shortest-path cost of pair ``w``), the all-or-nothing flow
``f = -dF(t)`` and ``M = ||f||_2``. One Dijkstra tree per origin; the
tree is loaded by reverse accumulation in settle order, so each origin
costs O(|E| log |V|) regardless of how many destinations it serves.

Determinism: every tree edge receives exactly one load value per origin
and partial results are added into the flow vector in ascending origin
order, so the result is bitwise independent of the worker count.
"""

from __future__ import annotations

import heapq
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import multiprocessing as mp

import numpy as np
from numba import njit

from .errors import UnreachableDemandedDestination
from .link_costs import sigma_conj_array


@dataclass(frozen=True)
class ShortestPathTree:
    origin: int
    dist: np.ndarray
    parent_edge: np.ndarray  # -1 where there is no parent
    order: np.ndarray  # settled nodes in nondecreasing distance


@dataclass(frozen=True)
class SubgradientResult:
    """Oracle output at one toll vector.

    ``cost_sum`` is ``sum_w d_w T_w(t)``, i.e. ``-F(t)``; ``flow`` is the
    all-or-nothing assignment ``-dF(t)``; ``M = ||flow||_2``.
    """

    cost_sum: float
    flow: np.ndarray
    M: float

    @property
    def F_value(self) -> float:
        return -self.cost_sum


# -- kernels ------------------------------------------------------------------

@njit(cache=True)
def _sssp(adj_ptr, adj_edge, adj_head, t, origin, dist, parent, order):
    n = dist.size
    for i in range(n):
        dist[i] = np.inf
        parent[i] = -1
    done = np.zeros(n, dtype=np.bool_)
    dist[origin] = 0.0
    heap = [(0.0, np.int64(origin))]
    count = 0
    while len(heap) > 0:
        _, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        order[count] = u
        count += 1
        du = dist[u]
        for k in range(adj_ptr[u], adj_ptr[u + 1]):
            v = adj_head[k]
            if done[v]:
                continue
            e = adj_edge[k]
            nd = du + t[e]
            if nd < dist[v]:
                dist[v] = nd
                parent[v] = e
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and e < parent[v]:
                parent[v] = e
    return count


@njit(cache=True)
def _load(origin, count, order, parent, dist, tail, dests, amounts, load, out_edge, out_val):
    """Reverse accumulation over one tree.

    Writes (edge, load) pairs for loaded tree edges into ``out_*`` and
    returns ``(n_written, cost_sum, bad)`` where ``bad`` is the index of
    the first unreachable destination or -1.
    """
    cost = 0.0
    for i in range(dests.size):
        j = dests[i]
        if dist[j] == np.inf:
            return 0, 0.0, i
        load[j] += amounts[i]
        cost += amounts[i] * dist[j]
    written = 0
    for idx in range(count - 1, 0, -1):
        v = order[idx]
        lv = load[v]
        if lv != 0.0:
            e = parent[v]
            out_edge[written] = e
            out_val[written] = lv
            written += 1
            load[tail[e]] += lv
            load[v] = 0.0
    load[origin] = 0.0
    return written, cost, -1


@njit(cache=True)
def _run_origins(adj_ptr, adj_edge, adj_head, tail, t, origins, dem_ptr, dem_dest,
                 dem_amount, lo, hi, out_ptr, out_edge, out_val, costs):
    """Trees for origin indices ``lo..hi-1``; sparse per-origin loads.

    Returns the index of the failing origin (and sets ``costs`` slot to the
    destination index) on unreachable demand, else -1.
    """
    n = adj_ptr.size - 1
    dist = np.empty(n)
    parent = np.empty(n, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    load = np.zeros(n)
    out_ptr[0] = 0
    for i in range(lo, hi):
        o = origins[i]
        count = _sssp(adj_ptr, adj_edge, adj_head, t, o, dist, parent, order)
        a, b = dem_ptr[i], dem_ptr[i + 1]
        base = out_ptr[i - lo]
        w, c, bad = _load(o, count, order, parent, dist, tail, dem_dest[a:b],
                          dem_amount[a:b], load, out_edge[base:], out_val[base:])
        if bad >= 0:
            costs[i - lo] = bad
            return i
        out_ptr[i - lo + 1] = base + w
        costs[i - lo] = c
    return -1


@njit(cache=True)
def _accumulate(out_ptr, out_edge, out_val, costs, flow, total):
    for i in range(costs.size):
        for k in range(out_ptr[i], out_ptr[i + 1]):
            flow[out_edge[k]] += out_val[k]
        total += costs[i]
    return total


# -- single-tree API ----------------------------------------------------------

def dijkstra(net, t, origin: int) -> ShortestPathTree:
    """Shortest-path tree from ``origin``; ties go to the smaller edge id."""
    t = np.ascontiguousarray(t, dtype=float)
    n = net.n_nodes
    dist = np.empty(n)
    parent = np.empty(n, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    count = _sssp(net.adj_ptr, net.adj_edge, net.adj_head, t, int(origin), dist, parent, order)
    return ShortestPathTree(int(origin), dist, parent, order[:count].copy())


def load_tree(net, tree: ShortestPathTree, dests, amounts):
    """Load demands of one origin onto its tree: ``(flow, cost_sum)``."""
    dests = np.asarray(dests, dtype=np.int64)
    amounts = np.asarray(amounts, dtype=float)
    n = net.n_nodes
    load = np.zeros(n)
    out_edge = np.empty(max(n - 1, 1), dtype=np.int64)
    out_val = np.empty(max(n - 1, 1))
    count = tree.order.size
    order = np.empty(n, dtype=np.int64)
    order[:count] = tree.order
    w, cost, bad = _load(tree.origin, count, order, tree.parent_edge, tree.dist, net.tail,
                         dests, amounts, load, out_edge, out_val)
    if bad >= 0:
        raise UnreachableDemandedDestination(tree.origin, int(dests[bad]))
    flow = np.zeros(net.n_edges)
    flow[out_edge[:w]] = out_val[:w]
    return flow, cost


# -- full oracle --------------------------------------------------------------

def _chunk_bounds(n_origins, workers):
    workers = max(1, min(workers, n_origins))
    edges = np.linspace(0, n_origins, workers + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _solve_chunk(arrays, t, lo, hi):
    adj_ptr, adj_edge, adj_head, tail, origins, dem_ptr, dem_dest, dem_amount = arrays
    n = adj_ptr.size - 1
    k = hi - lo
    out_ptr = np.zeros(k + 1, dtype=np.int64)
    out_edge = np.empty(k * max(n - 1, 1), dtype=np.int64)
    out_val = np.empty(k * max(n - 1, 1))
    costs = np.zeros(k)
    bad = _run_origins(adj_ptr, adj_edge, adj_head, tail, t, origins, dem_ptr, dem_dest,
                       dem_amount, lo, hi, out_ptr, out_edge, out_val, costs)
    if bad >= 0:
        dest_idx = int(costs[bad - lo])
        return None, (int(origins[bad]), int(dem_dest[dem_ptr[bad] + dest_idx]))
    m = out_ptr[-1]
    return (out_ptr, out_edge[:m].copy(), out_val[:m].copy(), costs), None


_WORKER_ARRAYS = None


def _init_worker(arrays):
    global _WORKER_ARRAYS
    _WORKER_ARRAYS = arrays


def _worker_task(t, lo, hi):
    return _solve_chunk(_WORKER_ARRAYS, t, lo, hi)


def _net_arrays(net):
    return (net.adj_ptr, net.adj_edge, net.adj_head, net.tail, net.origins,
            net.dem_ptr, net.dem_dest, net.dem_amount)


class SubgradientOracle:
    """Reusable oracle; with ``worker_count > 1`` origins are split over processes.

    Use as a context manager (or call :meth:`close`) to release the pool.
    """

    def __init__(self, net, worker_count: int = 1):
        if worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        self.net = net
        self.worker_count = int(worker_count)
        self._arrays = _net_arrays(net)
        self._chunks = _chunk_bounds(len(net.origins), self.worker_count)
        self._pool = None
        if len(self._chunks) > 1:
            ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
            self._pool = ProcessPoolExecutor(
                max_workers=len(self._chunks), mp_context=ctx,
                initializer=_init_worker, initargs=(self._arrays,),
            )

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __call__(self, t) -> SubgradientResult:
        t = np.ascontiguousarray(t, dtype=float)
        if t.shape != (self.net.n_edges,) or not np.all(np.isfinite(t)):
            raise ValueError("toll vector must be finite with one entry per edge")
        if self._pool is None:
            parts = [_solve_chunk(self._arrays, t, lo, hi) for lo, hi in self._chunks]
        else:
            futures = [self._pool.submit(_worker_task, t, lo, hi) for lo, hi in self._chunks]
            parts = [f.result() for f in futures]
        flow = np.zeros(self.net.n_edges)
        total = 0.0
        for part, bad in parts:
            if bad is not None:
                raise UnreachableDemandedDestination(*bad)
            # chunks arrive in origin order; the running sum continues across them
            total = _accumulate(*part, flow, total)
        return SubgradientResult(total, flow, math.sqrt(float(flow @ flow)))


def compute_subgradient(net, t, worker_count: int = 1) -> SubgradientResult:
    with SubgradientOracle(net, worker_count) as oracle:
        return oracle(t)


def dual_value(net, t, oracle=None) -> float:
    """Dual objective ``-sum_w d_w T_w(t) + sum_e sigma*_e(t_e)``."""
    res = (oracle or SubgradientOracle(net))(t)
    return -res.cost_sum + math.fsum(sigma_conj_array(net, t))


def default_worker_count() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)
