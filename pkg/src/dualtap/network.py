"""Immutable transport network: directed multigraph, per-edge cost regimes, OD demand."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import (
    DanglingEndpoint,
    DuplicateEdgeId,
    EmptyDemand,
    InvalidDemand,
    InvalidRegime,
    SelfLoop,
)


@dataclass(frozen=True)
class Bpr:
    """BPR congestion regime ``t(f) = free_time * (1 + gamma * (f / capacity) ** power)``."""

    free_time: float
    gamma: float
    capacity: float
    power: float = 4.0

    def __post_init__(self):
        if not (self.free_time > 0 and math.isfinite(self.free_time)):
            raise InvalidRegime(f"free_time must be positive, got {self.free_time}")
        if not (self.capacity > 0 and math.isfinite(self.capacity)):
            raise InvalidRegime(f"capacity must be positive, got {self.capacity}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise InvalidRegime(f"gamma must be nonnegative, got {self.gamma}")
        if not self.power > 1:
            raise InvalidRegime(f"power must exceed 1, got {self.power}")

    name = "bpr"


@dataclass(frozen=True)
class StableDynamics:
    """Constant cost ``free_time`` below ``capacity``; the toll is free at capacity."""

    free_time: float
    capacity: float

    def __post_init__(self):
        if not (self.free_time > 0 and math.isfinite(self.free_time)):
            raise InvalidRegime(f"free_time must be positive, got {self.free_time}")
        if not (self.capacity > 0 and math.isfinite(self.capacity)):
            raise InvalidRegime(f"capacity must be positive, got {self.capacity}")

    name = "stable_dynamics"


CostRegime = Union[Bpr, StableDynamics]


@dataclass(frozen=True)
class EdgeRecord:
    id: int
    tail: int
    head: int
    regime: CostRegime


@dataclass(frozen=True)
class OD:
    origin: int
    dest: int
    demand: float


@dataclass(frozen=True)
class DemandMatrix:
    """Correspondences with strictly positive demand, no duplicate pairs."""

    entries: tuple

    def __init__(self, entries: Iterable):
        items = []
        seen = set()
        for e in entries:
            od = e if isinstance(e, OD) else OD(int(e[0]), int(e[1]), float(e[2]))
            if od.origin == od.dest:
                raise InvalidDemand(f"origin equals destination ({od.origin})")
            if not (od.demand > 0 and math.isfinite(od.demand)):
                raise InvalidDemand(
                    f"demand for ({od.origin}, {od.dest}) must be positive, got {od.demand}"
                )
            key = (od.origin, od.dest)
            if key in seen:
                raise InvalidDemand(f"duplicate OD pair {key}")
            seen.add(key)
            items.append(od)
        object.__setattr__(self, "entries", tuple(items))

    @property
    def origins(self) -> tuple:
        return tuple(sorted({od.origin for od in self.entries}))

    @property
    def total(self) -> float:
        return math.fsum(od.demand for od in self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True, eq=False)
class Network:
    """Validated network with flat per-edge arrays and a CSR adjacency.

    Edges are stored in id order, so every per-edge array is indexed by
    edge id. Adjacency lists are sorted by edge id within each tail node.
    Demands are grouped by origin (ascending), destinations ascending
    within each group; this order fixes every floating-point reduction.
    """

    n_nodes: int
    edges: tuple
    demands: DemandMatrix
    tail: np.ndarray = field(repr=False)
    head: np.ndarray = field(repr=False)
    free_time: np.ndarray = field(repr=False)
    capacity: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    power: np.ndarray = field(repr=False)
    stable: np.ndarray = field(repr=False)
    adj_ptr: np.ndarray = field(repr=False)
    adj_edge: np.ndarray = field(repr=False)
    adj_head: np.ndarray = field(repr=False)
    origins: np.ndarray = field(repr=False)
    dem_ptr: np.ndarray = field(repr=False)
    dem_dest: np.ndarray = field(repr=False)
    dem_amount: np.ndarray = field(repr=False)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def stable_edges(self) -> np.ndarray:
        return np.flatnonzero(self.stable)

    @property
    def is_pure_beckmann(self) -> bool:
        return not bool(self.stable.any())

    def out_edges(self, node: int) -> np.ndarray:
        return self.adj_edge[self.adj_ptr[node]:self.adj_ptr[node + 1]]

    def demands_from(self, origin_index: int):
        """(dest array, demand array) for the ``origin_index``-th origin."""
        lo, hi = self.dem_ptr[origin_index], self.dem_ptr[origin_index + 1]
        return self.dem_dest[lo:hi], self.dem_amount[lo:hi]

    def with_regimes(self, regimes: dict) -> "Network":
        """Copy of the network with selected edges switched to new regimes."""
        edges = [
            EdgeRecord(e.id, e.tail, e.head, regimes.get(e.id, e.regime))
            for e in self.edges
        ]
        return build_network(self.n_nodes, edges, self.demands)


def build_network(nodes, edges: Sequence, demands) -> Network:
    """Validate inputs and build the immutable :class:`Network`.

    ``nodes`` is the node count ``n`` (nodes are ``0..n-1``) or an iterable
    of node ids that must be exactly ``0..n-1``. ``edges`` holds
    :class:`EdgeRecord` items whose ids must be a permutation of
    ``0..len(edges)-1``. ``demands`` is a :class:`DemandMatrix` or an
    iterable of ``(origin, dest, demand)`` triples.
    """
    if isinstance(nodes, (int, np.integer)):
        n = int(nodes)
    else:
        ids = sorted(int(v) for v in nodes)
        n = len(ids)
        if ids != list(range(n)):
            raise DanglingEndpoint("node ids must be dense in [0, n)")
    if n < 2:
        raise InvalidDemand(f"a network needs at least two nodes, got {n}")

    edges = list(edges)
    by_id = {}
    for e in edges:
        if e.id in by_id:
            raise DuplicateEdgeId(f"edge id {e.id} appears more than once")
        by_id[e.id] = e
    if sorted(by_id) != list(range(len(edges))):
        raise DuplicateEdgeId("edge ids must be dense in [0, |E|)")
    edges = [by_id[i] for i in range(len(edges))]
    for e in edges:
        if not (0 <= e.tail < n and 0 <= e.head < n):
            raise DanglingEndpoint(
                f"edge {e.id} ({e.tail} -> {e.head}) has an endpoint outside [0, {n})"
            )
        if e.tail == e.head:
            raise SelfLoop(f"edge {e.id} is a self-loop at node {e.tail}")
        if isinstance(e.regime, Bpr) and e.regime.gamma == 0:
            raise InvalidRegime(
                f"edge {e.id} ({e.tail} -> {e.head}) is BPR with gamma = 0; "
                "declare it stable_dynamics with an explicit capacity"
            )

    if not isinstance(demands, DemandMatrix):
        demands = DemandMatrix(demands)
    if len(demands) == 0:
        raise EmptyDemand("demand matrix has no positive entries")
    for od in demands:
        if not (0 <= od.origin < n and 0 <= od.dest < n):
            raise DanglingEndpoint(
                f"OD pair ({od.origin}, {od.dest}) references a node outside [0, {n})"
            )

    m = len(edges)
    tail = np.fromiter((e.tail for e in edges), dtype=np.int64, count=m)
    head = np.fromiter((e.head for e in edges), dtype=np.int64, count=m)
    free_time = np.array([e.regime.free_time for e in edges], dtype=float)
    capacity = np.array([e.regime.capacity for e in edges], dtype=float)
    stable = np.array([isinstance(e.regime, StableDynamics) for e in edges], dtype=bool)
    gamma = np.array(
        [0.0 if isinstance(e.regime, StableDynamics) else e.regime.gamma for e in edges],
        dtype=float,
    )
    power = np.array(
        [1.0 if isinstance(e.regime, StableDynamics) else e.regime.power for e in edges],
        dtype=float,
    )

    # stable sort keeps edge-id order inside each tail bucket
    order = np.argsort(tail, kind="stable")
    adj_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(adj_ptr, tail + 1, 1)
    adj_ptr = np.cumsum(adj_ptr)
    adj_edge = order.astype(np.int64)
    adj_head = head[order]

    grouped = sorted(demands.entries, key=lambda od: (od.origin, od.dest))
    origins = np.array(sorted({od.origin for od in grouped}), dtype=np.int64)
    dem_ptr = np.zeros(len(origins) + 1, dtype=np.int64)
    pos = {int(o): i for i, o in enumerate(origins)}
    for od in grouped:
        dem_ptr[pos[od.origin] + 1] += 1
    dem_ptr = np.cumsum(dem_ptr)
    dem_dest = np.array([od.dest for od in grouped], dtype=np.int64)
    dem_amount = np.array([od.demand for od in grouped], dtype=float)

    for arr in (tail, head, free_time, capacity, gamma, power, stable,
                adj_ptr, adj_edge, adj_head, origins, dem_ptr, dem_dest, dem_amount):
        arr.setflags(write=False)

    return Network(
        n_nodes=n, edges=tuple(edges), demands=demands,
        tail=tail, head=head, free_time=free_time, capacity=capacity,
        gamma=gamma, power=power, stable=stable,
        adj_ptr=adj_ptr, adj_edge=adj_edge, adj_head=adj_head,
        origins=origins, dem_ptr=dem_ptr, dem_dest=dem_dest, dem_amount=dem_amount,
    )


def validate_reachability(net: Network) -> list:
    """OD pairs ``(origin, dest)`` whose destination cannot be reached."""
    bad = []
    for i, origin in enumerate(net.origins):
        seen = np.zeros(net.n_nodes, dtype=bool)
        seen[origin] = True
        queue = deque([int(origin)])
        while queue:
            u = queue.popleft()
            for v in net.adj_head[net.adj_ptr[u]:net.adj_ptr[u + 1]]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(int(v))
        dests, _ = net.demands_from(i)
        bad.extend((int(origin), int(j)) for j in dests if not seen[j])
    return bad
