"""TNTP input files, the regime-override sidecar, run configs and CSV reports.

Node ids are 1-based in every file and 0-based in memory; the offset is
applied on read and inverted on write. Floats are written with ``repr``
(shortest round-trip form), so reports re-read to identical values.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    AmbiguousSelector,
    ConfigError,
    DanglingEndpoint,
    InputError,
    InvalidDemand,
    InvalidRegime,
    MalformedHeader,
    MalformedOriginBlock,
    NegativeDemand,
    NonPositiveCapacity,
    NonPositiveFreeTime,
    ParseError,
    RowArityError,
    UnresolvedSelector,
)
from .link_costs import tau_array
from .network import Bpr, DemandMatrix, EdgeRecord, Network, StableDynamics, build_network
from .solver import RunConfig

NET_COLUMNS = ("init_node", "term_node", "capacity", "length", "free_flow_time",
               "b", "power", "speed", "toll", "link_type")
IGNORED_COLUMNS = ("length", "speed", "toll", "link_type")
# keywords that must appear in this order in an optional "~ Init node ..." header
_HEADER_KEYWORDS = ("init", "term", "capac", "length", "free", "power", "speed", "toll", "type")

REGIME_NAMES = ("stable_dynamics", "bpr")


def _num(text, source, line, what):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", source=source, line=line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what} must be finite, got {text!r}", source=source, line=line)
    return value


def _int(text, source, line, what):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", source=source, line=line) from None


def _split_metadata(lines, source, required):
    """Consume ``<KEY> value`` lines up to ``<END OF METADATA>``."""
    meta = {}
    for i, raw in enumerate(lines):
        s = raw.strip()
        if not s or s.startswith("~"):
            continue
        m = re.match(r"<([^>]+)>\s*(.*)$", s)
        if not m:
            raise MalformedHeader(f"expected a <TAG> metadata line, got {s!r}",
                                  source=source, line=i + 1)
        key = m.group(1).strip().upper()
        if key == "END OF METADATA":
            missing = [k for k in required if k not in meta]
            if missing:
                raise MalformedHeader(f"metadata lacks {', '.join(missing)}", source=source)
            return meta, i + 1
        meta[key] = (m.group(2).strip(), i + 1)
    raise MalformedHeader("missing <END OF METADATA>", source=source)


# -- network ------------------------------------------------------------------

class NetRow(NamedTuple):
    line: int
    tail: int
    head: int
    capacity: float
    length: float
    free_flow_time: float
    b: float
    power: float
    speed: float
    toll: float
    link_type: str


class ParsedNetwork(NamedTuple):
    n_nodes: int
    edges: list
    rows: list


def _check_column_header(text, source, line):
    low = text.lower()
    if "init" not in low or "term" not in low:
        return
    pos = []
    for kw in _HEADER_KEYWORDS:
        p = low.find(kw)
        if p < 0:
            raise MalformedHeader(f"column header lacks {kw!r}; only the canonical "
                                  f"column order {NET_COLUMNS} is supported",
                                  source=source, line=line)
        pos.append(p)
    if pos != sorted(pos):
        raise MalformedHeader(f"non-canonical column order; expected {NET_COLUMNS}",
                              source=source, line=line)


def parse_tntp_network(text: str, source: Optional[str] = None) -> ParsedNetwork:
    """Parse a ``*_net.tntp`` file into BPR edge records (0-based nodes)."""
    lines = text.splitlines()
    meta, start = _split_metadata(lines, source, ("NUMBER OF NODES", "NUMBER OF LINKS"))
    n_nodes = _int(meta["NUMBER OF NODES"][0], source, meta["NUMBER OF NODES"][1], "node count")
    n_links = _int(meta["NUMBER OF LINKS"][0], source, meta["NUMBER OF LINKS"][1], "link count")
    if n_nodes < 2 or n_links < 1:
        raise MalformedHeader("node count must be >= 2 and link count >= 1", source=source)

    rows = []
    for i in range(start, len(lines)):
        lineno = i + 1
        s = lines[i].strip()
        if not s:
            continue
        if s.startswith("~"):
            _check_column_header(s[1:], source, lineno)
            continue
        body = s[:-1] if s.endswith(";") else s
        parts = body.split()
        if len(parts) != len(NET_COLUMNS):
            raise RowArityError(f"expected {len(NET_COLUMNS)} fields, got {len(parts)}",
                                source=source, line=lineno)
        tail = _int(parts[0], source, lineno, "init_node")
        head = _int(parts[1], source, lineno, "term_node")
        vals = [_num(p, source, lineno, name) for p, name in zip(parts[2:9], NET_COLUMNS[2:9])]
        cap, length, fft, b, power, speed, toll = vals
        for node in (tail, head):
            if not 1 <= node <= n_nodes:
                raise DanglingEndpoint(f"node {node} outside 1..{n_nodes}",
                                       source=source, line=lineno)
        if cap <= 0:
            raise NonPositiveCapacity(f"capacity {parts[2]} must be positive",
                                      source=source, line=lineno)
        if fft <= 0:
            raise NonPositiveFreeTime(f"free_flow_time {parts[4]} must be positive",
                                      source=source, line=lineno)
        if b < 0 or power <= 1:
            raise InvalidRegime(f"need b >= 0 and power > 1, got b={parts[5]} power={parts[6]}",
                                source=source, line=lineno)
        rows.append(NetRow(lineno, tail - 1, head - 1, cap, length, fft, b, power, speed,
                           toll, parts[9]))
    if len(rows) != n_links:
        raise RowArityError(f"header declares {n_links} links, found {len(rows)} rows",
                            source=source)
    edges = [
        EdgeRecord(i, r.tail, r.head, Bpr(free_time=r.free_flow_time, gamma=r.b,
                                          capacity=r.capacity, power=r.power))
        for i, r in enumerate(rows)
    ]
    return ParsedNetwork(n_nodes, edges, rows)


# -- trips --------------------------------------------------------------------

_ENTRY = re.compile(r"(\S+)\s*:\s*([^;\s]+)\s*;?")


def parse_tntp_trips(text: str, source: Optional[str] = None, n_nodes: Optional[int] = None
                     ) -> DemandMatrix:
    """Parse a ``*_trips.tntp`` file; zero entries are dropped."""
    lines = text.splitlines()
    start = 0
    if any(l.strip().upper().startswith("<END OF METADATA>") for l in lines):
        _, start = _split_metadata(lines, source, ())
    origin = None
    entries = []
    seen = {}
    for i in range(start, len(lines)):
        lineno = i + 1
        s = lines[i].strip()
        if not s or s.startswith("~"):
            continue
        if s.lower().startswith("origin"):
            parts = s.split()
            if len(parts) != 2:
                raise MalformedOriginBlock(f"bad origin line {s!r}", source=source, line=lineno)
            origin = _int(parts[1], source, lineno, "origin")
            if origin < 1 or (n_nodes is not None and origin > n_nodes):
                raise DanglingEndpoint(f"origin {origin} outside the node range",
                                       source=source, line=lineno)
            continue
        if origin is None:
            raise MalformedOriginBlock("demand entry before any 'Origin' line",
                                       source=source, line=lineno)
        leftover = _ENTRY.sub("", s).strip()
        if leftover:
            raise MalformedOriginBlock(f"unparseable text {leftover!r}", source=source, line=lineno)
        for dest_txt, val_txt in _ENTRY.findall(s):
            dest = _int(dest_txt, source, lineno, "destination")
            d = _num(val_txt, source, lineno, "demand")
            if dest < 1 or (n_nodes is not None and dest > n_nodes):
                raise DanglingEndpoint(f"destination {dest} outside the node range",
                                       source=source, line=lineno)
            if d < 0:
                raise NegativeDemand(f"demand {val_txt} for ({origin}, {dest}) is negative",
                                     source=source, line=lineno)
            key = (origin, dest)
            if key in seen:
                raise InvalidDemand(f"pair {key} repeated (first on line {seen[key]})",
                                    source=source, line=lineno)
            seen[key] = lineno
            if d == 0:
                continue
            if dest == origin:
                raise InvalidDemand(f"positive demand from node {origin} to itself",
                                    source=source, line=lineno)
            entries.append((origin - 1, dest - 1, d))
    return DemandMatrix(entries)


# -- regime overrides ---------------------------------------------------------

@dataclass(frozen=True)
class RegimeOverride:
    edge_id: int
    regime: str  # "stable_dynamics" | "bpr"
    line: int


def parse_regime_overrides(text: str, edges, source: Optional[str] = None) -> list:
    """Resolve ``tail head [occurrence] stable_dynamics|bpr`` lines against ``edges``.

    Node ids are 1-based; ``occurrence`` (1-based, in edge-id order) picks
    one of several parallel edges and is required when they exist.
    """
    by_pair = {}
    for e in edges:
        by_pair.setdefault((e.tail, e.head), []).append(e.id)
    out = []
    used = {}
    for i, raw in enumerate(text.splitlines()):
        lineno = i + 1
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) not in (3, 4):
            raise RowArityError("expected 'tail head [occurrence] regime'",
                                source=source, line=lineno)
        regime = parts[-1].lower()
        if regime not in REGIME_NAMES:
            raise ParseError(f"unknown regime {parts[-1]!r}; use one of {REGIME_NAMES}",
                             source=source, line=lineno)
        tail = _int(parts[0], source, lineno, "tail")
        head = _int(parts[1], source, lineno, "head")
        candidates = by_pair.get((tail - 1, head - 1), [])
        if not candidates:
            raise UnresolvedSelector(f"no edge {tail} -> {head}", source=source, line=lineno)
        if len(parts) == 4:
            occ = _int(parts[2], source, lineno, "occurrence")
            if not 1 <= occ <= len(candidates):
                raise UnresolvedSelector(
                    f"edge {tail} -> {head} has {len(candidates)} occurrence(s), asked for {occ}",
                    source=source, line=lineno)
            eid = candidates[occ - 1]
        elif len(candidates) > 1:
            raise AmbiguousSelector(
                f"{len(candidates)} parallel edges {tail} -> {head}; give an occurrence index",
                source=source, line=lineno)
        else:
            eid = candidates[0]
        if eid in used:
            raise AmbiguousSelector(f"edge {tail} -> {head} already overridden on line {used[eid]}",
                                    source=source, line=lineno)
        used[eid] = lineno
        out.append(RegimeOverride(eid, regime, lineno))
    return out


def apply_overrides(edges, overrides) -> list:
    """Stable-dynamics overrides keep free time and capacity and drop the BPR terms."""
    chosen = {o.edge_id: o.regime for o in overrides}
    out = []
    for e in edges:
        if chosen.get(e.id) == "stable_dynamics":
            r = e.regime
            e = EdgeRecord(e.id, e.tail, e.head, StableDynamics(r.free_time, r.capacity))
        out.append(e)
    return out


# -- run configuration --------------------------------------------------------

_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}
_CONVERT = {"float": float, "int": int, "str": str,
            "Optional[float]": float, "Optional[int]": int}


def parse_config(text: str, source: Optional[str] = None) -> dict:
    """Flat ``key = value`` file -> keyword arguments for :class:`RunConfig`."""
    out = {}
    for i, raw in enumerate(text.splitlines()):
        lineno = i + 1
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", source=source, line=lineno)
        key, value = (x.strip() for x in s.split("=", 1))
        key = key.replace("-", "_").lower()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"unknown key {key!r}", source=source, line=lineno)
        conv = _CONVERT[str(_CONFIG_TYPES[key])]
        try:
            out[key] = conv(value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key}", source=source, line=lineno) from None
    return out


# -- loading ------------------------------------------------------------------

def load_network(net_path, trips_path, regimes_path=None) -> Network:
    """Read TNTP network + trips (+ optional regime sidecar) into a :class:`Network`."""
    net_path, trips_path = Path(net_path), Path(trips_path)
    parsed = parse_tntp_network(net_path.read_text(), source=str(net_path))
    demands = parse_tntp_trips(trips_path.read_text(), source=str(trips_path),
                               n_nodes=parsed.n_nodes)
    edges = parsed.edges
    if regimes_path is not None:
        regimes_path = Path(regimes_path)
        overrides = parse_regime_overrides(regimes_path.read_text(), edges,
                                           source=str(regimes_path))
        edges = apply_overrides(edges, overrides)
    for e, row in zip(edges, parsed.rows):
        if isinstance(e.regime, Bpr) and e.regime.gamma == 0:
            raise InvalidRegime("BPR row with b = 0; override the edge to stable_dynamics",
                                source=str(net_path), line=row.line)
    try:
        return build_network(parsed.n_nodes, edges, demands)
    except InputError as exc:
        if exc.source is None:
            exc.args = (f"{net_path}: {exc}",)
        raise


# -- reports ------------------------------------------------------------------

FLOW_COLUMNS = ("edge_id", "tail", "head", "regime", "flow", "toll", "cost", "capacity",
                "violation")
TRACE_COLUMNS = ("k", "dual_value", "primal_value", "gap", "best_gap", "M_k", "S_N",
                 "violation_norm", "radius")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def format_flow_table(net: Network, flow, toll, meta: dict = ()) -> str:
    """Per-edge CSV; ``meta`` items become leading ``# key: value`` lines."""
    flow = np.asarray(flow, dtype=float)
    toll = np.asarray(toll, dtype=float)
    cost = tau_array(net, flow)
    excess = np.where(net.stable, np.maximum(flow - net.capacity, 0.0), 0.0)
    buf = io.StringIO()
    for key, value in dict(meta).items():
        buf.write(f"# {key}: {value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FLOW_COLUMNS)
    for e in net.edges:
        i = e.id
        w.writerow([i, e.tail + 1, e.head + 1, e.regime.name, _fmt(flow[i]), _fmt(toll[i]),
                    _fmt(cost[i]), _fmt(net.capacity[i]), _fmt(excess[i])])
    return buf.getvalue()


def report_meta(report) -> dict:
    return {
        "status": report.status,
        "mode": report.mode,
        "iterations": report.iterations,
        "epsilon": _fmt(report.epsilon),
        "epsilon_tilde": "" if report.epsilon_tilde is None else _fmt(report.epsilon_tilde),
        "dual_value": _fmt(report.dual_value),
        "primal_value": _fmt(report.primal_value),
        "gap": _fmt(report.gap),
        "violation_norm": _fmt(report.violation_norm),
        "ignored_tntp_columns": " ".join(IGNORED_COLUMNS),
    }


def format_trace(trace, wall_time: bool = False) -> str:
    cols = TRACE_COLUMNS + (("wall_time",) if wall_time else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in trace:
        w.writerow([_fmt(getattr(row, c)) for c in cols])
    return buf.getvalue()


def write_report(net: Network, report, trace, wall_time: bool = False):
    """``(flows_csv, trace_csv)`` texts for a finished or aborted solve."""
    flows = format_flow_table(net, report.f_bar, report.t_bar, report_meta(report))
    return flows, format_trace(trace, wall_time=wall_time)


@dataclass(frozen=True)
class FlowTable:
    meta: dict
    edge_id: np.ndarray
    tail: np.ndarray  # 0-based
    head: np.ndarray
    regime: tuple
    flow: np.ndarray
    toll: np.ndarray
    cost: np.ndarray
    capacity: np.ndarray
    violation: np.ndarray


def read_flow_table(text: str, source: Optional[str] = None) -> FlowTable:
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.reader(body)
    header = next(reader, None)
    if header is None or tuple(header) != FLOW_COLUMNS:
        raise MalformedHeader(f"flow table header must be {','.join(FLOW_COLUMNS)}",
                              source=source)
    rows = list(reader)
    for k, r in enumerate(rows):
        if len(r) != len(FLOW_COLUMNS):
            raise RowArityError(f"expected {len(FLOW_COLUMNS)} fields", source=source, line=k + 2)
    cols = list(zip(*rows)) if rows else [()] * len(FLOW_COLUMNS)
    as_f = lambda c: np.array([float(x) for x in c], dtype=float)
    as_i = lambda c: np.array([int(x) for x in c], dtype=np.int64)
    return FlowTable(meta=meta, edge_id=as_i(cols[0]), tail=as_i(cols[1]) - 1,
                     head=as_i(cols[2]) - 1, regime=tuple(cols[3]), flow=as_f(cols[4]),
                     toll=as_f(cols[5]), cost=as_f(cols[6]), capacity=as_f(cols[7]),
                     violation=as_f(cols[8]))


def flow_table_violation_norm(table: FlowTable) -> float:
    v = table.violation[np.array([r == "stable_dynamics" for r in table.regime], dtype=bool)]
    return math.sqrt(math.fsum(v * v))


def write_text_atomic(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
