"""``dualtap`` command line.

Exit codes: 0 success / converged, 1 input error, 2 internal error,
3 finished without convergence (or, for ``oracle wardrop-check``, the
flows are not certified as an equilibrium).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DualTapError, InputError, ParseError
from .network import validate_reachability
from .reference import (
    DEFAULT_PATH_CAP,
    certify_wardrop,
    decompose_link_flows,
    enumerate_paths,
    frank_wolfe_beckmann,
)
from .shortest_paths import default_worker_count
from .solver import RunConfig, solve
from .tntp import (
    format_flow_table,
    load_network,
    parse_config,
    read_flow_table,
    write_report,
    write_text_atomic,
)

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL, EXIT_NOT_CONVERGED = 0, 1, 2, 3
OUTPUT_ENV = "DUALTAP_OUTPUT_DIR"

log = logging.getLogger("dualtap")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _add_inputs(p, regimes=True):
    p.add_argument("--net", required=True, type=Path, help="TNTP *_net.tntp file")
    p.add_argument("--trips", required=True, type=Path, help="TNTP *_trips.tntp file")
    if regimes:
        p.add_argument("--regimes", type=Path,
                       help="sidecar of 'tail head [occurrence] stable_dynamics|bpr' lines")


def _add_output(p):
    p.add_argument("--output-dir", type=Path,
                   help=f"where to write results (default: ${OUTPUT_ENV} or the current directory)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dualtap", description="Mixed Beckmann / stable-dynamics traffic "
                                             "equilibrium by dual composite mirror descent.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="compute an equilibrium and write flows/trace/summary")
    _add_inputs(p)
    p.add_argument("--config", type=Path, help="flat 'key = value' run configuration")
    eps = p.add_mutually_exclusive_group()
    eps.add_argument("--epsilon", type=float, help="absolute duality-gap target")
    eps.add_argument("--epsilon-relative", type=float,
                     help="gap target relative to the potential of the first all-or-nothing flow")
    p.add_argument("--epsilon-tilde", type=float, help="capacity-violation target (mode B)")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--gap-check-period", type=int)
    p.add_argument("--mode", choices=("A", "B", "a", "b"))
    p.add_argument("--worker-count", type=int,
                   help="processes for the shortest-path oracle (default: available CPUs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--time-limit", type=float, help="wall-clock seconds before giving up")
    p.add_argument("--gap-tolerance", type=float,
                   help="slack below zero still accepted as a nonnegative mode-A gap")
    p.add_argument("--trace-timing", action="store_true",
                   help="add a wall_time column to trace.csv (output no longer byte-stable)")
    _add_output(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="parse inputs and report network statistics")
    _add_inputs(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("oracle", help="reference tools for small instances and fixtures")
    osub = p.add_subparsers(dest="tool", required=True, parser_class=_Parser)
    q = osub.add_parser("frank-wolfe", help="Frank-Wolfe flows for an all-BPR network")
    _add_inputs(q)
    q.add_argument("--tol", type=float, default=1e-4, help="relative gap target")
    q.add_argument("--max-iter", type=int, default=100_000)
    _add_output(q)
    q.set_defaults(func=cmd_oracle_frank_wolfe)
    q = osub.add_parser("wardrop-check", help="certify a flows.csv as an equilibrium")
    _add_inputs(q)
    q.add_argument("--flows", required=True, type=Path, help="flows.csv from solve")
    q.add_argument("--tol", type=float, default=1e-3)
    q.add_argument("--cap", type=int, default=DEFAULT_PATH_CAP)
    q.set_defaults(func=cmd_oracle_wardrop)
    q = osub.add_parser("paths", help="enumerate simple paths per OD pair")
    _add_inputs(q)
    q.add_argument("--cap", type=int, default=DEFAULT_PATH_CAP)
    q.set_defaults(func=cmd_oracle_paths)

    p = sub.add_parser("convert", help="flows.csv -> TNTP *_flow.tntp (From To Volume Cost)")
    p.add_argument("--flows", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_convert)
    return ap


def _output_dir(args) -> Path:
    if args.output_dir is not None:
        return args.output_dir
    return Path(os.environ.get(OUTPUT_ENV, "."))


def _require_files(*paths):
    for path in paths:
        if path is not None and not path.is_file():
            raise InputError(f"no such file: {path}", source=str(path))


def _load(args):
    regimes = getattr(args, "regimes", None)
    _require_files(args.net, args.trips, regimes)
    return load_network(args.net, args.trips, regimes)


def _run_config(args) -> RunConfig:
    values = {}
    if args.config is not None:
        _require_files(args.config)
        values.update(parse_config(args.config.read_text(), source=str(args.config)))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if args.epsilon is not None:
        values.pop("epsilon_relative", None)
    if args.epsilon_relative is not None:
        values.pop("epsilon", None)
    values.setdefault("worker_count", default_worker_count())
    return RunConfig(**values)


def _summary(report, args) -> str:
    d = report.diagnostics
    lines = [
        f"status: {report.status}",
        f"mode: {report.mode}",
        f"epsilon: {report.epsilon!r}",
        f"epsilon_tilde: {report.epsilon_tilde!r}",
        f"gap: {report.gap!r}",
        f"dual_value: {report.dual_value!r}",
        f"primal_value: {report.primal_value!r}",
        f"violation_norm: {report.violation_norm!r}",
        f"iterations_reported: {report.iterations}",
        f"iterations_total: {report.total_iterations}",
        f"wall_time_s: {report.wall_time:.3f}",
        f"worker_count: {report.worker_count}",
        f"diagnostics.M_tilde_sq: {d.M_tilde_sq!r}",
        f"diagnostics.R_N_sq (approximate): {d.R_N_sq!r}",
        f"diagnostics.iteration_bound: {d.iteration_bound!r}",
        f"diagnostics.radius_max: {d.radius_max!r}",
        f"diagnostics.radius_bound: {d.radius_bound!r}",
        f"inputs: net={args.net} trips={args.trips} regimes={args.regimes}",
    ]
    return "\n".join(lines) + "\n"


def cmd_solve(args) -> int:
    net = _load(args)
    config = _run_config(args)
    report, trace = solve(net, config)
    flows, trace_csv = write_report(net, report, trace, wall_time=args.trace_timing)
    out = _output_dir(args)
    write_text_atomic(out / "flows.csv", flows)
    write_text_atomic(out / "trace.csv", trace_csv)
    write_text_atomic(out / "summary.txt", _summary(report, args))
    print(f"{report.status}: gap {report.gap:.6g} (epsilon {report.epsilon:.6g}), "
          f"violation {report.violation_norm:.3g}, {report.total_iterations} iterations, "
          f"{report.wall_time:.2f}s, {report.worker_count} worker(s) -> {out}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_validate(args) -> int:
    net = _load(args)
    print(f"nodes: {net.n_nodes}")
    print(f"edges: {net.n_edges}")
    print(f"stable_dynamics edges: {int(net.stable.sum())}")
    print(f"od pairs: {len(net.demands)} (total demand {net.demands.total!r})")
    bad = validate_reachability(net)
    if bad:
        print(f"unreachable od pairs: {len(bad)}")
        for o, d in bad:
            print(f"  {o + 1} -> {d + 1}")
        return EXIT_INPUT
    print("reachability: ok")
    return EXIT_OK


def cmd_oracle_frank_wolfe(args) -> int:
    net = _load(args)
    res = frank_wolfe_beckmann(net, tol=args.tol, max_iter=args.max_iter)
    cost = net.free_time * (1.0 + net.gamma * (res.flow / net.capacity) ** net.power)
    meta = {
        "source": "frank-wolfe",
        "status": "converged" if res.converged else "not_converged",
        "objective": repr(res.objective),
        "relative_gap": repr(res.relative_gap),
        "iterations": res.iterations,
    }
    out = _output_dir(args) / "frank_wolfe_flows.csv"
    write_text_atomic(out, format_flow_table(net, res.flow, cost, meta))
    print(f"objective {res.objective!r}, relative gap {res.relative_gap:.3g} "
          f"after {res.iterations} iterations -> {out}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_oracle_wardrop(args) -> int:
    net = _load(args)
    _require_files(args.flows)
    table = read_flow_table(args.flows.read_text(), source=str(args.flows))
    if table.flow.size != net.n_edges:
        raise InputError(f"flow table has {table.flow.size} rows, network {net.n_edges} edges",
                         source=str(args.flows))
    paths = enumerate_paths(net, cap=args.cap)
    x, l1 = decompose_link_flows(net, paths, table.flow)
    cert = certify_wardrop(net, paths, x, table.toll)
    print("od\torigin\tdest\tmin_cost\tmax_used_cost\tspread")
    for w, (o, d, _) in enumerate(paths.ods):
        print(f"{w}\t{o + 1}\t{d + 1}\t{cert.min_cost[w]!r}\t{cert.max_used_cost[w]!r}\t"
              f"{cert.spread[w]!r}")
    print("edge\tcomplementarity\tcapacity_excess")
    for k, e in enumerate(cert.stable_edges):
        print(f"{e}\t{cert.complementarity[k]!r}\t{cert.capacity_excess[k]!r}")
    if cert.bpr_cost_mismatch.size:
        print(f"max |toll - tau(flow)| on bpr edges: {float(cert.bpr_cost_mismatch.max())!r}")
    print(f"decomposition l1 residual: {l1!r}")
    ok = cert.is_equilibrium(args.tol)
    print(f"max residual {cert.max_residual:.3g} -> {'certified' if ok else 'NOT certified'} "
          f"at tolerance {args.tol:g}")
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def cmd_oracle_paths(args) -> int:
    net = _load(args)
    paths = enumerate_paths(net, cap=args.cap)
    for (o, d, _), ps in zip(paths.ods, paths.paths):
        print(f"{o + 1} -> {d + 1}: {len(ps)} path(s)")
        for p in ps:
            print("  " + " ".join(str(e) for e in p))
    print(f"total: {paths.n_paths}")
    return EXIT_OK


def cmd_convert(args) -> int:
    _require_files(args.flows)
    table = read_flow_table(args.flows.read_text(), source=str(args.flows))
    lines = ["From \tTo \tVolume \tCost "]
    for i in range(table.flow.size):
        lines.append(f"{table.tail[i] + 1}\t{table.head[i] + 1}\t{table.flow[i]!r}\t"
                     f"{table.toll[i]!r}")
    write_text_atomic(args.out, "\n".join(lines) + "\n")
    print(f"{table.flow.size} rows -> {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ParseError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        if isinstance(exc.__cause__, Exception):
            print(f"  caused by: {exc.__cause__}", file=sys.stderr)
        if getattr(args, "command", None) == "oracle":
            print("  hint: path enumeration and Frank-Wolfe are for small or all-BPR "
                  "networks only", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, UnicodeDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DualTapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001 - last-resort mapping to the documented exit code
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
