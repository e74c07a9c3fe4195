"""Command-line front end: check, synth, sim, explore.

Every command reads a problem file, writes its outputs (when it has
any) into the --out directory, and drops a manifest there recording the
command, the input file hash, the effective options, and the outcome.
Gains files and trajectory CSVs are deterministic: identical
invocations on the same build produce byte-identical files. Manifests
carry a timestamp and are exempt from that guarantee.

Exit codes follow one convention across commands: 0 for success (synth
converged, simulation error below tolerance, explore found a repair,
check completed), 1 for a clean negative outcome, 2 for errors of any
kind, including malformed files, incompatible dimensions, and numerical
failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import connectivity_report, marginal_joint_detectability
from .blocks import assemble, load_gains, save_gains
from .model import ProblemFormatError, load_problem
from .simulate import SimConfig, export_csv, run
from .synthesis import state_document, synthesize
from .trilemma import CONVERGED, explore, format_report

log = logging.getLogger(__name__)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, problem_path, options, outcome: dict) -> None:
    doc = {
        "command": command,
        "problem_file": str(problem_path),
        "problem_sha256": _sha256(problem_path),
        "options": options,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "outcome": outcome,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _apply_overrides(problem, args):
    updates = {}
    if getattr(args, "eps_tol", None) is not None:
        updates["eps_tol"] = args.eps_tol
    if getattr(args, "delta", None) is not None:
        updates["delta"] = args.delta
    if getattr(args, "max_iter", None) is not None:
        updates["max_iter"] = args.max_iter
    if updates:
        problem = replace(problem, options=replace(problem.options, **updates))
    return problem


def cmd_check(args) -> int:
    problem = load_problem(args.problem)
    det = marginal_joint_detectability(problem.system)
    con = connectivity_report(problem.graph)
    print(
        f"marginal joint detectability: {'YES' if det.marginal else 'NO'}; "
        f"minimal strong digraph: {'YES' if con.minimal else 'NO'}"
    )
    print(f"  jointly detectable: {det.joint_detectable}")
    print(f"  critical nodes: {', '.join(str(i + 1) for i in det.critical_nodes) or 'none'}")
    print(f"  strongly connected: {con.strongly_connected}")
    if con.redundant_edges:
        listed = ", ".join(f"({j + 1},{i + 1})" for (j, i) in con.redundant_edges)
        print(f"  redundant edges: {listed}")
    if not con.strongly_connected:
        comps = "; ".join(
            "{" + ", ".join(str(i + 1) for i in comp) + "}" for comp in con.source_components
        )
        print(f"  source components: {comps}")
    if args.out is not None:
        _write_manifest(
            Path(args.out), "check", args.problem, {},
            {"marginal": det.marginal, "minimal_strong": con.minimal},
        )
    return 0


def cmd_synth(args) -> int:
    problem = _apply_overrides(load_problem(args.problem), args)
    out_dir = Path(args.out)
    state = synthesize(problem)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "history.json", "w") as fh:
        json.dump(state_document(state), fh, indent=1)
        fh.write("\n")
    outcome = {"status": state.status, "iterations": state.iterations}
    if state.gains is not None:
        save_gains(state.gains, out_dir / "gains.json")
        S = assemble(problem.system, problem.graph, state.gains).S
        outcome["rho_S"] = float(np.abs(np.linalg.eigvals(S)).max())
        with open(out_dir / "certificate.json", "w") as fh:
            json.dump({"Q": state.Q.tolist()}, fh)
            fh.write("\n")
    _write_manifest(out_dir, "synth", args.problem, asdict(problem.options), outcome)
    print(f"status: {state.status} after {state.iterations} iterations")
    if state.status in CONVERGED:
        return 0
    if state.status in ("iteration_limit", "infeasible_init"):
        return 1
    print(f"error: {state.diagnostics}", file=sys.stderr)
    return 2


def cmd_sim(args) -> int:
    problem = load_problem(args.problem)
    gains = load_gains(args.gains, problem.system, problem.graph)
    Q = None
    if args.certificate is not None:
        with open(args.certificate) as fh:
            Q = np.asarray(json.load(fh)["Q"], dtype=float)
    nx = problem.system.nx
    config = SimConfig(
        x0=np.ones(nx),
        xhat0=tuple(np.zeros(nx) for _ in range(problem.graph.node_count)),
        steps=args.steps,
        record_lyapunov=Q is not None,
    )
    traj = run(problem, gains, config, Q=Q)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_csv(traj, out_dir / "trajectory.csv", include_states=args.states)
    e0 = float(np.linalg.norm(traj.stacked_errors[0]))
    tol = args.tol if args.tol is not None else 1e-6 * e0
    final = traj.max_error_norm(-1)
    converged = final < tol
    _write_manifest(
        out_dir, "sim", args.problem,
        {"steps": args.steps, "tol": tol},
        {"max_error_final": final, "converged": converged},
    )
    print(f"max_i ||e_i({args.steps})|| = {final:.6e} (tolerance {tol:.6e})")
    return 0 if converged else 1


def cmd_explore(args) -> int:
    problem = load_problem(args.problem)
    axes = {"edge", "sensor"} if args.axis == "both" else {args.axis}
    budget = replace(
        problem.options,
        max_iter=args.max_iter if args.max_iter is not None else 100,
    )
    candidates = explore(problem, budget=budget, axes=axes, jobs=args.jobs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = format_report(candidates)
    print(report)
    rows = [
        {
            "rank": r,
            "candidate": c.label,
            "status": c.status,
            "iterations": c.iterations,
            "rho_S": c.rho,
            "final_complementarity": c.final_complementarity,
        }
        for r, c in enumerate(candidates, start=1)
    ]
    if args.format == "json":
        with open(out_dir / "report.json", "w") as fh:
            json.dump(rows, fh, indent=1)
            fh.write("\n")
    elif args.format == "csv":
        lines = [", ".join(rows[0].keys())] if rows else []
        for row in rows:
            lines.append(", ".join("" if v is None else str(v) for v in row.values()))
        with open(out_dir / "report.csv", "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        with open(out_dir / "report.txt", "w") as fh:
            fh.write(report + "\n")
    winners = [c for c in candidates if c.status in CONVERGED]
    if winners:
        save_gains(winners[0].state.gains, out_dir / "best_gains.json")
    _write_manifest(
        out_dir, "explore", args.problem,
        {"axes": sorted(axes), "screening_max_iter": budget.max_iter},
        {
            "candidates": len(candidates),
            "converged": len(winners),
            "best": winners[0].label if winners else None,
        },
    )
    return 0 if winners else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netobs",
        description="Distributed observer synthesis and simulation for networked LTI plants",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--problem", required=True, help="problem file (JSON)")
        if out_default is None:
            p.add_argument("--out", default=None, help="output directory")
        else:
            p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("check", help="report structural assumptions (advisory)")
    common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("synth", help="synthesize observer gains")
    common(p, out_default="synth_out")
    p.add_argument("--eps-tol", type=float, default=None, help="complementarity stop tolerance")
    p.add_argument("--delta", type=float, default=None, help="stability margin")
    p.add_argument("--max-iter", type=int, default=None, help="iteration cap")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sim", help="simulate the observers under synthesized gains")
    common(p, out_default="sim_out")
    p.add_argument("--gains", required=True, help="gains file from synth")
    p.add_argument("--steps", type=int, default=60, help="simulation horizon")
    p.add_argument("--tol", type=float, default=None,
                   help="absolute error threshold (default 1e-6 times the initial error norm)")
    p.add_argument("--certificate", default=None,
                   help="certificate file from synth; adds the V column")
    p.add_argument("--states", action="store_true", help="append plant states to the CSV")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("explore", help="search single-modification repairs")
    common(p, out_default="explore_out")
    p.add_argument("--axis", choices=["edge", "sensor", "both"], default="both")
    p.add_argument("--max-iter", type=int, default=None,
                   help="screening iteration cap (default 100)")
    p.add_argument("--format", choices=["csv", "json"], default=None,
                   help="machine-readable report format (default: text)")
    p.add_argument("--jobs", type=int, default=1, help="concurrent candidate screenings")
    p.set_defaults(func=cmd_explore)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ProblemFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
