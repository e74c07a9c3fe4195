"""Single-modification repair search for infeasible synthesis problems.

When synthesis fails on a problem, feasibility can often be restored by
strengthening what some node measures or by adding one communication
link. This module enumerates every single modification along the chosen
axes, screens each variant under a shared reduced budget, re-runs the
convergent ones at full budget, and ranks them. The search is exhaustive
rather than heuristic; at the problem sizes this package targets there
are at most N(N-1) edge candidates and N times nx sensor candidates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .blocks import assemble
from .model import LtiSystem, Problem, SensorGraph
from .simulate import SimConfig, run
from .synthesis import SynthesisOptions, SynthesisState, nmi_check, synthesize

__all__ = ["RepairCandidate", "explore", "format_report"]

log = logging.getLogger(__name__)

CONVERGED = ("converged_complementarity", "converged_nmi_early_stop")
# reported winners must simulate to this relative error at the horizon
SIM_REL_TOL = 1e-6
SIM_STEPS = 60


@dataclass(frozen=True, eq=False)
class RepairCandidate:
    """One tried modification and the synthesis outcome on it.

    kind is add_edge or augment_sensor. For edges, edge holds the
    0-based (from, to) pair; for sensors, node and rows hold the target
    node and the appended output rows. problem is the modified problem
    the result refers to; state is the full synthesis outcome, from the
    full-budget re-run when the screening run converged.
    """

    kind: str
    label: str
    problem: Problem
    state: SynthesisState
    edge: Optional[tuple] = None
    node: Optional[int] = None
    rows: Optional[np.ndarray] = None

    @property
    def status(self) -> str:
        return self.state.status

    @property
    def iterations(self) -> int:
        return self.state.iterations

    @property
    def final_complementarity(self) -> Optional[float]:
        if self.state.complementarity_history:
            return self.state.complementarity_history[-1]
        return None

    @property
    def rho(self) -> Optional[float]:
        if self.state.gains is None:
            return None
        S = assemble(self.problem.system, self.problem.graph, self.state.gains).S
        return float(np.abs(np.linalg.eigvals(S)).max())


def _edge_variants(problem: Problem) -> list:
    n = problem.graph.node_count
    existing = set(problem.graph.edges)
    out = []
    for j in range(n):
        for i in range(n):
            if i == j or (j, i) in existing:
                continue
            graph = SensorGraph(node_count=n, edges=list(existing) + [(j, i)])
            out.append((
                "add_edge",
                f"add_edge({j + 1},{i + 1})",
                replace(problem, graph=graph),
                dict(edge=(j, i)),
            ))
    return out


def _sensor_variants(problem: Problem, sensor_rows: Optional[dict]) -> list:
    system = problem.system
    nx = system.nx
    if sensor_rows is None:
        basis = [(f"e{j + 1}", np.eye(nx)[j:j + 1]) for j in range(nx)]
        sensor_rows = {i: basis for i in range(system.node_count)}
    out = []
    for node in sorted(sensor_rows):
        entries = []
        for k, entry in enumerate(sensor_rows[node]):
            if isinstance(entry, tuple) and len(entry) == 2 and isinstance(entry[0], str):
                entries.append(entry)
            else:
                entries.append((f"row{k + 1}", entry))
        for name, rows in entries:
            rows = np.atleast_2d(np.asarray(rows, dtype=float))
            if rows.shape[1] != nx:
                raise ValueError(
                    f"augment rows for node {node} have {rows.shape[1]} columns, expected {nx}"
                )
            outputs = list(system.outputs)
            outputs[node] = np.vstack([outputs[node], rows])
            augmented = LtiSystem(A=system.A, B=system.B, outputs=outputs)
            out.append((
                "augment_sensor",
                f"augment_sensor({node + 1},{name})",
                replace(problem, system=augmented),
                dict(node=node, rows=rows),
            ))
    return out


def _screen(variant: tuple, budget: SynthesisOptions) -> RepairCandidate:
    kind, label, prob, extra = variant
    log.info("screening %s", label)
    try:
        state = synthesize(prob, options=budget)
    except Exception as exc:  # a broken candidate is recorded, not fatal
        log.warning("candidate %s failed: %s", label, exc)
        state = SynthesisState(
            status="numerical_failure", iterations=0, J_history=(),
            complementarity_history=(), diagnostics=str(exc),
        )
    return RepairCandidate(kind=kind, label=label, problem=prob, state=state, **extra)


def _validated(cand: RepairCandidate) -> bool:
    """Winners must carry a checkable certificate and simulate to spec."""
    prob, state = cand.problem, cand.state
    if not nmi_check(prob.system, prob.graph, state.gains, state.Q):
        return False
    nx = prob.system.nx
    config = SimConfig(
        x0=np.ones(nx),
        xhat0=tuple(np.zeros(nx) for _ in range(prob.graph.node_count)),
        steps=SIM_STEPS,
    )
    traj = run(prob, state.gains, config, Q=state.Q)
    e0 = float(np.linalg.norm(traj.stacked_errors[0]))
    return traj.max_error_norm(-1) < SIM_REL_TOL * e0


def explore(problem: Problem, budget: Optional[SynthesisOptions] = None,
            axes: Optional[set] = None, sensor_rows: Optional[dict] = None,
            jobs: int = 1) -> list:
    """Search all single-modification repairs of an infeasible problem.

    Parameters
    ----------
    problem : Problem
        The instance whose baseline synthesis fails.
    budget : SynthesisOptions, optional
        Shared screening budget; defaults to the problem options with
        max_iter reduced to 100. Winners are re-run at the problem's own
        full budget.
    axes : set, optional
        Subset of {"edge", "sensor"}; both by default.
    sensor_rows : dict, optional
        node -> list of (name, row) pairs to append on the sensor axis;
        defaults to every canonical basis row at every node.
    jobs : int
        Concurrent candidate screenings; ranking does not depend on it.

    Returns
    -------
    list of RepairCandidate, converged candidates first, ordered by
    iteration count, then spectral radius, then label.

    Raises
    ------
    ValueError
        If the baseline itself converges under the screening budget
        ("baseline feasible": there is nothing to repair).
    """
    axes = {"edge", "sensor"} if axes is None else set(axes)
    bad = axes - {"edge", "sensor"}
    if bad:
        raise ValueError(f"unknown axes {sorted(bad)}; choose from 'edge', 'sensor'")
    if budget is None:
        budget = replace(problem.options, max_iter=min(100, problem.options.max_iter))

    base = synthesize(problem, options=budget)
    if base.status in CONVERGED:
        raise ValueError(
            f"baseline feasible: synthesis converged in {base.iterations} iterations; "
            f"there is nothing to repair"
        )
    log.info("baseline did not converge (%s after %d iterations); exploring %s",
             base.status, base.iterations, sorted(axes))

    variants = []
    if "edge" in axes:
        variants += _edge_variants(problem)
    if "sensor" in axes:
        variants += _sensor_variants(problem, sensor_rows)

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            candidates = list(pool.map(_screen, variants, [budget] * len(variants)))
    else:
        candidates = [_screen(v, budget) for v in variants]

    # winners re-run at the full budget, then checked end to end
    final = []
    for cand in candidates:
        if cand.status in CONVERGED:
            full = synthesize(cand.problem, options=problem.options)
            cand = replace(cand, state=full)
            if cand.status in CONVERGED and not _validated(cand):
                log.warning("candidate %s converged but failed validation", cand.label)
                cand = replace(cand, state=replace(
                    full, status="validation_failed", gains=None, Q=None, P=None,
                ))
        final.append(cand)

    def key(c: RepairCandidate):
        if c.status in CONVERGED:
            return (0, c.iterations, c.rho, c.label)
        return (1, 0, 0.0, c.label)

    return sorted(final, key=key)


def format_report(candidates: list) -> str:
    """Fixed-width text table over all candidates, ranked order."""
    lines = [f"{'rank':>4}  {'candidate':<26} {'status':<28} {'iters':>5} {'rho(S)':>10} {'compl':>10}"]
    for r, c in enumerate(candidates, start=1):
        rho = f"{c.rho:.6f}" if c.rho is not None else "-"
        compl = f"{c.final_complementarity:.3e}" if c.final_complementarity is not None else "-"
        lines.append(f"{r:>4}  {c.label:<26} {c.status:<28} {c.iterations:>5} {rho:>10} {compl:>10}")
    return "\n".join(lines)
