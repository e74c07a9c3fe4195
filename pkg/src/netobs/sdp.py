"""Per-iteration semidefinite programs and the conic-solver contract.

Each instance couples the stability certificate pair (Q, P) with the
structured gain variables through three matrix constraints: the stability
block form, the coupling cone that relaxes P = inv(Q), and a floor on Q.
The consensus weight on each diagonal is eliminated by substitution, so
the row-sum condition on W holds by construction rather than as an
equality constraint.

Instances are expressed as standard-form conic programs through cvxpy;
any interior-point semidefinite backend registered with cvxpy can serve
as the adapter. Every optimal return is re-verified by an independent
eigenvalue computation before it is accepted.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from typing import Optional

import cvxpy as cp
import numpy as np

from .blocks import GainSet, assemble
from .model import Problem

__all__ = [
    "SdpInstance",
    "SdpSolution",
    "build_feasibility_instance",
    "build_linearized_instance",
    "solve",
    "instance_dump",
]

log = logging.getLogger(__name__)

DEFAULT_SOLVER = "CLARABEL"
# independent post-solve verification slack on eigenvalue checks
VERIFY_TOL = 1e-7


class _Family:
    """One compiled constraint system shared by all instances of a problem.

    Building the cvxpy program is not free, and the linearized objective
    only swaps parameter values between iterations, so the synthesis loop
    reuses a single family across all its solves.
    """

    def __init__(self, problem: Problem):
        system = problem.system
        graph = problem.graph
        opts = problem.options
        n = graph.node_count
        nx = system.nx
        m = n * nx
        A = system.A
        edges = graph.edges
        inn = {i: graph.in_neighbors(i) for i in range(n)}

        self.problem = problem
        self.m = m
        self.delta = opts.resolved_delta(system)
        self.delta_q = opts.delta_Q
        self.trace_bound = opts.trace_cap * m

        Q = cp.Variable((m, m), symmetric=True, name="Q")
        P = cp.Variable((m, m), symmetric=True, name="P")
        w = {e: cp.Variable(name=f"w_{e[0]}_{e[1]}") for e in edges}
        L = {}
        for i in range(n):
            if system.output_dims[i] > 0:
                L[i] = cp.Variable((nx, system.output_dims[i]), name=f"L_{i}")
        M = {
            e: cp.Variable((nx, nx), symmetric=opts.symmetric_M, name=f"M_{e[0]}_{e[1]}")
            for e in edges
        }

        blocks = [[np.zeros((nx, nx)) for _ in range(n)] for _ in range(n)]
        for i in range(n):
            # diagonal weight substituted as 1 - sum of in-edge weights
            wii = 1 - sum(w[(j, i)] for j in inn[i])
            blk = wii * A
            if i in L:
                blk = blk + L[i] @ system.outputs[i]
            if inn[i]:
                blk = blk - sum(M[(j, i)] for j in inn[i])
            blocks[i][i] = blk
        for (j, i) in edges:
            blocks[i][j] = w[(j, i)] * A + M[(j, i)]
        S = cp.bmat(blocks)

        eye_m = np.eye(m)
        stability = cp.bmat([[-Q, S.T], [S, -P]])
        coupling = cp.bmat([[Q, eye_m], [eye_m, P]])
        cons = [
            stability << -self.delta * np.eye(2 * m),
            coupling >> 0,
            Q >> self.delta_q * eye_m,
            cp.trace(Q) <= self.trace_bound,
        ]
        if opts.nonneg_W:
            cons += [w[e] >= 0 for e in edges]
            cons += [1 - sum(w[(j, i)] for j in inn[i]) >= 0 for i in range(n) if inn[i]]

        self.Q, self.P, self.w, self.L, self.M = Q, P, w, L, M
        self.Q_anchor = cp.Parameter((m, m), symmetric=True, name="Q_anchor")
        self.P_anchor = cp.Parameter((m, m), symmetric=True, name="P_anchor")
        self.feasibility_program = cp.Problem(cp.Minimize(0), cons)
        self.linearized_program = cp.Problem(
            cp.Minimize(cp.trace(self.Q_anchor @ P) + cp.trace(self.P_anchor @ Q)), cons
        )

    def extract_gains(self) -> GainSet:
        system = self.problem.system
        graph = self.problem.graph
        n = graph.node_count
        nx = system.nx
        W = np.zeros((n, n))
        for (j, i), var in self.w.items():
            W[i, j] = float(var.value)
        for i in range(n):
            W[i, i] = 1.0 - sum(W[i, j] for j in graph.in_neighbors(i))
        L_blocks = [
            self.L[i].value if i in self.L else np.zeros((nx, 0)) for i in range(n)
        ]
        M_blocks = {e: self.M[e].value for e in graph.edges}
        return GainSet(W=W, L_blocks=L_blocks, M_blocks=M_blocks)


@dataclass(frozen=True, eq=False)
class SdpInstance:
    """A ready-to-solve conic program, feasibility- or linearized-objective."""

    family: _Family
    kind: str  # "feasibility" or "linearized"

    @property
    def program(self) -> cp.Problem:
        return (
            self.family.feasibility_program
            if self.kind == "feasibility"
            else self.family.linearized_program
        )


@dataclass(frozen=True, eq=False)
class SdpSolution:
    """Outcome of one conic solve.

    status is one of optimal, infeasible, numerical_failure, or
    iteration_limit. On optimal, every constraint has been re-verified by
    an independent minimum-eigenvalue computation, and gains holds the
    extracted observer triple.
    """

    status: str
    Q: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    gains: Optional[GainSet] = None
    objective_value: Optional[float] = None
    solver_diagnostics: str = ""


def build_feasibility_instance(problem: Problem, family: Optional[_Family] = None) -> SdpInstance:
    """Constraint system with a zero objective, used for initialization."""
    return SdpInstance(family=family or _Family(problem), kind="feasibility")


def build_linearized_instance(
    problem: Problem,
    Q_k: np.ndarray,
    P_k: np.ndarray,
    family: Optional[_Family] = None,
) -> SdpInstance:
    """Constraint system with objective Tr(Q_k P) + Tr(P_k Q).

    Anchors must be symmetric positive definite. A numerically asymmetric
    anchor is projected to its symmetric part with a logged warning; a
    non-PD anchor is an error.
    """
    family = family or _Family(problem)
    anchors = []
    for name, X in (("Q_k", Q_k), ("P_k", P_k)):
        X = np.asarray(X, dtype=float)
        asym = float(np.abs(X - X.T).max()) if X.size else 0.0
        if asym > 0.0:
            log.warning("anchor %s asymmetric by %.3e, projecting to symmetric part", name, asym)
            X = 0.5 * (X + X.T)
        lam_min = float(np.linalg.eigvalsh(X).min())
        if lam_min <= 0.0:
            raise ValueError(f"anchor {name} is not positive definite (lambda_min = {lam_min:.3e})")
        anchors.append(X)
    family.Q_anchor.value = anchors[0]
    family.P_anchor.value = anchors[1]
    return SdpInstance(family=family, kind="linearized")


def _verify(family: _Family, Qv: np.ndarray, Pv: np.ndarray, gains: GainSet) -> tuple:
    """Independent eigenvalue re-check of every constraint; returns (ok, report)."""
    problem = family.problem
    S = assemble(problem.system, problem.graph, gains).S
    m = family.m
    stab = np.block([[-Qv, S.T], [S, -Pv]])
    cone = np.block([[Qv, np.eye(m)], [np.eye(m), Pv]])
    lam_stab = float(np.linalg.eigvalsh(0.5 * (stab + stab.T)).max())
    lam_cone = float(np.linalg.eigvalsh(0.5 * (cone + cone.T)).min())
    lam_q = float(np.linalg.eigvalsh(0.5 * (Qv + Qv.T)).min())
    row_dev = float(np.abs(gains.W.sum(axis=1) - 1.0).max())
    trace_slack = family.trace_bound - float(np.trace(Qv))
    ok = (
        lam_stab <= -family.delta + VERIFY_TOL
        and lam_cone >= -VERIFY_TOL
        and lam_q >= family.delta_q - VERIFY_TOL
        and row_dev <= VERIFY_TOL
        and trace_slack >= -VERIFY_TOL * max(1.0, family.trace_bound)
    )
    report = (
        f"lam_max(stability)={lam_stab:.6e} (limit {-family.delta:.6e}), "
        f"lam_min(coupling)={lam_cone:.6e}, lam_min(Q)={lam_q:.6e}, "
        f"row_sum_dev={row_dev:.3e}, trace_slack={trace_slack:.3e}"
    )
    return ok, report


def solve(instance: SdpInstance, solver: Optional[str] = None, **solver_options) -> SdpSolution:
    """Run the adapter on an instance and verify the returned point.

    Any cvxpy-registered semidefinite backend may be named; the default
    is a deterministic interior-point solver. Verification failures on a
    nominally optimal return degrade the status to numerical_failure.
    """
    family = instance.family
    program = instance.program
    solver = solver or family.problem.options.solver
    try:
        program.solve(solver=solver, **solver_options)
    except (cp.SolverError, ValueError) as exc:
        return SdpSolution(status="numerical_failure", solver_diagnostics=f"{type(exc).__name__}: {exc}")

    raw = program.status
    diag = f"solver={solver}, raw_status={raw}"
    if raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SdpSolution(status="infeasible", solver_diagnostics=diag)
    if raw == "user_limit":
        return SdpSolution(status="iteration_limit", solver_diagnostics=diag)
    if raw not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or family.Q.value is None:
        return SdpSolution(status="numerical_failure", solver_diagnostics=diag)

    Qv = 0.5 * (family.Q.value + family.Q.value.T)
    Pv = 0.5 * (family.P.value + family.P.value.T)
    gains = family.extract_gains()
    ok, report = _verify(family, Qv, Pv, gains)
    if not ok:
        return SdpSolution(
            status="numerical_failure",
            Q=Qv,
            P=Pv,
            objective_value=float(program.value),
            solver_diagnostics=f"{diag}; verification failed: {report}",
        )
    return SdpSolution(
        status="optimal",
        Q=Qv,
        P=Pv,
        gains=gains,
        objective_value=float(program.value),
        solver_diagnostics=f"{diag}; {report}",
    )


def instance_dump(instance: SdpInstance) -> str:
    """Standard-form dump: variables, cone sizes, and coefficient triplets.

    Intended for offline debugging of the conic data actually handed to
    the adapter.
    """
    program = instance.program
    data, _, _ = program.get_problem_data(cp.CLARABEL)
    A = data["A"].tocoo()
    doc = {
        "kind": instance.kind,
        "variables": [
            {"name": v.name(), "shape": list(v.shape)} for v in program.variables()
        ],
        "cones": {
            "zero": int(getattr(data["dims"], "zero", 0)),
            "nonneg": int(getattr(data["dims"], "nonneg", 0)),
            "psd": [int(s) for s in getattr(data["dims"], "psd", [])],
        },
        "objective": [
            [int(i), float(c)] for i, c in enumerate(data["c"]) if c != 0.0
        ],
        "constraint_triplets": [
            [int(r), int(c), float(v)] for r, c, v in zip(A.row, A.col, A.data)
        ],
        "offsets": [float(b) for b in data["b"]],
    }
    buf = io.StringIO()
    json.dump(doc, buf, indent=1)
    return buf.getvalue()
