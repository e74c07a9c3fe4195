"""Iterative cone-complementarity synthesis of stabilizing observer gains.

The stability condition couples a certificate Q with its inverse, which no
convex program expresses directly. The loop here replaces the inverse by a
second variable P tied to Q through the coupling cone, then drives Q P
toward the identity by minimizing the linearized complementarity objective
Tr(Q_k P) + Tr(P_k Q) anchored at the previous iterate. Termination is by
complementarity closure, by an early stop as soon as the original matrix
inequality holds, or by the iteration cap.

A converged run then hands its gains to a decay polish that shrinks the
norm of a matrix power of the closed loop, which shortens the error
transient without touching feasibility, and the final certificate is
rebuilt from the polished closed loop by a Lyapunov solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.optimize as sopt

from .blocks import GainSet, assemble
from .model import LtiSystem, Problem, SensorGraph
from .sdp import build_feasibility_instance, build_linearized_instance, solve, _Family

__all__ = [
    "SynthesisOptions",
    "SynthesisState",
    "LemmaReport",
    "synthesize",
    "nmi_check",
    "inner_infimum_oracle",
    "certify_lemma_properties",
    "state_document",
]

log = logging.getLogger(__name__)

# anchors are floored to this relative eigenvalue level before linearization
ANCHOR_FLOOR_REL = 1e-9
# matrix square roots floor eigenvalues here to guard round-off
SQRT_FLOOR = 1e-12
# lemma tolerances: J monotone within, and bounded below 2 N nx within
LEMMA_TOL = 1e-6


@dataclass(frozen=True)
class SynthesisOptions:
    """Tunables of the synthesis loop.

    eps_tol and delta default to None and are resolved per problem:
    eps_tol to 1e-4 times the stacked dimension, delta to 1e-6 times
    (1 + Frobenius norm of A). trace_cap bounds Tr(Q) at trace_cap times
    the stacked dimension to keep iterates bounded; it is reported when
    active. nonneg_W restricts consensus weights to be nonnegative with a
    nonnegative diagonal; symmetric_M restricts coupling blocks to be
    symmetric. Neither restriction comes from the stability condition.
    """

    eps_tol: Optional[float] = None
    delta: Optional[float] = None
    max_iter: int = 200
    delta_Q: float = 1e-6
    trace_cap: float = 1e6
    nonneg_W: bool = False
    symmetric_M: bool = False
    solver: str = "CLARABEL"

    def __post_init__(self):
        if self.eps_tol is not None and not self.eps_tol > 0:
            raise ValueError(f"eps_tol must be positive, got {self.eps_tol}")
        if self.delta is not None and not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if not self.delta_Q > 0:
            raise ValueError(f"delta_Q must be positive, got {self.delta_Q}")

    def resolved_delta(self, system: LtiSystem) -> float:
        if self.delta is not None:
            return self.delta
        return 1e-6 * (1.0 + float(np.linalg.norm(system.A)))

    def resolved_eps_tol(self, stacked_dim: int) -> float:
        if self.eps_tol is not None:
            return self.eps_tol
        return 1e-4 * stacked_dim


@dataclass(frozen=True, eq=False)
class SynthesisState:
    """Outcome of one synthesis run.

    Q and P hold the certificate pair backing the returned gains, with
    P the inverse of Q up to round-off. Q_iterate and P_iterate hold the
    final solution pair of the complementarity loop itself, whose product
    the convergence test measures. J_history and complementarity_history
    record every loop iteration. status is one of converged_complementarity,
    converged_nmi_early_stop, iteration_limit, infeasible_init, or
    numerical_failure; gains is populated on the two converged statuses.
    """

    status: str
    iterations: int
    J_history: tuple
    complementarity_history: tuple
    Q: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    Q_iterate: Optional[np.ndarray] = None
    P_iterate: Optional[np.ndarray] = None
    gains: Optional[GainSet] = None
    nmi_witness: Optional[str] = None
    diagnostics: str = ""


@dataclass(frozen=True)
class LemmaReport:
    """Checked convergence properties of a finished run."""

    monotone_ok: bool
    monotone_violations: tuple
    lower_bound_ok: bool
    lower_bound_violations: tuple
    complementarity_ok: Optional[bool]
    messages: tuple


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


def _eig_sqrt(X: np.ndarray, inverse: bool = False) -> np.ndarray:
    lam, V = np.linalg.eigh(_sym(X))
    lam = np.maximum(lam, SQRT_FLOOR)
    root = np.sqrt(lam)
    if inverse:
        root = 1.0 / root
    return _sym((V * root) @ V.T)


def nmi_check(system: LtiSystem, graph: SensorGraph, gains: GainSet, Q: np.ndarray) -> bool:
    """Decide the stability inequality for a given certificate.

    True iff the closed-loop matrix S assembled from the gains satisfies
    lambda_max(S' Q S - Q) < 0. Equivalent to the inverse-coupled block
    inequality by the Schur complement, without forming inv(Q).
    """
    Q = _sym(np.asarray(Q, dtype=float))
    lam_min = float(np.linalg.eigvalsh(Q).min())
    if lam_min <= 0.0:
        raise ValueError(f"certificate is not positive definite (lambda_min = {lam_min:.3e})")
    S = assemble(system, graph, gains).S
    return float(np.linalg.eigvalsh(_sym(S.T @ Q @ S - Q)).max()) < 0.0


def inner_infimum_oracle(Q_k: np.ndarray, P_k: np.ndarray) -> tuple:
    """Closed-form minimizer of f(P) = Tr(Q_k P) + Tr(P_k inv(P)).

    Returns (value, P_flat) where P_flat attains the infimum over
    positive definite P and satisfies P_flat Q_k P_flat = P_k.
    """
    for name, X in (("Q_k", Q_k), ("P_k", P_k)):
        lam_min = float(np.linalg.eigvalsh(_sym(np.asarray(X, dtype=float))).min())
        if lam_min <= 0.0:
            raise ValueError(f"{name} is not positive definite (lambda_min = {lam_min:.3e})")
    Ph = _eig_sqrt(P_k)
    inner = _sym(Ph @ _sym(np.asarray(Q_k, dtype=float)) @ Ph)
    value = 2.0 * float(np.trace(_eig_sqrt(inner)))
    P_flat = _sym(Ph @ _eig_sqrt(inner, inverse=True) @ Ph)
    return value, P_flat


def _sanitize_anchors(Qv, Pv, J_prev: Optional[float]) -> tuple:
    """Prepare the next linearization anchors from the latest solution.

    Rebalances the trace split between Q and P when that provably cannot
    break the monotone descent of J, then floors eigenvalues so the
    anchors stay positive definite despite solver round-off.
    """
    Qv, Pv = _sym(Qv), _sym(Pv)
    tq, tp = max(float(np.trace(Qv)), 1e-300), max(float(np.trace(Pv)), 1e-300)
    gamma = float(np.sqrt(tq / tp))
    if J_prev is not None and gamma != 1.0:
        # balancing is safe only while (g + 1/g) Tr(QP) stays under the last J
        cross = float(np.trace(Qv @ Pv))
        if (gamma + 1.0 / gamma) * cross > J_prev:
            gamma = 1.0
    out = []
    for X in (Qv / gamma, Pv * gamma):
        lam, V = np.linalg.eigh(X)
        floor = ANCHOR_FLOOR_REL * max(1.0, float(lam.max()))
        out.append(_sym((V * np.maximum(lam, floor)) @ V.T))
    return out[0], out[1]


def _spectral_radius(S: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(S)).max())


def _solve_step(problem, family, Qv, Pv, J_prev, k):
    """One linearized solve with a safeguard ladder for solver breakdowns.

    Problems without a stabilizing solution drive the iterates toward the
    cone boundary, where the solver can fail outright long before the
    iteration cap. A failed solve is retried with hard-floored, forcibly
    rebalanced anchors, and as a last resort with identity anchors, which
    reset the trust point while keeping the objective a valid
    linearization (any positive definite pair is). J is always recorded
    against the anchors actually used.
    """
    Qa, Pa = _sanitize_anchors(Qv, Pv, J_prev)
    step = solve(build_linearized_instance(problem, Qa, Pa, family=family))
    if step.status == "optimal":
        return step, Qa, Pa

    m = Qv.shape[0]
    tq, tp = max(float(np.trace(Qv)), 1e-300), max(float(np.trace(Pv)), 1e-300)
    gamma = float(np.sqrt(tq / tp))
    hard = []
    for X in (Qv / gamma, Pv * gamma):
        lam, V = np.linalg.eigh(_sym(X))
        floor = 1e-5 * max(1.0, float(lam.max()))
        hard.append(_sym((V * np.maximum(lam, floor)) @ V.T))
    for label, (Qa, Pa) in (
        ("hard-floored anchors", (hard[0], hard[1])),
        ("identity anchors", (np.eye(m), np.eye(m))),
    ):
        log.warning("k=%d solve failed (%s); retrying with %s", k, step.status, label)
        step = solve(build_linearized_instance(problem, Qa, Pa, family=family))
        if step.status == "optimal":
            return step, Qa, Pa
    return step, Qa, Pa


class _GainVector:
    """Flat parameterization of the admissible gain space.

    Mirrors the variable layout of the conic programs: one scalar per
    edge weight, the per-node injection gains, one block per edge. The
    diagonal consensus weights stay eliminated, so every vector in this
    space respects the row-sum condition by construction.
    """

    def __init__(self, system: LtiSystem, graph: SensorGraph, symmetric_M: bool):
        self.system = system
        self.graph = graph
        self.symmetric_M = symmetric_M
        self.edges = graph.edges
        self.inn = {i: graph.in_neighbors(i) for i in range(graph.node_count)}
        nx = system.nx
        self.slices_L = {}
        off = len(self.edges)
        for i in range(graph.node_count):
            size = nx * system.output_dims[i]
            self.slices_L[i] = slice(off, off + size)
            off += size
        self.slices_M = {}
        for e in self.edges:
            self.slices_M[e] = slice(off, off + nx * nx)
            off += nx * nx
        self.size = off

    def pack(self, gains: GainSet) -> np.ndarray:
        th = np.zeros(self.size)
        for k, (j, i) in enumerate(self.edges):
            th[k] = gains.W[i, j]
        for i, sl in self.slices_L.items():
            th[sl] = gains.L_blocks[i].ravel()
        for e, sl in self.slices_M.items():
            th[sl] = gains.M_blocks[e].ravel()
        return th

    def unpack(self, th: np.ndarray) -> GainSet:
        n = self.graph.node_count
        nx = self.system.nx
        W = np.zeros((n, n))
        for k, (j, i) in enumerate(self.edges):
            W[i, j] = th[k]
        for i in range(n):
            W[i, i] = 1.0 - sum(W[i, j] for j in self.inn[i])
        L_blocks = [
            th[self.slices_L[i]].reshape(nx, self.system.output_dims[i]) for i in range(n)
        ]
        M_blocks = {}
        for e, sl in self.slices_M.items():
            M = th[sl].reshape(nx, nx)
            if self.symmetric_M:
                M = _sym(M)
            M_blocks[e] = M
        return GainSet(W=W, L_blocks=L_blocks, M_blocks=M_blocks)

    def closed_loop(self, th: np.ndarray) -> np.ndarray:
        return assemble(self.system, self.graph, self.unpack(th)).S

    def chain_gradient(self, G: np.ndarray) -> np.ndarray:
        """Pull a gradient with respect to S back to the parameter vector."""
        nx = self.system.nx
        grad = np.zeros(self.size)

        def blk(i, j):
            return G[i * nx:(i + 1) * nx, j * nx:(j + 1) * nx]

        A = self.system.A
        for k, (j, i) in enumerate(self.edges):
            grad[k] = float(np.sum(blk(i, j) * A) - np.sum(blk(i, i) * A))
        for i, sl in self.slices_L.items():
            grad[sl] = (blk(i, i) @ self.system.outputs[i].T).ravel()
        for e, sl in self.slices_M.items():
            (j, i) = e
            gm = blk(i, j) - blk(i, i)
            if self.symmetric_M:
                gm = _sym(gm)
            grad[sl] = gm.ravel()
        return grad


def _power_objective(space: _GainVector, th: np.ndarray, K: int) -> tuple:
    S = space.closed_loop(th)
    m = S.shape[0]
    pows = [np.eye(m)]
    for _ in range(K):
        pows.append(pows[-1] @ S)
    SK = pows[K]
    value = float(np.sum(SK * SK))
    G = np.zeros((m, m))
    for j in range(K):
        G += pows[j].T @ SK @ pows[K - 1 - j].T
    return value, space.chain_gradient(2.0 * G)


def _decay_polish(problem: Problem, gains: GainSet, horizon: int = 60) -> GainSet:
    """Shrink the transient of the closed loop without losing stability.

    Minimizes the squared Frobenius norm of S to the power K over the
    admissible gain space, laddering K upward; short powers alone can
    trade stability for transient size, so candidates are kept only when
    they improve the spectral norm of S to the power of the horizon.
    Falls back to the input gains when no candidate improves on them.
    """
    opts = problem.options
    if opts.nonneg_W:
        # sign-constrained weights are not preserved by the unconstrained search
        log.info("decay polish skipped: nonnegative-weight restriction active")
        return gains
    space = _GainVector(problem.system, problem.graph, opts.symmetric_M)
    th = space.pack(gains)

    def metric(v: np.ndarray) -> float:
        S = space.closed_loop(v)
        if _spectral_radius(S) >= 1.0:
            return np.inf
        return float(np.linalg.norm(np.linalg.matrix_power(S, horizon), 2))

    best_th, best_metric = th, metric(th)
    current = th
    ladder = [8, 12, 16]
    for K in ladder + ([24] if best_metric > 1e-4 else []):
        res = sopt.minimize(
            lambda v: _power_objective(space, v, K),
            current,
            jac=True,
            method="L-BFGS-B",
            options=dict(maxiter=1500, ftol=1e-18, gtol=1e-14),
        )
        current = res.x
        cand = metric(current)
        log.debug("polish K=%d objective=%.3e horizon_norm=%.3e", K, res.fun, cand)
        if cand < best_metric:
            best_th, best_metric = current, cand
    return space.unpack(best_th)


def _certificate_from_gains(problem: Problem, gains: GainSet) -> Optional[tuple]:
    """Lyapunov certificate for a stable closed loop, or None."""
    S = assemble(problem.system, problem.graph, gains).S
    if _spectral_radius(S) >= 1.0:
        return None
    X = _sym(sla.solve_discrete_lyapunov(S.T, np.eye(S.shape[0])))
    lam = np.linalg.eigvalsh(X)
    if lam.min() <= 0.0:
        return None
    if float(np.linalg.eigvalsh(_sym(S.T @ X @ S - X)).max()) >= 0.0:
        return None
    return X, _sym(np.linalg.inv(X))


def synthesize(problem: Problem, options: Optional[SynthesisOptions] = None) -> SynthesisState:
    """Run the full synthesis loop on a problem.

    Parameters
    ----------
    problem : Problem
        Plant, graph, and default options.
    options : SynthesisOptions, optional
        Overrides the options stored on the problem, for callers that
        screen many variants under a shared budget.

    Returns
    -------
    SynthesisState
        On a converged status the state carries gains and a certificate
        pair for which the stability inequality holds; other statuses
        carry the loop histories and diagnostics only.
    """
    if options is not None:
        problem = replace(problem, options=options)
    opts = problem.options
    system, graph = problem.system, problem.graph
    m = graph.node_count * system.nx
    eps_tol = opts.resolved_eps_tol(m)

    family = _Family(problem)
    init = solve(build_feasibility_instance(problem, family=family))
    if init.status == "infeasible":
        return SynthesisState(
            status="infeasible_init", iterations=0, J_history=(), complementarity_history=(),
            diagnostics=init.solver_diagnostics,
        )
    if init.status != "optimal":
        return SynthesisState(
            status="numerical_failure", iterations=0, J_history=(), complementarity_history=(),
            diagnostics=f"initialization: {init.solver_diagnostics}",
        )

    Qv, Pv = init.Q, init.P
    gains = init.gains
    J_history = []
    compl_history = []
    status = "iteration_limit"
    witness = None

    for k in range(opts.max_iter):
        step, Qa, Pa = _solve_step(problem, family, Qv, Pv,
                                   J_history[-1] if J_history else None, k)
        if step.status != "optimal":
            return SynthesisState(
                status="numerical_failure",
                iterations=k,
                J_history=tuple(J_history),
                complementarity_history=tuple(compl_history),
                diagnostics=f"iteration {k}: {step.status}; {step.solver_diagnostics}",
            )
        Qv, Pv, gains = step.Q, step.P, step.gains
        J_k = float(np.trace(Qa @ Pv) + np.trace(Pa @ Qv))
        compl_k = float(np.linalg.norm(Qv @ Pv - np.eye(m)))
        J_history.append(J_k)
        compl_history.append(compl_k)

        S = assemble(system, graph, gains).S
        lam_q = float(np.linalg.eigvalsh(_sym(S.T @ Qv @ S - Qv)).max())
        P_inv = _sym(np.linalg.inv(Pv))
        lam_p = float(np.linalg.eigvalsh(_sym(S.T @ P_inv @ S - P_inv)).max())
        log.info(
            "k=%d J=%.6f complementarity=%.3e lambda_max(S'QS-Q)=%.3e",
            k, J_k, compl_k, lam_q,
        )

        if lam_q < 0.0 and lam_p < 0.0:
            witness = "both"
        elif lam_q < 0.0:
            witness = "Q"
        elif lam_p < 0.0:
            witness = "P_inv"
        else:
            witness = None

        if compl_k <= eps_tol:
            if witness is not None:
                status = "converged_complementarity"
                break
            # complementarity closed but no witness passes: keep iterating
            log.warning(
                "k=%d complementarity %.3e within tolerance but the stability "
                "inequality fails for both witnesses; continuing", k, compl_k,
            )
        elif witness is not None:
            status = "converged_nmi_early_stop"
            break

    iterations = len(J_history)
    if status in ("converged_complementarity", "converged_nmi_early_stop"):
        polished = _decay_polish(problem, gains)
        for cand in (polished, gains):
            cert = _certificate_from_gains(problem, cand)
            if cert is not None:
                Qc, Pc = cert
                return SynthesisState(
                    status=status,
                    iterations=iterations,
                    J_history=tuple(J_history),
                    complementarity_history=tuple(compl_history),
                    Q=Qc,
                    P=Pc,
                    Q_iterate=Qv,
                    P_iterate=Pv,
                    gains=cand,
                    nmi_witness=witness,
                )
        return SynthesisState(
            status="numerical_failure",
            iterations=iterations,
            J_history=tuple(J_history),
            complementarity_history=tuple(compl_history),
            diagnostics="no Lyapunov certificate could be recovered from the converged gains",
        )
    return SynthesisState(
        status=status,
        iterations=iterations,
        J_history=tuple(J_history),
        complementarity_history=tuple(compl_history),
        Q_iterate=Qv,
        P_iterate=Pv,
    )


def certify_lemma_properties(state: SynthesisState, eps_tol: Optional[float] = None) -> LemmaReport:
    """Check the three convergence properties on a finished run.

    Property one: J never increases by more than the tolerance. Property
    two: J never falls below twice the stacked dimension minus the
    tolerance. Property three applies only to complementarity-converged
    runs: the final iterate product is within eps_tol of the identity and
    the final J sits near its floor. The report lists violations; it
    never raises on them.
    """
    if state.iterations < 2:
        raise ValueError(f"need at least 2 iterations to certify, got {state.iterations}")
    J = state.J_history
    messages = []
    mono = tuple(
        (k, J[k - 1], J[k]) for k in range(1, len(J)) if J[k] > J[k - 1] + LEMMA_TOL
    )
    if mono:
        messages.append(f"{len(mono)} monotonicity violations, first at k={mono[0][0]}")

    lower_ok = True
    lower_violations = ()
    compl_ok = None
    if state.Q_iterate is not None:
        m = state.Q_iterate.shape[0]
        floor = 2.0 * m - LEMMA_TOL
        lower_violations = tuple((k, Jk) for k, Jk in enumerate(J) if Jk < floor)
        lower_ok = not lower_violations
        if lower_violations:
            messages.append(
                f"{len(lower_violations)} values below the floor {floor:.6f}, "
                f"first at k={lower_violations[0][0]}"
            )
        if state.status == "converged_complementarity":
            if eps_tol is None:
                eps_tol = 1e-4 * m
            gap = float(np.linalg.norm(state.Q_iterate @ state.P_iterate - np.eye(m)))
            near = abs(J[-1] - 2.0 * m) <= 10.0 * eps_tol * float(np.linalg.norm(state.Q_iterate))
            compl_ok = gap <= eps_tol and near
            if not compl_ok:
                messages.append(
                    f"final complementarity {gap:.3e} vs eps_tol {eps_tol:.3e}, "
                    f"final J {J[-1]:.6f} vs floor {2.0 * m}"
                )
    return LemmaReport(
        monotone_ok=not mono,
        monotone_violations=mono,
        lower_bound_ok=lower_ok,
        lower_bound_violations=lower_violations,
        complementarity_ok=compl_ok,
        messages=tuple(messages),
    )


def state_document(state: SynthesisState) -> dict:
    """JSON-ready summary of a run: status, histories, and witness."""
    return {
        "status": state.status,
        "iterations": state.iterations,
        "J_history": list(state.J_history),
        "complementarity_history": list(state.complementarity_history),
        "nmi_witness": state.nmi_witness,
        "diagnostics": state.diagnostics,
    }
