"""Synchronous simulation of the plant and its distributed observers.

Each round, every node sends exactly one message carrying its latest
state estimate, then updates from the received round-t values: no node
ever sees a neighbor's updated estimate within the same round. Under
that schedule the stacked estimation error follows a linear recursion
driven by the closed-loop matrix, and the plant input cancels from it
entirely.

The state recursion is evaluated in exact rational arithmetic. Binary
floats convert to rationals without error, so the simulated error is the
true difference of the two recursions even when the plant state grows by
tens of orders of magnitude; a float-valued simulation would bury the
error signal under round-off long before the default horizon. The
consensus weight a node places on itself is re-derived as one minus its
neighbor weights so the mixing step is an exact affine combination.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .blocks import GainSet, assemble
from .model import Problem

__all__ = ["SimConfig", "Trajectory", "step", "run", "lyapunov_trace", "export_csv"]

# below this error norm, strict-decrease assertions are off (round-off zone)
ZERO_FLOOR = 1e-10
# recorded errors must track the stacked recursion this tightly
RECURSION_RTOL = 1e-9


@dataclass(frozen=True)
class SimConfig:
    """Run description: horizon, initial conditions, input, recording.

    input is None for a zero input, a length-nu vector applied at every
    step, or a (steps, nu) array giving u(0..steps-1). record_lyapunov
    asks run for the V(t) column and requires a certificate Q.
    """

    x0: np.ndarray
    xhat0: tuple
    steps: int = 60
    input: Optional[np.ndarray] = None
    record_lyapunov: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(
            self, "xhat0",
            tuple(np.asarray(v, dtype=float).reshape(-1) for v in self.xhat0),
        )
        if self.input is not None:
            object.__setattr__(self, "input", np.asarray(self.input, dtype=float))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Recorded run: states, per-node estimates and errors, messages.

    states has shape (T+1, nx); estimates and errors have shape
    (N, T+1, nx); error_norms has shape (T+1, N); stacked_errors stacks
    the per-node errors into rows of length N*nx, node-major, matching
    the block order of the closed-loop matrix. lyapunov is the V(t)
    column when recorded, else None.
    message_counts holds the sends per round; message_dimension is the
    payload size of every message.
    """

    states: np.ndarray
    estimates: np.ndarray
    errors: np.ndarray
    error_norms: np.ndarray
    stacked_errors: np.ndarray
    message_counts: tuple
    message_dimension: int
    lyapunov: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def max_error_norm(self, t: int = -1) -> float:
        return float(self.error_norms[t].max())

    def converged(self, tol: float) -> bool:
        return self.max_error_norm(-1) < tol


def _frac_matrix(M) -> list:
    return [[Fraction(float(v)) for v in row] for row in np.atleast_2d(M)]


def _frac_vector(v) -> list:
    return [Fraction(float(x)) for x in np.asarray(v).reshape(-1)]


def _mv(M: list, v: list) -> list:
    return [sum(a * b for a, b in zip(row, v)) for row in M]


def _vadd(*vs) -> list:
    out = list(vs[0])
    for v in vs[1:]:
        for i, x in enumerate(v):
            out[i] += x
    return out


def _vsub(a: list, b: list) -> list:
    return [x - y for x, y in zip(a, b)]


class _ExactPlant:
    """Rational-arithmetic closure of one problem and one gain set."""

    def __init__(self, problem: Problem, gains: GainSet):
        system, graph = problem.system, problem.graph
        self.n = graph.node_count
        self.nx = system.nx
        self.nu = system.nu
        self.A = _frac_matrix(system.A)
        self.B = _frac_matrix(system.B) if system.nu else [[] for _ in range(system.nx)]
        self.C = [_frac_matrix(C) if C.shape[0] else [] for C in system.outputs]
        self.L = [
            _frac_matrix(L) if L.shape[1] else [[] for _ in range(system.nx)]
            for L in gains.L_blocks
        ]
        self.inn = {i: graph.in_neighbors(i) for i in range(self.n)}
        # self-weight as one minus the neighbor weights: exact affine mixing
        self.w = {}
        self.w_self = []
        for i in range(self.n):
            row = {j: Fraction(float(gains.W[i, j])) for j in self.inn[i]}
            self.w[i] = row
            self.w_self.append(Fraction(1) - sum(row.values(), Fraction(0)))
        self.M = {e: _frac_matrix(Mb) for e, Mb in gains.M_blocks.items()}

    def advance(self, x: list, xhats: list, u: list) -> tuple:
        Bu = _mv(self.B, u) if self.nu else [Fraction(0)] * self.nx
        x_next = _vadd(_mv(self.A, x), Bu)
        xhats_next = []
        for i in range(self.n):
            mix = [self.w_self[i] * c for c in xhats[i]]
            for j in self.inn[i]:
                wij = self.w[i][j]
                for k in range(self.nx):
                    mix[k] += wij * xhats[j][k]
            upd = _vadd(_mv(self.A, mix), Bu)
            if self.C[i]:
                innov = _vsub(_mv(self.C[i], xhats[i]), _mv(self.C[i], x))
                upd = _vadd(upd, _mv(self.L[i], innov))
            for j in self.inn[i]:
                diff = _vsub(xhats[j], xhats[i])
                upd = _vadd(upd, _mv(self.M[(j, i)], diff))
            xhats_next.append(upd)
        return x_next, xhats_next


def _check_dims(problem: Problem, x, xhats, u) -> None:
    nx, nu, n = problem.system.nx, problem.system.nu, problem.graph.node_count
    if np.asarray(x).reshape(-1).shape[0] != nx:
        raise ValueError(f"state has dimension {np.asarray(x).size}, expected {nx}")
    if len(xhats) != n:
        raise ValueError(f"got {len(xhats)} estimates for {n} nodes")
    for i, v in enumerate(xhats):
        if np.asarray(v).reshape(-1).shape[0] != nx:
            raise ValueError(f"estimate {i} has dimension {np.asarray(v).size}, expected {nx}")
    if u is not None and np.asarray(u).reshape(-1).shape[0] != nu:
        raise ValueError(f"input has dimension {np.asarray(u).size}, expected {nu}")


def step(problem: Problem, gains: GainSet, x, xhats, u) -> tuple:
    """Advance the plant and all observers by one synchronous round.

    Every observer reads only round-t quantities: the neighbor estimates
    it mixes and couples against are the pre-update values. Returns the
    next plant state and the list of next estimates as float arrays.
    """
    _check_dims(problem, x, xhats, u)
    plant = _ExactPlant(problem, gains)
    xn, hn = plant.advance(
        _frac_vector(x), [_frac_vector(v) for v in xhats],
        _frac_vector(u) if problem.system.nu else [],
    )
    return (
        np.array([float(v) for v in xn]),
        [np.array([float(v) for v in h]) for h in hn],
    )


def _input_at(config: SimConfig, nu: int, t: int) -> list:
    if nu == 0:
        return []
    if config.input is None:
        return [Fraction(0)] * nu
    arr = config.input
    if arr.ndim == 1:
        if arr.shape[0] != nu:
            raise ValueError(f"constant input has dimension {arr.shape[0]}, expected {nu}")
        return _frac_vector(arr)
    if arr.ndim == 2:
        if arr.shape != (config.steps, nu):
            raise ValueError(
                f"input sequence has shape {arr.shape}, expected ({config.steps}, {nu})"
            )
        return _frac_vector(arr[t])
    raise ValueError(f"input must be a vector or a (steps, nu) array, got ndim {arr.ndim}")


def run(problem: Problem, gains: GainSet, config: SimConfig,
        Q: Optional[np.ndarray] = None) -> Trajectory:
    """Simulate config.steps rounds and return the recorded trajectory.

    After the run, the recorded stacked errors are checked against the
    linear recursion e(t+1) = S e(t) to relative tolerance 1e-9 per
    step; the identity holds for any input because the input cancels
    from the error. A violation raises RuntimeError.
    """
    _check_dims(problem, config.x0, config.xhat0, None)
    if config.record_lyapunov and Q is None:
        raise ValueError("record_lyapunov requires a certificate Q")
    n, nx = problem.graph.node_count, problem.system.nx
    T = config.steps
    plant = _ExactPlant(problem, gains)

    x = _frac_vector(config.x0)
    xhats = [_frac_vector(v) for v in config.xhat0]
    states = np.empty((T + 1, nx))
    estimates = np.empty((n, T + 1, nx))
    errors = np.empty((n, T + 1, nx))

    def record(t, xv, hv):
        states[t] = [float(v) for v in xv]
        for i in range(n):
            estimates[i, t] = [float(v) for v in hv[i]]
            # difference taken exactly, then rounded once
            errors[i, t] = [float(a - b) for a, b in zip(xv, hv[i])]

    record(0, x, xhats)
    for t in range(T):
        x, xhats = plant.advance(x, xhats, _input_at(config, problem.system.nu, t))
        record(t + 1, x, xhats)

    stacked = np.concatenate([errors[i] for i in range(n)], axis=1)
    S = assemble(problem.system, problem.graph, gains).S
    for t in range(T):
        resid = float(np.linalg.norm(stacked[t + 1] - S @ stacked[t]))
        bound = RECURSION_RTOL * float(np.linalg.norm(stacked[t]))
        if resid > bound:
            raise RuntimeError(
                f"recorded error at step {t + 1} deviates from the stacked recursion: "
                f"residual {resid:.3e} exceeds {bound:.3e}"
            )

    norms = np.linalg.norm(errors, axis=2).T
    lyap = None
    if config.record_lyapunov:
        Qm = 0.5 * (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T)
        lyap = np.einsum("ti,ij,tj->t", stacked, Qm, stacked)
    return Trajectory(
        states=states,
        estimates=estimates,
        errors=errors,
        error_norms=norms,
        stacked_errors=stacked,
        message_counts=tuple(n for _ in range(T)),
        message_dimension=nx,
        lyapunov=lyap,
    )


def lyapunov_trace(trajectory: Trajectory, Q: np.ndarray) -> list:
    """Evaluate V(t) = e(t)' Q e(t) along a trajectory and check decay.

    Q must be symmetric positive definite. Raises RuntimeError if V
    fails to decrease strictly at any step whose error norm is above the
    numerical floor.
    """
    Qm = np.asarray(Q, dtype=float)
    if not np.allclose(Qm, Qm.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(Qm).max()))):
        raise ValueError("Q is not symmetric")
    if float(np.linalg.eigvalsh(0.5 * (Qm + Qm.T)).min()) <= 0.0:
        raise ValueError("Q is not positive definite")
    e = trajectory.stacked_errors
    V = [float(v) for v in np.einsum("ti,ij,tj->t", e, Qm, e)]
    for t in range(len(V) - 1):
        if float(np.linalg.norm(e[t])) > ZERO_FLOOR and not V[t + 1] < V[t]:
            raise RuntimeError(
                f"V failed to decrease at step {t}: V({t}) = {V[t]:.6e}, "
                f"V({t + 1}) = {V[t + 1]:.6e}"
            )
    return V


def export_csv(trajectory: Trajectory, path, include_states: bool = False) -> None:
    """Write per-step error norms (and V when recorded) as CSV.

    Columns are t, one error-norm column per node, then V if the
    trajectory recorded it; include_states appends the plant state.
    Values are written with shortest round-trip formatting, so repeated
    exports of the same trajectory are byte-identical.
    """
    n = trajectory.error_norms.shape[1]
    header = ["t"] + [f"norm_e_{i + 1}" for i in range(n)]
    if trajectory.lyapunov is not None:
        header.append("V")
    if include_states:
        header += [f"x_{j + 1}" for j in range(trajectory.states.shape[1])]
    lines = [", ".join(header)]
    for t in range(trajectory.states.shape[0]):
        row = [str(t)] + [repr(float(v)) for v in trajectory.error_norms[t]]
        if trajectory.lyapunov is not None:
            row.append(repr(float(trajectory.lyapunov[t])))
        if include_states:
            row += [repr(float(v)) for v in trajectory.states[t]]
        lines.append(", ".join(row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
