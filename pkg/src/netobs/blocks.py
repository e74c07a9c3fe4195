"""Structured block matrices of the observer network.

Builds the stacked operators that govern the error dynamics: the consensus
term W kron A, the block-diagonal output injection L C, the Laplacian-type
coupling matrix, and their sum S. The per-edge parameterization keeps the
coupling matrix derived, never free: its diagonal blocks are always the
in-neighbor sums, which is what annihilates consensus directions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import LtiSystem, SensorGraph

__all__ = [
    "GainSet",
    "AssembledMatrices",
    "assemble",
    "laplacian_nullspace_check",
    "consensus_consistency_check",
    "save_gains",
    "load_gains",
]

ROW_SUM_TOL = 1e-9


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class GainSet:
    """Observer gain triple.

    Parameters
    ----------
    W : ndarray
        N by N consensus weights; row sums must equal 1 within 1e-9.
    L_blocks : sequence of ndarray
        Per-node output-injection gains, node i's block of size nx by n_y,i.
    M_blocks : mapping
        Per-edge coupling gains keyed by (sender, receiver) node pairs,
        each block nx by nx. Keys must match the graph's edge set exactly,
        which assemble and load_gains verify.
    """

    W: np.ndarray
    L_blocks: tuple
    M_blocks: Mapping

    def __init__(self, W, L_blocks: Sequence, M_blocks: Mapping):
        W = _freeze(np.atleast_2d(W))
        if W.shape[0] != W.shape[1]:
            raise ValueError(f"W must be square, got shape {W.shape}")
        dev = np.abs(W.sum(axis=1) - 1.0)
        if dev.size and dev.max() > ROW_SUM_TOL:
            i = int(dev.argmax())
            raise ValueError(
                f"W row {i} sums to {W[i].sum():.12g}, expected 1 within {ROW_SUM_TOL:g}"
            )
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "L_blocks", tuple(_freeze(L) for L in L_blocks))
        object.__setattr__(
            self,
            "M_blocks",
            {(int(j), int(i)): _freeze(M) for (j, i), M in sorted(M_blocks.items())},
        )


@dataclass(frozen=True, eq=False)
class AssembledMatrices:
    """Stacked operators of the error dynamics e(t+1) = S e(t)."""

    C_blkdiag: np.ndarray
    L_blkdiag: np.ndarray
    M_big: np.ndarray
    S: np.ndarray
    W_kron_A: np.ndarray
    node_count: int
    state_dim: int


def _validate_gains(system: LtiSystem, graph: SensorGraph, gains: GainSet) -> None:
    n = graph.node_count
    nx = system.nx
    if gains.W.shape != (n, n):
        raise ValueError(f"W has shape {gains.W.shape}, expected ({n}, {n})")
    edge_set = set(graph.edges)
    for i in range(n):
        for j in range(n):
            if i != j and (j, i) not in edge_set and gains.W[i, j] != 0.0:
                raise ValueError(
                    f"W[{i},{j}] = {gains.W[i, j]:g} but there is no edge from node {j} to node {i}"
                )
    if len(gains.L_blocks) != n:
        raise ValueError(f"expected {n} L blocks, got {len(gains.L_blocks)}")
    for i, L in enumerate(gains.L_blocks):
        want = (nx, system.output_dims[i])
        if L.shape != want:
            raise ValueError(f"L block for node {i} has shape {L.shape}, expected {want}")
    extra = set(gains.M_blocks) - edge_set
    missing = edge_set - set(gains.M_blocks)
    if extra:
        raise ValueError(f"M block for non-edge {sorted(extra)[0]}")
    if missing:
        raise ValueError(f"missing M block for edge {sorted(missing)[0]}")
    for e, M in gains.M_blocks.items():
        if M.shape != (nx, nx):
            raise ValueError(f"M block for edge {e} has shape {M.shape}, expected ({nx}, {nx})")


def assemble(system: LtiSystem, graph: SensorGraph, gains: GainSet) -> AssembledMatrices:
    """Build the stacked error-dynamics operators from a gain triple.

    Returns S = W kron A + L C - Mbig with each term formed separately and
    summed left to right, so identical inputs give bit-identical output.

    Raises
    ------
    ValueError
        On any sparsity violation, missing or extra coupling block, or
        dimension mismatch between the gains and the problem.
    """
    _validate_gains(system, graph, gains)
    n = graph.node_count
    nx = system.nx
    m = n * nx
    ny = system.output_dims
    ytot = sum(ny)
    yoff = np.concatenate([[0], np.cumsum(ny)]).astype(int)

    C_bd = np.zeros((ytot, m))
    L_bd = np.zeros((m, ytot))
    for i in range(n):
        C_bd[yoff[i]:yoff[i + 1], i * nx:(i + 1) * nx] = system.outputs[i]
        L_bd[i * nx:(i + 1) * nx, yoff[i]:yoff[i + 1]] = gains.L_blocks[i]

    M_big = np.zeros((m, m))
    for (j, i), M in gains.M_blocks.items():
        M_big[i * nx:(i + 1) * nx, i * nx:(i + 1) * nx] += M
        M_big[i * nx:(i + 1) * nx, j * nx:(j + 1) * nx] = -M

    W_kron_A = np.kron(gains.W, system.A)
    S = (W_kron_A + L_bd @ C_bd) - M_big
    return AssembledMatrices(
        C_blkdiag=_freeze(C_bd),
        L_blkdiag=_freeze(L_bd),
        M_big=_freeze(M_big),
        S=_freeze(S),
        W_kron_A=_freeze(W_kron_A),
        node_count=n,
        state_dim=nx,
    )


def laplacian_nullspace_check(assembled: AssembledMatrices) -> bool:
    """Verify the coupling matrix annihilates replicated directions.

    For every basis vector v, Mbig applied to the N-fold stack of v must
    vanish up to 1e-10 relative to the Frobenius norm of Mbig.
    """
    nx = assembled.state_dim
    n = assembled.node_count
    scale = np.linalg.norm(assembled.M_big)
    for k in range(nx):
        v = np.zeros(nx)
        v[k] = 1.0
        stacked = np.tile(v, n)
        if np.linalg.norm(assembled.M_big @ stacked) > 1e-10 * scale:
            return False
    return True


def consensus_consistency_check(assembled: AssembledMatrices, system: LtiSystem) -> bool:
    """Verify (W kron A) maps stacked copies of v to stacked copies of A v."""
    nx = system.nx
    n = assembled.node_count
    for k in range(nx):
        v = np.zeros(nx)
        v[k] = 1.0
        lhs = assembled.W_kron_A @ np.tile(v, n)
        rhs = np.tile(system.A @ v, n)
        if np.linalg.norm(lhs - rhs) > 1e-10 * max(np.linalg.norm(rhs), 1.0):
            return False
    return True


def save_gains(gains: GainSet, path) -> None:
    """Write a gain triple as a JSON document; round-trips via load_gains."""
    doc = {
        "W": gains.W.tolist(),
        "L": [L.tolist() for L in gains.L_blocks],
        "M": [
            {"from": j + 1, "to": i + 1, "block": M.tolist()}
            for (j, i), M in gains.M_blocks.items()
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_gains(source, system: LtiSystem, graph: SensorGraph) -> GainSet:
    """Read a gain triple and validate it against a problem.

    Raises
    ------
    ValueError
        On schema problems or any incompatibility with the given system
        and graph; the message names the mismatched dimension.
    """
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ValueError(f"cannot read gains file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"gains file is not valid JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict):
        raise ValueError("gains: top level must be an object")
    unknown = sorted(set(doc) - {"W", "L", "M"})
    if unknown:
        raise ValueError(f"gains: unknown key {unknown[0]!r}")
    for key in ("W", "L", "M"):
        if key not in doc:
            raise ValueError(f"gains: missing key {key!r}")
    n = graph.node_count
    M_blocks = {}
    for k, entry in enumerate(doc["M"]):
        if not isinstance(entry, dict) or set(entry) != {"from", "to", "block"}:
            raise ValueError(f"gains: M[{k}] must be an object with keys from, to, block")
        j, i = entry["from"], entry["to"]
        if not (1 <= j <= n and 1 <= i <= n):
            raise ValueError(f"gains: M[{k}] node index out of range for {n} nodes")
        M_blocks[(j - 1, i - 1)] = np.array(entry["block"], dtype=float)
    L_blocks = []
    for L in doc["L"]:
        arr = np.array(L, dtype=float)
        if arr.size == 0:
            arr = arr.reshape(system.nx if len(L) == system.nx else 0, 0)
        L_blocks.append(arr)
    gains = GainSet(W=np.array(doc["W"], dtype=float), L_blocks=L_blocks, M_blocks=M_blocks)
    _validate_gains(system, graph, gains)
    return gains
