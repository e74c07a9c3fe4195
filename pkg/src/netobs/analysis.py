"""Structural checks: joint detectability of the sensor set and strong
connectivity of the communication graph.

Both checks are advisory. Gain synthesis runs regardless of their outcome
and reports its own feasibility; these reports explain why a problem is or
is not within the regime the method targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

from .model import LtiSystem, SensorGraph, stacked_output

__all__ = [
    "DetectabilityReport",
    "ConnectivityReport",
    "is_detectable",
    "marginal_joint_detectability",
    "connectivity_report",
]

# singular value counts as nonzero iff sigma > RANK_RTOL * sigma_max * max(rows, cols)
RANK_RTOL = 1e-8
DEFAULT_MARGIN = 1e-9


@dataclass(frozen=True)
class DetectabilityReport:
    """Joint detectability structure of the node outputs.

    critical_nodes lists nodes whose removal destroys joint detectability;
    marginal means every node is critical. undetectable_modes holds the
    eigenvalues at which the full stacked output fails the rank test.
    Node indices are 0-based.
    """

    joint_detectable: bool
    marginal: bool
    critical_nodes: tuple
    undetectable_modes: tuple


@dataclass(frozen=True)
class ConnectivityReport:
    """Strong-connectivity structure of the communication graph.

    redundant_edges lists edges whose removal preserves strong connectivity;
    minimal means the graph is strongly connected with no redundant edge.
    source_components lists the strongly connected components without any
    incoming edge in the condensation. Node indices are 0-based.
    """

    strongly_connected: bool
    minimal: bool
    redundant_edges: tuple
    source_components: tuple


def _pbh_rank_ok(A: np.ndarray, C: np.ndarray, lam: complex) -> bool:
    nx_ = A.shape[0]
    test = np.vstack([lam * np.eye(nx_) - A, C.astype(complex)])
    s = np.linalg.svd(test, compute_uv=False)
    tol = RANK_RTOL * (s[0] if s.size else 0.0) * max(test.shape)
    return int(np.sum(s > tol)) == nx_


def is_detectable(A: np.ndarray, C: np.ndarray, margin: float = DEFAULT_MARGIN) -> bool:
    """Eigenvalue-wise rank test for detectability of the pair (C, A).

    True iff every eigenvalue of A with magnitude at least 1 - margin keeps
    the stacked matrix [lam I - A; C] at full column rank. Eigenvalues on
    the unit circle count as requiring observability.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    return not _undetectable_modes(A, C, margin)


def _undetectable_modes(A: np.ndarray, C: np.ndarray, margin: float) -> list:
    bad = []
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - margin and not _pbh_rank_ok(A, C, lam):
            bad.append(complex(lam))
    return bad


def marginal_joint_detectability(system: LtiSystem, margin: float = DEFAULT_MARGIN) -> DetectabilityReport:
    """Classify the sensor set: jointly detectable, and marginally so?

    Marginal means joint detectability holds but is destroyed by removing
    any single node's output rows. A single-node network is reported as
    not marginal by convention, since there is no node whose removal
    leaves a well-defined remainder to test.
    """
    A = system.A
    C_full = stacked_output(system)
    bad_modes = _undetectable_modes(A, C_full, margin)
    joint = not bad_modes

    critical = []
    for drop in range(system.node_count):
        keep = [C for i, C in enumerate(system.outputs) if i != drop]
        C_rest = np.vstack(keep) if keep else np.zeros((0, system.nx))
        if _undetectable_modes(A, C_rest, margin):
            critical.append(drop)
    marginal = joint and system.node_count > 1 and len(critical) == system.node_count
    return DetectabilityReport(
        joint_detectable=joint,
        marginal=marginal,
        critical_nodes=tuple(critical),
        undetectable_modes=tuple(bad_modes),
    )


def _digraph(graph: SensorGraph) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(range(graph.node_count))
    g.add_edges_from(graph.edges)
    return g


def connectivity_report(graph: SensorGraph) -> ConnectivityReport:
    """Strong connectivity, edge-minimality, and source components."""
    g = _digraph(graph)
    strong = nx.is_strongly_connected(g)

    redundant = []
    if strong:
        for e in graph.edges:
            g.remove_edge(*e)
            if nx.is_strongly_connected(g):
                redundant.append(e)
            g.add_edge(*e)

    cond = nx.condensation(g)
    sources = [
        tuple(sorted(cond.nodes[n]["members"]))
        for n in cond.nodes
        if cond.in_degree(n) == 0
    ]
    sources.sort()
    return ConnectivityReport(
        strongly_connected=strong,
        minimal=strong and not redundant,
        redundant_edges=tuple(redundant),
        source_components=tuple(sources),
    )
