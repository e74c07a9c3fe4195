"""Plant, sensor, and communication-graph data model.

Defines the immutable problem description consumed by every other module:
the discrete-time plant (A, B), the per-node output matrices C_i, and the
directed communication graph. Also owns the JSON problem-file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from .synthesis import SynthesisOptions

__all__ = [
    "ProblemFormatError",
    "LtiSystem",
    "SensorGraph",
    "Problem",
    "load_problem",
    "save_problem",
    "stacked_output",
    "neighbor_sets",
]


class ProblemFormatError(ValueError):
    """Problem document violates the schema; the message names the field."""


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """Discrete-time plant x(t+1) = A x(t) + B u(t) observed by N nodes.

    Parameters
    ----------
    A : ndarray
        State transition matrix, nx by nx.
    B : ndarray
        Input matrix, nx rows.
    outputs : sequence of ndarray
        Per-node output matrices C_i, each with nx columns. A node may
        carry a zero-row C_i, meaning it takes no measurement of its own.
    """

    A: np.ndarray
    B: np.ndarray
    outputs: tuple

    def __init__(self, A, B, outputs: Sequence):
        A = _freeze(np.atleast_2d(A))
        B = _freeze(np.atleast_2d(B))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ProblemFormatError(f"A: expected a square matrix, got shape {A.shape}")
        nx = A.shape[0]
        if B.shape[0] != nx:
            raise ProblemFormatError(f"B: expected {nx} rows to match A, got {B.shape[0]}")
        outs = []
        for i, C in enumerate(outputs):
            C = np.asarray(C, dtype=float)
            if C.size == 0:
                C = C.reshape(0, nx) if C.ndim != 2 or C.shape[1] == nx else C
            C = np.atleast_2d(C)
            if C.shape[1] != nx:
                raise ProblemFormatError(
                    f"outputs[{i}]: expected {nx} columns to match A, got {C.shape[1]}"
                )
            outs.append(_freeze(C))
        outs = tuple(outs)
        if not outs:
            raise ProblemFormatError("outputs: at least one node is required")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "outputs", outs)

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def node_count(self) -> int:
        return len(self.outputs)

    @property
    def output_dims(self) -> tuple:
        """Per-node measurement counts n_y,i."""
        return tuple(C.shape[0] for C in self.outputs)


@dataclass(frozen=True, eq=False)
class SensorGraph:
    """Directed communication topology.

    An edge (i, j) means node j receives messages from node i. Self-loops
    are forbidden; the self term is carried by the consensus weight on the
    diagonal. Node indices are 0-based here; files use 1-based indices.
    """

    node_count: int
    edges: tuple = field(default=())

    def __init__(self, node_count: int, edges: Sequence = ()):
        if node_count < 1:
            raise ProblemFormatError(f"graph: node_count must be >= 1, got {node_count}")
        seen = set()
        norm = []
        for k, e in enumerate(edges):
            i, j = int(e[0]), int(e[1])
            if not (0 <= i < node_count and 0 <= j < node_count):
                raise ProblemFormatError(
                    f"graph.edges[{k}]: node index out of range for {node_count} nodes: ({i}, {j})"
                )
            if i == j:
                raise ProblemFormatError(f"graph.edges[{k}]: self-loop at node {i}")
            if (i, j) in seen:
                raise ProblemFormatError(f"graph.edges[{k}]: duplicate edge ({i}, {j})")
            seen.add((i, j))
            norm.append((i, j))
        object.__setattr__(self, "node_count", int(node_count))
        object.__setattr__(self, "edges", tuple(sorted(norm)))

    @property
    def adjacency(self) -> np.ndarray:
        """0/1 matrix with entry (i, j) = 1 iff edge (i, j) exists."""
        a = np.zeros((self.node_count, self.node_count))
        for i, j in self.edges:
            a[i, j] = 1.0
        a.setflags(write=False)
        return a

    def in_neighbors(self, i: int) -> tuple:
        """Nodes j that send to node i, ascending."""
        return tuple(sorted(j for (j, k) in self.edges if k == i))


@dataclass(frozen=True, eq=False)
class Problem:
    """A complete synthesis problem: plant, graph, and solver options."""

    system: LtiSystem
    graph: SensorGraph
    options: Optional["SynthesisOptions"] = None

    def __post_init__(self):
        if self.options is None:
            from .synthesis import SynthesisOptions

            object.__setattr__(self, "options", SynthesisOptions())
        if self.graph.node_count != self.system.node_count:
            raise ProblemFormatError(
                f"graph: node_count {self.graph.node_count} does not match "
                f"the {self.system.node_count} output nodes"
            )


def stacked_output(system: LtiSystem) -> np.ndarray:
    """Vertical stack of all per-node output matrices, node order preserved."""
    rows = sum(system.output_dims)
    out = np.zeros((rows, system.nx))
    r = 0
    for C in system.outputs:
        out[r:r + C.shape[0], :] = C
        r += C.shape[0]
    return out


def neighbor_sets(graph: SensorGraph) -> list:
    """In-neighbor list of every node, each ascending."""
    return [list(graph.in_neighbors(i)) for i in range(graph.node_count)]


def _require_keys(obj: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ProblemFormatError(f"{where}: unknown key {unknown[0]!r}")


def _matrix(value, where: str) -> list:
    if not isinstance(value, list) or any(not isinstance(r, list) for r in value):
        raise ProblemFormatError(f"{where}: expected an array of rows")
    widths = {len(r) for r in value}
    if len(widths) > 1:
        raise ProblemFormatError(f"{where}: ragged rows, widths {sorted(widths)}")
    for ri, row in enumerate(value):
        for ci, x in enumerate(row):
            if not isinstance(x, (int, float)) or isinstance(x, bool):
                raise ProblemFormatError(f"{where}[{ri}][{ci}]: expected a number")
    return value


def load_problem(source) -> Problem:
    """Read and validate a problem document.

    Parameters
    ----------
    source : str, Path, or mapping
        Path to a JSON problem file, or an already parsed document.

    Returns
    -------
    Problem

    Raises
    ------
    ProblemFormatError
        On any schema violation; the message names the offending field.
    """
    from .synthesis import SynthesisOptions

    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text())
        except OSError as exc:
            raise ProblemFormatError(f"cannot read problem file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ProblemFormatError(f"not valid JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, dict):
        raise ProblemFormatError("top level: expected an object")
    _require_keys(doc, {"A", "B", "nodes", "graph", "options"}, "top level")
    for key in ("A", "B", "nodes", "graph"):
        if key not in doc:
            raise ProblemFormatError(f"top level: missing key {key!r}")

    A = _matrix(doc["A"], "A")
    B = _matrix(doc["B"], "B")
    if not isinstance(doc["nodes"], list) or not doc["nodes"]:
        raise ProblemFormatError("nodes: expected a non-empty array")
    outputs = []
    nx = len(A)
    for i, node in enumerate(doc["nodes"]):
        if not isinstance(node, dict):
            raise ProblemFormatError(f"nodes[{i}]: expected an object")
        _require_keys(node, {"C"}, f"nodes[{i}]")
        if "C" not in node:
            raise ProblemFormatError(f"nodes[{i}]: missing key 'C'")
        C = _matrix(node["C"], f"nodes[{i}].C")
        outputs.append(np.array(C, dtype=float).reshape(len(C), -1) if C else np.zeros((0, nx)))

    graph_doc = doc["graph"]
    if not isinstance(graph_doc, dict):
        raise ProblemFormatError("graph: expected an object")
    _require_keys(graph_doc, {"edges"}, "graph")
    raw_edges = graph_doc.get("edges", [])
    if not isinstance(raw_edges, list):
        raise ProblemFormatError("graph.edges: expected an array")
    edges = []
    n_nodes = len(outputs)
    for k, e in enumerate(raw_edges):
        if not isinstance(e, list) or len(e) != 2:
            raise ProblemFormatError(f"graph.edges[{k}]: expected a [from, to] pair")
        i, j = e
        if not isinstance(i, int) or not isinstance(j, int):
            raise ProblemFormatError(f"graph.edges[{k}]: node indices must be integers")
        if not (1 <= i <= n_nodes and 1 <= j <= n_nodes):
            raise ProblemFormatError(
                f"graph.edges[{k}]: 1-based node index out of range for {n_nodes} nodes: [{i}, {j}]"
            )
        edges.append((i - 1, j - 1))

    opts_doc = doc.get("options", {})
    if not isinstance(opts_doc, dict):
        raise ProblemFormatError("options: expected an object")
    try:
        options = SynthesisOptions(**opts_doc)
    except TypeError as exc:
        raise ProblemFormatError(f"options: {exc}") from exc

    try:
        system = LtiSystem(A, np.array(B, dtype=float).reshape(len(B), -1) if B else np.zeros((nx, 0)), outputs)
        graph = SensorGraph(n_nodes, edges)
    except ProblemFormatError:
        raise
    return Problem(system=system, graph=graph, options=options)


def save_problem(problem: Problem, path) -> None:
    """Write a problem document; load_problem on the result round-trips."""
    from dataclasses import asdict

    doc = {
        "A": problem.system.A.tolist(),
        "B": problem.system.B.tolist(),
        "nodes": [{"C": C.tolist()} for C in problem.system.outputs],
        "graph": {"edges": [[i + 1, j + 1] for (i, j) in problem.graph.edges]},
        "options": {k: v for k, v in asdict(problem.options).items()
                    if v != getattr(type(problem.options)(), k)},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
