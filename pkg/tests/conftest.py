import importlib.resources

import numpy as np
import pytest

from netobs.blocks import GainSet
from netobs.model import LtiSystem, Problem, SensorGraph, load_problem


def example_path(name: str):
    return importlib.resources.files("netobs") / "examples" / f"{name}.json"


@pytest.fixture(scope="session")
def baseline_problem():
    return load_problem(example_path("baseline"))


@pytest.fixture(scope="session")
def augmented_problem():
    return load_problem(example_path("augmented_sensor"))


@pytest.fixture(scope="session")
def edge_problem():
    return load_problem(example_path("augmented_edge"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_instance(rng, n=None, nx=None, p_max=2, nu=1, edge_prob=0.6):
    """A random well-formed problem plus arbitrary admissible gains."""
    n = int(rng.integers(1, 5)) if n is None else n
    nx = int(rng.integers(1, 4)) if nx is None else nx
    A = rng.normal(size=(nx, nx))
    B = rng.normal(size=(nx, nu))
    outs = []
    for _ in range(n):
        p = int(rng.integers(0, p_max + 1))
        outs.append(rng.normal(size=(p, nx)))
    if all(C.shape[0] == 0 for C in outs):
        outs[0] = rng.normal(size=(1, nx))
    edges = [(j, i) for i in range(n) for j in range(n)
             if j != i and rng.random() < edge_prob]
    if not edges and n > 1:
        edges = [(0, 1)]
    graph = SensorGraph(node_count=n, edges=edges)
    system = LtiSystem(A=A, B=B, outputs=outs)
    W = np.zeros((n, n))
    for (j, i) in edges:
        W[i, j] = rng.uniform(-0.3, 0.5)
    for i in range(n):
        W[i, i] = 1.0 - W[i].sum()
    L = [rng.normal(scale=0.3, size=(nx, C.shape[0])) for C in outs]
    M = {e: rng.normal(scale=0.2, size=(nx, nx)) for e in edges}
    return Problem(system=system, graph=graph), GainSet(W=W, L_blocks=L, M_blocks=M)
