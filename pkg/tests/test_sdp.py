import json
import logging

import numpy as np
import pytest

from netobs.model import LtiSystem, Problem, SensorGraph
from netobs.sdp import (
    build_feasibility_instance,
    build_linearized_instance,
    instance_dump,
    solve,
)
from netobs.synthesis import SynthesisOptions, synthesize


@pytest.fixture(scope="module")
def tiny_problem():
    system = LtiSystem(A=np.array([[1.2]]), B=np.ones((1, 1)), outputs=[np.eye(1)])
    return Problem(system=system, graph=SensorGraph(node_count=1))


@pytest.fixture(scope="module")
def pair_problem():
    system = LtiSystem(
        A=np.array([[1.1, 0.3], [0.0, 0.8]]),
        B=np.ones((2, 1)),
        outputs=[np.array([[1.0, 0.0]]), np.zeros((0, 2))],
    )
    graph = SensorGraph(node_count=2, edges=[(0, 1), (1, 0)])
    return Problem(system=system, graph=graph)


class TestInstanceBuilding:
    def test_feasibility_objective_is_constant(self, tiny_problem):
        inst = build_feasibility_instance(tiny_problem)
        assert inst.kind == "feasibility"
        assert inst.program.objective.expr.is_constant()

    def test_linearized_objective_tracks_anchors(self, tiny_problem):
        inst = build_linearized_instance(tiny_problem, np.eye(1), np.eye(1))
        assert inst.kind == "linearized"
        assert not inst.program.objective.expr.is_constant()

    def test_asymmetric_anchor_symmetrized_with_warning(self, pair_problem, caplog):
        Qa = np.eye(4)
        Qa[0, 1] = 1e-4
        with caplog.at_level(logging.WARNING, logger="netobs.sdp"):
            build_linearized_instance(pair_problem, Qa, np.eye(4))
        assert any("symmetr" in r.message for r in caplog.records)

    def test_non_pd_anchor_rejected(self, pair_problem):
        with pytest.raises(ValueError, match="positive definite"):
            build_linearized_instance(pair_problem, np.diag([1.0, 1, 1, -1e-3]), np.eye(4))


class TestSolve:
    def test_feasibility_solution_verified(self, pair_problem):
        sol = solve(build_feasibility_instance(pair_problem))
        assert sol.status == "optimal"
        assert sol.gains is not None
        assert np.allclose(sol.gains.W.sum(axis=1), 1.0, atol=1e-12)
        assert float(np.linalg.eigvalsh(sol.Q).min()) > 0.0
        m = sol.Q.shape[0]
        coupling = np.block([[sol.Q, np.eye(m)], [np.eye(m), sol.P]])
        assert float(np.linalg.eigvalsh(coupling).min()) > -1e-7

    def test_impossible_trace_budget_is_infeasible(self, tiny_problem):
        cramped = Problem(
            system=tiny_problem.system,
            graph=tiny_problem.graph,
            options=SynthesisOptions(trace_cap=1e-10),
        )
        sol = solve(build_feasibility_instance(cramped))
        assert sol.status == "infeasible"

    def test_synthesize_reports_infeasible_init(self, tiny_problem):
        cramped = Problem(
            system=tiny_problem.system,
            graph=tiny_problem.graph,
            options=SynthesisOptions(trace_cap=1e-10),
        )
        state = synthesize(cramped)
        assert state.status == "infeasible_init"
        assert state.gains is None
        assert state.J_history == ()


class TestInstanceDump:
    def test_dump_structure(self, tiny_problem):
        doc = json.loads(instance_dump(build_feasibility_instance(tiny_problem)))
        assert doc["kind"] == "feasibility"
        assert {"zero", "nonneg", "psd"} <= set(doc["cones"])
        assert doc["cones"]["psd"]
        assert doc["constraint_triplets"]
        names = {v["name"] for v in doc["variables"]}
        assert any(n.startswith("Q") for n in names)

    def test_feasibility_dump_has_no_objective_terms(self, tiny_problem):
        doc = json.loads(instance_dump(build_feasibility_instance(tiny_problem)))
        assert doc["objective"] == []
