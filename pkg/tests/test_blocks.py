import json

import numpy as np
import pytest

from netobs.blocks import (
    GainSet,
    assemble,
    consensus_consistency_check,
    laplacian_nullspace_check,
    load_gains,
    save_gains,
)
from netobs.model import LtiSystem, SensorGraph

from .conftest import random_instance


def two_node_parts(a=2.0, w=0.4, l0=-1.5, l1=0.5, m=0.3, c0=1.0, c1=2.0):
    system = LtiSystem(
        A=np.array([[a]]),
        B=np.ones((1, 1)),
        outputs=[np.array([[c0]]), np.array([[c1]])],
    )
    graph = SensorGraph(node_count=2, edges=[(0, 1)])
    gains = GainSet(
        W=np.array([[1.0, 0.0], [w, 1.0 - w]]),
        L_blocks=[np.array([[l0]]), np.array([[l1]])],
        M_blocks={(0, 1): np.array([[m]])},
    )
    return system, graph, gains


class TestGainSet:
    def test_row_sums_must_be_one(self):
        with pytest.raises(ValueError, match="row"):
            GainSet(
                W=np.array([[1.0, 0.0], [0.4, 0.7]]),
                L_blocks=[np.zeros((1, 1))] * 2,
                M_blocks={},
            )

    def test_arrays_frozen(self):
        _, _, gains = two_node_parts()
        with pytest.raises(ValueError):
            gains.W[0, 0] = 2.0


class TestAssemble:
    def test_two_node_closed_loop_by_hand(self):
        a, w, l0, l1, m, c0, c1 = 2.0, 0.4, -1.5, 0.5, 0.3, 1.0, 2.0
        system, graph, gains = two_node_parts(a, w, l0, l1, m, c0, c1)
        S = assemble(system, graph, gains).S
        expected = np.array([
            [a + l0 * c0, 0.0],
            [w * a + m, (1.0 - w) * a + l1 * c1 - m],
        ])
        assert np.allclose(S, expected, rtol=0, atol=1e-14)

    def test_coupling_row_sums_vanish_blockwise(self, rng):
        problem, gains = random_instance(rng, n=4, nx=2)
        asm = assemble(problem.system, problem.graph, gains)
        consensus_basis = np.kron(np.ones(4), np.eye(2)).T
        assert np.allclose(asm.M_big @ consensus_basis, 0.0, atol=1e-12)

    def test_rejects_weight_outside_graph(self):
        system, graph, gains = two_node_parts()
        W = np.array(gains.W)
        W[0, 1] = 0.2
        W[0, 0] = 0.8
        bad = GainSet(W=W, L_blocks=list(gains.L_blocks), M_blocks=dict(gains.M_blocks))
        with pytest.raises(ValueError, match="edge"):
            assemble(system, graph, bad)

    def test_rejects_missing_coupling_block(self):
        system, graph, gains = two_node_parts()
        bad = GainSet(W=gains.W, L_blocks=list(gains.L_blocks), M_blocks={})
        with pytest.raises(ValueError):
            assemble(system, graph, bad)

    def test_rejects_wrong_injection_shape(self):
        system, graph, gains = two_node_parts()
        bad = GainSet(
            W=gains.W,
            L_blocks=[np.zeros((1, 2)), gains.L_blocks[1]],
            M_blocks=dict(gains.M_blocks),
        )
        with pytest.raises(ValueError):
            assemble(system, graph, bad)


class TestStructuralChecks:
    def test_laplacian_annihilates_consensus(self, rng):
        for _ in range(10):
            problem, gains = random_instance(rng)
            asm = assemble(problem.system, problem.graph, gains)
            assert laplacian_nullspace_check(asm)

    def test_consensus_consistency(self, rng):
        for _ in range(10):
            problem, gains = random_instance(rng)
            asm = assemble(problem.system, problem.graph, gains)
            assert consensus_consistency_check(asm, problem.system)

    def test_perturbed_coupling_fails_nullspace(self):
        system, graph, gains = two_node_parts()
        asm = assemble(system, graph, gains)
        broken = type(asm)(
            C_blkdiag=asm.C_blkdiag,
            L_blkdiag=asm.L_blkdiag,
            M_big=asm.M_big + 0.01,
            S=asm.S,
            W_kron_A=asm.W_kron_A,
            node_count=asm.node_count,
            state_dim=asm.state_dim,
        )
        assert not laplacian_nullspace_check(broken)


class TestGainPersistence:
    def test_round_trip(self, tmp_path, rng):
        problem, gains = random_instance(rng, n=3, nx=2)
        path = tmp_path / "gains.json"
        save_gains(gains, path)
        back = load_gains(path, problem.system, problem.graph)
        assert np.array_equal(back.W, gains.W)
        for a, b in zip(back.L_blocks, gains.L_blocks):
            assert np.array_equal(a, b)
        assert set(back.M_blocks) == set(gains.M_blocks)
        for e in gains.M_blocks:
            assert np.array_equal(back.M_blocks[e], gains.M_blocks[e])

    def test_saved_bytes_deterministic(self, tmp_path, rng):
        _, gains = random_instance(rng, n=3, nx=2)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_gains(gains, p1)
        save_gains(gains, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_edges_stored_one_based(self, tmp_path):
        system, graph, gains = two_node_parts()
        path = tmp_path / "gains.json"
        save_gains(gains, path)
        doc = json.loads(path.read_text())
        assert doc["M"][0]["from"] == 1 and doc["M"][0]["to"] == 2

    def test_load_rejects_wrong_node_count(self, tmp_path, rng):
        problem, gains = random_instance(rng, n=3, nx=2)
        path = tmp_path / "gains.json"
        save_gains(gains, path)
        other, _ = random_instance(rng, n=2, nx=2)
        with pytest.raises(ValueError):
            load_gains(path, other.system, other.graph)

    def test_load_rejects_unknown_key(self, tmp_path):
        system, graph, gains = two_node_parts()
        path = tmp_path / "gains.json"
        save_gains(gains, path)
        doc = json.loads(path.read_text())
        doc["extra"] = []
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="extra"):
            load_gains(path, system, graph)
