import numpy as np
import pytest

from netobs.blocks import GainSet, assemble
from netobs.model import LtiSystem, Problem, SensorGraph
from netobs.simulate import SimConfig, export_csv, lyapunov_trace, run, step

from .conftest import random_instance


def single_node_problem(a=1.3, c=1.0):
    system = LtiSystem(A=np.array([[a]]), B=np.ones((1, 1)), outputs=[np.array([[c]])])
    return Problem(system=system, graph=SensorGraph(node_count=1))


def deadbeat_problem():
    """Two isolated full-measurement nodes with L = -A, so S = 0."""
    A = np.array([[0.7, 0.2], [0.0, 1.4]])
    system = LtiSystem(A=A, B=np.ones((2, 1)), outputs=[np.eye(2), np.eye(2)])
    problem = Problem(system=system, graph=SensorGraph(node_count=2))
    gains = GainSet(W=np.eye(2), L_blocks=[-A.copy(), -A.copy()], M_blocks={})
    return problem, gains


class TestStep:
    def test_zero_error_is_invariant(self, rng):
        problem, gains = random_instance(rng, n=3, nx=2)
        x = rng.normal(size=2)
        xn, hn = step(problem, gains, x, [x, x, x], rng.normal(size=1))
        for h in hn:
            assert np.array_equal(h, xn)

    def test_single_node_reduces_to_luenberger(self, rng):
        problem = single_node_problem(a=1.3, c=2.0)
        gains = GainSet(W=np.eye(1), L_blocks=[np.array([[-0.55]])], M_blocks={})
        x, xh, u = np.array([1.7]), np.array([0.4]), np.array([0.9])
        xn, hn = step(problem, gains, x, [xh], u)
        A, B, C, L = (problem.system.A, problem.system.B,
                      problem.system.outputs[0], gains.L_blocks[0])
        assert np.allclose(xn, A @ x + B @ u, atol=1e-14)
        classical = A @ xh + B @ u + L @ (C @ xh - C @ x)
        assert np.allclose(hn[0], classical, atol=1e-13)

    def test_neighbor_values_are_pre_update(self):
        # node 1 mixes node 0's round-t estimate, not its round-t+1 one
        system = LtiSystem(A=np.eye(1), B=np.zeros((1, 1)),
                           outputs=[np.eye(1), np.zeros((0, 1))])
        problem = Problem(system=system, graph=SensorGraph(node_count=2, edges=[(0, 1)]))
        gains = GainSet(
            W=np.array([[1.0, 0.0], [1.0, 0.0]]),
            L_blocks=[np.array([[-1.0]]), np.zeros((1, 0))],
            M_blocks={(0, 1): np.zeros((1, 1))},
        )
        x = np.array([5.0])
        _, hn = step(problem, gains, x, [np.array([2.0]), np.array([0.0])], np.zeros(1))
        # node 0 jumps to y = 5; node 1 copied the old 2.0
        assert hn[0][0] == 5.0
        assert hn[1][0] == 2.0

    def test_dimension_mismatch_rejected(self, rng):
        problem, gains = random_instance(rng, n=2, nx=2)
        with pytest.raises(ValueError, match="dimension"):
            step(problem, gains, np.ones(3), [np.ones(2)] * 2, np.ones(1))
        with pytest.raises(ValueError, match="estimates"):
            step(problem, gains, np.ones(2), [np.ones(2)], np.ones(1))


class TestRun:
    def test_matches_matrix_power_recursion(self, rng):
        problem, gains = random_instance(rng, n=3, nx=2)
        n, nx = 3, 2
        x0 = rng.normal(size=nx)
        xh0 = [rng.normal(size=nx) for _ in range(n)]
        traj = run(problem, gains, SimConfig(x0=x0, xhat0=xh0, steps=50))
        S = assemble(problem.system, problem.graph, gains).S
        e = traj.stacked_errors[0]
        for t in range(1, 51):
            e = S @ e
            scale = max(np.linalg.norm(e), 1e-300)
            assert np.linalg.norm(traj.stacked_errors[t] - e) / scale < 1e-8

    def test_input_does_not_touch_error(self, rng):
        problem, gains = random_instance(rng, n=2, nx=2, nu=2)
        x0 = rng.normal(size=2)
        xh0 = [rng.normal(size=2), rng.normal(size=2)]
        base = run(problem, gains, SimConfig(x0=x0, xhat0=xh0, steps=30))
        for inp in (np.ones(2), rng.normal(size=(30, 2)), 100.0 * np.ones(2)):
            other = run(problem, gains, SimConfig(x0=x0, xhat0=xh0, steps=30, input=inp))
            scale = max(np.abs(base.stacked_errors).max(), 1e-300)
            diff = np.abs(other.stacked_errors - base.stacked_errors).max()
            assert diff / scale < 1e-9
            assert not np.allclose(other.states, base.states)

    def test_trajectory_shapes_and_messages(self, rng):
        problem, gains = random_instance(rng, n=3, nx=2)
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(2), xhat0=[np.zeros(2)] * 3, steps=7))
        assert traj.states.shape == (8, 2)
        assert traj.estimates.shape == (3, 8, 2)
        assert traj.errors.shape == (3, 8, 2)
        assert traj.error_norms.shape == (8, 3)
        assert traj.stacked_errors.shape == (8, 6)
        assert traj.message_counts == (3,) * 7
        assert traj.message_dimension == 2
        assert traj.steps == 7

    def test_lyapunov_column_needs_Q(self, rng):
        problem, gains = random_instance(rng, n=2, nx=1)
        config = SimConfig(x0=np.ones(1), xhat0=[np.zeros(1)] * 2,
                           steps=3, record_lyapunov=True)
        with pytest.raises(ValueError, match="Q"):
            run(problem, gains, config)

    def test_constant_input_wrong_width(self, rng):
        problem, gains = random_instance(rng, n=2, nx=2, nu=2)
        config = SimConfig(x0=np.ones(2), xhat0=[np.zeros(2)] * 2,
                           steps=3, input=np.ones(3))
        with pytest.raises(ValueError, match="input"):
            run(problem, gains, config)

    def test_unstable_gains_diverge(self):
        problem = single_node_problem(a=2.0)
        gains = GainSet(W=np.eye(1), L_blocks=[np.zeros((1, 1))], M_blocks={})
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(1), xhat0=[np.zeros(1)], steps=20))
        e0 = np.linalg.norm(traj.stacked_errors[0])
        assert not traj.converged(1e-6 * e0)
        assert traj.max_error_norm(-1) > 1e5


class TestSimConfig:
    def test_steps_must_be_positive(self):
        with pytest.raises(ValueError, match="steps"):
            SimConfig(x0=np.ones(1), xhat0=(np.ones(1),), steps=0)


class TestLyapunovTrace:
    def test_deadbeat_reaches_zero_in_one_step(self):
        problem, gains = deadbeat_problem()
        traj = run(problem, gains,
                   SimConfig(x0=np.array([1.0, -2.0]),
                             xhat0=[np.zeros(2), np.ones(2)], steps=3))
        V = lyapunov_trace(traj, np.eye(4))
        assert V[1] == 0.0 and V[2] == 0.0

    def test_zero_initial_error_stays_zero(self, rng):
        problem, gains = random_instance(rng, n=2, nx=2)
        x0 = rng.normal(size=2)
        traj = run(problem, gains, SimConfig(x0=x0, xhat0=[x0, x0], steps=5))
        V = lyapunov_trace(traj, np.eye(4))
        assert V == [0.0] * 6

    def test_rejects_non_pd(self, rng):
        problem, gains = deadbeat_problem()
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(2), xhat0=[np.zeros(2)] * 2, steps=2))
        with pytest.raises(ValueError, match="positive definite"):
            lyapunov_trace(traj, np.diag([1.0, 1.0, 1.0, -0.1]))
        with pytest.raises(ValueError, match="symmetric"):
            lyapunov_trace(traj, np.array([[1.0, 0.5, 0, 0], [0, 1, 0, 0],
                                           [0, 0, 1, 0], [0, 0, 0, 1.0]]))

    def test_raises_on_growth(self):
        problem = single_node_problem(a=2.0)
        gains = GainSet(W=np.eye(1), L_blocks=[np.zeros((1, 1))], M_blocks={})
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(1), xhat0=[np.zeros(1)], steps=5))
        with pytest.raises(RuntimeError, match="decrease"):
            lyapunov_trace(traj, np.eye(1))


class TestExportCsv:
    def test_header_and_rows(self, tmp_path, rng):
        problem, gains = random_instance(rng, n=3, nx=2)
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(2), xhat0=[np.zeros(2)] * 3, steps=4))
        path = tmp_path / "traj.csv"
        export_csv(traj, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t, norm_e_1, norm_e_2, norm_e_3"
        assert len(lines) == 6
        assert lines[1].startswith("0, ")

    def test_lyapunov_column_present_when_recorded(self, tmp_path):
        problem, gains = deadbeat_problem()
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(2), xhat0=[np.zeros(2)] * 2, steps=2,
                             record_lyapunov=True),
                   Q=np.eye(4))
        path = tmp_path / "traj.csv"
        export_csv(traj, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t, norm_e_1, norm_e_2, V"

    def test_repeat_export_byte_identical(self, tmp_path, rng):
        problem, gains = random_instance(rng, n=2, nx=2)
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(2), xhat0=[np.zeros(2)] * 2, steps=3))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        export_csv(traj, p1)
        export_csv(traj, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_state_columns_behind_flag(self, tmp_path):
        problem, gains = deadbeat_problem()
        traj = run(problem, gains,
                   SimConfig(x0=np.ones(2), xhat0=[np.zeros(2)] * 2, steps=2))
        path = tmp_path / "traj.csv"
        export_csv(traj, path, include_states=True)
        assert path.read_text().splitlines()[0].endswith("x_1, x_2")
