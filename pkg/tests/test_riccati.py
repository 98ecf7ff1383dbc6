import numpy as np
import pytest
import scipy.integrate

from codecontrol.dynamics import LinearSystem, make_2d_product, make_ou, make_oscillator
from codecontrol.errors import NumericalError
from codecontrol.riccati import (
    QuadraticCost,
    full_info_cost_to_go,
    lqr_gain,
    mc_policy_cost,
    solve_riccati,
)


def fig1a():
    return make_ou(1.0, 0.6, 0.2), QuadraticCost(Q=[[0.1]], R=[[0.1]], Q_T=[[0.001]], T=2.0)


def riccati_reference(sys, cost, rtol=1e-12):
    """Backward Riccati solved by an adaptive integrator in reversed time."""
    M = sys.B @ np.linalg.pinv(cost.R) @ sys.B.T
    d = sys.dim_x

    def rhs(tau, y):
        S = y.reshape(d, d)
        return (cost.Q + sys.A.T @ S + S @ sys.A - S @ M @ S).reshape(-1)

    sol = scipy.integrate.solve_ivp(rhs, (0, cost.T), cost.Q_T.reshape(-1), method="DOP853", rtol=rtol, atol=1e-14)
    return sol.y[:, -1].reshape(d, d)


class TestCost:
    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            QuadraticCost(Q=[[-1.0]], R=[[1.0]], Q_T=[[0.0]], T=1.0)

    def test_rejects_bad_horizon(self):
        with pytest.raises(ValueError):
            QuadraticCost(Q=[[1.0]], R=[[1.0]], Q_T=[[0.0]], T=0.0)

    def test_singular_r_must_not_act(self):
        sys = LinearSystem(A=-np.eye(2), B=np.eye(2), D=np.eye(2))
        cost = QuadraticCost(Q=np.eye(2), R=np.diag([0.0, 1.0]), Q_T=np.zeros((2, 2)), T=1.0)
        with pytest.raises(ValueError):
            solve_riccati(sys, cost, 1e-2)


class TestSolveRiccati:
    def test_lyapunov_closed_form(self):
        gamma, qT, T = 0.7, 2.0, 1.5
        sys = LinearSystem(A=[[-gamma]], B=[[0.0]], D=[[0.3]])
        cost = QuadraticCost(Q=[[0.0]], R=[[1.0]], Q_T=[[qT]], T=T)
        path = solve_riccati(sys, cost, 1e-3)
        exact = qT * np.exp(-2 * gamma * (T - path.times))
        np.testing.assert_allclose(path.S[:, 0, 0], exact, rtol=1e-11)

    def test_terminal_condition_exact(self):
        sys, cost = fig1a()
        path = solve_riccati(sys, cost, 1e-3)
        assert path.S[-1, 0, 0] == 0.001
        assert path.integral_trace_DS[-1] == 0.0
        assert len(path.times) == 2001

    def test_fig1a_against_adaptive_reference(self):
        sys, cost = fig1a()
        S0 = solve_riccati(sys, cost, 1e-3).S[0, 0, 0]
        ref = riccati_reference(sys, cost)[0, 0]
        assert S0 == pytest.approx(ref, rel=1e-6)
        # frozen value from the reference integrator
        assert ref == pytest.approx(0.0486811869014, rel=1e-10)

    def test_oscillator_against_adaptive_reference(self):
        sys = make_oscillator(0.4, 0.8, 0.4, 1.0)
        cost = QuadraticCost(Q=np.diag([0.4, 0.0]), R=np.diag([0.0, 0.4]), Q_T=np.zeros((2, 2)), T=5.0)
        S0 = solve_riccati(sys, cost, 1e-3).S[0]
        np.testing.assert_allclose(S0, riccati_reference(sys, cost), rtol=1e-8, atol=1e-12)

    def test_grid_refinement(self):
        sys, cost = fig1a()
        a = solve_riccati(sys, cost, 1e-3).S[0, 0, 0]
        b = solve_riccati(sys, cost, 5e-4).S[0, 0, 0]
        assert abs(a - b) / abs(b) < 1e-5

    def test_symmetric_psd_path(self, rng):
        A = rng.standard_normal((3, 3))
        sys = LinearSystem(A=A, B=rng.standard_normal((3, 2)), D=np.eye(3))
        cost = QuadraticCost(Q=np.eye(3), R=np.eye(2), Q_T=0.5 * np.eye(3), T=2.0)
        path = solve_riccati(sys, cost, 1e-3)
        np.testing.assert_array_equal(path.S, np.swapaxes(path.S, 1, 2))
        assert np.linalg.eigvalsh(path.S).min() >= -1e-10

    def test_monotone_in_state_cost(self, rng):
        for d in (1, 2):
            A = rng.standard_normal((d, d))
            sys = LinearSystem(A=A, B=np.eye(d), D=np.eye(d))
            cost = QuadraticCost(Q=np.eye(d), R=np.eye(d), Q_T=np.zeros((d, d)), T=1.0)
            doubled = QuadraticCost(Q=2 * np.eye(d), R=np.eye(d), Q_T=np.zeros((d, d)), T=1.0)
            gap = solve_riccati(sys, doubled, 1e-3).S - solve_riccati(sys, cost, 1e-3).S
            assert np.linalg.eigvalsh(gap).min() >= -1e-12

    def test_blowup_detected(self):
        sys = LinearSystem(A=[[5.0]], B=[[0.0]], D=[[0.0]])
        cost = QuadraticCost(Q=[[1.0]], R=[[1.0]], Q_T=[[1.0]], T=10.0)
        with pytest.raises(NumericalError, match="blew up"):
            solve_riccati(sys, cost, 1e-2)


class TestGainAndCostToGo:
    def test_zero_path_zero_gain(self):
        sys = LinearSystem(A=[[-1.0]], B=[[1.0]], D=[[0.0]])
        cost = QuadraticCost(Q=[[0.0]], R=[[1.0]], Q_T=[[0.0]], T=1.0)
        law = lqr_gain(solve_riccati(sys, cost, 1e-2), sys, cost)
        np.testing.assert_array_equal(law.gains, 0.0)

    def test_scalar_gain_arithmetic(self):
        sys = make_ou(1.0, 0.6, 0.2)
        cost = QuadraticCost(Q=[[0.0]], R=[[0.1]], Q_T=[[1.0]], T=1.0)
        path = solve_riccati(sys, cost, 1e-2)
        law = lqr_gain(path, sys, cost)
        assert law.gains[-1, 0, 0] == pytest.approx(2.0)
        np.testing.assert_allclose(law.gains[:, 0, 0], 2.0 * path.S[:, 0, 0])

    def test_oscillator_gain_only_on_velocity_input(self):
        sys = make_oscillator(0.4, 0.8, 0.4, 1.0)
        cost = QuadraticCost(Q=np.diag([0.4, 0.0]), R=np.diag([0.0, 0.4]), Q_T=np.zeros((2, 2)), T=5.0)
        law = lqr_gain(solve_riccati(sys, cost, 1e-3), sys, cost)
        np.testing.assert_array_equal(law.gains[:, 0, :], 0.0)
        assert np.abs(law.gains[:-1, 1, :]).max() > 0

    def test_trivial_values(self):
        sys = LinearSystem(A=[[-1.0]], B=[[1.0]], D=[[0.0]])
        cost = QuadraticCost(Q=[[1.0]], R=[[1.0]], Q_T=[[3.0]], T=1.0)
        path = solve_riccati(sys, cost, 1e-2)
        assert full_info_cost_to_go([0.0], 0.0, path) == 0.0
        assert full_info_cost_to_go([2.0], 1.0, path) == pytest.approx(12.0)

    def test_fig1a_monte_carlo_two_se(self):
        sys, cost = fig1a()
        path = solve_riccati(sys, cost, 1e-3)
        est = mc_policy_cost(sys, cost, lqr_gain(path, sys, cost), [1.0], 1e-3, 10000, seed=11)
        assert est.within(full_info_cost_to_go([1.0], 0.0, path), n_se=2.0)

    @pytest.mark.parametrize("kind", ["oscillator", "ou2", "osc2"])
    def test_monte_carlo_other_presets(self, kind):
        base = make_oscillator(0.4, 0.8, 0.4, 1.0) if kind != "ou2" else make_ou(1.0, 0.6, 0.2)
        sys = base if kind == "oscillator" else make_2d_product(base)
        if kind == "oscillator":
            Q, R = np.diag([0.4, 0.0]), np.diag([0.0, 0.4])
        elif kind == "ou2":
            Q, R = np.diag([1.0, 0.25]), np.diag([0.4, 0.4])
        else:
            Q, R = np.diag([1.0, 0.0, 0.25, 0.0]), np.diag([0.0, 0.4, 0.0, 0.4])
        cost = QuadraticCost(Q=Q, R=R, Q_T=np.zeros_like(Q), T=2.0)
        path = solve_riccati(sys, cost, 2e-3)
        x0 = np.ones(sys.dim_x)
        est = mc_policy_cost(sys, cost, lqr_gain(path, sys, cost), x0, 2e-3, 4000, seed=5)
        assert est.within(full_info_cost_to_go(x0, 0.0, path), n_se=3.0)
