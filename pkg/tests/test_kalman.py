import numpy as np
import pytest

from codecontrol.dynamics import LinearSystem, make_2d_product, make_ou
from codecontrol.errors import NumericalError
from codecontrol.kalman import (
    DiffusionObservation,
    KalmanBelief,
    constant_det_noise,
    equilibrium_covariance,
    kalman_filter_step,
    kalman_mmse,
    lqg_cost_to_go,
    lqg_uncertainty_penalty,
    mc_lqg_cost,
    propagate_kalman_covariance,
)
from codecontrol.riccati import QuadraticCost, full_info_cost_to_go, solve_riccati


def fig1a():
    return make_ou(1.0, 0.6, 0.2), QuadraticCost(Q=[[0.1]], R=[[0.1]], Q_T=[[0.001]], T=2.0)


class TestObservation:
    def test_requires_positive_definite_noise(self):
        with pytest.raises(ValueError):
            DiffusionObservation(F=[[1.0]], G=[[0.0]])

    def test_precision(self):
        obs = DiffusionObservation(F=[[1.0, 0.0]], G=[[0.5]])
        np.testing.assert_allclose(obs.precision, [[2.0, 0.0], [0.0, 0.0]])


class TestCovariancePropagation:
    def test_no_observation_reaches_lyapunov_equilibrium(self):
        sys = make_ou(1.0, 0.6, 0.2)
        blind = DiffusionObservation(F=[[0.0]], G=[[1.0]])
        path = propagate_kalman_covariance(sys, blind, [[0.0]], 1e-3, 2.0)
        np.testing.assert_allclose(path.covs[:, 0, 0], 0.3 * (1 - np.exp(-2 * path.times)), rtol=1e-10)
        assert equilibrium_covariance(sys)[0, 0] == pytest.approx(0.3, abs=1e-9)

    def test_pure_measurement_closed_form(self):
        sys = LinearSystem(A=[[0.0]], B=[[0.0]], D=[[0.0]])
        obs = DiffusionObservation(F=[[1.0]], G=[[1.0]])
        path = propagate_kalman_covariance(sys, obs, [[1.0]], 1e-3, 3.0)
        np.testing.assert_allclose(path.covs[:, 0, 0], 1 / (1 + path.times), rtol=1e-10)

    def test_discrete_time_kalman_limit(self):
        sys = make_2d_product(make_ou(1.0, 0.6, 0.2))
        obs = DiffusionObservation(F=np.eye(2), G=np.diag([0.3, 1.7]))
        dt, T = 1e-3, 1.0
        K = np.diag([2.0, 0.5])
        Kc = propagate_kalman_covariance(sys, obs, K, dt, T).final
        Ad = np.eye(2) + sys.A * dt
        for _ in range(int(T / dt)):
            Km = Ad @ K @ Ad.T + sys.D * dt
            S = obs.F @ Km @ obs.F.T + obs.G / dt
            K = Km - Km @ obs.F.T @ np.linalg.solve(S, obs.F @ Km)
        np.testing.assert_allclose(Kc, K, rtol=5e-3, atol=1e-6)

    def test_more_precise_observation_shrinks_covariance(self, rng):
        for _ in range(5):
            A = rng.standard_normal((2, 2)) - 2 * np.eye(2)
            sys = LinearSystem(A=A, B=np.eye(2), D=np.eye(2))
            M = rng.standard_normal((2, 2))
            obs = DiffusionObservation(F=rng.standard_normal((2, 2)), G=M @ M.T + np.eye(2))
            a = propagate_kalman_covariance(sys, obs, np.eye(2), 1e-3, 2.0).covs
            b = propagate_kalman_covariance(sys, obs.scaled_noise(0.25), np.eye(2), 1e-3, 2.0).covs
            assert np.linalg.eigvalsh(a - b).min() >= -1e-10

    def test_rejects_indefinite_start(self):
        sys = make_ou(1.0, 0.6)
        with pytest.raises(NumericalError):
            propagate_kalman_covariance(sys, DiffusionObservation([[1.0]], [[1.0]]), [[-1.0]], 1e-2, 1.0)


class TestLqgCostToGo:
    def test_perfect_information_limit(self):
        sys, cost = fig1a()
        path = solve_riccati(sys, cost, 1e-3)
        ref = full_info_cost_to_go([0.7], 0.0, path)
        gaps = []
        for f in (3.0, 30.0, 100.0):
            obs = DiffusionObservation(F=[[f]], G=[[1.0]])
            gaps.append(lqg_cost_to_go(KalmanBelief(nu=[0.7], K=[[0.0]]), path, sys, cost, obs) - ref)
        # the residual filtering variance, and with it the gap, falls like 1/F
        assert np.all(np.array(gaps) > 0)
        assert gaps[2] < gaps[1] < gaps[0]
        assert gaps[2] / ref < 2e-4

    def test_uncontrollable_system_has_no_penalty(self):
        sys = LinearSystem(A=[[-1.0]], B=[[0.0]], D=[[0.6]])
        cost = QuadraticCost(Q=[[0.1]], R=[[0.1]], Q_T=[[0.001]], T=2.0)
        path = solve_riccati(sys, cost, 1e-3)
        obs = DiffusionObservation(F=[[1.0]], G=[[0.5]])
        belief = KalmanBelief(nu=[0.4], K=[[0.8]])
        expected = 0.16 * path.S[0, 0, 0] + 0.8 * path.S[0, 0, 0] + path.integral_trace_DS[0]
        assert lqg_cost_to_go(belief, path, sys, cost, obs) == pytest.approx(expected, rel=1e-12)

    def test_terminal_time(self):
        sys, cost = fig1a()
        path = solve_riccati(sys, cost, 1e-3)
        obs = DiffusionObservation(F=[[1.0]], G=[[0.5]])
        v = lqg_cost_to_go(KalmanBelief(nu=[2.0], K=[[0.5]], t=2.0), path, sys, cost, obs)
        assert v == pytest.approx(0.001 * 4.0 + 0.001 * 0.5)

    def test_monotone_in_covariance(self):
        sys, cost = fig1a()
        path = solve_riccati(sys, cost, 1e-3)
        obs = DiffusionObservation(F=[[1.0]], G=[[0.5]])
        values = [lqg_cost_to_go(KalmanBelief([0.0], [[k]]), path, sys, cost, obs) for k in (0.0, 0.2, 1.0, 3.0)]
        assert np.all(np.diff(values) > 0)

    def test_fig1a_monte_carlo(self):
        sys, cost = fig1a()
        path = solve_riccati(sys, cost, 1e-3)
        obs = DiffusionObservation(F=[[1.0]], G=[[0.5]])
        belief = KalmanBelief(nu=[1.0], K=[[0.3]])
        est = mc_lqg_cost(sys, cost, obs, path, belief, 10000, seed=21)
        assert est.within(lqg_cost_to_go(belief, path, sys, cost, obs), n_se=3.0)

    def test_strong_control_monte_carlo(self):
        # large penalty term, so the check is sensitive to it
        sys = make_ou(1.0, 0.6, 1.0)
        cost = QuadraticCost(Q=[[1.0]], R=[[0.05]], Q_T=[[0.5]], T=2.0)
        path = solve_riccati(sys, cost, 2e-3)
        obs = DiffusionObservation(F=[[1.0]], G=[[2.0]])
        belief = KalmanBelief(nu=[1.0], K=[[1.0]])
        value = lqg_cost_to_go(belief, path, sys, cost, obs)
        penalty = lqg_uncertainty_penalty(belief.K, 0.0, path, sys, cost, obs)
        est = mc_lqg_cost(sys, cost, obs, path, belief, 10000, seed=22)
        assert penalty > 10 * est.stderr
        assert est.within(value, n_se=3.0)


class TestConstantDeterminant:
    def test_symmetric_point(self):
        obs = constant_det_noise(np.pi / 4, g=1.5)
        np.testing.assert_allclose(obs.G, 2.25 * np.eye(2), rtol=1e-14)
        np.testing.assert_array_equal(obs.F, np.eye(2))

    def test_determinant_constant(self):
        dets = [np.linalg.det(constant_det_noise(z, g=0.7).G) for z in (0.3, np.pi / 4, 1.2)]
        np.testing.assert_allclose(dets, 0.7**4, rtol=1e-12)

    @pytest.mark.parametrize("zeta", [0.0, np.pi / 2, -0.1])
    def test_rejects_boundary(self, zeta):
        with pytest.raises(ValueError):
            constant_det_noise(zeta)

    def test_selected_coordinates(self):
        obs = constant_det_noise(0.5, observed=(0, 2), dim_x=4)
        np.testing.assert_array_equal(obs.F, [[1, 0, 0, 0], [0, 0, 1, 0]])

    def test_isotropic_mmse_symmetric(self):
        sys = make_2d_product(make_ou(1.0, 0.6, 0.2))
        zetas = np.linspace(0.1, np.pi / 2 - 0.1, 9)
        mmse = np.array([kalman_mmse(sys, constant_det_noise(z)) for z in zetas])
        np.testing.assert_allclose(mmse, mmse[::-1], rtol=1e-8)

    def test_mmse_decreasing_in_precision(self):
        sys = make_ou(1.0, 0.6, 0.2)
        values = [kalman_mmse(sys, DiffusionObservation([[1.0]], [[g]])) for g in (4.0, 1.0, 0.25, 0.05)]
        assert np.all(np.diff(values) < 0)


class TestFilterStep:
    def test_zero_innovation_follows_flow(self):
        sys = make_ou(1.0, 0.6, 0.2)
        obs = DiffusionObservation(F=[[1.0]], G=[[0.5]])
        b = KalmanBelief(nu=[1.0], K=[[0.3]])
        dt = 1e-2
        nxt = kalman_filter_step(b, obs.F @ b.nu * dt, [0.5], sys, obs, dt)
        assert nxt.nu[0] == pytest.approx(1.0 + (-1.0 + 0.1) * dt)
        assert nxt.t == pytest.approx(dt)

    def test_blind_filter_ignores_data(self):
        sys = make_ou(1.0, 0.6, 0.2)
        obs = DiffusionObservation(F=[[0.0]], G=[[1.0]])
        b = KalmanBelief(nu=[1.0], K=[[0.3]])
        a = kalman_filter_step(b, [5.0], None, sys, obs, 1e-2)
        c = kalman_filter_step(b, [-5.0], None, sys, obs, 1e-2)
        np.testing.assert_array_equal(a.nu, c.nu)

    def test_tracking_error_matches_stationary_covariance(self):
        sys = make_ou(1.0, 0.6, 0.2)
        obs = DiffusionObservation(F=[[1.0]], G=[[0.5]])
        K_inf = equilibrium_covariance(sys, obs)
        rng = np.random.default_rng(5)
        dt, n = 1e-2, 20000
        x = 0.0
        b = KalmanBelief(nu=[0.0], K=K_inf)
        err = np.empty(n)
        for k in range(n):
            dY = x * dt + np.sqrt(0.5 * dt) * rng.standard_normal()
            b = kalman_filter_step(b, [dY], None, sys, obs, dt)
            x = x - x * dt + np.sqrt(0.6 * dt) * rng.standard_normal()
            err[k] = b.nu[0] - x
        assert err[1000:].var() == pytest.approx(K_inf[0, 0], rel=0.2)
