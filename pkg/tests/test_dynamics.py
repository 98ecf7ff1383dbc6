import numpy as np
import pytest
import scipy.linalg

from codecontrol.dynamics import (
    ControlLaw,
    LinearSystem,
    make_2d_product,
    make_ou,
    make_oscillator,
    simulate_ensemble,
    simulate_state,
)
from codecontrol.errors import NumericalError


class TestFactories:
    def test_ou_fig1a(self):
        sys = make_ou(1.0, 0.6, 0.2)
        np.testing.assert_array_equal(sys.A, [[-1.0]])
        np.testing.assert_array_equal(sys.B, [[0.2]])
        np.testing.assert_array_equal(sys.D, [[0.6]])
        assert (sys.dim_x, sys.dim_u) == (1, 1)

    def test_ou_rejects_nonpositive_rate(self):
        with pytest.raises(ValueError):
            make_ou(0.0, 0.6)

    def test_oscillator_fig1b(self):
        sys = make_oscillator(0.4, 0.8, 0.4, 1.0)
        np.testing.assert_allclose(sys.A, [[0, 1], [-0.64, -0.4]])
        np.testing.assert_array_equal(sys.B, [[0, 0], [0, 1]])
        np.testing.assert_array_equal(sys.D, np.diag([0, 0.4]))

    def test_oscillator_squared_convention(self):
        sys = make_oscillator(0.4, 0.8, 0.4, 1.0, noise_convention="squared")
        np.testing.assert_allclose(sys.D, np.diag([0, 0.16]))

    def test_oscillator_rejects_zero_frequency(self):
        with pytest.raises(ValueError):
            make_oscillator(0.4, 0.0, 0.4)

    def test_undamped_rotation_conserves_norm(self):
        sys = make_oscillator(0.0, 1.0, 0.0, 0.0)
        x0 = np.array([0.3, -1.2])
        for t in (0.5, 2.0, 7.3):
            x = scipy.linalg.expm(sys.A * t) @ x0
            assert x @ x == pytest.approx(x0 @ x0, rel=1e-12)

    def test_oscillator_stationary_covariance_solves_lyapunov(self):
        sys = make_oscillator(0.4, 0.8, 0.4)
        # direct linear solve of (I kron A + A kron I) vec(S) = -vec(D)
        K = np.kron(np.eye(2), sys.A) + np.kron(sys.A, np.eye(2))
        S_direct = np.linalg.solve(K, -sys.D.reshape(-1)).reshape(2, 2)
        np.testing.assert_allclose(sys.stationary_covariance(), S_direct, rtol=1e-12, atol=1e-15)
        # closed form: var(v) = eta/(2 gamma), var(x) = var(v)/omega^2
        np.testing.assert_allclose(S_direct, np.diag([0.5 / 0.64, 0.5]), rtol=1e-12, atol=1e-15)

    def test_product(self):
        sys = make_2d_product(make_ou(1.0, 0.6, 0.2))
        np.testing.assert_array_equal(sys.A, -np.eye(2))
        osc = make_2d_product(make_oscillator(0.4, 0.8, 0.4))
        assert osc.dim_x == 4
        np.testing.assert_array_equal(osc.D, np.diag([0, 0.4, 0, 0.4]))
        assert np.linalg.eigvalsh(osc.D).min() >= 0

    def test_noise_root(self, rng):
        M = rng.standard_normal((3, 3))
        sys = LinearSystem(A=-np.eye(3), B=np.eye(3), D=M @ M.T)
        np.testing.assert_allclose(sys.D_sqrt @ sys.D_sqrt.T, sys.D, atol=1e-10)

    def test_rejects_indefinite_noise(self):
        with pytest.raises(ValueError):
            LinearSystem(A=[[-1.0]], B=[[1.0]], D=[[-0.1]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            LinearSystem(A=-np.eye(2), B=[[1.0]], D=np.eye(2))

    def test_unstable_has_no_stationary_covariance(self):
        with pytest.raises(ValueError):
            LinearSystem(A=[[0.1]], B=[[1.0]], D=[[1.0]]).stationary_covariance()


class TestSimulateState:
    def test_deterministic_decay(self):
        sys = make_ou(1.0, 0.0, 0.0)
        traj = simulate_state(sys, None, [1.0], 1e-3, 1.0, seed=0)
        assert traj.states[-1, 0] == pytest.approx(np.exp(-1.0), abs=1e-3)
        # Euler: (1 - dt)^n exactly
        assert traj.states[-1, 0] == pytest.approx((1 - 1e-3) ** 1000, rel=1e-12)

    def test_same_seed_same_path(self):
        sys = make_ou(1.0, 0.6, 0.2)
        a = simulate_state(sys, None, [0.5], 1e-2, 2.0, seed=42)
        b = simulate_state(sys, None, [0.5], 1e-2, 2.0, seed=42)
        np.testing.assert_array_equal(a.states, b.states)
        assert a.states.shape == (201, 1)
        np.testing.assert_allclose(np.diff(a.times), 1e-2)

    def test_feedback_enters_drift(self):
        sys = make_ou(1.0, 0.0, 1.0)
        n = 100
        law = ControlLaw(np.arange(n + 1) * 1e-2, np.full((n + 1, 1, 1), 2.0))
        traj = simulate_state(sys, law, [1.0], 1e-2, 1.0, seed=0)
        assert traj.states[-1, 0] == pytest.approx((1 - 3e-2) ** n, rel=1e-12)
        np.testing.assert_allclose(traj.controls[:, 0], -2.0 * traj.states[:, 0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts(self):
        sys = LinearSystem(A=[[1e6]], B=[[0.0]], D=[[0.0]])
        with pytest.raises(NumericalError):
            simulate_state(sys, None, [1.0], 1.0, 400.0, seed=0)

    def test_long_run_variance(self):
        sys = make_ou(0.5, 0.4, 1.0)
        traj = simulate_state(sys, None, [0.0], 1e-2, 4000.0, seed=3)
        x = traj.states[2000:, 0]
        # correlation time 1/gamma = 2, so about 4000/4 effective samples
        assert x.var() == pytest.approx(0.4, rel=0.12)


class TestEnsemble:
    def test_fig1a_stationary_variance(self):
        sys = make_ou(1.0, 0.6, 0.2)
        _, X = simulate_ensemble(sys, None, [0.0], 1e-3, 6.0, 10000, seed=1, record_every=6000)
        v = X[:, -1, 0].var(ddof=1)
        se = 0.3 * np.sqrt(2.0 / 10000)
        assert abs(v - 0.3 * (1 - np.exp(-12))) < 3 * se

    def test_mean_decay(self):
        sys = make_ou(1.0, 0.6, 0.2)
        times, X = simulate_ensemble(sys, None, [1.0], 1e-3, 1.0, 10000, seed=2, record_every=250)
        for j, t in enumerate(times):
            m, se = X[:, j, 0].mean(), X[:, j, 0].std(ddof=1) / 100
            assert abs(m - np.exp(-t)) <= 3 * se + 1e-3 * t

    def test_covariance_matches_lyapunov(self):
        sys = make_oscillator(0.4, 0.8, 0.4)
        t = 2.0
        _, X = simulate_ensemble(sys, None, [0.0, 0.0], 1e-3, t, 10000, seed=4, record_every=2000)
        emp = np.cov(X[:, -1].T)
        # exact: int_0^t e^{As} D e^{A's} ds via the Van Loan block exponential
        n = 2
        M = np.block([[-sys.A, sys.D], [np.zeros((n, n)), sys.A.T]]) * t
        E = scipy.linalg.expm(M)
        exact = E[n:, n:].T @ E[:n, n:]
        assert np.linalg.norm(emp - exact) / np.linalg.norm(exact) < 0.05

    def test_thread_invariance(self):
        sys = make_ou(1.0, 0.6, 0.2)
        _, a = simulate_ensemble(sys, None, [0.3], 1e-2, 1.0, 3000, seed=9, threads=1)
        _, b = simulate_ensemble(sys, None, [0.3], 1e-2, 1.0, 3000, seed=9, threads=3)
        np.testing.assert_array_equal(a, b)
