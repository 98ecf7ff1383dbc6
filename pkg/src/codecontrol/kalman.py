"""Kalman-Bucy filtering with diffusion observations dY = FX dt + G^{1/2} dV."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numerics import (
    as_matrix,
    check_psd,
    n_steps_for,
    psd_sqrt,
    rk4_path,
    sample_blocks,
    ordered_map,
    symmetrize,
    trapezoid_weights,
)
from .errors import NumericalError
from .riccati import MonteCarloEstimate, control_weight, lqr_gain


@dataclass(frozen=True, eq=False)
class CovariancePath:
    """Covariance matrices on a uniform time grid."""

    times: np.ndarray
    covs: np.ndarray

    @property
    def final(self):
        return self.covs[-1]


@dataclass(frozen=True, eq=False)
class DiffusionObservation:
    F: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        F = as_matrix(self.F, "F")
        G = as_matrix(self.G, "G")
        if G.shape != (F.shape[0], F.shape[0]):
            raise ValueError("G must be square with one row per observation channel")
        if not np.allclose(G, G.T, atol=1e-12):
            raise ValueError("G must be symmetric")
        if np.linalg.eigvalsh(G).min() <= 0:
            raise ValueError("G must be positive definite")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "G_inv", symmetrize(np.linalg.inv(G)))

    @property
    def precision(self):
        """F' G^{-1} F, the information rate about the state."""
        return symmetrize(self.F.T @ self.G_inv @ self.F)

    def scaled_noise(self, c):
        return DiffusionObservation(self.F, c * self.G)


@dataclass(frozen=True, eq=False)
class KalmanBelief:
    nu: np.ndarray
    K: np.ndarray
    t: float = 0.0


def _check_obs(sys, obs):
    if obs.F.shape[1] != sys.dim_x:
        raise ValueError("observation matrix F does not match the state dimension")


def covariance_rhs(sys, info=None):
    """Right-hand side AK + KA' + D - K info K (``info=None`` drops the last term)."""
    A, D = sys.A, sys.D
    if info is None:
        return lambda K: A @ K + K @ A.T + D
    return lambda K: A @ K + K @ A.T + D - K @ info @ K


def _psd_guard(what):
    def check(K, k):
        if not np.all(np.isfinite(K)):
            raise NumericalError(f"{what} became non-finite at step {k}")
        w = np.linalg.eigvalsh(K)
        if w[0] < -1e-10:
            raise NumericalError(f"{what} lost positive semidefiniteness at step {k} (min eigenvalue {w[0]:.3e})")

    return check


def propagate_kalman_covariance(sys, obs, K0, dt, T):
    """RK4 solution of dK/dt = AK + KA' + D - K F'G^{-1}F K on [0, T]."""
    _check_obs(sys, obs)
    K0 = check_psd(as_matrix(K0, "K0"), "K0")
    n = n_steps_for(dt, T)
    covs = rk4_path(covariance_rhs(sys, obs.precision), K0, dt, n, check=_psd_guard("Kalman covariance"))
    return CovariancePath(times=np.arange(n + 1) * dt, covs=covs)


def equilibrium_covariance(sys, obs=None, dt=1e-2, tol=1e-10, max_time=1e4, K0=None):
    """Fixed point of the Kalman covariance ODE, found by integrating until |dK/dt| < tol."""
    if obs is not None:
        _check_obs(sys, obs)
    rhs = covariance_rhs(sys, None if obs is None else obs.precision)
    if K0 is None:
        K0 = np.zeros((sys.dim_x, sys.dim_x))
    K = symmetrize(as_matrix(K0))
    for _ in range(int(max_time / dt)):
        if np.abs(rhs(K)).max() < tol:
            return K
        k1 = rhs(K)
        k2 = rhs(K + 0.5 * dt * k1)
        k3 = rhs(K + 0.5 * dt * k2)
        k4 = rhs(K + dt * k3)
        K = symmetrize(K + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(K)):
            raise NumericalError("covariance diverged while seeking equilibrium")
    raise NumericalError(f"covariance did not reach equilibrium within t={max_time:g}")


def kalman_mmse(sys, obs, W=None, dt=1e-2):
    """Equilibrium mean-squared error Tr(W K_inf); W defaults to the identity."""
    K = equilibrium_covariance(sys, obs, dt=dt)
    W = np.eye(sys.dim_x) if W is None else as_matrix(W)
    return float(np.trace(W @ K))


def lqg_uncertainty_penalty(K0, t, path, sys, cost, obs):
    """Integral over [t, T] of Tr(S B R^+ B' S K_s), with K_s started from K0 at t."""
    k = path.index(t)
    dt = path.dt
    M = control_weight(sys, cost)
    remaining = path.n_steps - k
    if remaining == 0:
        return 0.0
    K = propagate_kalman_covariance(sys, obs, K0, dt, remaining * dt).covs
    S = path.S[k:]
    integrand = np.einsum("tij,jk,tkl,tli->t", S, M, S, K)
    return float(trapezoid_weights(len(integrand), dt) @ integrand)


def lqg_cost_to_go(belief, path, sys, cost, obs):
    """Optimal LQG cost-to-go from a Gaussian belief (nu_t, K_t).

    nu' S_t nu + Tr(K_t S_t) + int Tr(D S) + int Tr(S B R^+ B' S K).
    """
    k = path.index(belief.t)
    nu = np.asarray(belief.nu, dtype=float).reshape(-1)
    K = as_matrix(belief.K)
    S = path.S[k]
    return float(
        nu @ S @ nu
        + np.trace(K @ S)
        + path.integral_trace_DS[k]
        + lqg_uncertainty_penalty(K, belief.t, path, sys, cost, obs)
    )


def constant_det_noise(zeta, g=1.0, observed=None, dim_x=None):
    """Two-channel observation noise G = g^2 diag(tan zeta, cot zeta), det G = g^4.

    ``F`` is the identity, or selects the coordinates listed in ``observed``
    out of a ``dim_x``-dimensional state.
    """
    if not 0 < zeta < np.pi / 2:
        raise ValueError("zeta must lie strictly inside (0, pi/2)")
    G = g**2 * np.diag([np.tan(zeta), 1.0 / np.tan(zeta)])
    if observed is None:
        F = np.eye(2)
    else:
        if len(observed) != 2 or dim_x is None:
            raise ValueError("observed must name two coordinates of a dim_x-dimensional state")
        F = np.eye(dim_x)[list(observed)]
    return DiffusionObservation(F=F, G=G)


def kalman_filter_step(belief, dY, u, sys, obs, dt):
    """One Euler step of the Kalman-Bucy mean and an RK4 step of its covariance."""
    nu = np.asarray(belief.nu, dtype=float).reshape(-1)
    K = as_matrix(belief.K)
    u = np.zeros(sys.dim_u) if u is None else np.asarray(u, dtype=float).reshape(-1)
    dY = np.asarray(dY, dtype=float).reshape(-1)
    innovation = dY - obs.F @ nu * dt
    nu_new = nu + (sys.A @ nu + sys.B @ u) * dt + K @ obs.F.T @ obs.G_inv @ innovation
    K_new = rk4_path(covariance_rhs(sys, obs.precision), K, dt, 1)[-1]
    return KalmanBelief(nu=nu_new, K=K_new, t=belief.t + dt)


def simulate_lqg_costs(sys, cost, obs, path, belief0, n_paths, seed, threads=1):
    """Closed-loop LQG episodes: true state, diffusion observations, Kalman filter
    and the certainty-equivalent controller u = -R^+ B' S nu.

    The initial state is drawn from N(nu_0, K_0). Returns per-episode costs.
    """
    _check_obs(sys, obs)
    dt, n = path.dt, path.n_steps
    law = lqr_gain(path, sys, cost)
    nu0 = np.asarray(belief0.nu, dtype=float).reshape(-1)
    Kpath = propagate_kalman_covariance(sys, obs, belief0.K, dt, n * dt).covs
    gain = np.einsum("tij,jk->tik", Kpath, obs.F.T @ obs.G_inv)
    K0_sqrt = psd_sqrt(belief0.K)
    G_sqrt = psd_sqrt(obs.G)
    sq = np.sqrt(dt)
    totals = np.zeros(n_paths)
    Q, R, QT = cost.Q, cost.R, cost.Q_T
    A, B, F, Dh = sys.A, sys.B, obs.F, sys.D_sqrt

    def run(block):
        start, stop, rng = block
        m = stop - start
        x = nu0 + rng.standard_normal((m, sys.dim_x)) @ K0_sqrt.T
        nu = np.broadcast_to(nu0, (m, sys.dim_x)).copy()
        acc = np.zeros(m)
        for k in range(n):
            u = law.control(k, nu)
            acc += (np.einsum("ni,ij,nj->n", x, Q, x) + np.einsum("ni,ij,nj->n", u, R, u)) * dt
            dY = x @ F.T * dt + sq * rng.standard_normal((m, F.shape[0])) @ G_sqrt.T
            x_next = x + (x @ A.T + u @ B.T) * dt + sq * rng.standard_normal((m, sys.dim_x)) @ Dh.T
            nu = nu + (nu @ A.T + u @ B.T) * dt + (dY - nu @ F.T * dt) @ gain[k].T
            x = x_next
        acc += np.einsum("ni,ij,nj->n", x, QT, x)
        totals[start:stop] = acc

    ordered_map(run, sample_blocks(seed, n_paths, key=(2,)), threads)
    return totals


def mc_lqg_cost(sys, cost, obs, path, belief0, n_paths, seed, threads=1):
    c = simulate_lqg_costs(sys, cost, obs, path, belief0, n_paths, seed, threads)
    return MonteCarloEstimate(float(c.mean()), float(c.std(ddof=1) / np.sqrt(n_paths)), n_paths)
