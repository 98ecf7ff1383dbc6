"""Expected future posterior covariance and the encoder-dependent control cost.

For a dense Gauss-Poisson code the optimal cost-to-go splits into the
full-information part and an uncertainty penalty

    f(Sigma, t) = int_t^T Tr(S_s B R^+ B' S_s E[Sigma_s | Sigma_t = Sigma]) ds,

the only term through which the encoder enters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numerics import (
    as_matrix,
    check_psd,
    lyapunov_step_map,
    n_steps_for,
    ordered_map,
    psd_sqrt,
    rk4_path,
    sample_blocks,
    trapezoid_weights,
)
from .errors import NumericalError
from .kalman import CovariancePath
from .poisson_code import (
    GaussianBelief,
    SpikeTrain,
    _warn_coarse,
    filter_step,
    sample_centers,
    simulate_covariance_ensemble,
)
from .riccati import MonteCarloEstimate, control_weight, lqr_gain

METHODS = ("mc", "meanfield")


@dataclass(frozen=True, eq=False)
class CovarianceEnsemble:
    times: np.ndarray
    mean_sigma: np.ndarray
    stderr: np.ndarray
    n_samples: int


def mc_expected_covariance(Sigma0, codec, sys, dt, T, n_samples, seed, threads=1):
    """Monte-Carlo estimate of E[Sigma_s | Sigma_0] on [0, T]."""
    n = n_steps_for(dt, T)
    res = simulate_covariance_ensemble(Sigma0, codec, sys, dt, n, n_samples, seed, threads=threads)
    return CovarianceEnsemble(times=res.times, mean_sigma=res.mean, stderr=res.stderr, n_samples=n_samples)


def meanfield_rhs(codec, sys):
    """d<S>/ds = A<S> + <S>A' + D - lambda_hat <S> P^+ <S> (I + P^+ <S>)^{-1}.

    The jump term is evaluated in the equivalent symmetric form
    <S> L (I + L'<S>L)^{-1} L'<S> with L L' = P^+.
    """
    A, D = sys.A, sys.D
    L = codec.jump_factor
    lam = codec.population_rate
    eye = np.eye(L.shape[1])

    def rhs(S):
        H = S @ L
        return A @ S + S @ A.T + D - lam * H @ np.linalg.solve(eye + L.T @ H, H.T)

    return rhs


def meanfield_expected_covariance(Sigma0, codec, sys, dt, T):
    """Mean-field approximation of E[Sigma_s | Sigma_0], integrated with RK4."""
    n = n_steps_for(dt, T)
    Sigma0 = check_psd(as_matrix(Sigma0, "Sigma0"), "Sigma0")

    def guard(S, k):
        w = np.linalg.eigvalsh(S)
        if not np.all(np.isfinite(S)) or w[0] < -1e-10:
            raise NumericalError(f"mean-field covariance lost positive semidefiniteness at step {k}")

    covs = rk4_path(meanfield_rhs(codec, sys), Sigma0, dt, n, check=guard)
    return CovariancePath(times=np.arange(n + 1) * dt, covs=covs)


def meanfield_equilibrium(codec, sys, dt=1e-2, tol=1e-12, max_time=1e4):
    """Long-time limit of the mean-field covariance ODE.

    The step is shortened below ``dt`` when the population rate makes the
    jump term stiff, keeping explicit RK4 inside its stability region.
    """
    rhs = meanfield_rhs(codec, sys)
    dt = min(dt, 1.0 / (codec.population_rate + 2.0 * np.abs(sys.A).sum(axis=1).max()))
    try:
        S = sys.stationary_covariance()
    except ValueError:
        S = np.zeros((sys.dim_x, sys.dim_x))
    for _ in range(int(max_time / dt)):
        k1 = rhs(S)
        if np.abs(k1).max() < tol:
            return S
        k2 = rhs(S + 0.5 * dt * k1)
        k3 = rhs(S + 0.5 * dt * k2)
        k4 = rhs(S + dt * k3)
        S = 0.5 * (S + S.T) + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        S = 0.5 * (S + S.T)
    raise NumericalError("mean-field covariance did not settle")


def penalty_integrand(path, sys, cost, k0=0):
    """S_s B R^+ B' S_s on the grid from index ``k0`` to T."""
    M = control_weight(sys, cost)
    S = path.S[k0:]
    return np.einsum("tij,jk,tkl->til", S, M, S)


@dataclass(frozen=True, eq=False)
class PenaltyEstimate:
    """Monte-Carlo value of f with per-sample contributions.

    ``samples`` keeps the underlying ensemble so the same run can also
    yield information estimates at T.
    """

    value: float
    stderr: float
    per_sample: np.ndarray
    samples: object


def mc_penalty(Sigma0, t, path, codec, sys, cost, n_samples, seed, threads=1, key=()):
    k0 = path.index(t)
    n = path.n_steps - k0
    W = penalty_integrand(path, sys, cost, k0) * trapezoid_weights(n + 1, path.dt)[:, None, None]
    res = simulate_covariance_ensemble(
        Sigma0, codec, sys, path.dt, n, n_samples, seed, weights=W, record_mean=False, threads=threads, key=key
    )
    per = res.integrals
    se = float(per.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return PenaltyEstimate(float(per.mean()), se, per, res)


def control_penalty_f(
    Sigma0, t, path, codec, sys, cost, method="meanfield", n_samples=4096, seed=0, threads=1
):
    """Uncertainty penalty f(Sigma0, t) by trapezoid quadrature on the Riccati grid.

    ``method="mc"`` averages simulated covariance paths, ``"meanfield"``
    integrates the mean-field ODE.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    k0 = path.index(t)
    n = path.n_steps - k0
    if n == 0:
        return 0.0
    if method == "mc":
        return mc_penalty(Sigma0, t, path, codec, sys, cost, n_samples, seed, threads).value
    E = meanfield_expected_covariance(Sigma0, codec, sys, path.dt, n * path.dt).covs
    integrand = np.einsum("tij,tji->t", penalty_integrand(path, sys, cost, k0), E)
    return float(trapezoid_weights(n + 1, path.dt) @ integrand)


def poisson_cost_to_go(belief, path, codec, sys, cost, method="meanfield", n_samples=4096, seed=0, threads=1):
    """Optimal cost-to-go under a dense Gauss-Poisson code and CE control.

    mu' S_t mu + Tr(Sigma_t S_t) + int Tr(D S) + f(Sigma_t, t).
    """
    k = path.index(belief.t)
    mu = np.asarray(belief.mu, dtype=float).reshape(-1)
    Sigma = as_matrix(belief.Sigma)
    S = path.S[k]
    f = control_penalty_f(Sigma, belief.t, path, codec, sys, cost, method, n_samples, seed, threads)
    return float(mu @ S @ mu + np.trace(Sigma @ S) + path.integral_trace_DS[k] + f)


def _jump_with_mean(S, mu, rows, L, theta):
    d = L.shape[0]
    Sm = S[rows].reshape(-1, d, d)
    H = Sm @ L
    C = np.eye(L.shape[1]) + np.swapaxes(H, 1, 2) @ L
    innov = np.einsum("ki,nk->ni", L, theta - mu[rows])
    mu[rows] = mu[rows] + np.einsum("nik,nk->ni", H, np.linalg.solve(C, innov[:, :, None])[:, :, 0])
    Sm = Sm - H @ np.linalg.solve(C, np.swapaxes(H, 1, 2))
    Sm = 0.5 * (Sm + np.swapaxes(Sm, 1, 2))
    S[rows] = Sm.reshape(len(rows), d * d)


@dataclass(frozen=True, eq=False)
class ClosedLoopEpisodes:
    """Per-episode outcomes of the spike-driven certainty-equivalent loop.

    ``covered`` flags, per episode and coordinate, whether the final state lies
    inside the posterior mean +/- one posterior standard deviation.
    """

    costs: np.ndarray
    covered: np.ndarray
    spike_counts: np.ndarray
    initial_excess: np.ndarray

    def cost_estimate(self, control_variate=False):
        """Mean realized cost and its standard error.

        With ``control_variate`` the zero-mean term
        (x_0 - mu_0)' S_0 (x_0 - mu_0) - Tr(Sigma_0 S_0) is subtracted per
        episode, which removes most of the initial-draw variance.
        """
        c = self.costs - self.initial_excess if control_variate else self.costs
        n = len(c)
        return MonteCarloEstimate(float(c.mean()), float(c.std(ddof=1) / np.sqrt(n)), n)


def closed_loop_episodes(codec, sys, cost, path, belief0, n_episodes, seed, threads=1):
    """Simulate full episodes: state, spikes, point-process filter, CE control.

    The initial state is drawn from N(mu_0, Sigma_0); the controller applies
    u = -R^+ B' S_t mu_t. The running cost uses the left-point rule.
    """
    dt, n = path.dt, path.n_steps
    d = sys.dim_x
    _warn_coarse(codec, dt)
    law = lqr_gain(path, sys, cost)
    Phi, c = lyapunov_step_map(sys.A, sys.D, dt)
    PhiT = Phi.T
    L = codec.jump_factor
    lam_dt = codec.population_rate * dt
    mu0 = np.asarray(belief0.mu, dtype=float).reshape(-1)
    Sigma0 = check_psd(as_matrix(belief0.Sigma), "Sigma0")
    S0_sqrt = psd_sqrt(Sigma0)
    sq = np.sqrt(dt)
    A, B, Dh = sys.A, sys.B, sys.D_sqrt
    Q, R, QT = cost.Q, cost.R, cost.Q_T
    costs = np.zeros(n_episodes)
    covered = np.zeros((n_episodes, d), dtype=bool)
    nspikes = np.zeros(n_episodes, dtype=np.int64)
    excess = np.zeros(n_episodes)
    S_start = path.S[0]
    excess_offset = float(np.trace(Sigma0 @ S_start))
    diag = np.arange(d) * (d + 1)

    def run(block):
        start, stop, rng = block
        m = stop - start
        x = mu0 + rng.standard_normal((m, d)) @ S0_sqrt.T
        excess[start:stop] = np.einsum("ni,ij,nj->n", x - mu0, S_start, x - mu0) - excess_offset
        mu = np.tile(mu0, (m, 1))
        S = np.tile(Sigma0.reshape(-1), (m, 1))
        acc = np.zeros(m)
        spikes = np.zeros(m, dtype=np.int64)
        for k in range(n):
            u = law.control(k, mu)
            acc += (np.einsum("ni,ij,nj->n", x, Q, x) + np.einsum("ni,ij,nj->n", u, R, u)) * dt
            x = x + (x @ A.T + u @ B.T) * dt + sq * rng.standard_normal((m, d)) @ Dh.T
            mu = mu + (mu @ A.T + u @ B.T) * dt
            S = S @ PhiT
            S += c
            counts = rng.poisson(lam_dt, size=m)
            spikes += counts
            for r in range(1, counts.max(initial=0) + 1):
                rows = np.flatnonzero(counts >= r)
                theta = codec.center(sample_centers(codec, x[rows], rng))
                _jump_with_mean(S, mu, rows, L, theta)
            if (S[:, diag] < -1e-10).any():
                raise NumericalError(f"posterior covariance left the PSD cone at step {k + 1}")
        acc += np.einsum("ni,ij,nj->n", x, QT, x)
        costs[start:stop] = acc
        sd = np.sqrt(np.clip(S[:, diag], 0.0, None))
        covered[start:stop] = np.abs(x - mu) <= sd
        nspikes[start:stop] = spikes

    ordered_map(run, sample_blocks(seed, n_episodes, key=(4,)), threads)
    return ClosedLoopEpisodes(costs=costs, covered=covered, spike_counts=nspikes, initial_excess=excess)


@dataclass(frozen=True, eq=False)
class Episode:
    """One closed-loop run on the grid: true state, filter belief, control and spikes.

    ``spike_counts[k]`` counts the spikes stamped at ``times[k]``; ``controls``
    has one row per bin.
    """

    times: np.ndarray
    states: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    controls: np.ndarray
    spike_counts: np.ndarray
    spikes: SpikeTrain
    cost: float


def simulate_episode(codec, sys, cost, path, belief0, seed):
    """Single seeded episode of state, spikes, point-process filter and CE control."""
    dt, n = path.dt, path.n_steps
    _warn_coarse(codec, dt)
    law = lqr_gain(path, sys, cost)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 6]))
    mu0 = np.asarray(belief0.mu, dtype=float).reshape(-1)
    Sigma0 = check_psd(as_matrix(belief0.Sigma), "Sigma0")
    d = sys.dim_x
    x = mu0 + psd_sqrt(Sigma0) @ rng.standard_normal(d)
    belief = GaussianBelief(mu=mu0, Sigma=Sigma0, t=0.0)
    lam_dt = codec.population_rate * dt
    sq = np.sqrt(dt)
    states = np.empty((n + 1, d))
    means = np.empty((n + 1, d))
    covs = np.empty((n + 1, d, d))
    controls = np.empty((n, sys.dim_u))
    counts = np.zeros(n + 1, dtype=np.int64)
    times, fired = [], []
    states[0], means[0], covs[0] = x, mu0, Sigma0
    total = 0.0
    for k in range(n):
        u = law.control(k, belief.mu)
        total += (x @ cost.Q @ x + u @ cost.R @ u) * dt
        x = x + (sys.A @ x + sys.B @ u) * dt + sq * sys.D_sqrt @ rng.standard_normal(d)
        c = int(rng.poisson(lam_dt))
        m = sample_centers(codec, np.tile(x, (c, 1)), rng) if c else np.zeros(0, dtype=np.int64)
        belief = filter_step(belief, codec, sys, u, dt, m)
        states[k + 1], means[k + 1], covs[k + 1] = x, belief.mu, belief.Sigma
        controls[k] = u
        counts[k + 1] = c
        times.extend([path.times[k + 1]] * c)
        fired.extend(m.tolist())
    total += x @ cost.Q_T @ x
    train = SpikeTrain(times=np.array(times), centers=np.array(fired, dtype=np.int64), window=(0.0, path.T))
    return Episode(path.times.copy(), states, means, covs, controls, counts, train, float(total))
