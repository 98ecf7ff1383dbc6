"""Mutual information between the current state and the observation history.

Every distribution involved is Gaussian, so the information is half the
log-determinant ratio between the unobserved (prior) covariance and the
filtering covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numerics import as_matrix, check_psd, n_steps_for, rk4_path
from .kalman import CovariancePath, covariance_rhs, propagate_kalman_covariance
from .poisson_code import simulate_covariance_ensemble


@dataclass(frozen=True, eq=False)
class PriorSpec:
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        Sigma0 = check_psd(as_matrix(self.Sigma0, "Sigma0"), "Sigma0")
        mu0 = np.asarray(self.mu0, dtype=float).reshape(-1)
        if mu0.shape[0] != Sigma0.shape[0]:
            raise ValueError("mu0 and Sigma0 dimensions differ")
        object.__setattr__(self, "Sigma0", Sigma0)
        object.__setattr__(self, "mu0", mu0)


def prior_covariance(sys, prior, dt, T):
    """Covariance of the unobserved process: dS/dt = AS + SA' + D from Sigma0."""
    n = n_steps_for(dt, T)
    covs = rk4_path(covariance_rhs(sys, None), prior.Sigma0, dt, n)
    return CovariancePath(times=np.arange(n + 1) * dt, covs=covs)


def _logdet(M):
    sign, val = np.linalg.slogdet(M)
    if np.any(sign <= 0):
        raise ValueError("covariance is singular; information is unbounded at this time")
    return val


def mi_kalman(sys, obs, prior, t, dt=1e-3):
    """I(X_t; Y_[0,t]) in nats for diffusion observations."""
    if not t > 0:
        raise ValueError("t must be positive")
    prior_T = prior_covariance(sys, prior, dt, t).final
    post_T = propagate_kalman_covariance(sys, obs, prior.Sigma0, dt, t).final
    return float(0.5 * (_logdet(prior_T) - _logdet(post_T)))


@dataclass(frozen=True, eq=False)
class MIEstimate:
    value: float
    stderr: float
    per_sample: np.ndarray


def poisson_mi_from_samples(samples, j=-1):
    """Per-sample information at snapshot ``j`` of a covariance ensemble.

    Samples that saw no spikes keep the prior covariance and contribute
    exactly zero.
    """
    ref = _logdet(samples.reference[j])
    per = 0.5 * (ref - _logdet(samples.snapshots[j]))
    per = np.where(samples.spikes_before[j] > 0, per, 0.0)
    n = len(per)
    se = float(per.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return MIEstimate(float(per.mean()), se, per)


def mi_poisson(sys, codec, prior, t, n_samples, seed, dt=1e-3, threads=1):
    """Monte-Carlo I(X_t; N_[0,t]) in nats for a dense Gauss-Poisson code."""
    if not t > 0:
        raise ValueError("t must be positive")
    n = n_steps_for(dt, t)
    res = simulate_covariance_ensemble(
        prior.Sigma0, codec, sys, dt, n, n_samples, seed, record_mean=False, threads=threads, key=(5,)
    )
    return poisson_mi_from_samples(res)


def mi_poisson_path(sys, codec, prior, times, n_samples, seed, dt=1e-3, threads=1):
    """MI at several times from one ensemble (common random numbers across times)."""
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    n = n_steps_for(dt, float(times.max()))
    steps = [int(round(t / dt)) for t in times]
    res = simulate_covariance_ensemble(
        prior.Sigma0, codec, sys, dt, n, n_samples, seed,
        record_mean=False, snapshot_steps=steps, threads=threads, key=(5,),
    )
    index = {k: j for j, k in enumerate(res.snapshot_steps)}
    return [poisson_mi_from_samples(res, index[k]) for k in steps]


def mi_kalman_path(sys, obs, prior, times, dt=1e-3):
    times = np.asarray(times, dtype=float)
    T = float(times.max())
    n = n_steps_for(dt, T)
    prior_path = prior_covariance(sys, prior, dt, T).covs
    post_path = propagate_kalman_covariance(sys, obs, prior.Sigma0, dt, T).covs
    out = []
    for t in times:
        k = int(round(t / dt))
        if not 0 < k <= n:
            raise ValueError("times must be positive and on the grid")
        out.append(float(0.5 * (_logdet(prior_path[k]) - _logdet(post_path[k]))))
    return np.array(out)
