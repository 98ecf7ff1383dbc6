"""Dense Gauss-Poisson population codes and the exact point-process filter.

Neuron ``m`` fires with rate ``phi * exp(-(x - theta_m)' P^+ (x - theta_m) / 2)``.
With tuning centres on a dense lattice the population rate does not depend on
the state, so the posterior covariance only reacts to *when* spikes occur.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
import warnings

import numpy as np

from ._numerics import (
    as_matrix,
    check_psd,
    lyapunov_step_map,
    n_steps_for,
    ordered_map,
    poisson_from_uniform,
    sample_blocks,
    symmetrize,
)
from .errors import ConvergenceWarning, NumericalError

COARSE_BIN_WARNING = 0.1
LATTICE_SIGMAS = 6.0
_SAMPLING_SIGMAS = 8.0
_COUNT_CHUNK = 256


@dataclass(frozen=True, eq=False)
class PoissonCodec:
    """Population of Gaussian tuning curves on a uniform lattice.

    ``extent`` gives the half-width of the lattice along each coded
    coordinate; centres sit at integer multiples of ``delta_theta``.
    """

    P: np.ndarray
    phi: float
    delta_theta: float
    extent: np.ndarray = None

    def __post_init__(self):
        P = as_matrix(self.P, "P")
        if P.shape[0] != P.shape[1] or not np.allclose(P, P.T, atol=1e-12):
            raise ValueError("P must be a symmetric square matrix")
        if np.linalg.eigvalsh(symmetrize(P)).min() < -1e-12:
            raise ValueError("P must be positive semidefinite")
        if self.phi < 0:
            raise ValueError("phi must be non-negative")
        if not self.delta_theta > 0:
            raise ValueError("delta_theta must be positive")
        coded = tuple(int(i) for i in np.flatnonzero(np.diag(P) > 0))
        if not coded:
            raise ValueError("P must code at least one coordinate")
        mask = np.zeros(P.shape[0], bool)
        mask[list(coded)] = True
        if np.abs(P[~mask]).max(initial=0.0) > 0 or np.abs(P[:, ~mask]).max(initial=0.0) > 0:
            raise ValueError("P must vanish outside its coded coordinates")
        Pc = P[np.ix_(coded, coded)]
        if np.linalg.eigvalsh(Pc).min() <= 0:
            raise ValueError("P restricted to the coded coordinates must be positive definite")
        if self.extent is None:
            extent = LATTICE_SIGMAS * (1.0 + np.sqrt(np.diag(Pc)))
        else:
            extent = np.broadcast_to(np.asarray(self.extent, dtype=float), (len(coded),)).copy()
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "delta_theta", float(self.delta_theta))
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "coded_dims", coded)

    @property
    def dim_x(self):
        return self.P.shape[0]

    @cached_property
    def P_dagger(self):
        return symmetrize(np.linalg.pinv(self.P, rcond=1e-12, hermitian=True))

    @cached_property
    def jump_factor(self):
        """L with L L' = P^+, restricted to the range of P^+ (shape dim_x x rank)."""
        w, V = np.linalg.eigh(self.P_dagger)
        keep = w > 1e-12 * w.max()
        return V[:, keep] * np.sqrt(w[keep])

    @property
    def coded_block(self):
        return self.P[np.ix_(self.coded_dims, self.coded_dims)]

    @property
    def population_rate(self):
        """Total firing rate of the dense population (independent of the state)."""
        d = len(self.coded_dims)
        det = np.linalg.det(self.coded_block)
        return float((2 * np.pi) ** (d / 2) * np.sqrt(det) * self.phi / self.delta_theta**d)

    @cached_property
    def lattice_axes(self):
        axes = []
        for half in self.extent:
            k = int(np.ceil(half / self.delta_theta))
            axes.append(np.arange(-k, k + 1) * self.delta_theta)
        return tuple(axes)

    @property
    def lattice_shape(self):
        return tuple(len(a) for a in self.lattice_axes)

    @property
    def n_centers(self):
        return int(np.prod(self.lattice_shape))

    def center(self, m):
        """Full-state tuning centre(s) for flat lattice index ``m``."""
        m = np.asarray(m)
        idx = np.unravel_index(m, self.lattice_shape)
        theta = np.zeros(m.shape + (self.dim_x,))
        for axis, (dim, ii) in enumerate(zip(self.coded_dims, idx)):
            theta[..., dim] = self.lattice_axes[axis][ii]
        return theta

    @property
    def centers(self):
        return self.center(np.arange(self.n_centers))

    def with_extent(self, extent):
        return PoissonCodec(self.P, self.phi, self.delta_theta, extent)


def lattice_extent(sys, coded_dims, P, Sigma0=None):
    """Lattice half-widths that cover the state's typical range with margin.

    Uses 6 standard deviations of the largest of the stationary and initial
    marginal variances, plus 6 tuning widths.
    """
    var = np.zeros(sys.dim_x)
    try:
        var = np.maximum(var, np.diag(sys.stationary_covariance()))
    except ValueError:
        pass
    if Sigma0 is not None:
        var = np.maximum(var, np.diag(as_matrix(Sigma0)))
    P = as_matrix(P)
    return np.array(
        [LATTICE_SIGMAS * (np.sqrt(var[i]) + np.sqrt(P[i, i])) + 1e-12 for i in coded_dims]
    )


def make_width_codec(p, phi, delta_theta, dim_x=1, coded=(0,), extent=None):
    """Codec with isotropic tuning variance ``p**2`` on the ``coded`` coordinates."""
    if not p > 0:
        raise ValueError("tuning width p must be positive")
    P = np.zeros((dim_x, dim_x))
    for i in coded:
        P[i, i] = p**2
    return PoissonCodec(P, phi, delta_theta, extent)


def make_anisotropic_codec(zeta, p, phi, delta_theta, dim_x=2, coded=(0, 1), extent=None):
    """Codec with P = p^2 diag(tan zeta, cot zeta) on two coded coordinates."""
    if not 0 < zeta < np.pi / 2:
        raise ValueError("zeta must lie strictly inside (0, pi/2)")
    if not p > 0:
        raise ValueError("tuning width p must be positive")
    P = np.zeros((dim_x, dim_x))
    i, j = coded
    P[i, i] = p**2 * np.tan(zeta)
    P[j, j] = p**2 / np.tan(zeta)
    return PoissonCodec(P, phi, delta_theta, extent)


def tuning_rate(codec, m, x):
    """Firing rate of neuron ``m`` (scalar or array of indices) at state ``x``."""
    diff = np.asarray(x, dtype=float) - codec.center(m)
    q = np.einsum("...i,ij,...j->...", diff, codec.P_dagger, diff)
    return codec.phi * np.exp(-0.5 * q)


def total_rate(codec, x):
    """Sum of all lattice rates at ``x``; equals ``population_rate`` in the dense regime."""
    return float(tuning_rate(codec, np.arange(codec.n_centers), x).sum())


@dataclass(frozen=True, eq=False)
class SpikeTrain:
    times: np.ndarray
    centers: np.ndarray
    window: tuple

    def __len__(self):
        return len(self.times)

    @property
    def events(self):
        return list(zip(self.times.tolist(), self.centers.tolist()))

    def counts(self, grid):
        """Number of spikes at each grid time (spikes sit on bin ends)."""
        k = np.rint(self.times / (grid[1] - grid[0])).astype(int)
        return np.bincount(k, minlength=len(grid))


def _warn_coarse(codec, dt):
    if codec.population_rate * dt > COARSE_BIN_WARNING:
        warnings.warn(
            f"population rate x dt = {codec.population_rate * dt:.4g} exceeds {COARSE_BIN_WARNING}; "
            "time bins are too coarse for the spike-ordering approximation",
            RuntimeWarning,
            stacklevel=3,
        )


def sample_centers(codec, X, rng):
    """Pick the firing neuron for spikes emitted at states ``X`` (n, dim_x).

    Under dense coding neuron ``m`` is chosen with probability
    ``lambda_m(x) / lambda_hat``. For an axis-aligned ``P`` the lattice
    factorises and each coded coordinate is sampled from a discrete Gaussian
    over a local window.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    Pc = codec.coded_block
    shape = codec.lattice_shape
    if np.count_nonzero(Pc - np.diag(np.diag(Pc))) == 0:
        multi = []
        for axis, dim in enumerate(codec.coded_dims):
            grid = codec.lattice_axes[axis]
            sd = np.sqrt(Pc[axis, axis])
            half = int(np.ceil(_SAMPLING_SIGMAS * sd / codec.delta_theta)) + 2
            offset = int(-np.rint(grid[0] / codec.delta_theta))
            mid = np.rint(X[:, dim] / codec.delta_theta).astype(np.int64) + offset
            cand = mid[:, None] + np.arange(-half, half + 1)[None, :]
            valid = (cand >= 0) & (cand < len(grid))
            theta = (cand - offset) * codec.delta_theta
            logw = -0.5 * (X[:, dim][:, None] - theta) ** 2 / sd**2
            w = np.where(valid, np.exp(logw - logw.max(axis=1, keepdims=True)), 0.0)
            if np.any(w.sum(axis=1) == 0):
                raise NumericalError("state left the tuning lattice; enlarge the codec extent")
            cdf = np.cumsum(w, axis=1)
            r = rng.random(n) * cdf[:, -1]
            pick = np.minimum((cdf < r[:, None]).sum(axis=1), cand.shape[1] - 1)
            multi.append(cand[np.arange(n), pick])
        return np.ravel_multi_index(tuple(multi), shape)
    rates = tuning_rate(codec, np.arange(codec.n_centers)[None, :], X[:, None, :])
    cdf = np.cumsum(rates, axis=1)
    r = rng.random(n) * cdf[:, -1]
    return np.minimum((cdf < r[:, None]).sum(axis=1), codec.n_centers - 1)


def sample_spikes(codec, traj, seed):
    """Doubly-stochastic Poisson spikes driven by a state trajectory.

    The spike count of bin (t_k, t_{k+1}] is Poisson(lambda_hat dt) and each
    spike is stamped at t_{k+1} and assigned a neuron from the state there.
    """
    dt = traj.dt
    _warn_coarse(codec, dt)
    rng = np.random.default_rng(seed)
    lam = codec.population_rate
    counts = rng.poisson(lam * dt, size=len(traj.times) - 1)
    bins = np.repeat(np.arange(1, len(traj.times)), counts)
    centers = sample_centers(codec, traj.states[bins], rng)
    return SpikeTrain(times=traj.times[bins], centers=centers, window=(float(traj.times[0]), float(traj.times[-1])))


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mu: np.ndarray
    Sigma: np.ndarray
    t: float = 0.0


def spike_update(mu, Sigma, codec, theta):
    """Posterior after one spike from the neuron centred at ``theta``.

    Sigma - Sigma L (I + L' Sigma L)^{-1} L' Sigma with L L' = P^+, which is
    the information-form update (Sigma^{-1} + P^+)^{-1} written without
    inverting Sigma, so it also covers singular P^+ and singular Sigma.
    """
    L = codec.jump_factor
    Sigma = np.asarray(Sigma, dtype=float)
    mu = np.asarray(mu, dtype=float)
    H = Sigma @ L
    C = np.eye(L.shape[1]) + L.T @ H
    Sigma_new = symmetrize(Sigma - H @ np.linalg.solve(C, H.T))
    mu_new = mu + H @ np.linalg.solve(C, L.T @ (np.asarray(theta, dtype=float) - mu))
    return mu_new, Sigma_new


def filter_step(belief, codec, sys, u, dt, spikes=()):
    """Advance the point-process filter by one bin: drift, then one jump per spike.

    The covariance drift is one RK4 step of the Lyapunov flow, the mean
    drift an Euler step. ``spikes`` lists the flat lattice indices that
    fired in the bin.
    """
    mu = np.asarray(belief.mu, dtype=float).reshape(-1)
    u = np.zeros(sys.dim_u) if u is None else np.asarray(u, dtype=float).reshape(-1)
    Phi, c = lyapunov_step_map(sys.A, sys.D, dt)
    d = sys.dim_x
    Sigma = symmetrize((Phi @ np.asarray(belief.Sigma, dtype=float).reshape(-1) + c).reshape(d, d))
    mu = mu + (sys.A @ mu + sys.B @ u) * dt
    for m in np.atleast_1d(np.asarray(spikes, dtype=np.int64)):
        mu, Sigma = spike_update(mu, Sigma, codec, codec.center(m))
    w = np.linalg.eigvalsh(Sigma)
    if w[0] < -1e-10 or not np.all(np.isfinite(Sigma)):
        raise NumericalError(f"posterior covariance lost positive semidefiniteness (min eigenvalue {w[0]:.3e})")
    return GaussianBelief(mu=mu, Sigma=Sigma, t=belief.t + dt)


def _jump_rows(S, rows, L):
    """Apply one covariance jump to the flattened covariances ``S[rows]`` in place.

    P^+ = sum_j l_j l_j' is absorbed one column at a time; consecutive
    Sherman-Morrison steps give exactly (Sigma^{-1} + P^+)^{-1}.
    """
    d = L.shape[0]
    Sm = S[rows].reshape(-1, d, d)
    for l in L.T:
        h = Sm @ l
        c = 1.0 + h @ l
        Sm = Sm - h[:, :, None] * (h / c[:, None])[:, None, :]
    Sm = 0.5 * (Sm + np.swapaxes(Sm, 1, 2))
    S[rows] = Sm.reshape(len(rows), d * d)


@dataclass(frozen=True, eq=False)
class CovarianceSamples:
    """Aggregates of a simulated ensemble of posterior covariance paths.

    ``mean``/``stderr`` are per grid time (absent when not recorded) and
    ``integrals`` holds sum_k Tr(weights_k Sigma_k) per sample.
    ``snapshots[j]`` holds every sample's covariance at step
    ``snapshot_steps[j]``, ``spikes_before[j]`` how many spikes each sample had
    seen by then, and ``reference[j]`` the spike-free covariance there. The
    last snapshot is always the final step.
    """

    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    integrals: np.ndarray
    snapshot_steps: np.ndarray
    snapshots: np.ndarray
    spikes_before: np.ndarray
    reference: np.ndarray
    n_samples: int

    @property
    def final(self):
        return self.snapshots[-1]

    @property
    def spike_totals(self):
        return self.spikes_before[-1]


def simulate_covariance_ensemble(
    Sigma0,
    codec,
    sys,
    dt,
    n_steps,
    n_samples,
    seed,
    weights=None,
    record_mean=True,
    snapshot_steps=(),
    threads=1,
    key=(),
):
    """Simulate independent posterior covariance paths under Poisson spiking.

    Only total spike counts matter for the covariance, so each bin draws a
    Poisson(lambda_hat dt) count per sample (by CDF inversion, so runs that
    share a seed are coupled across rates) and applies that many jumps
    after the drift step. ``weights`` (n_steps + 1, d, d) adds a per-sample
    accumulation of Tr(weights_k Sigma_k). Results are deterministic in
    ``(seed, key)`` and do not depend on ``threads``; the spike counts of a
    shorter run are a prefix of those of a longer one.
    """
    d = sys.dim_x
    if codec.dim_x != d:
        raise ValueError("codec and system dimensions differ")
    Sigma0 = check_psd(as_matrix(Sigma0, "Sigma0"), "Sigma0")
    _warn_coarse(codec, dt)
    Phi, c = lyapunov_step_map(sys.A, sys.D, dt)
    PhiT = Phi.T
    L = codec.jump_factor
    lam_dt = codec.population_rate * dt
    wvec = None
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n_steps + 1, d, d):
            raise ValueError("weights must hold one matrix per grid time")
        wvec = np.swapaxes(weights, 1, 2).reshape(n_steps + 1, d * d)
    snaps = sorted({int(k) for k in snapshot_steps} | {n_steps})
    if snaps[0] < 0 or snaps[-1] > n_steps:
        raise ValueError("snapshot steps must lie on the simulation grid")
    snap_pos = {k: j for j, k in enumerate(snaps)}
    diag = np.arange(d) * (d + 1)
    s0 = symmetrize(Sigma0).reshape(-1)

    def run(block):
        start, stop, rng = block
        m = stop - start
        # the extra last row never spikes: a reference path on the same arithmetic
        S = np.tile(s0, (m + 1, 1))
        total = np.zeros((n_steps + 1, d * d)) if record_mean else None
        total_sq = np.zeros((n_steps + 1, d * d)) if record_mean else None
        acc = np.zeros(m + 1)
        seen = np.zeros(m, dtype=np.int64)
        shots = np.empty((len(snaps), m + 1, d * d))
        shot_spikes = np.empty((len(snaps), m), dtype=np.int64)

        def observe(k):
            if record_mean:
                total[k] = S[:m].sum(axis=0)
                total_sq[k] = np.einsum("ij,ij->j", S[:m], S[:m])
            if wvec is not None:
                acc[:] += S @ wvec[k]
            if k in snap_pos:
                shots[snap_pos[k]] = S
                shot_spikes[snap_pos[k]] = seen

        observe(0)
        counts = None
        for k in range(n_steps):
            j = k % _COUNT_CHUNK
            if j == 0:
                counts = poisson_from_uniform(rng.random((min(_COUNT_CHUNK, n_steps - k), m)), lam_dt)
            S = S @ PhiT
            S += c
            ck = counts[j]
            seen += ck
            top = ck.max(initial=0)
            for r in range(1, top + 1):
                _jump_rows(S, np.flatnonzero(ck >= r), L)
            if (S[:, diag] < -1e-10).any() or not np.isfinite(S[:, diag]).all():
                raise NumericalError(f"posterior covariance left the PSD cone at step {k + 1}")
            observe(k + 1)
        return total, total_sq, acc, shots.reshape(len(snaps), m + 1, d, d), shot_spikes

    parts = ordered_map(run, sample_blocks(seed, n_samples, key=(3, *key)), threads)
    snapshots = np.concatenate([p[3][:, :-1] for p in parts], axis=1)
    check_psd(snapshots[-1], "posterior covariance")
    reference = parts[0][3][:, -1]
    integrals = np.concatenate([p[2][:-1] for p in parts])
    spikes_before = np.concatenate([p[4] for p in parts], axis=1)
    mean = stderr = None
    if record_mean:
        tot = sum(p[0] for p in parts)
        tot_sq = sum(p[1] for p in parts)
        mean = tot / n_samples
        var = np.clip(tot_sq / n_samples - mean**2, 0.0, None) * n_samples / max(n_samples - 1, 1)
        stderr = np.sqrt(var / n_samples).reshape(n_steps + 1, d, d)
        mean = symmetrize(mean.reshape(n_steps + 1, d, d))
    return CovarianceSamples(
        times=np.arange(n_steps + 1) * dt,
        mean=mean,
        stderr=stderr,
        integrals=integrals,
        snapshot_steps=np.array(snaps),
        snapshots=snapshots,
        spikes_before=spikes_before,
        reference=reference,
        n_samples=n_samples,
    )


def coded_weight(codec):
    """Identity on the coded coordinates, zero elsewhere."""
    W = np.zeros((codec.dim_x, codec.dim_x))
    W[list(codec.coded_dims), list(codec.coded_dims)] = 1.0
    return W


@dataclass(frozen=True, eq=False)
class EquilibriumMMSE:
    value: float
    stderr: float
    per_sample: np.ndarray
    converged: bool


def mmse_equilibrium(codec, sys, dt, n_samples, burn_in, seed, window=None, W=None, threads=1, key=(), warn=True):
    """Long-run filtering error Tr(W Sigma) averaged over time and episodes.

    Episodes start from the stationary prior covariance, are discarded for
    ``burn_in`` time units and then averaged over ``window`` (default
    ``4 * burn_in``). A ``ConvergenceWarning`` is issued when the running
    mean still drifts by more than 1% over the final quarter (unless ``warn``
    is false; the flag is returned either way).
    """
    if window is None:
        window = 4.0 * burn_in
    W = coded_weight(codec) if W is None else as_matrix(W)
    nb = int(round(burn_in / dt))
    nw = n_steps_for(dt, window)
    n = nb + nw
    try:
        Sigma0 = sys.stationary_covariance()
    except ValueError:
        Sigma0 = np.zeros((sys.dim_x, sys.dim_x))
    w = np.zeros(n + 1)
    w[nb:] = dt / window
    w[nb] = w[n] = 0.5 * dt / window
    res = simulate_covariance_ensemble(
        Sigma0, codec, sys, dt, n, n_samples, seed, weights=w[:, None, None] * W, threads=threads, key=key
    )
    per = res.integrals
    trace = np.einsum("ij,tji->t", W, res.mean[nb:])
    running = np.cumsum(trace) / np.arange(1, len(trace) + 1)
    q = (3 * len(running)) // 4
    ref = abs(running[-1]) if running[-1] != 0 else 1.0
    converged = bool(abs(running[-1] - running[q]) / ref <= 0.01)
    if warn and not converged:
        warnings.warn(
            f"equilibrium MMSE running mean drifted by {abs(running[-1] - running[q]) / ref:.2%} "
            "over the final quarter of the window",
            ConvergenceWarning,
            stacklevel=2,
        )
    se = float(per.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("nan")
    return EquilibriumMMSE(value=float(per.mean()), stderr=se, per_sample=per, converged=converged)
