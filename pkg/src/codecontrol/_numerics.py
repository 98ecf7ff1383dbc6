"""Small numerical helpers: symmetric matrices, RK4 paths, RNG streams."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import os

import numpy as np

from .errors import NumericalError

#: Samples per independent RNG stream in Monte-Carlo ensembles.
BLOCK_SIZE = 1024

PSD_CLAMP_TOL = 1e-12
PSD_CHECK_TOL = 1e-10


def symmetrize(M):
    """Return (M + M^T)/2, acting on the last two axes."""
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def as_matrix(M, name="matrix"):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {M.shape}")
    return M


def psd_sqrt(M, tol=PSD_CLAMP_TOL):
    """Symmetric square root of a positive semidefinite matrix.

    Eigenvalues in [-tol, 0] are clamped to zero; anything more negative is
    rejected since it signals a modelling error rather than rounding.
    """
    M = as_matrix(M)
    if not np.allclose(M, M.T, atol=1e-12, rtol=0.0):
        raise ValueError("matrix is not symmetric")
    w, V = np.linalg.eigh(symmetrize(M))
    if w.size and w.min() < -tol:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def is_psd(M, tol=PSD_CHECK_TOL):
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        return False
    return bool(np.linalg.eigvalsh(symmetrize(M)).min() >= -tol)


def check_psd(M, what="covariance", tol=PSD_CHECK_TOL):
    """Raise :class:`NumericalError` unless every matrix in ``M`` is PSD."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NumericalError(f"{what} contains non-finite entries")
    w = np.linalg.eigvalsh(symmetrize(M))
    if w.min() < -tol:
        raise NumericalError(f"{what} lost positive semidefiniteness (min eigenvalue {w.min():.3e})")
    return M


def n_steps_for(dt, T):
    """Number of steps of size ``dt`` covering [0, T]; dt must divide T."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if T < dt * (1 - 1e-9):
        raise ValueError("horizon T must be at least one step dt")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide T={T}")
    return n


def grid_index(t, dt, n_steps):
    """Index of time ``t`` on a uniform grid, rejecting off-grid values."""
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= n_steps:
        raise ValueError(f"t={t} is not on the time grid (dt={dt}, {n_steps} steps)")
    return k


def rk4_path(rhs, y0, dt, n_steps, check=None):
    """Integrate a matrix ODE ``dY/dt = rhs(Y)`` with classical RK4.

    Every step is symmetrized; ``check(Y, k)`` may raise to abort.
    Returns an array of shape ``(n_steps + 1,) + y0.shape``.
    """
    y = symmetrize(y0)
    out = np.empty((n_steps + 1,) + y.shape)
    out[0] = y
    for k in range(n_steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = symmetrize(y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if check is not None:
            check(y, k + 1)
        out[k + 1] = y
    return out


def lyapunov_step_map(A, D, dt):
    """One RK4 step of dS/dt = AS + SA^T + D written as an affine map on vec(S).

    Returns ``(Phi, c)`` such that vec(S_next) = Phi @ vec(S) + c, with
    row-major vectorisation.
    """
    d = A.shape[0]
    eye = np.eye(d)
    Lop = np.kron(A, eye) + np.kron(eye, A)
    dvec = np.asarray(D, dtype=float).reshape(-1)
    h = dt
    L2 = Lop @ Lop
    L3 = L2 @ Lop
    I = np.eye(d * d)
    Phi = I + h * Lop + h**2 / 2 * L2 + h**3 / 6 * L3 + h**4 / 24 * (L3 @ Lop)
    c = (h * I + h**2 / 2 * Lop + h**3 / 6 * L2 + h**4 / 24 * L3) @ dvec
    return Phi, c


def trapezoid_weights(n_points, dt):
    w = np.full(n_points, dt)
    if n_points:
        w[0] = w[-1] = dt / 2
    if n_points == 1:
        w[0] = 0.0
    return w


def poisson_from_uniform(u, mu):
    """Poisson(mu) variates by inverting the CDF at uniforms ``u``.

    The same ``u`` gives counts that are nondecreasing in ``mu``, which
    couples simulations that differ only in their rate.
    """
    u = np.asarray(u, dtype=float)
    counts = np.zeros(u.shape, dtype=np.int64)
    if mu <= 0:
        return counts
    term = np.exp(-mu)
    cdf = term
    k = 0
    above = u >= cdf
    while above.any():
        k += 1
        counts += above
        term *= mu / k
        if term <= 1e-17 * cdf:
            break
        cdf += term
        above &= u >= cdf
    return counts


def sample_blocks(seed, n_samples, key=(), block_size=BLOCK_SIZE):
    """Split an ensemble into fixed blocks, each with its own RNG stream.

    The stream of block ``j`` is seeded by ``(seed, *key, j)``, so the draws
    of a given sample never depend on how blocks are scheduled.
    """
    blocks = []
    for j, start in enumerate(range(0, n_samples, block_size)):
        stop = min(start + block_size, n_samples)
        ss = np.random.SeedSequence([int(seed), *[int(k) for k in key], j])
        blocks.append((start, stop, np.random.Generator(np.random.Philox(ss))))
    return blocks


def default_threads():
    return max(1, os.cpu_count() or 1)


def ordered_map(fn, items, threads=1):
    """``list(map(fn, items))`` optionally spread over a thread pool."""
    items = list(items)
    if threads is None:
        threads = default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
