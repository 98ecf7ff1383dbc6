"""Finite-horizon LQR: backward Riccati ODE, optimal gains, cost-to-go."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numerics import (
    as_matrix,
    grid_index,
    is_psd,
    n_steps_for,
    symmetrize,
)
from .dynamics import ControlLaw, simulate_ensemble
from .errors import NumericalError

BLOWUP_NORM = 1e12


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """Running cost x'Qx + u'Ru over [0, T] plus terminal x'Q_T x."""

    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    T: float

    def __post_init__(self):
        for name in ("Q", "R", "Q_T"):
            M = as_matrix(getattr(self, name), name)
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if not is_psd(M, tol=1e-12):
                raise ValueError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, M)
        if self.Q.shape != self.Q_T.shape:
            raise ValueError("Q and Q_T must have the same shape")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        object.__setattr__(self, "T", float(self.T))

    @property
    def R_pinv(self):
        return np.linalg.pinv(self.R, rcond=1e-12, hermitian=True)

    def scaled(self, c):
        return QuadraticCost(c * self.Q, c * self.R, c * self.Q_T, self.T)


def check_actuation(sys, cost):
    """Reject control directions that cost nothing but still move the state.

    With singular R the gain uses the pseudo-inverse, which is only the right
    answer when B annihilates the null space of R.
    """
    if cost.Q.shape != (sys.dim_x, sys.dim_x):
        raise ValueError("Q does not match the state dimension")
    if cost.R.shape != (sys.dim_u, sys.dim_u):
        raise ValueError("R does not match the control dimension")
    w, V = np.linalg.eigh(cost.R)
    scale = max(1.0, np.abs(w).max(initial=0.0))
    null = V[:, w <= 1e-12 * scale]
    if null.size and np.abs(sys.B @ null).max() > 1e-12 * max(1.0, np.abs(sys.B).max()):
        raise ValueError("B acts along a null direction of R: control there would be free")


def control_weight(sys, cost):
    """B R^+ B^T, the matrix that turns Riccati solutions into gain energy."""
    return symmetrize(sys.B @ cost.R_pinv @ sys.B.T)


@dataclass(frozen=True, eq=False)
class RiccatiPath:
    """Riccati solution on a uniform grid.

    ``integral_trace_DS[k]`` holds the integral of Tr(D S_s) from ``times[k]``
    to T.
    """

    times: np.ndarray
    S: np.ndarray
    integral_trace_DS: np.ndarray

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def T(self):
        return float(self.times[-1])

    def index(self, t):
        return grid_index(t, self.dt, self.n_steps)


def solve_riccati(sys, cost, dt):
    """Integrate -dS/dt = Q + A'S + SA - S B R^+ B' S backwards from S_T = Q_T.

    Classical RK4 in reversed time, symmetrizing every step. The running
    integral of Tr(D S) uses the trapezoid rule on the same grid.
    """
    check_actuation(sys, cost)
    n = n_steps_for(dt, cost.T)
    A, Q = sys.A, cost.Q
    M = control_weight(sys, cost)

    def rhs(S):
        return Q + A.T @ S + S @ A - S @ M @ S

    S = np.empty((n + 1, sys.dim_x, sys.dim_x))
    y = symmetrize(cost.Q_T)
    S[n] = y
    for j in range(n):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = symmetrize(y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        norm = np.abs(y).max()
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise NumericalError(f"Riccati solution blew up at t={(n - j - 1) * dt:g}")
        S[n - j - 1] = y
    S[n] = cost.Q_T  # boundary exactly, not a symmetrized copy
    trDS = np.einsum("ij,tji->t", sys.D, S)
    seg = 0.5 * dt * (trDS[1:] + trDS[:-1])
    integral = np.zeros(n + 1)
    integral[:-1] = np.cumsum(seg[::-1])[::-1]
    return RiccatiPath(times=np.arange(n + 1) * dt, S=S, integral_trace_DS=integral)


def lqr_gain(path, sys, cost):
    """Feedback gains L_t = R^+ B' S_t on the Riccati grid."""
    if path.S.shape[1:] != (sys.dim_x, sys.dim_x):
        raise ValueError("Riccati path does not match the system dimension")
    gains = np.einsum("ij,tjk->tik", cost.R_pinv @ sys.B.T, path.S)
    return ControlLaw(times=path.times, gains=gains, source="state")


def full_info_cost_to_go(x, t, path):
    """Optimal expected cost x' S_t x + integral_t^T Tr(D S_s) ds."""
    k = path.index(t)
    x = np.asarray(x, dtype=float).reshape(-1)
    return float(x @ path.S[k] @ x + path.integral_trace_DS[k])


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    n: int

    def within(self, value, n_se=3.0, extra_se=0.0):
        """True when ``value`` lies within ``n_se`` combined standard errors."""
        se = np.hypot(self.stderr, extra_se)
        return abs(self.mean - value) <= n_se * se


def realized_costs(sys, cost, law, x0, dt, n_paths, seed, threads=1):
    """Per-path realized cost of ``law`` under Euler-Maruyama simulation.

    The running cost uses the left-point rule on the simulation grid.
    """
    n = n_steps_for(dt, cost.T)
    totals = np.zeros(n_paths)
    Q, R, QT = cost.Q, cost.R, cost.Q_T

    def accumulate(start, k, x, u):
        sl = slice(start, start + x.shape[0])
        if k == n:
            totals[sl] += np.einsum("ni,ij,nj->n", x, QT, x)
            return
        c = np.einsum("ni,ij,nj->n", x, Q, x)
        if u is not None:
            c += np.einsum("ni,ij,nj->n", u, R, u)
        totals[sl] += c * dt

    simulate_ensemble(sys, law, x0, dt, cost.T, n_paths, seed, record_every=n, on_step=accumulate, threads=threads)
    return totals


def mc_policy_cost(sys, cost, law, x0, dt, n_paths, seed, threads=1):
    """Monte-Carlo policy evaluation: mean realized cost with its standard error."""
    c = realized_costs(sys, cost, law, x0, dt, n_paths, seed, threads)
    return MonteCarloEstimate(float(c.mean()), float(c.std(ddof=1) / np.sqrt(n_paths)), n_paths)
