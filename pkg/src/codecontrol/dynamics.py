"""Linear stochastic systems dX = (AX + BU)dt + D^{1/2} dW and their simulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._numerics import (
    as_matrix,
    n_steps_for,
    ordered_map,
    psd_sqrt,
    sample_blocks,
)
from .errors import NumericalError

NOISE_CONVENTIONS = ("intensity", "squared")


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Drift ``A``, control input ``B`` and noise intensity ``D``.

    ``D`` is the diffusion covariance per unit time, so the noise term of the
    SDE is ``D^{1/2} dW``.
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        D = as_matrix(self.D, "D")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {B.shape}")
        if D.shape != (n, n):
            raise ValueError(f"D must be {n}x{n}, got {D.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)
        # rejects asymmetric or indefinite D
        object.__setattr__(self, "_D_sqrt", psd_sqrt(D))

    @property
    def dim_x(self):
        return self.A.shape[0]

    @property
    def dim_u(self):
        return self.B.shape[1]

    @property
    def D_sqrt(self):
        return self._D_sqrt

    def stationary_covariance(self):
        """Solve A S + S A^T + D = 0 for the uncontrolled process.

        Raises ``ValueError`` if ``A`` is not Hurwitz.
        """
        if np.max(np.linalg.eigvals(self.A).real) >= 0:
            raise ValueError("uncontrolled system has no stationary covariance (A not stable)")
        S = scipy.linalg.solve_continuous_lyapunov(self.A, -self.D)
        return 0.5 * (S + S.T)


def make_ou(gamma, eta, b=1.0):
    """Scalar Ornstein-Uhlenbeck process dX = (bU - gamma X)dt + sqrt(eta) dW."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return LinearSystem(A=[[-float(gamma)]], B=[[float(b)]], D=[[float(eta)]])


def make_oscillator(gamma, omega, eta, b=1.0, noise_convention="intensity"):
    """Damped stochastic oscillator with state (position, velocity).

    Only the velocity is driven by noise and control. Under the
    ``"intensity"`` convention the velocity noise term is ``sqrt(eta) dW``;
    ``"squared"`` puts ``eta**2`` on the diagonal of ``D`` instead.
    """
    if not omega > 0:
        raise ValueError("omega must be positive")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if noise_convention not in NOISE_CONVENTIONS:
        raise ValueError(f"noise_convention must be one of {NOISE_CONVENTIONS}")
    q = eta if noise_convention == "intensity" else eta**2
    A = [[0.0, 1.0], [-(omega**2), -gamma]]
    B = [[0.0, 0.0], [0.0, b]]
    D = [[0.0, 0.0], [0.0, q]]
    return LinearSystem(A=A, B=B, D=D)


def make_2d_product(sys):
    """Two uncoupled copies of ``sys`` stacked block-diagonally."""
    return LinearSystem(
        A=scipy.linalg.block_diag(sys.A, sys.A),
        B=scipy.linalg.block_diag(sys.B, sys.B),
        D=scipy.linalg.block_diag(sys.D, sys.D),
    )


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """Linear feedback ``u_k = -gains[k] @ estimate_k`` on a uniform grid.

    ``source`` records what the estimate is: the true state (full
    information) or a posterior mean (certainty equivalence).
    """

    times: np.ndarray
    gains: np.ndarray
    source: str = "state"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        gains = np.asarray(self.gains, dtype=float)
        if gains.ndim != 3 or gains.shape[0] != times.shape[0]:
            raise ValueError("gains must have one matrix per grid time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "gains", gains)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def control(self, k, estimate):
        """Control for step ``k``; ``estimate`` may be (dim_x,) or (n, dim_x)."""
        return -np.asarray(estimate) @ self.gains[k].T

    def certainty_equivalent(self):
        return ControlLaw(self.times, self.gains, source="belief")


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray = field(default=None)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])


def _check_law(law, n_steps, dt):
    if law is None:
        return
    if law.gains.shape[0] < n_steps + 1:
        raise ValueError("control law does not cover the simulation horizon")
    if abs(law.dt - dt) > 1e-12 * max(1.0, dt):
        raise ValueError("control law grid does not match dt")


def simulate_state(sys, law, x0, dt, T, seed):
    """Euler-Maruyama path of the controlled SDE.

    With ``law`` given, ``u_k = -L_k x_k`` (full-information feedback);
    ``law=None`` means ``u = 0``. Deterministic given ``seed``.
    """
    n = n_steps_for(dt, T)
    _check_law(law, n, dt)
    rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=float).reshape(sys.dim_x)
    states = np.empty((n + 1, sys.dim_x))
    controls = np.zeros((n + 1, sys.dim_u))
    states[0] = x
    sq = np.sqrt(dt)
    for k in range(n):
        u = law.control(k, x) if law is not None else np.zeros(sys.dim_u)
        controls[k] = u
        xi = rng.standard_normal(sys.dim_x)
        x = x + (sys.A @ x + sys.B @ u) * dt + sq * (sys.D_sqrt @ xi)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"state became non-finite at step {k + 1} (t={(k + 1) * dt:g})")
        states[k + 1] = x
    if law is not None:
        controls[n] = law.control(n, x)
    return StateTrajectory(times=np.arange(n + 1) * dt, states=states, controls=controls)


def simulate_ensemble(sys, law, x0, dt, T, n_paths, seed, record_every=1, on_step=None, threads=1):
    """Vectorised Euler-Maruyama ensemble.

    ``x0`` is either a single state or an array ``(n_paths, dim_x)``.
    ``on_step(block_start, k, x, u)`` is called before each step (and once
    at ``k = n`` with ``u = None``) so callers can accumulate running costs.
    Returns ``(times, states)`` where ``states`` has shape
    ``(n_paths, n_records, dim_x)``.
    """
    n = n_steps_for(dt, T)
    _check_law(law, n, dt)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (n_paths, sys.dim_x))
    rec = np.arange(0, n + 1, record_every)
    out = np.empty((n_paths, rec.size, sys.dim_x))
    sq = np.sqrt(dt)
    At, Bt, Ct = sys.A.T, sys.B.T, sys.D_sqrt.T

    def run(block):
        start, stop, rng = block
        x = np.array(x0[start:stop])
        r = 0
        for k in range(n + 1):
            if k % record_every == 0:
                out[start:stop, r] = x
                r += 1
            if k == n:
                break
            u = law.control(k, x) if law is not None else None
            if on_step is not None:
                on_step(start, k, x, u)
            xi = rng.standard_normal(x.shape)
            drift = x @ At if u is None else x @ At + u @ Bt
            x = x + drift * dt + sq * (xi @ Ct)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"ensemble state became non-finite at step {k + 1}")
        if on_step is not None:
            on_step(start, n, x, None)

    ordered_map(run, sample_blocks(seed, n_paths, key=(1,)), threads)
    return rec * dt, out
