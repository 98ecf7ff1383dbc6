"""Encoder-parameter sweeps comparing estimation and control objectives.

A width sweep varies the tuning width ``p`` of an isotropic code; an
anisotropy sweep varies the angle ``zeta`` of P = p^2 diag(tan zeta, cot zeta)
at fixed determinant. Each grid point gets the equilibrium MMSE, the
finite-horizon uncertainty penalty f(Sigma0, 0) and the information about
the state at T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import __version__
from ._numerics import ordered_map, trapezoid_weights
from .belief_cost import (
    mc_penalty,
    meanfield_equilibrium,
    meanfield_expected_covariance,
    penalty_integrand,
)
from .config import ExperimentConfig
from .dynamics import make_2d_product, make_oscillator, make_ou
from .errors import ConfigError, NumericalError
from .kalman import DiffusionObservation, constant_det_noise, kalman_mmse, propagate_kalman_covariance
from .mutual_info import PriorSpec, _logdet, poisson_mi_from_samples, prior_covariance
from .poisson_code import (
    coded_weight,
    lattice_extent,
    make_anisotropic_codec,
    make_width_codec,
    mmse_equilibrium,
)
from .riccati import QuadraticCost, solve_riccati

SweepConfig = ExperimentConfig

CURVE_COLUMNS = (
    "mmse", "mmse_se", "f", "f_se", "mi", "mi_se",
    "mmse_meanfield", "f_meanfield", "mi_meanfield", "mmse_converged",
)
KALMAN_COLUMNS = ("kalman_mmse", "lqg_f", "kalman_mi")
SIGNIFICANCE_LEVEL = 0.95

# stream tags keep the ensembles of different quantities independent
_PENALTY_STREAM = 10
_MMSE_STREAM = 11


def build_system(cfg):
    s = cfg.system
    if s.kind == "ou":
        base = make_ou(s.gamma, s.eta, s.b)
    else:
        base = make_oscillator(s.gamma, s.omega, s.eta, s.b, s.noise_convention)
    return make_2d_product(base) if s.channels == 2 else base


def build_cost(cfg):
    """Per-channel weights; for the oscillator Q acts on position, R on the velocity input."""
    c, s = cfg.cost, cfg.system

    def blocks(values, slot):
        if s.kind == "ou":
            return np.diag(values)
        per = []
        for v in values:
            m = np.zeros((2, 2))
            m[slot, slot] = v
            per.append(m)
        return scipy.linalg.block_diag(*per)

    return QuadraticCost(Q=blocks(c.q, 0), R=blocks(c.r, 1), Q_T=blocks(c.q_T, 0), T=c.T)


def coded_dims(cfg):
    """Observed coordinates: every OU channel, or each oscillator's position."""
    step = 1 if cfg.system.kind == "ou" else 2
    return tuple(range(0, step * cfg.system.channels, step))


def initial_covariance(cfg, sys):
    """Sigma0 = sigma0_scale times the stationary covariance of the free process."""
    return cfg.simulation.sigma0_scale * sys.stationary_covariance()


def parameter_grid(cfg):
    g = cfg.codec.grid
    if g.num == 1:
        return np.array([g.min])
    if g.spacing == "log":
        return np.geomspace(g.min, g.max, g.num)
    return np.linspace(g.min, g.max, g.num)


def build_codec(cfg, value, sys=None, Sigma0=None):
    """Codec at one grid value, with a lattice wide enough for the state's range."""
    k = cfg.codec
    sys = build_system(cfg) if sys is None else sys
    dims = coded_dims(cfg)
    if k.family == "width":
        codec = make_width_codec(value, k.phi, k.delta_theta, sys.dim_x, dims)
    else:
        codec = make_anisotropic_codec(value, k.p, k.phi, k.delta_theta, sys.dim_x, dims)
    return codec.with_extent(lattice_extent(sys, dims, codec.P, Sigma0))


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Curves over an encoder-parameter grid.

    ``columns`` maps names to arrays aligned with ``grid`` (NaN where a point
    failed). ``samples`` holds per-sample contributions of the Monte-Carlo
    columns, shape (n_points, n_samples); with ``paired`` set every grid point
    was driven by the same random numbers, so bootstrap replicates must
    resample sample indices jointly across the grid.
    """

    parameter: str
    grid: np.ndarray
    columns: dict
    samples: dict = field(default_factory=dict)
    paired: bool = False
    errors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def partial(self):
        return bool(self.errors)

    def column(self, name):
        return self.columns[name]


class _Context:
    def __init__(self, cfg, method):
        self.cfg = cfg
        self.method = method
        self.sys = build_system(cfg)
        self.cost = build_cost(cfg)
        self.path = solve_riccati(self.sys, self.cost, cfg.simulation.dt)
        self.Sigma0 = initial_covariance(cfg, self.sys)
        self.prior = PriorSpec(np.zeros(self.sys.dim_x), self.Sigma0)
        self.dims = coded_dims(cfg)
        self.weights = penalty_integrand(self.path, self.sys, self.cost) * trapezoid_weights(
            self.path.n_steps + 1, self.path.dt
        )[:, None, None]
        self.prior_logdet = _logdet(prior_covariance(self.sys, self.prior, cfg.simulation.dt, cfg.cost.T).final)

    def penalty(self, covs):
        """Trapezoid value of int_0^T Tr(S B R^+ B' S Sigma_s) for a covariance path."""
        return float(np.einsum("tij,tji->", self.weights, covs))

    def stream(self, tag, index):
        if self.cfg.simulation.common_random_numbers:
            return (tag,)
        return (tag, index + 1)


def _evaluate_point(ctx, index, value, kalman):
    cfg, sim = ctx.cfg, ctx.cfg.simulation
    sys, cost, path = ctx.sys, ctx.cost, ctx.path
    codec = build_codec(cfg, value, sys, ctx.Sigma0)
    W = coded_weight(codec)
    out, samples = {}, {}
    out["mmse_meanfield"] = float(np.trace(W @ meanfield_equilibrium(codec, sys)))
    mf = meanfield_expected_covariance(ctx.Sigma0, codec, sys, sim.dt, cfg.cost.T).covs
    out["f_meanfield"] = ctx.penalty(mf)
    out["mi_meanfield"] = float(0.5 * (ctx.prior_logdet - _logdet(mf[-1])))
    if ctx.method == "mc":
        pen = mc_penalty(
            ctx.Sigma0, 0.0, path, codec, sys, cost, sim.n_samples, cfg.seed,
            key=ctx.stream(_PENALTY_STREAM, index),
        )
        mi = poisson_mi_from_samples(pen.samples)
        mm = mmse_equilibrium(
            codec, sys, sim.dt, sim.mmse_samples, sim.mmse_burn_in, cfg.seed,
            window=sim.mmse_window, W=W, key=ctx.stream(_MMSE_STREAM, index), warn=False,
        )
        out.update(f=pen.value, f_se=pen.stderr, mi=mi.value, mi_se=mi.stderr)
        out.update(mmse=mm.value, mmse_se=mm.stderr, mmse_converged=float(mm.converged))
        samples = {"f": pen.per_sample, "mi": mi.per_sample, "mmse": mm.per_sample}
    else:
        out.update(f=out["f_meanfield"], mmse=out["mmse_meanfield"], mi=out["mi_meanfield"])
        out.update(f_se=0.0, mmse_se=0.0, mi_se=0.0, mmse_converged=1.0)
    if kalman:
        obs = kalman_observation(cfg, codec, sys)
        out["kalman_mmse"] = kalman_mmse(sys, obs, W=W)
        K = propagate_kalman_covariance(sys, obs, ctx.Sigma0, sim.dt, cfg.cost.T).covs
        out["lqg_f"] = ctx.penalty(K)
        out["kalman_mi"] = float(0.5 * (ctx.prior_logdet - _logdet(K[-1])))
    return out, samples


def kalman_observation(cfg, codec, sys):
    """Diffusion baseline for a codec.

    Explicit (F, G) from the config win. Otherwise F reads the coded
    coordinates and G = g^2 times the coded block of P, which for the
    anisotropy family is the constant-determinant noise g^2 p^2 diag(tan, cot).
    """
    k = cfg.kalman
    if k.F is not None:
        return DiffusionObservation(F=np.array(k.F, dtype=float), G=np.array(k.G, dtype=float))
    g = 1.0 if k.g is None else k.g
    dims = coded_dims(cfg)
    if cfg.codec.family == "anisotropy":
        zeta = float(np.arctan(np.sqrt(codec.P[dims[0], dims[0]] / codec.P[dims[1], dims[1]])))
        return constant_det_noise(zeta, g * cfg.codec.p, observed=dims, dim_x=sys.dim_x)
    return DiffusionObservation(F=np.eye(sys.dim_x)[list(dims)], G=g**2 * codec.coded_block)


def _run(cfg, family, method, threads):
    if cfg.codec.family != family:
        raise ConfigError(f"this sweep needs codec.family = {family!r}, got {cfg.codec.family!r}")
    method = cfg.simulation.method if method is None else method
    if method not in ("mc", "meanfield"):
        raise ConfigError("method must be 'mc' or 'meanfield'")
    ctx = _Context(cfg, method)
    grid = parameter_grid(cfg)
    kalman = family == "anisotropy"
    names = CURVE_COLUMNS + (KALMAN_COLUMNS if kalman else ())

    def work(item):
        i, v = item
        try:
            return _evaluate_point(ctx, i, float(v), kalman)
        except (NumericalError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return exc

    outcomes = ordered_map(work, list(enumerate(grid)), threads)
    columns = {name: np.full(len(grid), np.nan) for name in names}
    errors = {}
    sample_rows = {}
    for i, res in enumerate(outcomes):
        if isinstance(res, Exception):
            errors[i] = f"{type(res).__name__}: {res}"
            continue
        values, samples = res
        for name, val in values.items():
            columns[name][i] = val
        for name, arr in samples.items():
            sample_rows.setdefault(name, {})[i] = arr
    samples = {}
    for name, rows in sample_rows.items():
        n = len(next(iter(rows.values())))
        block = np.full((len(grid), n), np.nan)
        for i, arr in rows.items():
            block[i] = arr
        samples[name] = block
    codec0 = build_codec(cfg, float(grid[0]), ctx.sys, ctx.Sigma0)
    metadata = {
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "method": method,
        "parameter": "p" if family == "width" else "zeta",
        "grid": grid.tolist(),
        "Sigma0": ctx.Sigma0.tolist(),
        "coded_dims": list(ctx.dims),
        "common_random_numbers": cfg.simulation.common_random_numbers,
        "population_rate_first_point": codec0.population_rate,
    }
    return SweepResult(
        parameter=metadata["parameter"],
        grid=grid,
        columns=columns,
        samples=samples,
        paired=bool(cfg.simulation.common_random_numbers and method == "mc"),
        errors=errors,
        metadata=metadata,
    )


def run_width_sweep(cfg, method=None, threads=1):
    """MMSE, f and information over the tuning-width grid at fixed peak rate phi."""
    return _run(cfg, "width", method, threads)


def run_anisotropy_sweep(cfg, method=None, threads=1):
    """MMSE, f and information over the anisotropy grid, plus the Kalman/LQG baseline."""
    return _run(cfg, "anisotropy", method, threads)


def run_sweep(cfg, method=None, threads=1):
    if cfg.codec.family == "width":
        return run_width_sweep(cfg, method, threads)
    return run_anisotropy_sweep(cfg, method, threads)


def _nan_argmin(values):
    v = np.asarray(values, dtype=float)
    if np.all(np.isnan(v)):
        return None
    return int(np.nanargmin(v))


def _location(index, n):
    if index is None:
        return "undefined"
    if n == 1:
        return "degenerate"
    return "boundary" if index in (0, n - 1) else "interior"


def _bootstrap_argmins(samples, sign, rng, n_boot, paired):
    """Argmin of sign * mean over bootstrap resamples of the per-sample rows."""
    valid = ~np.isnan(samples).any(axis=1)
    rows = samples[valid]
    n = rows.shape[1]
    where = np.flatnonzero(valid)
    out = np.empty(n_boot, dtype=np.int64)
    for b in range(n_boot):
        if paired:
            means = rows[:, rng.integers(0, n, n)].mean(axis=1)
        else:
            idx = rng.integers(0, n, (rows.shape[0], n))
            means = np.take_along_axis(rows, idx, axis=1).mean(axis=1)
        out[b] = where[np.argmin(sign * means)]
    return out


def summarize(result, n_boot=None, seed=None):
    """Argmins of MMSE and f, argmax of MI, and whether the two minimizers are separated.

    Separation is "significant" when the minimizers are more than one grid step
    apart in at least 95% of bootstrap replicates, "not significant" otherwise
    and "degenerate" on a one-point grid. Without per-sample data (mean-field
    curves are noise-free) the point estimates decide.
    """
    grid = np.asarray(result.grid, dtype=float)
    n = len(grid)
    cols = result.columns
    i_mmse = _nan_argmin(cols["mmse"])
    i_f = _nan_argmin(cols["f"])
    mi = np.asarray(cols["mi"], dtype=float)
    i_mi = None if np.all(np.isnan(mi)) else int(np.nanargmax(mi))

    def pick(i):
        return None if i is None else float(grid[i])

    summary = {
        "parameter": result.parameter,
        "n_points": n,
        "partial": result.partial,
        "argmin_mmse": i_mmse,
        "argmin_mmse_value": pick(i_mmse),
        "argmin_mmse_location": _location(i_mmse, n),
        "argmin_f": i_f,
        "argmin_f_value": pick(i_f),
        "argmin_f_location": _location(i_f, n),
        "argmax_mi": i_mi,
        "argmax_mi_value": pick(i_mi),
        "argmax_mi_location": _location(i_mi, n),
    }
    if "lqg_f" in cols:
        i_k = _nan_argmin(cols["kalman_mmse"])
        i_l = _nan_argmin(cols["lqg_f"])
        summary.update(
            argmin_kalman_mmse=i_k, argmin_kalman_mmse_value=pick(i_k),
            argmin_lqg_f=i_l, argmin_lqg_f_value=pick(i_l),
        )
    separation, confidence = "not significant", None
    if n == 1:
        separation = "degenerate"
    elif i_mmse is None or i_f is None:
        separation = "undefined"
    elif "mmse" in result.samples and "f" in result.samples:
        meta_seed = result.metadata.get("seed", 0) if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence([int(meta_seed), 97]))
        if n_boot is None:
            n_boot = int(result.metadata.get("config", {}).get("simulation", {}).get("bootstrap", 1000))
        a = _bootstrap_argmins(result.samples["mmse"], 1.0, rng, n_boot, result.paired)
        b = _bootstrap_argmins(result.samples["f"], 1.0, rng, n_boot, result.paired)
        confidence = float(np.mean(np.abs(a - b) > 1))
        if confidence >= SIGNIFICANCE_LEVEL:
            separation = "significant"
        summary["bootstrap_replicates"] = n_boot
    elif abs(i_mmse - i_f) > 1:
        separation = "significant"
        confidence = 1.0
    summary["separation"] = separation
    summary["separation_confidence"] = confidence
    summary["separation_steps"] = None if i_mmse is None or i_f is None else abs(i_mmse - i_f)
    return summary
