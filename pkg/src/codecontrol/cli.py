"""Command-line front end.

Every subcommand reads one YAML experiment file, writes its tables into
``--out`` and records the run in ``manifest.json``. Exit codes: 0 success,
2 configuration error, 3 numerical abort, 4 sweep finished with failed points.
"""

from __future__ import annotations

import argparse
from pathlib import Path
import sys as _sys

import numpy as np

from ._numerics import default_threads
from .belief_cost import closed_loop_episodes, meanfield_expected_covariance, simulate_episode
from .config import load_config
from .errors import ConfigError, NumericalError
from .kalman import propagate_kalman_covariance
from .mutual_info import PriorSpec, _logdet, mi_poisson_path, poisson_mi_from_samples, prior_covariance
from .poisson_code import GaussianBelief, simulate_covariance_ensemble
from .report import manifest_header, timestamp, write_json, write_manifest, write_table
from .riccati import solve_riccati
from .sweep import (
    build_codec,
    build_cost,
    build_system,
    initial_covariance,
    kalman_observation,
    parameter_grid,
    run_anisotropy_sweep,
    run_width_sweep,
    summarize,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4

_MI_STREAM = 12


class _Model:
    """System, cost, Riccati path and initial belief shared by the subcommands."""

    def __init__(self, cfg):
        try:
            self.sys = build_system(cfg)
            self.cost = build_cost(cfg)
            self.Sigma0 = initial_covariance(cfg, self.sys)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.path = solve_riccati(self.sys, self.cost, cfg.simulation.dt)

    def codec(self, cfg, value=None):
        if value is None:
            value = cfg.codec.p if cfg.codec.family == "width" else cfg.codec.zeta
        return build_codec(cfg, value, self.sys, self.Sigma0)


def cmd_riccati(cfg, out, args):
    m = _Model(cfg)
    d = m.sys.dim_x
    names, cols = ["t"], [m.path.times]
    for i in range(d):
        for j in range(i, d):
            names.append(f"S_{i}{j}")
            cols.append(m.path.S[:, i, j])
    names.append("int_trace_DS_to_T")
    cols.append(m.path.integral_trace_DS)
    outputs = [write_table(out / "riccati.csv", manifest_header(cfg, "riccati"), names, cols)]
    if args.plot:
        from .plotting import plot_lines

        series = {n: c for n, c in zip(names[1:-1], cols[1:-1])}
        outputs.append(plot_lines(m.path.times, series, out / "riccati.svg", "t", "S_t entries", "Riccati solution"))
    return outputs, EXIT_OK


def cmd_filter_demo(cfg, out, args):
    m = _Model(cfg)
    codec = m.codec(cfg)
    belief0 = GaussianBelief(mu=np.zeros(m.sys.dim_x), Sigma=m.Sigma0, t=0.0)
    ep = simulate_episode(codec, m.sys, m.cost, m.path, belief0, cfg.seed)
    d, du = m.sys.dim_x, m.sys.dim_u
    names, cols = ["t"], [ep.times]
    for i in range(d):
        names += [f"x{i}", f"mu{i}", f"var{i}"]
        cols += [ep.states[:, i], ep.means[:, i], ep.covariances[:, i, i]]
    controls = np.vstack([ep.controls, np.full((1, du), np.nan)])
    for j in range(du):
        names.append(f"u{j}")
        cols.append(controls[:, j])
    names.append("spikes")
    cols.append(ep.spike_counts)
    header = manifest_header(cfg, "filter-demo", {"episode_cost": f"{ep.cost:.12g}", "spikes_total": len(ep.spikes)})
    outputs = [write_table(out / "episode.csv", header, names, cols)]
    if cfg.simulation.episodes > 1:
        batch = closed_loop_episodes(
            codec, m.sys, m.cost, m.path, belief0, cfg.simulation.episodes, cfg.seed, threads=args.threads
        )
        est = batch.cost_estimate(control_variate=True)
        record = {
            "episodes": cfg.simulation.episodes,
            "coverage_1sigma": batch.covered.mean(axis=0),
            "mean_cost": est.mean,
            "mean_cost_se": est.stderr,
            "mean_spikes": float(batch.spike_counts.mean()),
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
        }
        outputs.append(write_json(out / "batch.json", record))
    if args.plot:
        from .plotting import plot_lines

        series = {}
        for i in codec.coded_dims:
            series[f"x{i}"] = ep.states[:, i]
            series[f"mu{i}"] = ep.means[:, i]
        outputs.append(plot_lines(ep.times, series, out / "episode.svg", "t", "state", "Filtered episode"))
    return outputs, EXIT_OK


def _sweep(cfg, out, args, runner, command):
    result = runner(cfg, method=args.method, threads=args.threads)
    summary = summarize(result)
    summary["config_hash"] = cfg.config_hash()
    summary["seed"] = cfg.seed
    summary["method"] = result.metadata["method"]
    summary["Sigma0"] = result.metadata["Sigma0"]
    names = [result.parameter] + list(result.columns)
    cols = [result.grid] + [result.columns[n] for n in result.columns]
    header = manifest_header(cfg, command, {"method": result.metadata["method"]})
    outputs = [write_table(out / "curve.csv", header, names, cols), write_json(out / "summary.json", summary)]
    status = EXIT_OK
    if result.partial:
        lines = [f"{i},{result.grid[i]:.12g},{msg}" for i, msg in sorted(result.errors.items())]
        path = out / "errors.txt"
        path.write_text("index,value,error\n" + "\n".join(lines) + "\n")
        outputs.append(path)
        for line in lines:
            print(f"grid point failed: {line}", file=_sys.stderr)
        status = EXIT_PARTIAL
    if args.plot:
        from .plotting import plot_sweep

        outputs.append(plot_sweep(result, summary, out / "curve.svg"))
    return outputs, status


def cmd_sweep_width(cfg, out, args):
    return _sweep(cfg, out, args, run_width_sweep, "sweep-width")


def cmd_sweep_aniso(cfg, out, args):
    return _sweep(cfg, out, args, run_anisotropy_sweep, "sweep-aniso")


def _mi_times(cfg):
    dt, T = cfg.simulation.dt, cfg.cost.T
    times = cfg.mi.times if cfg.mi.times is not None else np.linspace(T / 10, T, 10)
    steps = np.rint(np.asarray(times, dtype=float) / dt).astype(int)
    if np.any(steps < 1) or np.any(np.abs(steps * dt - np.asarray(times)) > 1e-9 * max(1.0, T)):
        raise ConfigError("mi.times must be positive multiples of simulation.dt")
    return steps * dt


def cmd_mi(cfg, out, args):
    m = _Model(cfg)
    method = args.method or cfg.simulation.method
    sim = cfg.simulation
    prior = PriorSpec(np.zeros(m.sys.dim_x), m.Sigma0)
    if cfg.mi.mode == "time":
        times = _mi_times(cfg)
        codec = m.codec(cfg)
        T = float(times.max())
        prior_path = prior_covariance(m.sys, prior, sim.dt, T).covs
        steps = np.rint(times / sim.dt).astype(int)
        if method == "mc":
            est = mi_poisson_path(m.sys, codec, prior, times, sim.n_samples, cfg.seed, sim.dt, args.threads)
            mi, se = np.array([e.value for e in est]), np.array([e.stderr for e in est])
        else:
            mf = meanfield_expected_covariance(m.Sigma0, codec, m.sys, sim.dt, T).covs
            mi = np.array([0.5 * (_logdet(prior_path[k]) - _logdet(mf[k])) for k in steps])
            se = np.zeros_like(mi)
        obs = kalman_observation(cfg, codec, m.sys)
        K = propagate_kalman_covariance(m.sys, obs, m.Sigma0, sim.dt, T).covs
        kal = np.array([0.5 * (_logdet(prior_path[k]) - _logdet(K[k])) for k in steps])
        names, cols, xname = ["t", "mi", "mi_se", "mi_kalman"], [times, mi, se, kal], "t"
    else:
        grid = parameter_grid(cfg)
        T = cfg.cost.T
        prior_T = _logdet(prior_covariance(m.sys, prior, sim.dt, T).final)
        n = int(round(T / sim.dt))
        mi, se, kal = [], [], []
        for i, v in enumerate(grid):
            codec = m.codec(cfg, float(v))
            if method == "mc":
                key = (_MI_STREAM,) if sim.common_random_numbers else (_MI_STREAM, i + 1)
                res = simulate_covariance_ensemble(
                    m.Sigma0, codec, m.sys, sim.dt, n, sim.n_samples, cfg.seed,
                    record_mean=False, threads=args.threads, key=key,
                )
                e = poisson_mi_from_samples(res)
                mi.append(e.value)
                se.append(e.stderr)
            else:
                mf = meanfield_expected_covariance(m.Sigma0, codec, m.sys, sim.dt, T).final
                mi.append(0.5 * (prior_T - _logdet(mf)))
                se.append(0.0)
            K = propagate_kalman_covariance(m.sys, kalman_observation(cfg, codec, m.sys), m.Sigma0, sim.dt, T).final
            kal.append(0.5 * (prior_T - _logdet(K)))
        xname = "p" if cfg.codec.family == "width" else "zeta"
        names, cols = [xname, "mi", "mi_se", "mi_kalman"], [grid, np.array(mi), np.array(se), np.array(kal)]
    header = manifest_header(cfg, "mi", {"method": method, "mode": cfg.mi.mode})
    outputs = [write_table(out / "mi.csv", header, names, cols)]
    if args.plot:
        from .plotting import plot_lines

        outputs.append(
            plot_lines(cols[0], {"Poisson code": cols[1], "Kalman baseline": cols[3]}, out / "mi.svg", xname, "MI (nats)")
        )
    return outputs, EXIT_OK


COMMANDS = {
    "riccati": cmd_riccati,
    "filter-demo": cmd_filter_demo,
    "sweep-width": cmd_sweep_width,
    "sweep-aniso": cmd_sweep_aniso,
    "mi": cmd_mi,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="codecontrol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file (or a previous result table)")
        p.add_argument("--out", default="results", help="output directory")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--method", choices=("mc", "meanfield"), help="override simulation.method")
        p.add_argument("--plot", action="store_true", help="also write SVG figures")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is None:
        args.threads = default_threads()
    if args.threads < 1:
        print("error: --threads must be at least 1", file=_sys.stderr)
        return EXIT_CONFIG
    started = timestamp()
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            overrides["seed"] = args.seed
        if args.method is not None:
            overrides["simulation.method"] = args.method
        if overrides:
            cfg = cfg.replace(**overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs, status = COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=_sys.stderr)
        return EXIT_NUMERICAL
    write_manifest(out, cfg, args.command, outputs, started, timestamp(), status)
    return status


if __name__ == "__main__":
    raise SystemExit(main())
