"""Vector figures of result tables; reproducible byte for byte."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG_META = {"Date": None, "Creator": "codecontrol"}


def _save(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "codecontrol", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _normalized(y):
    y = np.asarray(y, dtype=float)
    lo, hi = np.nanmin(y), np.nanmax(y)
    return (y - lo) / (hi - lo) if hi > lo else np.zeros_like(y)


def plot_sweep(result, summary, path):
    """Estimation and control curves (each rescaled to [0, 1]) over the encoder grid."""
    grid = result.grid
    cols = result.columns
    panels = 2 if "lqg_f" in cols else 1
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 3.6), squeeze=False)
    ax = axes[0, 0]
    ax.plot(grid, _normalized(cols["mmse"]), "o-", ms=3, label="MMSE")
    ax.plot(grid, _normalized(cols["f"]), "s-", ms=3, label="f")
    ax.plot(grid, 1 - _normalized(cols["mi"]), "^--", ms=3, label="1 - MI (scaled)")
    for key, style in (("argmin_mmse_value", "C0"), ("argmin_f_value", "C1")):
        if summary.get(key) is not None:
            ax.axvline(summary[key], color=style, lw=0.8, ls=":")
    label = "tuning width p" if result.parameter == "p" else "anisotropy angle zeta"
    ax.set_xlabel(label)
    ax.set_ylabel("rescaled value")
    if result.parameter == "p":
        ax.set_xscale("log")
    ax.set_title("Gauss-Poisson code")
    ax.legend(frameon=False, fontsize=8)
    if panels == 2:
        ax = axes[0, 1]
        ax.plot(grid, _normalized(cols["kalman_mmse"]), "o-", ms=3, label="Kalman MMSE")
        ax.plot(grid, _normalized(cols["lqg_f"]), "s-", ms=3, label="LQG f")
        ax.set_xlabel(label)
        ax.set_title("Gaussian diffusion baseline")
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_lines(x, series, path, xlabel, ylabel, title=""):
    """Simple line plot of named series against ``x``."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, y in series.items():
        ax.plot(x, y, lw=1, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
