"""Result files: comma-separated tables with a ``#`` manifest header, JSON records."""

from __future__ import annotations

import datetime as _dt
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONFIG_HEADER_PREFIX

SIGNIFICANT_DIGITS = 12


def format_value(v):
    """12 significant digits for reals, plain text for integers and strings."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if v == 0:
        return "0"
    return f"{v:.{SIGNIFICANT_DIGITS}g}"


def manifest_header(cfg, command, extra=None):
    """Header lines carrying everything needed to rerun the experiment."""
    lines = [
        f"# tool: codecontrol {__version__}",
        f"# command: {command}",
        f"# config_hash: {cfg.config_hash()}",
        f"# seed: {cfg.seed}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"# {key}: {value}")
    lines.append(CONFIG_HEADER_PREFIX + cfg.canonical_json())
    return lines


def write_table(path, header, names, columns):
    """Write aligned ``columns`` (sequence of 1-D arrays) under ``names``."""
    n = {len(c) for c in columns}
    if len(n) > 1:
        raise ValueError("table columns differ in length")
    rows = zip(*columns) if columns else []
    text = "\n".join(header) + "\n" + ",".join(names) + "\n"
    text += "".join(",".join(format_value(v) for v in row) + "\n" for row in rows)
    Path(path).write_text(text)
    return Path(path)


def read_table(path):
    """Parse a table written by :func:`write_table` into (header lines, {name: array})."""
    header, body = [], []
    for line in Path(path).read_text().splitlines():
        (header if line.startswith("#") else body).append(line)
    names = body[0].split(",")
    data = np.array([[float(x) for x in row.split(",")] for row in body[1:]]).reshape(-1, len(names))
    return header, {name: data[:, j] for j, name in enumerate(names)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else float(format_value(v))
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return Path(path)


def timestamp():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, cfg, command, outputs, started, finished, status):
    """Run record with wall-clock times; the only output that differs between reruns."""
    record = {
        "tool": "codecontrol",
        "version": __version__,
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "started": started,
        "finished": finished,
        "exit_status": status,
        "outputs": sorted(Path(p).name for p in outputs),
    }
    return write_json(Path(out_dir) / "manifest.json", record)
