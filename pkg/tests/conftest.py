import numpy as np
import pytest

from codecontrol.config import preset
from codecontrol.sweep import build_codec, build_cost, build_system, initial_covariance


def random_spd(rng, d, floor=0.1):
    M = rng.standard_normal((d, d))
    return M @ M.T + floor * np.eye(d)


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)


class PresetModel:
    def __init__(self, name, **overrides):
        self.cfg = preset(name, **overrides)
        self.sys = build_system(self.cfg)
        self.cost = build_cost(self.cfg)
        self.Sigma0 = initial_covariance(self.cfg, self.sys)
        self.dt = self.cfg.simulation.dt

    def codec(self, value=None):
        if value is None:
            value = self.cfg.codec.p if self.cfg.codec.family == "width" else self.cfg.codec.zeta
        return build_codec(self.cfg, value, self.sys, self.Sigma0)


@pytest.fixture
def fig1a():
    return PresetModel("fig1a")


@pytest.fixture
def fig1b():
    return PresetModel("fig1b")


# Outcome of each acceptance criterion, reported once at the end of the session.
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
