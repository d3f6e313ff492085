import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oldnash.geometry import GridSpec, Region, build_grid, indicator, make_weight
from oldnash.memory import kernel_params
from oldnash.nash import CostParams
from oldnash.solvers import Model

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("oldnash", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("oldnash")

LEADER = Region(0.125, 0.375, 0.25, 0.75)
FOLLOWERS = [Region(0.625, 0.875, 0.125, 0.375), Region(0.625, 0.875, 0.625, 0.875)]
CORES = [Region(0.5, 1.0, 0.0, 0.5), Region(0.5, 1.0, 0.5, 1.0)]
SUPPORTS = [Region(0.375, 1.0, 0.0, 0.625), Region(0.375, 1.0, 0.375, 1.0)]


class Setup:
    """Small game on one grid: model, masks, weights and a cost factory."""

    def __init__(self, nx=8, nt=4, scheme="ode", params=(1.0, 0.5, 1.0)):
        self.spec = GridSpec(nx, nx, 1.0, 1.0, nt, 1.0)
        self.grid = build_grid(self.spec)
        self.params = kernel_params(*params)
        self.model = Model(self.grid, self.params, scheme)
        self.leader = indicator(LEADER, self.grid)
        self.followers = [indicator(r, self.grid) for r in FOLLOWERS]
        self.weights = [make_weight(c, s, self.grid) for c, s in zip(CORES, SUPPORTS)]

    def cost(self, alphas=(3.0, 3.0), target=None, weights=None):
        target = np.zeros(self.grid.n_faces) if target is None else target
        return CostParams(list(alphas), target, self.weights if weights is None else weights, self.followers)

    def rng(self, seed=0):
        return np.random.default_rng(seed)

    def leader_control(self, rng, scale=1.0):
        return scale * rng.standard_normal((self.grid.nt, self.grid.n_faces)) * self.leader

    def follower_controls(self, rng):
        return rng.standard_normal((2, self.grid.nt, self.grid.n_faces)) * np.array(self.followers)[:, None, :]

    def oracle(self, scheme=None):
        from dense_oracle import DenseOracle

        s, p = self.spec, self.params
        return DenseOracle(s.nx, s.ny, s.lx, s.ly, s.nt, s.t_final, p.nu, p.k, p.lam,
                           scheme or self.model.scheme)


@pytest.fixture(scope="session")
def small():
    return Setup()


@pytest.fixture(scope="session")
def small_oracle(small):
    return small.oracle()


@pytest.fixture(scope="session")
def default_setup():
    return Setup(nx=16, nt=16)


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
