"""Assemble grid, model, masks, weights and follower costs from a configuration."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import build_grid, indicator, leray_project, make_weight, norm_H
from .leader import LeaderProblem
from .memory import kernel_params
from .nash import CostParams, TrackingParams
from .solvers import Model
from .stokes import assemble

PURPOSES = ("target", "leader_control", "identity", "nash", "coercivity", "energy",
            "smallness", "fubini", "gramian", "vi", "memory")


def seed_for(seed, purpose):
    """Independent, reproducible integer seed per use of randomness."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES.index(purpose),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def smooth_field(grid, field, tau, steps=4):
    """Run memory-free Stokes flow with unit viscosity for time ``tau`` (implicit steps)."""
    out = leray_project(grid, field)
    if tau <= 0:
        return out
    dt = tau / steps
    fact = assemble(grid, dt, 1.0)
    for _ in range(steps):
        out = fact.solve_velocity(out / dt)
    return out


def make_target(kind, model, leader_mask, norm=1.0, smoothing=0.2, seed=0):
    """``zero``, ``reachable`` (terminal state of a random leader control) or ``random`` (smoothed noise)."""
    grid = model.grid
    rng = np.random.default_rng(seed)
    if kind == "zero" or norm == 0:
        return np.zeros(grid.n_faces)
    if kind == "reachable":
        v = rng.standard_normal((grid.nt, grid.n_faces)) * leader_mask
        u = model.march(forcing=v)[0][-1]
    elif kind == "random":
        u = smooth_field(grid, rng.standard_normal(grid.n_faces), smoothing)
    else:
        raise ValueError(f"unknown target kind {kind!r}")
    return u * (norm / norm_H(grid, u))


def random_leader_control(grid, leader_mask, seed):
    return np.random.default_rng(seed).standard_normal((grid.nt, grid.n_faces)) * leader_mask


@dataclass
class Scenario:
    config: object
    grid: object
    model: Model
    leader_mask: np.ndarray
    follower_masks: list
    weights: list
    cost: CostParams
    tracking: TrackingParams | None

    def seed(self, purpose):
        return seed_for(self.config.seed, purpose)

    def leader_problem(self, epsilon=None):
        eps = self.config.epsilon if epsilon is None else epsilon
        return LeaderProblem(self.model, self.leader_mask, self.cost, eps)

    def leader_control(self):
        if self.config.leader_control == "zero":
            return np.zeros((self.grid.nt, self.grid.n_faces))
        return random_leader_control(self.grid, self.leader_mask, self.seed("leader_control"))


def build_scenario(config):
    grid = build_grid(config.grid)
    model = Model(grid, kernel_params(config.nu, config.k, config.lam), config.scheme)
    leader_mask = indicator(config.leader, grid)
    follower_masks = [indicator(r, grid) for r in config.followers]
    for i, m in enumerate([leader_mask] + follower_masks):
        if not np.any(m):
            name = "leader" if i == 0 else f"follower{i}"
            raise ConfigError(f"region {name} contains no velocity faces on this grid", "region")
    weights = [make_weight(c, s, grid) for c, s in zip(config.cores, config.supports)]
    target = make_target(config.target, model, leader_mask, config.target_norm,
                         config.target_smoothing, seed_for(config.seed, "target"))
    cost = CostParams(config.alphas, target, weights, follower_masks)
    tracking = None
    if config.mode == "tracking":
        tracking = TrackingParams(config.alphas, [config.tracking_mu] * len(follower_masks), follower_masks,
                                  [indicator(c, grid) for c in config.cores], [None] * len(follower_masks))
    return Scenario(config, grid, model, leader_mask, follower_masks, weights, cost, tracking)
