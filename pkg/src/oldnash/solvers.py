"""Time integrators for the state, sensitivity, adjoint and leader-adjoint systems.

Discretisation (shared by every solver)
---------------------------------------
Forward step ``n = 1..nt`` (implicit Euler)::

    (u^n - u^{n-1})/dt - mu Lap u^n - z^n + grad p^n = F^{n-1},  div u^n = 0
    z^n = sum_{m=1..n} K[n-m] Lap u^m

with ``K`` from :func:`oldnash.memory.lag_weights`.  ``K[0]`` is folded into
the step matrix; the rest is explicit history.  Forcing slot ``k`` acts on the
step that produces ``u^{k+1}``.

Backward solves are the exact discrete transpose of this map.  Reversing
time turns them into the same forward stepper, started from the projected
terminal datum (which, like every initial snapshot, stays out of the memory
history).  A backward trajectory ``phi`` is stored in natural time order with
``phi[nt]`` the projected terminal datum, and ``phi[k]`` pairs with forcing
slot ``k``::

    sum_k dt (F_k, phi[k])_H = (u^nt, g)_H + sum_k dt (u^{k+1}, G_k)_H

for ``u`` driven by ``F`` from rest and ``phi`` driven by terminal ``g`` and
backward forcing ``G``.
"""

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import SmallnessViolation, SolverError
from .geometry import inner_product_H, leray_project, norm_H
from .memory import MemoryState, SCHEMES, advance_memory_ode, convolve_history, lag_weights, ode_coefficients
from .stokes import assemble


class Model:
    """Grid, kernel parameters and memory scheme, with the cached step factorisation."""

    def __init__(self, grid, params, scheme="ode"):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown memory scheme {scheme!r}")
        self.grid, self.params, self.scheme = grid, params, scheme
        self.dt = grid.dt
        self.nt = grid.nt
        self.lag = lag_weights(params, grid.dt, grid.nt, scheme)
        self.mu_eff = params.mu + self.lag[0]

    def __repr__(self):
        return f"Model({self.grid!r}, scheme={self.scheme!r})"

    @cached_property
    def fact(self):
        return assemble(self.grid, self.dt, self.mu_eff)

    @cached_property
    def param_hash(self):
        blob = json.dumps({"grid": list(self.grid.spec.__dict__.values()),
                           "kernel": self.params.as_dict(), "scheme": self.scheme}, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:12]

    def with_scheme(self, scheme):
        return Model(self.grid, self.params, scheme)

    def with_gamma(self, gamma):
        return Model(self.grid, self.params.with_gamma(gamma), self.scheme)

    # -- core stepper ---------------------------------------------------
    def march(self, initial=None, forcing=None, batch=(), pressure=False):
        """Integrate from ``initial`` with ``forcing[k]`` on step ``k+1``.

        Returns ``(states, final_pressure, final_memory)`` with ``states`` of
        shape ``(nt+1, *batch, n_faces)``; the pressure is ``None`` unless
        requested.
        """
        grid, params, dt = self.grid, self.params, self.dt
        if forcing is not None:
            forcing = np.asarray(forcing, dtype=float)
            batch = forcing.shape[1:-1]
        if initial is not None:
            initial = np.asarray(initial, dtype=float)
            batch = initial.shape[:-1] if forcing is None else batch
        shape = tuple(batch) + (grid.n_faces,)
        states = np.zeros((self.nt + 1,) + shape)
        if initial is not None:
            states[0] = initial
        laps = np.zeros_like(states)
        z = MemoryState.zeros(shape)
        lap = grid.lap_matrix
        if self.scheme == "ode":
            decay, gain = ode_coefficients(params, dt)
        for n in range(1, self.nt + 1):
            if self.scheme == "ode":
                memory = decay * z.z + 0.5 * gain * laps[n - 1]
            else:
                memory = convolve_history(laps, params, n, dt)
            rhs = states[n - 1] / dt + memory
            if forcing is not None:
                rhs = rhs + forcing[n - 1]
            u = self.fact.solve_velocity(rhs)
            states[n] = u
            laps[n] = (lap @ u.reshape(-1, grid.n_faces).T).T.reshape(shape)
            if self.scheme == "ode":
                z = advance_memory_ode(z, 0.5 * (laps[n - 1] + laps[n]), params, dt)
        if not np.all(np.isfinite(states)):
            bad = int(np.argmax(~np.all(np.isfinite(states.reshape(self.nt + 1, -1)), axis=1)))
            raise SolverError(f"non-finite state at time step {bad}")
        if self.scheme == "trapezoid":
            z = MemoryState(convolve_history(laps, params, self.nt, dt))
        # only the final pressure is kept; recover it from the full saddle solve
        p = self.fact.solve(rhs)[1] if pressure else None
        return states, p, z

    def march_backward(self, terminal, forcing=None, pressure=False):
        """Transpose solve; returns states in natural time order."""
        g = leray_project(self.grid, terminal)
        rev = None if forcing is None else np.asarray(forcing, dtype=float)[::-1]
        states, p, z = self.march(initial=g, forcing=rev, batch=g.shape[:-1], pressure=pressure)
        return states[::-1].copy(), p, z

    def memory_terms(self, states):
        """``z^n = sum_{m=1..n} K[n-m] Lap u^m`` for a stored trajectory."""
        grid = self.grid
        laps = (grid.lap_matrix @ states.reshape(-1, grid.n_faces).T).T.reshape(states.shape)
        laps[0] = 0.0
        z = np.zeros_like(states)
        for n in range(1, len(states)):
            z[n] = np.einsum("m,m...->...", self.lag[n - np.arange(1, n + 1)], laps[1:n + 1])
        return z


@dataclass
class Trajectory:
    """Snapshots ``states[0..nt]`` of one solve, in natural time order."""

    states: np.ndarray
    kind: str
    direction: str = "forward"
    pressure: np.ndarray | None = None
    memory: MemoryState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.states[-1]

    @property
    def initial(self):
        return self.states[0]

    def control_slots(self):
        """Snapshots paired with forcing slots ``0..nt-1`` (backward solves)."""
        return self.states[:-1]


@dataclass
class ControlSet:
    """Leader control ``v`` on the leader mask and follower controls ``w[i]``.

    Arrays have shape ``(nt, n_faces)``; construction restricts them to
    their masks.
    """

    v: np.ndarray
    w: list
    leader_mask: np.ndarray
    follower_masks: list

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float) * self.leader_mask
        if len(self.w) != len(self.follower_masks):
            raise ValueError("one follower control per follower mask is required")
        self.w = [np.asarray(wi, dtype=float) * m for wi, m in zip(self.w, self.follower_masks)]

    @classmethod
    def zeros(cls, grid, leader_mask, follower_masks):
        shape = (grid.nt, grid.n_faces)
        return cls(np.zeros(shape), [np.zeros(shape) for _ in follower_masks], leader_mask, follower_masks)

    def forcing(self):
        total = self.v.copy()
        for wi in self.w:
            total += wi
        return total

    def with_followers(self, w):
        return ControlSet(self.v, list(w), self.leader_mask, self.follower_masks)


def control_inner(grid, a, b):
    """``L^2`` product over space-time control arrays of shape ``(nt, n_faces)``."""
    return grid.dt * float(np.sum(inner_product_H(grid, a, b)))


def control_norm(grid, a):
    return np.sqrt(max(control_inner(grid, a, a), 0.0))


def solve_forward(model, controls, initial=None):
    states, p, z = model.march(initial=initial, forcing=controls.forcing(), pressure=True)
    return Trajectory(states, kind="state", pressure=p, memory=z,
                      meta={"system": "state", "params": model.param_hash})


def solve_follower_sensitivity(model, i, w_hat, follower_masks):
    """Sensitivity of follower ``i``: forced only by ``w_hat * chi_i``.

    The pressure is stored in the ``(1/N) grad p`` scaling of the
    sensitivity equation; the velocity is unaffected by that gauge.
    """
    n = len(follower_masks)
    states, p, z = model.march(forcing=np.asarray(w_hat, dtype=float) * follower_masks[i], pressure=True)
    return Trajectory(states, kind=f"sensitivity[{i}]", pressure=n * p, memory=z,
                      meta={"system": "sensitivity", "follower": i, "params": model.param_hash})


def solve_follower_adjoint(model, terminal, forcing=None):
    states, p, z = model.march_backward(terminal, forcing, pressure=True)
    return Trajectory(states, kind="adjoint", direction="backward", pressure=p, memory=z,
                      meta={"system": "adjoint", "params": model.param_hash})


@dataclass
class PairInfo:
    iterations: int
    damping: float
    updates: list


def solve_leader_adjoint_pair(model, f, alphas, weights, follower_masks,
                              tol=1e-10, max_iter=200):
    """Coupled leader adjoint ``phi`` (backward) and follower responses ``xi_i``.

    ``phi(T) = f + sum_i rho_i^2 xi_i(T)``; ``xi_i`` is driven by
    ``-alpha_i phi chi_i`` from rest.  Solved by fixed-point iteration on the
    terminal coupling, undamped first and with damping 0.5 if the update
    norms stop shrinking.
    """
    grid = model.grid
    f = grid.check_faces(f, "f")
    alphas = np.asarray(alphas, dtype=float)
    nf = len(follower_masks)
    rho2 = np.array([w**2 for w in weights]) if nf else np.zeros((0, grid.n_faces))
    masks = np.array(follower_masks) if nf else np.zeros((0, grid.n_faces))
    fnorm = float(norm_H(grid, f))

    coupling = np.zeros(grid.n_faces)
    omega = 1.0
    updates = []
    xi = np.zeros((model.nt + 1, nf, grid.n_faces))
    for it in range(1, max_iter + 1):
        phi, _, _ = model.march_backward(f + coupling)
        if nf == 0 or not np.any(alphas):
            xi = np.zeros((model.nt + 1, nf, grid.n_faces))
            updates.append(0.0)
            break
        drive = -(alphas[:, None] * masks)[None] * phi[:-1, None, :]
        xi, _, _ = model.march(forcing=drive)
        new = np.sum(rho2 * xi[-1], axis=0)
        step = new - coupling
        upd = float(norm_H(grid, step))
        updates.append(upd)
        if upd <= tol * fnorm or fnorm == 0.0:
            coupling = new
            phi, _, _ = model.march_backward(f + coupling)
            break
        if len(updates) >= 3 and updates[-1] > updates[-2]:
            if omega == 1.0:
                omega = 0.5
            elif updates[-1] > updates[-2] > updates[-3]:
                raise SmallnessViolation(
                    "smallness condition violated: terminal coupling iteration diverges "
                    f"(update norms {updates[-3]:.3e} -> {updates[-1]:.3e})")
        coupling = coupling + omega * step
    else:
        raise SmallnessViolation(
            f"smallness condition violated: no convergence in {max_iter} iterations "
            f"(last update {updates[-1]:.3e})")
    phi_traj = Trajectory(phi, kind="leader_adjoint", direction="backward",
                          meta={"system": "leader_adjoint", "params": model.param_hash})
    xi_trajs = [Trajectory(xi[:, i].copy(), kind=f"xi[{i}]",
                           meta={"system": "follower_response", "follower": i, "params": model.param_hash})
                for i in range(nf)]
    return phi_traj, xi_trajs, PairInfo(len(updates), omega, updates)
