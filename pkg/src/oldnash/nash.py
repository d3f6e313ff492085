"""Followers' game: costs, Euler-Lagrange residuals and the Nash equilibrium.

Follower controls are stored as one array ``w`` of shape ``(N, nt, n_faces)``
with ``w[i]`` supported on follower mask ``i``.  With ``L_i`` the map from a
follower control to the terminal state and ``L_i*`` its discrete transpose,
the equilibrium solves ``A w = b`` where::

    (A w)_i = w_i + alpha_i L_i*[rho_i^2 sum_j L_j w_j]
    b_i     = -alpha_i L_i*[rho_i^2 (z^T - u^T)],   z^T = u(T; v, w=0)

``A`` is symmetric in the control inner product only when every ``alpha_i``
and every ``rho_i`` coincide; CG is used then and GMRES otherwise.  Krylov
vectors hold the active degrees of freedom scaled by ``sqrt(dt*hx*hy)`` so
the Euclidean product equals the control product.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import ConvergenceError
from .geometry import inner_product_H, leray_project, norm_H
from .solvers import ControlSet, Trajectory, control_inner, control_norm

__all__ = [
    "CostParams",
    "NashSolution",
    "Beta0Report",
    "TrackingParams",
    "terminal_map",
    "terminal_map_adjoint",
    "cost_J_i",
    "el_gradient",
    "el_residual",
    "apply_A",
    "nash_rhs",
    "solve_nash",
    "nash_inequality_check",
    "beta0_estimate",
    "coercivity_ratios",
    "solve_nash_via_optimality_system",
    "tracking_cost",
    "solve_nash_tracking",
]


@dataclass
class CostParams:
    """Data of the follower costs ``J_i = |w_i|^2/2 + alpha_i/2 |rho_i (u(T) - u^T)|^2``."""

    alphas: np.ndarray
    target: np.ndarray
    weights: list
    follower_masks: list

    def __post_init__(self):
        self.alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        self.target = np.asarray(self.target, dtype=float)
        self.weights = [np.asarray(r, dtype=float) for r in self.weights]
        self.follower_masks = [np.asarray(m, dtype=float) for m in self.follower_masks]
        n = len(self.follower_masks)
        if len(self.alphas) != n or len(self.weights) != n:
            raise ValueError(f"need one alpha and one weight per follower ({n}), "
                             f"got {len(self.alphas)} and {len(self.weights)}")
        if np.any(self.alphas < 0):
            raise ValueError("follower cost weights alpha_i must be nonnegative")
        if any(np.any(r < 0) for r in self.weights):
            raise ValueError("weights rho_i must be nonnegative")

    @property
    def n_followers(self):
        return len(self.follower_masks)

    @property
    def equal_alpha(self):
        return bool(np.all(self.alphas == self.alphas[0])) if self.n_followers else True

    @property
    def symmetric(self):
        """True when ``A`` is self-adjoint: equal alphas and identical weights."""
        return self.equal_alpha and all(np.array_equal(r, self.weights[0]) for r in self.weights)

    def with_target(self, target):
        return CostParams(self.alphas, target, self.weights, self.follower_masks)

    def with_alphas(self, alphas):
        return CostParams(alphas, self.target, self.weights, self.follower_masks)

    def rho_sq(self):
        return np.array([r**2 for r in self.weights])

    def masks(self):
        return np.array(self.follower_masks)


@dataclass
class NashSolution:
    w: np.ndarray
    state: Trajectory
    method: str
    iterations: int
    residual: float
    el_residuals: list
    nash_min_increase: float | None = None
    info: dict = field(default_factory=dict)

    def controls(self, v, leader_mask, cost):
        return ControlSet(v, list(self.w), leader_mask, cost.follower_masks)


@dataclass
class Beta0Report:
    beta0: float
    operator_norm: float
    eigenvalues: list
    coercivity_min: float | None
    iterations: list


# -- linear maps of the game ------------------------------------------------

def terminal_map(model, w):
    """``sum_j L_j w_j``: terminal state driven by the follower controls alone."""
    states, _, _ = model.march(forcing=np.sum(w, axis=0))
    return states[-1]


def terminal_map_adjoint(model, terminals, masks):
    """``L_i* g_i`` for a batch of terminals ``(N, n_faces)``; returns ``(N, nt, n_faces)``."""
    phi, _, _ = model.march_backward(terminals)
    return np.moveaxis(phi[:-1], 1, 0) * masks[:, None, :]


def _as_w(w, cost, nt, nf):
    w = np.asarray(w, dtype=float)
    if w.shape != (cost.n_followers, nt, nf):
        raise ValueError(f"follower controls must have shape {(cost.n_followers, nt, nf)}, got {w.shape}")
    return w


def _leader_terminal(model, v):
    if v is None:
        return np.zeros(model.grid.n_faces)
    states, _, _ = model.march(forcing=v)
    return states[-1]


def apply_A(model, w, cost):
    """``(A w)_i = w_i + alpha_i L_i*[rho_i^2 sum_j L_j w_j]``."""
    grid = model.grid
    w = _as_w(w, cost, model.nt, grid.n_faces) * cost.masks()[:, None, :]
    if cost.n_followers == 0 or not np.any(cost.alphas):
        return w.copy()
    y = terminal_map(model, w)
    back = terminal_map_adjoint(model, cost.rho_sq() * y, cost.masks())
    return w + cost.alphas[:, None, None] * back


def nash_rhs(model, v, cost):
    """Right-hand side ``b`` of ``A w = b`` for leader control ``v``.

    ``b_i = -alpha_i L_i*[rho_i^2 (z^T - u^T)]`` with ``z^T`` the terminal
    state of the leader control alone.
    """
    grid = model.grid
    if cost.n_followers == 0:
        return np.zeros((0, model.nt, grid.n_faces))
    eta = _leader_terminal(model, v) - cost.target
    if not np.any(cost.alphas) or not np.any(eta):
        return np.zeros((cost.n_followers, model.nt, grid.n_faces))
    back = terminal_map_adjoint(model, cost.rho_sq() * eta, cost.masks())
    return -cost.alphas[:, None, None] * back


# -- costs and stationarity ---------------------------------------------------

def _w_of(controls):
    return np.array(controls.w) if controls.w else np.zeros((0,) + controls.v.shape)


def cost_J_i(model, i, controls, cost, state_T):
    grid = model.grid
    wi = controls.w[i]
    miss = cost.weights[i] * (np.asarray(state_T) - cost.target)
    return 0.5 * control_inner(grid, wi, wi) + 0.5 * cost.alphas[i] * float(inner_product_H(grid, miss, miss))


def el_gradient(model, i, controls, cost, state_T=None):
    """Gradient of ``J_i`` in ``w_i``: ``w_i + alpha_i chi_i psi_i``.

    ``psi_i`` is the backward solve from ``rho_i^2 (u(T) - u^T)``.
    """
    if state_T is None:
        state_T = model.march(forcing=controls.forcing())[0][-1]
    wi = controls.w[i]
    if cost.alphas[i] == 0.0:
        return wi.copy()
    terminal = cost.weights[i] ** 2 * (np.asarray(state_T) - cost.target)
    psi, _, _ = model.march_backward(terminal)
    return wi + cost.alphas[i] * cost.follower_masks[i] * psi[:-1]


def el_residual(model, i, controls, cost, state_T=None):
    return control_norm(model.grid, el_gradient(model, i, controls, cost, state_T))


# -- Krylov plumbing ----------------------------------------------------------

class _Packer:
    """Maps ``(N, nt, n_faces)`` follower arrays to scaled active-DOF vectors."""

    def __init__(self, model, cost):
        self.shape = (cost.n_followers, model.nt, model.grid.n_faces)
        self.active = np.broadcast_to(cost.masks()[:, None, :] > 0, self.shape)
        self.scale = np.sqrt(model.grid.dt * model.grid.volume)
        self.size = int(np.count_nonzero(self.active))

    def pack(self, w):
        return self.scale * np.asarray(w)[self.active]

    def unpack(self, x):
        w = np.zeros(self.shape)
        w[self.active] = np.asarray(x) / self.scale
        return w


def _krylov(op, b, x0, symmetric, rtol, maxiter):
    iters = [0]

    def count(_):
        iters[0] += 1

    if symmetric:
        x, info = spla.cg(op, b, x0=x0, rtol=rtol, atol=0.0, maxiter=maxiter, callback=count)
    else:
        n = len(b)
        x, info = spla.gmres(op, b, x0=x0, rtol=rtol, atol=0.0, restart=min(n, 100),
                             maxiter=maxiter, callback=count, callback_type="pr_norm")
    return x, info, iters[0]


def solve_nash(model, v, cost, x0=None, tol=1e-10, maxiter=500, verify=True, seed=0):
    """Nash equilibrium of the followers for leader control ``v``.

    Solves ``A w = b`` to relative residual ``tol``.  With ``verify`` the
    Euler-Lagrange residuals are recomputed from fresh solves and the Nash
    inequality is spot-checked on 20 perturbations per follower.
    """
    grid = model.grid
    nt, nf = model.nt, grid.n_faces
    v = np.zeros((nt, nf)) if v is None else np.asarray(v, dtype=float)
    if cost.n_followers == 0:
        states, p, z = model.march(forcing=v)
        return NashSolution(np.zeros((0, nt, nf)), Trajectory(states, "state", pressure=p, memory=z),
                            "none", 0, 0.0, [])
    packer = _Packer(model, cost)
    b = packer.pack(nash_rhs(model, v, cost))
    bnorm = float(np.linalg.norm(b))
    op = spla.LinearOperator((packer.size, packer.size), dtype=float,
                             matvec=lambda x: packer.pack(apply_A(model, packer.unpack(x), cost)))
    method = "cg" if cost.symmetric else "gmres"
    total = 0
    if bnorm == 0.0 and x0 is None:
        x = np.zeros(packer.size)
        rel = 0.0
    else:
        x = None if x0 is None else packer.pack(np.asarray(x0) * cost.masks()[:, None, :])
        ref = bnorm if bnorm > 0 else 1.0
        for _ in range(3):
            x, info, its = _krylov(op, b, x, cost.symmetric, tol, maxiter)
            total += its
            rel = float(np.linalg.norm(op.matvec(x) - b)) / ref
            if rel <= tol:
                break
        else:
            beta = beta0_estimate(model, cost, n_samples=0).beta0
            raise ConvergenceError(
                f"Nash solve stagnated at relative residual {rel:.3e} after {total} {method} "
                f"iterations (beta0 estimate {beta:.3e})")
    w = packer.unpack(x)
    states, p, z = model.march(forcing=v + np.sum(w, axis=0))
    state = Trajectory(states, kind="state", pressure=p, memory=z,
                       meta={"system": "state", "params": model.param_hash})
    sol = NashSolution(w, state, method, total, rel, [])
    if verify:
        controls = ControlSet(v, list(w), np.ones(nf), cost.follower_masks)
        sol.el_residuals = [el_residual(model, i, controls, cost, states[-1])
                            for i in range(cost.n_followers)]
        scale = max(1.0, control_norm(grid, nash_rhs(model, v, cost)))
        if max(sol.el_residuals) > 1e-8 * scale:
            raise ConvergenceError(f"Euler-Lagrange residual {max(sol.el_residuals):.3e} above 1e-8")
        sol.nash_min_increase = nash_inequality_check(model, v, w, cost, seed=seed)
    return sol


def nash_inequality_check(model, v, w, cost, n_samples=20, seed=0):
    """Smallest ``J_i(w + s d e_i) - J_i(w)`` over sampled unilateral deviations.

    Magnitudes ``s`` are log-spaced over ``[1e-3, 1] * |w|``.
    """
    grid = model.grid
    rng = np.random.default_rng(seed)
    base_T = model.march(forcing=v + np.sum(w, axis=0))[0][-1]
    base = ControlSet(v, list(w), np.ones(grid.n_faces), cost.follower_masks)
    wnorm = control_norm(grid, np.asarray(w)) or 1.0
    mags = np.logspace(-3, 0, n_samples) * wnorm
    worst = np.inf
    for i in range(cost.n_followers):
        j0 = cost_J_i(model, i, base, cost, base_T)
        d = rng.standard_normal((n_samples, model.nt, grid.n_faces)) * cost.follower_masks[i]
        norms = np.array([control_norm(grid, dk) for dk in d])
        d = d * (mags / norms)[:, None, None]
        # one batched solve for all deviations of follower i
        resp = model.march(forcing=np.moveaxis(d, 0, 1))[0][-1]
        for k in range(n_samples):
            wk = np.array(w, copy=True)
            wk[i] = wk[i] + d[k]
            trial = ControlSet(v, list(wk), np.ones(grid.n_faces), cost.follower_masks)
            worst = min(worst, cost_J_i(model, i, trial, cost, base_T + resp[k]) - j0)
    return float(worst)


# -- smallness and coercivity --------------------------------------------------

def _power_iteration(apply, start, grid, tol, max_iter):
    x = start / norm_H(grid, start)[..., None]
    lam = np.zeros(x.shape[:-1])
    for it in range(1, max_iter + 1):
        y = apply(x)
        new = inner_product_H(grid, x, y)
        n = norm_H(grid, y)
        if np.all(n == 0):
            return np.zeros_like(lam), it
        x = y / np.where(n > 0, n, 1.0)[..., None]
        if it > 1 and np.all(np.abs(new - lam) <= tol * np.maximum(np.abs(new), 1e-300)):
            return new, it
        lam = new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def follower_gramians(model, g, masks):
    """``L_i L_i* g_i`` for a batch of terminals ``(N, n_faces)``."""
    back = terminal_map_adjoint(model, g, masks)
    states, _, _ = model.march(forcing=np.moveaxis(back, 0, 1))
    return states[-1]


def follower_operator_norms_sq(model, masks, tol=1e-6, max_iter=500, seed=0):
    """``||L_i||^2`` (largest eigenvalue of ``L_i L_i*``) for every follower mask."""
    grid = model.grid
    masks = np.asarray(masks, dtype=float)
    if len(masks) == 0:
        return np.zeros(0), 0
    rng = np.random.default_rng(seed)
    start = leray_project(grid, rng.standard_normal((len(masks), grid.n_faces)))
    lam, its = _power_iteration(lambda x: follower_gramians(model, x, masks), start, grid, tol, max_iter)
    return np.asarray(lam), its


def coercivity_ratios(model, cost, n_samples=50, seed=0):
    """``(A w, w) / |w|^2`` for random follower controls."""
    grid = model.grid
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        w = rng.standard_normal((cost.n_followers, model.nt, grid.n_faces)) * cost.masks()[:, None, :]
        out.append(control_inner(grid, apply_A(model, w, cost), w) / control_inner(grid, w, w))
    return np.array(out)


def beta0_estimate(model, cost, n_samples=50, seed=0, tol=1e-6):
    """Smallness constant ``C0^2 alpha max|rho_i - rho_j| max|rho_i|`` of the game.

    ``C0`` is the largest follower operator norm, from power iteration on
    ``L_i L_i*``.  With ``n_samples > 0`` the empirical coercivity minimum
    over random controls is reported as well.
    """
    if not cost.equal_alpha:
        warnings.warn("beta0 assumes equal alphas; using the largest", stacklevel=2)
    if cost.n_followers == 0 or not np.any(cost.alphas):
        return Beta0Report(0.0, 0.0, [0.0] * cost.n_followers,
                           1.0 if n_samples and cost.n_followers else None, [0])
    lam, its = follower_operator_norms_sq(model, cost.masks(), tol=tol, seed=seed)
    c0_sq = float(np.max(lam))
    rho = cost.weights
    spread = max(float(np.max(np.abs(a - b))) for a in rho for b in rho)
    beta0 = c0_sq * float(np.max(cost.alphas)) * spread * max(float(np.max(r)) for r in rho)
    coer = float(np.min(coercivity_ratios(model, cost, n_samples, seed))) if n_samples else None
    return Beta0Report(beta0, float(np.sqrt(c0_sq)), [float(x) for x in lam], coer, [its])


# -- optimality-system route ---------------------------------------------------

def _fixed_point(step, w0, grid, tol, max_iter, what):
    w = w0
    omega = 1.0
    hist = []
    for it in range(1, max_iter + 1):
        new, extra = step(w)
        diff = control_norm(grid, new - w)
        scale = max(control_norm(grid, new), 1e-300)
        hist.append(diff)
        if diff <= tol * scale or not np.any(new):
            return new, extra, it, omega, hist
        if len(hist) >= 3 and hist[-1] > hist[-2]:
            if omega == 1.0:
                omega = 0.5
            elif hist[-1] > hist[-2] > hist[-3]:
                raise ConvergenceError(f"{what}: fixed-point iteration diverges "
                                       f"(updates {hist[-3]:.3e} -> {hist[-1]:.3e}); use the operator route")
        w = w + omega * (new - w)
    raise ConvergenceError(f"{what}: no convergence in {max_iter} fixed-point iterations; "
                           "use the operator route")


def solve_nash_via_optimality_system(model, v, cost, tol=1e-13, max_iter=200):
    """Equilibrium from the coupled forward-backward system with ``w_i = -alpha_i chi_i psi_i``."""
    grid = model.grid
    nt, nf = model.nt, grid.n_faces
    v = np.zeros((nt, nf)) if v is None else np.asarray(v, dtype=float)
    masks, rho2 = cost.masks(), cost.rho_sq()
    n = cost.n_followers

    def step(w):
        states, p, z = model.march(forcing=v + np.sum(w, axis=0))
        psi, _, _ = model.march_backward(rho2 * (states[-1] - cost.target))
        new = -cost.alphas[:, None, None] * np.moveaxis(psi[:-1], 1, 0) * masks[:, None, :]
        return new, (states, p, z, psi)

    w0 = np.zeros((n, nt, nf))
    w, (states, p, z, psi), its, omega, hist = _fixed_point(step, w0, grid, tol, max_iter,
                                                            "optimality system")
    # state consistent with the returned controls
    states, p, z = model.march(forcing=v + np.sum(w, axis=0))
    state = Trajectory(states, kind="state", pressure=p, memory=z,
                       meta={"system": "state", "params": model.param_hash})
    controls = ControlSet(v, list(w), np.ones(nf), cost.follower_masks)
    el = [el_residual(model, i, controls, cost, states[-1]) for i in range(n)]
    return NashSolution(w, state, "optimality_system", its, hist[-1] if hist else 0.0, el,
                        info={"damping": omega, "updates": hist,
                              "psi": [psi[:, i].copy() for i in range(n)]})


# -- tracking-cost followers ---------------------------------------------------

@dataclass
class TrackingParams:
    """Followers minimising ``alpha_i/2 |chi_d,i (u - u_d,i)|^2 + mu_i/2 |v_i|^2`` over space-time.

    ``control_masks[i]`` is the action region of follower ``i``,
    ``observation_masks[i]`` its observation region and ``desired[i]`` a
    trajectory ``(nt+1, n_faces)`` or ``None`` for zero.  The time integral
    uses the step endpoints ``1..nt``, matching the forcing-slot pairing.
    """

    alphas: np.ndarray
    mus: np.ndarray
    control_masks: list
    observation_masks: list
    desired: list

    def __post_init__(self):
        self.alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        self.mus = np.atleast_1d(np.asarray(self.mus, dtype=float))
        n = len(self.control_masks)
        if not (len(self.alphas) == len(self.mus) == len(self.observation_masks) == len(self.desired) == n):
            raise ValueError("tracking data must have one entry per follower")
        if np.any(self.alphas < 0) or np.any(self.mus <= 0):
            raise ValueError("tracking needs alpha_i >= 0 and mu_i > 0")

    @property
    def n_followers(self):
        return len(self.control_masks)


def _desired(tracking, i, shape):
    d = tracking.desired[i]
    return np.zeros(shape) if d is None else np.asarray(d, dtype=float)


def tracking_cost(model, i, v_i, states, tracking):
    grid = model.grid
    miss = tracking.observation_masks[i] * (states[1:] - _desired(tracking, i, states.shape)[1:])
    return (0.5 * tracking.alphas[i] * control_inner(grid, miss, miss)
            + 0.5 * tracking.mus[i] * control_inner(grid, v_i, v_i))


def _tracking_adjoints(model, states, tracking):
    n = tracking.n_followers
    obs = np.array(tracking.observation_masks)
    des = np.array([_desired(tracking, i, states.shape) for i in range(n)])
    forcing = tracking.alphas[:, None, None] * obs[:, None, :] * (states[None, 1:] - des[:, 1:])
    q, _, _ = model.march_backward(np.zeros((n, model.grid.n_faces)), np.moveaxis(forcing, 0, 1))
    return np.moveaxis(q, 1, 0)


def solve_nash_tracking(model, v, tracking, tol=1e-13, max_iter=200):
    """Followers with tracking costs: ``v_i = -(1/mu_i) chi_i q_i`` with ``q_i`` backward from 0."""
    grid = model.grid
    nt, nf = model.nt, grid.n_faces
    v = np.zeros((nt, nf)) if v is None else np.asarray(v, dtype=float)
    n = tracking.n_followers
    cmask = np.array(tracking.control_masks)

    def step(w):
        states, p, z = model.march(forcing=v + np.sum(w, axis=0))
        q = _tracking_adjoints(model, states, tracking)
        new = -(1.0 / tracking.mus)[:, None, None] * q[:, :-1] * cmask[:, None, :]
        return new, q

    w, q, its, omega, hist = _fixed_point(step, np.zeros((n, nt, nf)), grid, tol, max_iter,
                                          "tracking optimality system")
    states, p, z = model.march(forcing=v + np.sum(w, axis=0))
    q = _tracking_adjoints(model, states, tracking)
    el = [control_norm(grid, tracking.mus[i] * w[i] + cmask[i] * q[i, :-1]) for i in range(n)]
    if el and max(el) > 1e-8 * max(1.0, max(control_norm(grid, cmask[i] * q[i, :-1]) for i in range(n))):
        raise ConvergenceError(f"tracking Euler-Lagrange residual {max(el):.3e} above 1e-8")
    state = Trajectory(states, kind="state", pressure=p, memory=z,
                       meta={"system": "state", "params": model.param_hash})
    return NashSolution(w, state, "tracking", its, hist[-1] if hist else 0.0, el,
                        info={"damping": omega, "updates": hist, "q": q})
