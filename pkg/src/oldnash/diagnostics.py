"""Runtime monitors: discrete energy balance, a-priori smallness bound,
memory-kernel Fubini symmetry and the leader duality identity.

Every check is deterministic for a given seed and returns a plain report
object whose ``ok`` flag is the pass/fail verdict.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import h1_seminorm_sq, inner_product_H, laplacian, leray_project, norm_H
from .memory import eval_kernel
from .nash import _power_iteration, follower_gramians, solve_nash
from .solvers import control_inner, control_norm, solve_leader_adjoint_pair
from .stokes import assemble

__all__ = [
    "EnergyReport",
    "SmallnessReport",
    "IdentityReport",
    "energy_monitor",
    "poincare_constant",
    "appendix_smallness_check",
    "fubini_sums",
    "fubini_check",
    "adjoint_identity_check",
    "gradient_gramian_norms_sq",
    "memory_free_march",
    "memory_scheme_order",
    "memory_free_match",
]


@dataclass
class EnergyReport:
    kinetic: np.ndarray
    h1: np.ndarray
    memory: np.ndarray
    balance_residual: np.ndarray
    max_residual: float
    residual_tol: float
    bound_ratio: float
    monotone: bool

    @property
    def bound_ok(self):
        return self.bound_ratio <= 1.0

    @property
    def balance_ok(self):
        return self.max_residual <= self.residual_tol

    @property
    def ok(self):
        return self.bound_ok and self.balance_ok


def energy_monitor(model, traj, forcing=None):
    """Energy bookkeeping of a trajectory in its integration order.

    Each step satisfies, up to round-off::

        (|u^n|^2 - |u^{n-1}|^2)/(2dt) + |u^n - u^{n-1}|^2/(2dt) + mu ||u^n||^2
            - (z^n, u^n) - (F^{n-1}, u^n) = 0

    with ``z^n`` the discrete memory term.  The growth bound checked is
    ``max_n |u^n|^2 <= exp(T) |u^0|^2``.
    """
    grid, dt = model.grid, model.dt
    states = traj.states if traj.direction == "forward" else traj.states[::-1]
    if forcing is not None:
        forcing = np.asarray(forcing, dtype=float)
        if traj.direction != "forward":
            forcing = forcing[::-1]
    kinetic = inner_product_H(grid, states, states)
    h1 = h1_seminorm_sq(grid, states)
    z = model.memory_terms(states)
    mem = inner_product_H(grid, z, states)
    jumps = states[1:] - states[:-1]
    res = ((kinetic[1:] - kinetic[:-1]) / (2 * dt) + inner_product_H(grid, jumps, jumps) / (2 * dt)
           + model.params.mu * h1[1:] - mem[1:])
    terms = np.abs(kinetic[1:]) / dt + model.params.mu * np.abs(h1[1:]) + np.abs(mem[1:])
    if forcing is not None:
        work = inner_product_H(grid, forcing, states[1:])
        res = res - work
        terms = terms + np.abs(work)
    scale = float(np.max(terms)) if len(terms) else 0.0
    k0 = float(kinetic[0])
    peak = float(np.max(kinetic))
    if k0 > 0:
        ratio = peak / (np.exp(grid.t_final) * k0)
    else:
        ratio = 0.0 if peak == 0 else np.inf
    return EnergyReport(kinetic, h1, mem, res, float(np.max(np.abs(res))) if len(res) else 0.0,
                        10 * dt**2 * scale, float(ratio), bool(np.all(np.diff(kinetic) <= 1e-14 * max(k0, 1e-300))))


# -- a-priori smallness --------------------------------------------------------

def poincare_constant(grid, tol=1e-10, max_iter=2000, seed=0):
    """``c0`` with ``|u|^2 <= c0 ||u||^2`` on discrete divergence-free fields.

    Largest eigenvalue of the steady Stokes solution operator, by power iteration.
    """
    fact = assemble(grid, np.inf, 1.0)
    start = leray_project(grid, np.random.default_rng(seed).standard_normal(grid.n_faces))
    lam, _ = _power_iteration(lambda x: fact.solve_velocity(x), start, grid, tol, max_iter)
    return float(lam)


def gradient_gramian_norms_sq(model, masks, tol=1e-6, max_iter=500, seed=0):
    """``max_g ||L_i L_i* g||^2 / |g|^2`` for each follower, ``||.||`` the H1 seminorm."""
    grid = model.grid
    masks = np.asarray(masks, dtype=float)

    def apply(x):
        y = follower_gramians(model, x, masks)
        return follower_gramians(model, -laplacian(grid, y), masks)

    start = leray_project(grid, np.random.default_rng(seed).standard_normal((len(masks), grid.n_faces)))
    lam, _ = _power_iteration(apply, start, grid, tol, max_iter)
    return np.asarray(lam)


@dataclass
class SmallnessReport:
    beta: float
    c0: float
    c_tilde: float
    c1: float
    bound: float | None = None
    measured: float | None = None
    printed_bound: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def bound_ok(self):
        return self.beta > 0 and (self.measured is None or self.measured <= self.bound)

    @property
    def printed_ok(self):
        return self.measured is None or (self.printed_bound is not None and self.measured <= self.printed_bound)

    @property
    def ok(self):
        return self.bound_ok

    def as_dict(self):
        out = asdict(self)
        out.update(bound_ok=self.bound_ok, printed_ok=self.printed_ok)
        return out


def appendix_smallness_check(model, cost, f=None, seed=0):
    """Discrete smallness constant ``beta`` and the terminal bound on the follower responses.

    Constants: ``c0`` from :func:`poincare_constant`; ``C~ = max_i`` of the
    squared operator norm of ``L_i L_i*`` from ``H`` into the H1 seminorm;
    ``C1 = 2 mu C~``.  Then::

        beta = 1 - c0 C1 (sum_i |rho_i|^4_inf) (sum_i alpha_i^2) / mu
        sum_i ||xi_i(T)||^2 <= C1 sum_i alpha_i^2 |f|^2 / (beta mu)

    When ``f`` is given (or ``f="random"``) the pair is solved and the
    measured left side is stored next to the bound.
    """
    grid, mu = model.grid, model.params.mu
    alpha_sq = float(np.sum(cost.alphas**2))
    rho4 = float(sum(np.max(r) ** 4 for r in cost.weights))
    if cost.n_followers == 0 or alpha_sq == 0.0 or rho4 == 0.0:
        rep = SmallnessReport(1.0, float("nan"), 0.0, 0.0)
        if f is not None:
            rep.bound, rep.measured, rep.printed_bound = 0.0, 0.0, 0.0
        return rep
    c0 = poincare_constant(grid, seed=seed)
    c_tilde = float(np.max(gradient_gramian_norms_sq(model, cost.masks(), seed=seed)))
    c1 = 2.0 * mu * c_tilde
    beta = 1.0 - c0 * c1 * rho4 * alpha_sq / mu
    rep = SmallnessReport(beta, c0, c_tilde, c1)
    if f is not None:
        if isinstance(f, str):
            f = leray_project(grid, np.random.default_rng(seed).standard_normal(grid.n_faces))
        _, xi, info = solve_leader_adjoint_pair(model, f, cost.alphas, cost.weights, cost.follower_masks)
        f_sq = float(inner_product_H(grid, f, f))
        rep.measured = float(sum(h1_seminorm_sq(grid, x.final) for x in xi))
        rep.bound = c1 * alpha_sq * f_sq / (beta * mu) if beta > 0 else float("inf")
        rep.printed_bound = alpha_sq * f_sq / (beta * mu) if beta > 0 else float("inf")
        rep.info = {"pair_iterations": info.iterations, "f_norm_sq": f_sq}
    return rep


# -- memory symmetry -----------------------------------------------------------

def _pair_weights(params, dt, n_levels):
    tw = np.ones(n_levels)
    tw[0] = tw[-1] = 0.5
    lags = np.abs(np.subtract.outer(np.arange(n_levels), np.arange(n_levels))) * dt
    return dt * dt * np.outer(tw, tw) * eval_kernel(params, lags)


def fubini_sums(grid, params, a, b):
    """The two orderings of the memory double sum for histories ``a``, ``b``.

    ``S1 = sum_n sum_{m<=n} W(n,m) (Lap a^m, b^n)`` and
    ``S2 = sum_m sum_{n>=m} W(n,m) (Lap b^n, a^m)``, same weights ``W``.
    """
    n_levels = len(a)
    W = _pair_weights(params, grid.dt, n_levels)
    lap_a = laplacian(grid, a)
    lap_b = laplacian(grid, b)
    s1 = 0.0
    for n in range(n_levels):
        for m in range(n + 1):
            s1 += W[n, m] * float(inner_product_H(grid, lap_a[m], b[n]))
    s2 = 0.0
    for m in range(n_levels):
        for n in range(m, n_levels):
            s2 += W[n, m] * float(inner_product_H(grid, lap_b[n], a[m]))
    return s1, s2


def fubini_check(grid, params, n_trials=10, seed=0):
    """Largest relative mismatch of :func:`fubini_sums` over random smooth histories."""
    rng = np.random.default_rng(seed)
    t = grid.times[:, None]
    worst = 0.0
    for _ in range(n_trials):
        fields = leray_project(grid, rng.standard_normal((4, grid.n_faces)))
        w = rng.uniform(0.5, 2.0, 4)
        a = np.sin(w[0] * t) * fields[0] + np.cos(w[1] * t) * fields[1]
        b = np.cos(w[2] * t) * fields[2] + np.sin(w[3] * t) * fields[3]
        s1, s2 = fubini_sums(grid, params, a, b)
        den = max(abs(s1), abs(s2))
        worst = max(worst, abs(s1 - s2) / den if den > 0 else 0.0)
    return worst


# -- duality identity ----------------------------------------------------------

@dataclass
class IdentityReport:
    max_residual: float
    lhs: list
    rhs: list
    seed: int

    @property
    def ok(self):
        return self.max_residual <= 1e-9


def adjoint_identity_check(model, cost, leader_mask, n_trials=10, seed=0):
    """``(u(T), f)_H`` against ``sum_k dt (v_k, chi_O phi_k)_H`` for random ``(v, f)``.

    ``u`` is driven by ``v`` with the followers at equilibrium for a zero
    target; ``phi`` is the leader-adjoint from ``f``.  Residuals are
    ``|lhs - rhs| / max(|lhs|, |rhs|, 1e-3 |v| |f|)``.
    """
    grid = model.grid
    rng = np.random.default_rng(seed)
    zero_cost = cost.with_target(np.zeros(grid.n_faces))
    lhs, rhs, worst = [], [], 0.0
    for _ in range(n_trials):
        v = rng.standard_normal((model.nt, grid.n_faces)) * leader_mask
        f = leray_project(grid, rng.standard_normal(grid.n_faces))
        u_T = solve_nash(model, v, zero_cost, verify=False).state.final
        phi, _, _ = solve_leader_adjoint_pair(model, f, cost.alphas, cost.weights, cost.follower_masks)
        a = float(inner_product_H(grid, u_T, f))
        b = control_inner(grid, v, leader_mask * phi.control_slots())
        floor = 1e-3 * control_norm(grid, v) * norm_H(grid, f)
        den = max(abs(a), abs(b), floor)
        worst = max(worst, abs(a - b) / den if den > 0 else 0.0)
        lhs.append(a)
        rhs.append(b)
    return IdentityReport(worst, lhs, rhs, seed)


# -- memory schemes --------------------------------------------------------------

def memory_free_march(grid, mu, forcing, initial=None):
    """Plain implicit-Euler Stokes evolution through full saddle solves (no memory)."""
    fact = assemble(grid, grid.dt, mu)
    states = np.zeros((grid.nt + 1, grid.n_faces))
    if initial is not None:
        states[0] = initial
    for n in range(1, grid.nt + 1):
        states[n], _ = fact.solve(states[n - 1] / grid.dt + forcing[n - 1])
    return states


def _smooth_forcing(grid, mask, fields):
    t = grid.times[1:, None]
    return (np.sin(2 * np.pi * t / grid.t_final) * fields[0]
            + (t / grid.t_final) * fields[1]) * mask


def memory_scheme_order(spec, params, mask=None, nts=(8, 16, 32), seed=0):
    """Observed order of the trapezoid-vs-ODE terminal difference under dt refinement.

    The same smooth space-time forcing is sampled on each time grid.  Returns
    ``(differences, orders)``.
    """
    from dataclasses import replace

    from .geometry import build_grid
    from .solvers import Model

    rng = np.random.default_rng(seed)
    diffs = []
    fields = None
    for nt in nts:
        grid = build_grid(replace(spec, nt=nt))
        if fields is None:
            fields = leray_project(grid, rng.standard_normal((2, grid.n_faces)))
        m = np.ones(grid.n_faces) if mask is None else mask
        forcing = _smooth_forcing(grid, m, fields)
        a = Model(grid, params, "ode").march(forcing=forcing)[0][-1]
        b = Model(grid, params, "trapezoid").march(forcing=forcing)[0][-1]
        diffs.append(float(norm_H(grid, a - b)))
    orders = [float(np.log2(diffs[i] / diffs[i + 1])) for i in range(len(diffs) - 1)]
    return diffs, orders


def memory_free_match(model, seed=0):
    """Relative difference between the ``gamma = 0`` model and :func:`memory_free_march`."""
    grid = model.grid
    rng = np.random.default_rng(seed)
    forcing = rng.standard_normal((grid.nt, grid.n_faces))
    a = model.with_gamma(0.0).march(forcing=forcing)[0]
    b = memory_free_march(grid, model.params.mu, forcing)
    return float(np.max(norm_H(grid, a - b)) / np.max(norm_H(grid, b)))
