"""Leader's approximate-controllability problem, solved through its dual.

For terminal adjoint data ``f`` the leader-adjoint pair gives ``phi`` and
the leader control ``v = chi_O phi``.  The Gramian ``Lambda f`` is the
terminal state reached with that control while the followers play their
equilibrium against a zero target; it is self-adjoint and positive
semidefinite, with ``(Lambda f, f) = |v|^2``.

The followers' actual target ``u^T`` adds a control-independent offset
``c = u(T; v=0)``, so the leader works towards ``u^T - c``::

    F(f) = 1/2 (Lambda f, f) + eps |f| - (f, u^T - c)

``F`` is minimised by nonlinear conjugate gradients on the smoothed term
``eps sqrt(|f|^2 + eta^2)``, with ``eta`` shrinking over continuation stages
and a last stage at ``eta = 0`` (the norm is smooth away from ``f = 0``).
The smooth part is quadratic, so every line search is exact and one Gramian
application per iteration suffices.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DualMinimizationError, OldnashError, SmallnessViolation
from .geometry import inner_product_H, leray_project, norm_H
from .nash import beta0_estimate, solve_nash
from .solvers import control_inner, control_norm, solve_leader_adjoint_pair

__all__ = [
    "LeaderProblem",
    "LeaderSolution",
    "leader_adjoint",
    "gramian_apply",
    "dual_functional_F",
    "minimize_dual",
    "check_variational_inequality",
    "duality_gap",
    "controllability_sweep",
    "SWEEP_COLUMNS",
    "sweep_csv",
]

SWEEP_COLUMNS = ("epsilon", "distance", "leader_cost", "gap", "vi_min", "iters")


@dataclass
class LeaderProblem:
    """Leader data: ``model``, leader mask, follower ``cost`` (holds ``u^T``) and radius ``epsilon``."""

    model: object
    leader_mask: np.ndarray
    cost: object
    epsilon: float
    eta0: float | None = None
    stages: tuple = (1.0, 0.1, 0.01)
    tol_accept: float = 1e-2
    grad_rtol: float = 1e-8
    max_iter: int = 3000
    _offset: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        self.leader_mask = np.asarray(self.leader_mask, dtype=float)

    @property
    def grid(self):
        return self.model.grid

    @property
    def target(self):
        return self.cost.target

    def with_epsilon(self, epsilon):
        out = LeaderProblem(self.model, self.leader_mask, self.cost, epsilon, self.eta0,
                            self.stages, self.tol_accept, self.grad_rtol, self.max_iter)
        out._offset = self._offset
        return out

    def offset(self):
        """Terminal state with no leader control and followers at equilibrium."""
        if self._offset is None:
            if not np.any(self.target):
                self._offset = np.zeros(self.grid.n_faces)
            else:
                self._offset = solve_nash(self.model, None, self.cost, verify=False).state.final
        return self._offset

    def effective_target(self):
        return self.target - self.offset()


@dataclass
class LeaderSolution:
    f: np.ndarray
    v: np.ndarray
    terminal: np.ndarray
    distance: float
    leader_cost: float
    dual_value: float
    iterations: int
    gap: float | None = None
    vi_min: float | None = None
    stage_log: list = field(default_factory=list)
    feasible: bool = True


def leader_adjoint(problem, f):
    cost = problem.cost
    phi, xi, info = solve_leader_adjoint_pair(problem.model, f, cost.alphas, cost.weights,
                                              cost.follower_masks)
    return phi, xi, info


def leader_control(problem, f):
    """``v = chi_O phi`` over the forcing slots."""
    phi, _, _ = leader_adjoint(problem, f)
    return problem.leader_mask * phi.control_slots()


def gramian_apply(problem, f, return_control=False):
    """``Lambda f``: terminal state of ``v = chi_O phi(f)`` with followers at equilibrium for a zero target."""
    grid = problem.grid
    f = grid.check_faces(f, "f")
    v = leader_control(problem, f)
    if not np.any(v):
        out = np.zeros(grid.n_faces)
    else:
        out = solve_nash(problem.model, v, problem.cost.with_target(np.zeros(grid.n_faces)),
                         verify=False).state.final
    return (out, v) if return_control else out


def _smooth_norm(nrm, eta):
    return np.sqrt(nrm**2 + eta**2)


def dual_functional_F(problem, f, eta=0.0, v=None):
    """``1/2 |chi_O phi|^2 + eps sqrt(|f|^2 + eta^2) - (f, u^T - c)``."""
    grid = problem.grid
    f = grid.check_faces(f, "f")
    if v is None:
        v = leader_control(problem, f)
    return (0.5 * control_inner(grid, v, v) + problem.epsilon * _smooth_norm(norm_H(grid, f), eta)
            - float(inner_product_H(grid, f, problem.effective_target())))


def _line_search(a, b, eps, eta, q0, q1, q2):
    """Minimise ``a t^2/2 + b t + eps sqrt(q0 + 2 q1 t + q2 t^2 + eta^2)`` over ``t >= 0``."""

    def slope(t):
        s = np.sqrt(max(q0 + 2 * q1 * t + q2 * t * t, 0.0) + eta**2)
        return a * t + b + (eps * (q1 + q2 * t) / s if s > 0 else eps * np.sqrt(q2))

    if slope(0.0) >= 0:
        return 0.0
    hi = max(-b / a, 1e-300) if a > 0 else 1.0
    while slope(hi) < 0:
        hi *= 2.0
        if hi > 1e300:
            raise DualMinimizationError("dual minimization failed: unbounded line search")
    return brentq(slope, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def _ncg_stage(problem, f, lam_f, ut, eta, gtol, max_iter):
    """Nonlinear CG (Polak-Ribiere+) on the smoothed functional; returns ``(f, Lambda f, iters, |g|)``."""
    grid = problem.grid
    eps = problem.epsilon

    def gradient(f, lam_f):
        nrm = norm_H(grid, f)
        s = _smooth_norm(nrm, eta)
        return lam_f - ut + (eps * f / s if s > 0 else 0.0)

    g = gradient(f, lam_f)
    gn = norm_H(grid, g)
    d = -g
    it = 0
    while gn > gtol and it < max_iter:
        it += 1
        lam_d = gramian_apply(problem, d)
        a = float(inner_product_H(grid, lam_d, d))
        b = float(inner_product_H(grid, lam_f - ut, d))
        t = _line_search(a, b, eps, eta, float(inner_product_H(grid, f, f)),
                         float(inner_product_H(grid, f, d)), float(inner_product_H(grid, d, d)))
        f = f + t * d
        lam_f = lam_f + t * lam_d
        g_new = gradient(f, lam_f)
        gn_new = norm_H(grid, g_new)
        beta = max(0.0, float(inner_product_H(grid, g_new, g_new - g)) / gn**2)
        d = -g_new + beta * d
        if float(inner_product_H(grid, d, g_new)) >= 0:
            d = -g_new
        g, gn = g_new, gn_new
    return f, lam_f, it, gn


def minimize_dual(problem, check_beta=True):
    """Minimise ``F`` and recover the leader control; verifies the terminal constraint."""
    grid, model, cost = problem.grid, problem.model, problem.cost
    eps = problem.epsilon
    if check_beta and cost.n_followers and np.any(cost.alphas):
        beta0 = beta0_estimate(model, cost, n_samples=0).beta0
        if beta0 >= 1.0:
            raise SmallnessViolation(f"smallness condition violated: beta0 = {beta0:.3e} >= 1; "
                                     "follower equilibrium is not guaranteed unique")
    ut = problem.effective_target()
    target_norm = norm_H(grid, problem.target)
    gtol = problem.grad_rtol * max(1.0, target_norm)
    if norm_H(grid, ut) <= eps:
        zero = np.zeros(grid.n_faces)
        terminal = problem.offset()
        sol = LeaderSolution(zero, np.zeros((model.nt, grid.n_faces)), terminal,
                             norm_H(grid, terminal - problem.target), 0.0, 0.0, 0,
                             stage_log=[{"eta": 0.0, "iters": 0, "grad": 0.0}])
        sol.gap = 0.0
        return sol

    f = np.zeros(grid.n_faces)
    lam_f = np.zeros(grid.n_faces)
    eta0 = problem.eta0
    if eta0 is None:
        # one exact steepest-descent step from zero fixes the field scale
        lam_u = gramian_apply(problem, ut)
        t = float(inner_product_H(grid, ut, ut)) / float(inner_product_H(grid, lam_u, ut))
        eta0 = t * norm_H(grid, ut)
    log = []
    total = 0
    for factor in tuple(problem.stages) + (0.0,):
        eta = eta0 * factor
        f, lam_f, its, gn = _ncg_stage(problem, f, lam_f, ut, eta, gtol, problem.max_iter)
        # refresh Lambda f to shed accumulated round-off
        lam_f, v = gramian_apply(problem, f, return_control=True)
        total += its
        entry = {"eta": eta, "iters": its, "grad": gn}
        entry["gap"] = _gap_from(problem, f, v)
        log.append(entry)

    v = leader_control(problem, f)
    sol = _finish(problem, f, v, total, log)
    if not sol.feasible:
        raise DualMinimizationError(
            f"dual minimization failed: |u(T) - u^T| = {sol.distance:.6e} > eps (1 + tol) = "
            f"{eps * (1 + problem.tol_accept):.6e}; gap {sol.gap:.3e}, final gradient {log[-1]['grad']:.3e}")
    return sol


def _gap_from(problem, f, v):
    grid = problem.grid
    j = 0.5 * control_inner(grid, v, v)
    return j + dual_functional_F(problem, f, v=v)


def _finish(problem, f, v, iters, log):
    grid = problem.grid
    nash = solve_nash(problem.model, v, problem.cost, verify=False)
    terminal = nash.state.final
    distance = norm_H(grid, terminal - problem.target)
    j = 0.5 * control_inner(grid, v, v)
    dual = dual_functional_F(problem, f, v=v)
    sol = LeaderSolution(f, v, terminal, float(distance), float(j), float(dual), iters, stage_log=log)
    sol.gap = float(j + dual)
    sol.feasible = bool(distance <= problem.epsilon * (1 + problem.tol_accept))
    return sol


def duality_gap(sol, problem):
    """``J(v*) + F(f*)``; zero at exact optimality."""
    return float(sol.leader_cost + dual_functional_F(problem, sol.f, v=sol.v))


def vi_scale(sol, problem):
    return max(1.0, norm_H(problem.grid, sol.f)) * max(problem.epsilon, norm_H(problem.grid, problem.target))


def check_variational_inequality(sol, problem, n_samples=100, seed=0):
    """Minimum of ``(u(T) - u^T, g - f*) + eps |g| - eps |f*|`` over sampled ``g``.

    Samples are ``0``, ``f*``, ``2 f*`` and divergence-free noise scaled to
    ``{0.1, 1, 10} |f*|`` in turn.  Returns ``(min_value, scale, values)``.
    """
    if n_samples < 1:
        raise ValueError("need at least one variational-inequality sample")
    grid = problem.grid
    eps = problem.epsilon
    rng = np.random.default_rng(seed)
    miss = sol.terminal - problem.target
    fn = norm_H(grid, sol.f)
    ref = fn if fn > 0 else max(norm_H(grid, problem.target), 1.0)
    samples = [np.zeros(grid.n_faces), sol.f, 2 * sol.f]
    noise = leray_project(grid, rng.standard_normal((max(n_samples - 3, 0), grid.n_faces)))
    mags = (0.1, 1.0, 10.0)
    for k, g in enumerate(noise):
        samples.append(g * (mags[k % 3] * ref / norm_H(grid, g)))
    samples = samples[:n_samples]
    base = float(inner_product_H(grid, miss, sol.f)) + eps * fn
    vals = [float(inner_product_H(grid, miss, g)) + eps * norm_H(grid, g) - base for g in samples]
    return float(min(vals)), float(vi_scale(sol, problem)), vals


def controllability_sweep(problem, eps_list, seed=0, vi_samples=100):
    """Solve for every radius in a strictly decreasing list; failures are recorded, not raised."""
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list) or any(a <= b for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing and positive")
    rows = []
    for eps in eps_list:
        sub = problem.with_epsilon(eps)
        try:
            sol = minimize_dual(sub, check_beta=not rows)
            vi, _, _ = check_variational_inequality(sol, sub, n_samples=vi_samples, seed=seed)
            rows.append({"epsilon": eps, "distance": sol.distance, "leader_cost": sol.leader_cost,
                         "gap": sol.gap, "vi_min": vi, "iters": sol.iterations, "error": None})
        except OldnashError as exc:
            rows.append({"epsilon": eps, "distance": float("nan"), "leader_cost": float("nan"),
                         "gap": float("nan"), "vi_min": float("nan"), "iters": 0, "error": str(exc)})
        if rows[-1]["error"] is None:
            problem._offset = sub._offset
    return rows


def sweep_checks(rows, tol_accept=1e-2):
    """Feasibility per row and monotonicity of the leader cost as epsilon shrinks."""
    ok_rows = [r for r in rows if r["error"] is None]
    feasible = all(r["distance"] <= r["epsilon"] * (1 + tol_accept) for r in ok_rows) and len(ok_rows) == len(rows)
    costs = [r["leader_cost"] for r in ok_rows]
    nondecreasing = all(b >= a for a, b in zip(costs, costs[1:]))
    increasing = all(b > a for a, b in zip(costs, costs[1:]))
    return {"feasible": feasible, "cost_nondecreasing": nondecreasing, "cost_increasing": increasing}


def sweep_csv(rows):
    """CSV text with fixed column order and ``repr``-exact floats."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([repr(float(r[c])) if c != "iters" else str(int(r[c])) for c in SWEEP_COLUMNS])
    return buf.getvalue()
