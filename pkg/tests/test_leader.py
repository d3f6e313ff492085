import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import rel
from oldnash.errors import DualMinimizationError, SmallnessViolation
from oldnash.geometry import inner_product_H, leray_project, norm_H
from oldnash.leader import (SWEEP_COLUMNS, LeaderProblem, check_variational_inequality, controllability_sweep,
                            dual_functional_F, duality_gap, gramian_apply, leader_control, minimize_dual,
                            sweep_checks, sweep_csv)
from oldnash.solvers import control_inner

seeds = st.integers(0, 2**32 - 1)


def _reachable(s, seed=0):
    rng = np.random.default_rng(seed)
    u = s.model.march(forcing=s.leader_control(rng))[0][-1]
    return u / norm_H(s.grid, u)


def _problem(s, eps=0.2, target=None, alphas=(3.0, 3.0)):
    target = _reachable(s) if target is None else target
    return LeaderProblem(s.model, s.leader, s.cost(alphas, target), eps)


@pytest.fixture(scope="module")
def solved(small):
    pb = _problem(small, 0.2)
    return pb, minimize_dual(pb)


def _rand_f(s, rng):
    return leray_project(s.grid, rng.standard_normal(s.grid.n_faces))


def test_gramian_zero(small):
    assert not np.any(gramian_apply(_problem(small), np.zeros(small.grid.n_faces)))


@given(seeds)
def test_gramian_self_adjoint(small, seed):
    rng = np.random.default_rng(seed)
    pb = _problem(small)
    f1, f2 = _rand_f(small, rng), _rand_f(small, rng)
    a = float(inner_product_H(small.grid, gramian_apply(pb, f1), f2))
    b = float(inner_product_H(small.grid, f1, gramian_apply(pb, f2)))
    assert abs(a - b) <= 1e-9 * max(abs(a), abs(b))


@given(seeds)
def test_gramian_energy_identity(small, seed):
    f = _rand_f(small, np.random.default_rng(seed))
    lam, v = gramian_apply(_problem(small), f, return_control=True)
    q = float(inner_product_H(small.grid, lam, f))
    assert q >= 0
    assert abs(q - control_inner(small.grid, v, v)) <= 1e-10 * q


def test_gramian_matches_dense(small, small_oracle):
    # Lambda = M M* with M the dense map from leader controls to u(T) through the Nash response
    pb = _problem(small)
    f = _rand_f(small, small.rng(1))
    alphas = pb.cost.alphas
    A, L, Ls = small_oracle.game_matrix(alphas, [r**2 for r in small.weights], small.followers)
    Bv = np.concatenate([-alphas[i] * small_oracle.adjoint(Ls[i]) @ ((small.weights[i] ** 2)[:, None] * L)
                         for i in range(2)])
    M = L + np.hstack(Ls) @ np.linalg.solve(A, Bv)
    M = M * np.tile(small.leader, small.grid.nt)
    ref = M @ small_oracle.adjoint(M) @ f
    assert rel(gramian_apply(pb, f), ref) <= 1e-8


def test_F_trivial(small):
    pb = _problem(small)
    assert dual_functional_F(pb, np.zeros(small.grid.n_faces)) == 0.0
    zero_target = _problem(small, target=np.zeros(small.grid.n_faces))
    f = _rand_f(small, small.rng(2))
    assert dual_functional_F(zero_target, f) >= 0


def test_F_quadratic_term_two_ways(small):
    pb = _problem(small)
    f = _rand_f(small, small.rng(3))
    # quadratic term from the space-time integral of phi^2 on the leader region versus (Lambda f, f)
    phi = leader_control(pb, f)
    direct = 0.5 * small.grid.dt * small.grid.volume * np.sum(phi**2)
    via_gramian = 0.5 * float(inner_product_H(small.grid, gramian_apply(pb, f), f))
    assert abs(direct - via_gramian) <= 1e-10 * direct
    lin = pb.epsilon * norm_H(small.grid, f) - float(inner_product_H(small.grid, f, pb.effective_target()))
    assert dual_functional_F(pb, f) == pytest.approx(direct + lin, rel=1e-12)


@given(seeds)
def test_F_midpoint_convexity(small, seed):
    rng = np.random.default_rng(seed)
    pb = _problem(small)
    f1, f2 = 50 * _rand_f(small, rng), 50 * _rand_f(small, rng)
    F = lambda f: dual_functional_F(pb, f)
    scale = abs(F(f1)) + abs(F(f2)) + 1.0
    assert F(0.5 * (f1 + f2)) <= 0.5 * (F(f1) + F(f2)) + 1e-10 * scale


def test_small_target_is_trivial(small):
    g = small.grid
    target = 0.1 * _reachable(small)
    pb = _problem(small, eps=0.2, target=target)
    sol = minimize_dual(pb)
    assert not np.any(sol.f) and not np.any(sol.v)
    assert sol.gap == 0.0 and duality_gap(sol, pb) == 0.0
    assert sol.distance <= 0.2


def test_matches_dense_primal(small, small_oracle, solved):
    pb, sol = solved
    v_ref, j_ref, d_ref = small_oracle.leader_primal(small.leader, pb.target, pb.cost.alphas,
                                                     [r**2 for r in small.weights], small.followers, pb.epsilon)
    assert rel(sol.v, v_ref) <= 1e-6
    assert sol.leader_cost == pytest.approx(j_ref, rel=1e-8)
    assert sol.distance <= pb.epsilon * (1 + 1e-2)


def test_gap_and_stages(solved):
    pb, sol = solved
    assert abs(sol.gap) <= 1e-4 * max(sol.leader_cost, 1.0)
    assert duality_gap(sol, pb) == pytest.approx(sol.gap, abs=1e-9 * sol.leader_cost)
    gaps = [abs(e["gap"]) for e in sol.stage_log]
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


def test_variational_inequality(solved):
    pb, sol = solved
    vi, scale, vals = check_variational_inequality(sol, pb, n_samples=100, seed=3)
    assert len(vals) == 100
    assert vals[1] == 0.0  # the sample at f* itself
    assert vi >= -1e-6 * scale
    # sample 0 is g = 0: (u(T) - u^T, f*) + eps |f*| <= tol
    g = pb.grid
    at_zero = float(inner_product_H(g, sol.terminal - pb.target, sol.f)) + pb.epsilon * norm_H(g, sol.f)
    assert vals[0] == pytest.approx(-at_zero, abs=1e-12 * scale)
    assert at_zero <= 1e-6 * scale


def test_cost_decreases_with_radius(small):
    pb = _problem(small)
    costs = [minimize_dual(pb.with_epsilon(e)).leader_cost for e in (0.1, 0.2, 0.4, 0.8)]
    assert all(b < a for a, b in zip(costs, costs[1:]))


def test_refuses_without_smallness(small):
    with pytest.raises(SmallnessViolation):
        minimize_dual(_problem(small, alphas=(1e4, 1e4)))


def test_failure_reports_gap(small):
    pb = _problem(small, eps=0.05)
    pb.max_iter = 1
    with pytest.raises(DualMinimizationError, match="dual minimization failed.*gap"):
        minimize_dual(pb)


def test_epsilon_must_be_positive(small):
    with pytest.raises(ValueError):
        _problem(small, eps=0.0)


def test_sweep_zero_target(small):
    pb = _problem(small, target=np.zeros(small.grid.n_faces))
    rows = controllability_sweep(pb, [0.5, 0.2, 0.1], vi_samples=10)
    assert all(r["distance"] == 0.0 and r["leader_cost"] == 0.0 for r in rows)


def test_sweep_reachable_and_csv(small):
    pb = _problem(small)
    rows = controllability_sweep(pb, [0.5, 0.2, 0.1], vi_samples=20)
    checks = sweep_checks(rows)
    assert checks["feasible"] and checks["cost_increasing"]
    text = sweep_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS) and len(lines) == 4
    assert float(lines[1].split(",")[1]) == rows[0]["distance"]


def test_sweep_records_failures(small):
    pb = _problem(small)
    pb.max_iter = 1
    rows = controllability_sweep(pb, [0.5, 0.05], vi_samples=5)
    assert rows[-1]["error"] is not None and np.isnan(rows[-1]["distance"])
    assert not sweep_checks(rows)["feasible"]


def test_sweep_requires_decreasing(small):
    with pytest.raises(ValueError):
        controllability_sweep(_problem(small), [0.1, 0.2])


def test_vi_needs_samples(small):
    pb = LeaderProblem(small.model, small.leader, small.cost(), 0.5)
    sol = minimize_dual(pb)
    with pytest.raises(ValueError, match="at least one"):
        check_variational_inequality(sol, pb, n_samples=0)
