import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import Setup, rel
from oldnash.diagnostics import memory_free_march
from oldnash.errors import SolverError
from oldnash.geometry import divergence, gradient, inner_product_H, laplacian, leray_project
from oldnash.solvers import (ControlSet, control_inner, solve_follower_adjoint, solve_follower_sensitivity,
                             solve_forward, solve_leader_adjoint_pair)

seeds = st.integers(0, 2**32 - 1)
coef = st.one_of(st.just(0.0), st.floats(0.01, 3.0), st.floats(-3.0, -0.01))


def _controls(s, rng):
    return ControlSet(s.leader_control(rng), list(s.follower_controls(rng)), s.leader, s.followers)


def test_zero_data_zero_state(small):
    traj = solve_forward(small.model, ControlSet.zeros(small.grid, small.leader, small.followers))
    assert not np.any(traj.states)


def test_control_set_masks(small):
    rng = small.rng(0)
    raw = rng.standard_normal((small.grid.nt, small.grid.n_faces))
    c = ControlSet(raw, [raw, raw], small.leader, small.followers)
    assert not np.any(c.v[:, small.leader == 0])
    for w, m in zip(c.w, small.followers):
        assert not np.any(w[:, m == 0])
    with pytest.raises(ValueError):
        ControlSet(raw, [raw], small.leader, small.followers)


@pytest.mark.parametrize("scheme", ["ode", "trapezoid"])
def test_forward_matches_dense(scheme):
    s = Setup(scheme=scheme)
    o = s.oracle()
    rng = s.rng(3)
    c = _controls(s, rng)
    u0 = leray_project(s.grid, rng.standard_normal(s.grid.n_faces))
    traj = solve_forward(s.model, c, initial=u0)
    assert np.array_equal(traj.initial, u0)
    assert rel(traj.states[1:], o.forward(c.forcing(), u0)) <= 1e-10


def test_forward_step_residual(small):
    # every step leaves a pure-gradient residual, i.e. the momentum equation holds with some pressure
    m, g = small.model, small.grid
    c = _controls(small, small.rng(4))
    u = solve_forward(m, c).states
    z = m.memory_terms(u)
    F = c.forcing()
    for n in range(1, g.nt + 1):
        r = (u[n] - u[n - 1]) / g.dt - m.params.mu * laplacian(g, u[n]) - z[n] - F[n - 1]
        assert np.max(np.abs(leray_project(g, r))) <= 1e-9 * np.max(np.abs(F))
        assert np.max(np.abs(divergence(g, u[n]))) <= 1e-10 * np.max(np.abs(u[n])) / g.hx


def test_final_pressure_closes_last_step(small):
    m, g = small.model, small.grid
    c = _controls(small, small.rng(5))
    traj = solve_forward(m, c)
    u, z = traj.states, m.memory_terms(traj.states)
    r = ((u[-1] - u[-2]) / g.dt - m.params.mu * laplacian(g, u[-1]) - z[-1] + gradient(g, traj.pressure)
         - c.forcing()[-1])
    assert np.max(np.abs(r)) <= 1e-9 * np.max(np.abs(c.forcing()))
    assert abs(traj.pressure.mean()) < 1e-12
    assert abs(inner_product_H(g, gradient(g, traj.pressure), u[-1])) <= 1e-12 * np.max(np.abs(traj.pressure))


def test_gamma_zero_matches_memory_free(small):
    rng = small.rng(6)
    F = rng.standard_normal((small.grid.nt, small.grid.n_faces))
    a = small.model.with_gamma(0.0).march(forcing=F)[0]
    b = memory_free_march(small.grid, small.params.mu, F)
    assert rel(a, b) <= 1e-12


def test_nonfinite_forcing_detected(small):
    F = np.zeros((small.grid.nt, small.grid.n_faces))
    F[2, 5] = np.inf
    with pytest.raises(SolverError, match="non-finite"):
        small.model.march(forcing=F)


def test_sensitivity_equals_forward_with_one_follower(small):
    rng = small.rng(7)
    w = small.follower_controls(rng)
    sens = solve_follower_sensitivity(small.model, 1, w[1], small.followers)
    only = ControlSet(np.zeros_like(w[0]), [np.zeros_like(w[0]), w[1]], small.leader, small.followers)
    fwd = solve_forward(small.model, only)
    assert np.array_equal(sens.states, fwd.states)
    # the 1/N pressure scaling is a gauge: the stored pressure is N times the plain one
    assert np.allclose(sens.pressure, 2 * fwd.pressure, rtol=1e-14, atol=0)
    assert not np.any(solve_follower_sensitivity(small.model, 0, np.zeros_like(w[0]), small.followers).states)


@given(seeds, coef, coef)
def test_superposition(small, seed, a, b):
    rng = np.random.default_rng(seed)
    m, g = small.model, small.grid
    F1, F2 = rng.standard_normal((2, g.nt, g.n_faces))
    g1, g2 = rng.standard_normal((2, g.n_faces))
    fwd = lambda F: m.march(forcing=F)[0]
    assert rel(fwd(a * F1 + b * F2), a * fwd(F1) + b * fwd(F2)) <= 1e-12
    sens = lambda F: solve_follower_sensitivity(m, 0, F, small.followers).states
    assert rel(sens(a * F1 + b * F2), a * sens(F1) + b * sens(F2)) <= 1e-12
    adj = lambda t: solve_follower_adjoint(m, t).states
    assert rel(adj(a * g1 + b * g2), a * adj(g1) + b * adj(g2)) <= 1e-12
    cost = small.cost()
    pair = lambda f: solve_leader_adjoint_pair(m, f, cost.alphas, cost.weights, cost.follower_masks)[0].states
    assert rel(pair(a * g1 + b * g2), a * pair(g1) + b * pair(g2)) <= 1e-9


def test_adjoint_zero_terminal(small):
    assert not np.any(solve_follower_adjoint(small.model, np.zeros(small.grid.n_faces)).states)


@given(seeds)
def test_sensitivity_adjoint_duality(small, seed):
    rng = np.random.default_rng(seed)
    g, m = small.grid, small.model
    i = int(rng.integers(2))
    w = rng.standard_normal((g.nt, g.n_faces))
    f = rng.standard_normal(g.n_faces)
    uT = solve_follower_sensitivity(m, i, w, small.followers).final
    psi = solve_follower_adjoint(m, f)
    lhs = float(inner_product_H(g, uT, f))
    rhs = control_inner(g, w * small.followers[i], small.followers[i] * psi.control_slots())
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


@given(seeds)
def test_backward_forcing_duality(small, seed):
    # sum_k dt (F_k, phi[k]) = (u^nt, g) + sum_k dt (u^{k+1}, G_k)
    rng = np.random.default_rng(seed)
    g, m = small.grid, small.model
    F, G = rng.standard_normal((2, g.nt, g.n_faces))
    term = rng.standard_normal(g.n_faces)
    u = m.march(forcing=F)[0]
    phi = solve_follower_adjoint(m, term, G).states
    lhs = control_inner(g, F, phi[:-1])
    rhs = float(inner_product_H(g, u[-1], term)) + control_inner(g, u[1:], G)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))


def test_adjoint_gamma_zero_matches_memory_free(small):
    rng = small.rng(8)
    g = small.grid
    term = rng.standard_normal(g.n_faces)
    a = solve_follower_adjoint(small.model.with_gamma(0.0), term).states
    b = memory_free_march(g, small.params.mu, np.zeros((g.nt, g.n_faces)), leray_project(g, term))[::-1]
    assert rel(a, b) <= 1e-12


def test_time_reversal_involution(small):
    rng = small.rng(9)
    g, m = small.grid, small.model
    u0 = leray_project(g, rng.standard_normal(g.n_faces))
    F = rng.standard_normal((g.nt, g.n_faces))
    fwd = m.march(initial=u0, forcing=F)[0]
    back = m.march_backward(u0, F[::-1])[0]
    # the backward solver re-projects its terminal datum: equal up to that round-off
    assert rel(back[::-1], fwd) <= 1e-13


def test_trajectory_metadata(small):
    traj = solve_follower_adjoint(small.model, np.ones(small.grid.n_faces))
    assert traj.direction == "backward" and traj.meta["params"] == small.model.param_hash
    assert traj.states.shape == (small.grid.nt + 1, small.grid.n_faces)
    assert np.max(np.abs(divergence(small.grid, traj.states))) < 1e-10 / small.grid.hx


def test_pair_trivial_cases(small):
    g, m = small.grid, small.model
    cost = small.cost()
    phi, xi, info = solve_leader_adjoint_pair(m, np.zeros(g.n_faces), cost.alphas, cost.weights, small.followers)
    assert not np.any(phi.states) and not any(np.any(x.states) for x in xi)
    f = small.rng(10).standard_normal(g.n_faces)
    phi, xi, info = solve_leader_adjoint_pair(m, f, [0.0, 0.0], cost.weights, small.followers)
    assert info.iterations == 1 and not any(np.any(x.states) for x in xi)
    assert np.array_equal(phi.states, m.march_backward(f)[0])


@pytest.mark.parametrize("alphas", [(3.0, 3.0), (2.0, 5.0)])
def test_pair_matches_dense(small, small_oracle, alphas):
    f = leray_project(small.grid, small.rng(11).standard_normal(small.grid.n_faces))
    phi, xi, _ = solve_leader_adjoint_pair(small.model, f, alphas, small.weights, small.followers)
    phi_ref, xi_ref = small_oracle.adjoint_pair(f, alphas, [w**2 for w in small.weights], small.followers)
    assert rel(phi.control_slots(), phi_ref) <= 1e-8
    assert rel(np.array([x.final for x in xi]), xi_ref) <= 1e-8


def test_pair_residuals(small):
    # phi(T) = P(f + sum rho_i^2 xi_i(T)) and xi_i solves the forward system driven by -alpha_i chi_i phi
    g, m = small.grid, small.model
    cost = small.cost()
    f = small.rng(12).standard_normal(g.n_faces)
    phi, xi, _ = solve_leader_adjoint_pair(m, f, cost.alphas, cost.weights, small.followers, tol=1e-13)
    coupling = sum(w**2 * x.final for w, x in zip(cost.weights, xi))
    assert rel(phi.final, leray_project(g, f + coupling)) <= 1e-12
    for a, mask, x in zip(cost.alphas, small.followers, xi):
        assert rel(x.states, m.march(forcing=-a * mask * phi.control_slots())[0]) <= 1e-12


def test_pair_divergence_reports_smallness(small):
    from oldnash.errors import SmallnessViolation

    f = small.rng(13).standard_normal(small.grid.n_faces)
    with pytest.raises(SmallnessViolation, match="smallness condition violated"):
        solve_leader_adjoint_pair(small.model, f, [1e6, 1e6], small.weights, small.followers)
