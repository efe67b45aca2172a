"""Optimal-control tests: cost closed forms, adjoint oracles, gradient
finite-difference agreement, descent behavior, and the MPC loop."""

from functools import lru_cache

import numpy as np
import pytest
from scipy.linalg import expm, lstsq
from scipy.special import roots_legendre

from mvsteady.control import (
    MPCConfig,
    OCPConfig,
    integrate_adjoint,
    mpc_loop,
    reduced_gradient,
    solve_open_loop,
    total_cost,
)
from mvsteady.deflation import find_all_steady_states
from mvsteady.dynamics import ControlSignal, Trajectory, integrate_forward
from mvsteady.potentials import hkb_model
from mvsteady.spectral import (
    assemble_operators,
    build_basis,
    build_quadrature,
    suggest_quadrature,
    uniform_coefficients,
)


@lru_cache(maxsize=None)
def _ops(kappa=1.5, ell=3, with_control=True):
    model = hkb_model(alpha=-1.0, kappa=kappa)
    basis = build_basis(model.domain, ell)
    quad = build_quadrature(model.domain, suggest_quadrature(ell))
    return assemble_operators(model, basis, quad, beta_inv=1.0,
                              with_control=with_control)


@lru_cache(maxsize=None)
def _linear_ops(ell=1):
    # kappa = 0 removes the interaction entirely; dynamics are linear
    model = hkb_model(c1=0.3, c2=0.2, kappa=0.0)
    basis = build_basis(model.domain, ell)
    quad = build_quadrature(model.domain, suggest_quadrature(ell))
    return assemble_operators(model, basis, quad, beta_inv=1.0,
                              with_control=True)


def _mass_neutral(rng, ops, scale):
    v = rng.standard_normal(ops.n_modes)
    v -= (ops.zeta @ v) / (ops.zeta @ ops.zeta) * ops.zeta
    return scale * v / np.linalg.norm(v)


@lru_cache(maxsize=None)
def _symmetric_root(ell=6):
    ops = _ops(kappa=3.0, ell=ell)
    sset = find_all_steady_states(ops, np.zeros(ops.n_modes))
    for e in sset:
        if abs(e.coefficients[1]) < 1e-6:    # no first-harmonic content
            return ops, e.coefficients
    raise AssertionError("symmetric root not found")


def test_cost_zero_at_target_with_zero_control():
    ops = _ops()
    target = uniform_coefficients(ops.basis)
    times = np.linspace(0.0, 1.0, 11)
    traj = Trajectory(times, np.tile(target, (11, 1)))
    u = ControlSignal.zero(times, ops.n_modes, 1)
    ocp = OCPConfig(horizon=1.0, dt=0.1, gamma=0.3, eta=5.0)
    assert total_cost(traj, u, target, ocp, ops) == 0.0


def test_cost_constant_control_closed_form():
    # at the target with u = c on a single mode: J = gamma T c^2 / 2
    ops = _ops()
    target = uniform_coefficients(ops.basis)
    times = np.linspace(0.0, 2.0, 41)
    traj = Trajectory(times, np.tile(target, (41, 1)))
    vals = np.zeros((41, ops.n_modes, 1))
    vals[:, 1, 0] = 0.7
    u = ControlSignal(times, vals)
    ocp = OCPConfig(horizon=2.0, dt=0.05, gamma=0.3, eta=5.0)
    expected = 0.3 * 2.0 * 0.7 ** 2 / 2.0
    assert total_cost(traj, u, target, ocp, ops) == pytest.approx(expected,
                                                                  rel=1e-10)


def test_cost_grid_mismatch_rejected():
    ops = _ops()
    target = uniform_coefficients(ops.basis)
    traj = Trajectory(np.linspace(0, 1, 11), np.tile(target, (11, 1)))
    u = ControlSignal.zero(np.linspace(0, 1, 21), ops.n_modes, 1)
    with pytest.raises(ValueError):
        total_cost(traj, u, target, OCPConfig(1.0, 0.1, 1.0, 0.0), ops)


def test_adjoint_terminal_condition_exact():
    ops = _ops()
    rng = np.random.default_rng(0)
    a0 = uniform_coefficients(ops.basis) + _mass_neutral(rng, ops, 0.05)
    target = uniform_coefficients(ops.basis)
    ocp = OCPConfig(horizon=0.3, dt=0.01, gamma=0.1, eta=3.0)
    times = np.linspace(0.0, 0.3, 31)
    u = ControlSignal(times, 0.2 * rng.standard_normal((31, ops.n_modes, 1)))
    traj = integrate_forward(a0, u, (0.0, 0.3), 0.01, ops)
    adj = integrate_adjoint(traj, u, target, ocp, ops)
    expected = 2.0 * ocp.eta * (ops.M @ (traj.final - target))
    assert np.linalg.norm(adj.values[-1] - expected) <= 1e-10


def test_adjoint_zero_when_on_target_with_zero_terminal_weight():
    ops, root = _symmetric_root()
    ocp = OCPConfig(horizon=0.5, dt=0.01, gamma=0.1, eta=0.0)
    traj = integrate_forward(root, None, (0.0, 0.5), 0.01, ops)
    adj = integrate_adjoint(traj, None, root, ocp, ops)
    assert np.abs(adj.values).max() <= 1e-10


def test_linear_adjoint_matches_matrix_exponential_oracle():
    ops = _linear_ops()
    L = ops.n_modes
    rng = np.random.default_rng(8)
    a0 = uniform_coefficients(ops.basis) + _mass_neutral(rng, ops, 0.1)
    target = uniform_coefficients(ops.basis)
    ocp = OCPConfig(horizon=0.5, dt=5e-4, gamma=1.0, eta=1.5)
    traj = integrate_forward(a0, None, (0.0, 0.5), ocp.dt, ops)
    adj = integrate_adjoint(traj, None, target, ocp, ops)

    J_rhs = -ops.beta_inv * ops.A - ops.C
    S = np.linalg.solve(ops.M, J_rhs)
    T_mat = -J_rhs.T @ np.linalg.inv(ops.M)
    # backward-in-time augmented system in s = T - t for (p, a, const target)
    blk = np.zeros((3 * L, 3 * L))
    blk[:L, :L] = -T_mat
    blk[:L, L:2 * L] = ops.M
    blk[:L, 2 * L:] = -ops.M
    blk[L:2 * L, L:2 * L] = -S
    aT = expm(0.5 * S) @ a0
    y0 = np.concatenate([2.0 * ocp.eta * (ops.M @ (aT - target)), aT, target])
    for t_check in (0.0, 0.25):
        y = expm((0.5 - t_check) * blk) @ y0
        i = int(round(t_check / ocp.dt))
        assert np.linalg.norm(adj.values[i] - y[:L]) <= 1e-6


def test_adjoint_inner_product_identity_linear_case():
    ops = _linear_ops()
    rng = np.random.default_rng(2)
    a0 = uniform_coefficients(ops.basis) + _mass_neutral(rng, ops, 0.1)
    target = uniform_coefficients(ops.basis)
    ocp = OCPConfig(horizon=0.5, dt=1e-3, gamma=1.0, eta=0.8)
    traj = integrate_forward(a0, None, (0.0, 0.5), ocp.dt, ops)
    adj = integrate_adjoint(traj, None, target, ocp, ops)
    lhs = adj.values[-1] @ traj.coefficients[-1] - adj.values[0] @ traj.coefficients[0]
    integrand = -np.einsum("ij,jk,ik->i", traj.coefficients - target, ops.M,
                           traj.coefficients)
    rhs = np.trapezoid(integrand, traj.times)
    assert abs(lhs - rhs) <= 1e-5


def test_reduced_gradient_penalty_only_when_adjoint_vanishes():
    ops = _ops()
    rng = np.random.default_rng(3)
    times = np.linspace(0.0, 0.4, 21)
    a_flat = np.tile(uniform_coefficients(ops.basis), (21, 1))
    traj = Trajectory(times, a_flat)
    ocp = OCPConfig(horizon=0.4, dt=0.02, gamma=0.7, eta=0.0)
    from mvsteady.control import AdjointTrajectory
    adj = AdjointTrajectory(times, np.zeros_like(a_flat))

    u0 = ControlSignal.zero(times, ops.n_modes, 1)
    assert np.abs(reduced_gradient(traj, adj, u0, ocp, ops)).max() == 0.0

    vals = rng.standard_normal((21, ops.n_modes, 1))
    u1 = ControlSignal(times, vals)
    grad = reduced_gradient(traj, adj, u1, ocp, ops)
    w = np.full(21, 0.02)
    w[0] = w[-1] = 0.01
    expected = w[:, None, None] * ocp.gamma * np.einsum("mk,ikj->imj", ops.M, vals)
    assert np.abs(grad - expected).max() <= 1e-14


def test_gradient_matches_finite_differences_componentwise():
    ops = _ops()
    L = ops.n_modes
    rng = np.random.default_rng(42)
    a0 = uniform_coefficients(ops.basis) + 0.05 * rng.standard_normal(L)
    a0 -= (ops.zeta @ a0 - 1.0) * ops.zeta / (ops.zeta @ ops.zeta)
    target = uniform_coefficients(ops.basis) + 0.05 * rng.standard_normal(L)
    target -= (ops.zeta @ target - 1.0) * ops.zeta / (ops.zeta @ ops.zeta)
    ocp = OCPConfig(horizon=0.5, dt=1e-3, gamma=0.1, eta=2.0)
    n = int(round(ocp.horizon / ocp.dt))
    times = np.linspace(0.0, ocp.horizon, n + 1)
    u_vals = 0.3 * np.random.default_rng(7).standard_normal((n + 1, L, 1))
    u = ControlSignal(times, u_vals)

    traj = integrate_forward(a0, u, (0.0, ocp.horizon), ocp.dt, ops)
    adj = integrate_adjoint(traj, u, target, ocp, ops)
    grad = reduced_gradient(traj, adj, u, ocp, ops)

    def cost_of(vals):
        c = ControlSignal(times, vals)
        t = integrate_forward(a0, c, (0.0, ocp.horizon), ocp.dt, ops)
        return total_cost(t, c, target, ocp, ops)

    idx = np.random.default_rng(13).choice((n + 1) * L, size=12, replace=False)
    for flat in idx:
        i, k = divmod(int(flat), L)
        h = 1e-6
        vp = u_vals.copy()
        vp[i, k, 0] += h
        vm = u_vals.copy()
        vm[i, k, 0] -= h
        fd = (cost_of(vp) - cost_of(vm)) / (2.0 * h)
        assert abs(fd - grad[i, k, 0]) <= 1e-4 * abs(fd)


def test_open_loop_trivial_at_target():
    ops, root = _symmetric_root()
    ocp = OCPConfig(horizon=0.5, dt=0.01, gamma=0.1, eta=10.0, eps_u=1e-12)
    sol = solve_open_loop(root, root, ocp, ops)
    assert sol.converged
    assert np.abs(sol.control.values).max() <= 1e-12
    assert sol.cost_history[-1] <= 1e-14
    assert len(sol.cost_history) <= 3


def test_open_loop_matches_linear_quadratic_oracle():
    # with the interaction and the control tensor both zero the optimal
    # control is zero and the optimal cost is the free-evolution cost
    ops = _linear_ops()
    ops.D.fill(0.0)
    try:
        L = ops.n_modes
        lin = np.vstack([ops.beta_inv * ops.A + ops.C, ops.zeta])
        rhs = np.zeros(L + 1)
        rhs[-1] = 1.0
        a_tilde = lstsq(lin, rhs)[0]
        rng = np.random.default_rng(5)
        e0 = _mass_neutral(rng, ops, 0.2)
        a0 = a_tilde + e0

        ocp = OCPConfig(horizon=1.0, dt=1.0 / 400, gamma=0.5, eta=2.0)
        sol = solve_open_loop(a0, a_tilde, ocp, ops)
        assert sol.converged
        assert np.abs(sol.control.values).max() <= 1e-12

        S = np.linalg.solve(ops.M, -(ops.beta_inv * ops.A + ops.C))
        nodes, weights = roots_legendre(40)
        t_nodes = 0.5 * (nodes + 1.0)
        t_weights = 0.5 * weights
        run = 0.0
        for t, w in zip(t_nodes, t_weights):
            e = expm(t * S) @ e0
            run += w * 0.5 * e @ (ops.M @ e)
        eT = expm(1.0 * S) @ e0
        oracle = run + ocp.eta * eT @ (ops.M @ eT)
        assert sol.cost_history[-1] == pytest.approx(oracle, rel=1e-4)
    finally:
        _linear_ops.cache_clear()


def test_descent_reduces_cost_and_distance():
    ops, root = _symmetric_root()
    rng = np.random.default_rng(9)
    a0 = root + _mass_neutral(rng, ops, 0.05)
    ocp = OCPConfig(horizon=1.0, dt=0.01, gamma=1e-3, eta=50.0, delta=1.0,
                    eps_u=1e-12, max_iter=40)
    sol = solve_open_loop(a0, root, ocp, ops)
    hist = np.array(sol.cost_history)
    assert np.all(np.diff(hist) <= 1e-14)
    assert hist[-1] < 0.5 * hist[0]
    free = integrate_forward(a0, None, (0.0, 1.0), 0.01, ops)
    d_controlled = np.linalg.norm(sol.state.final - root)
    d_free = np.linalg.norm(free.final - root)
    assert d_controlled < d_free


def test_stronger_penalty_shrinks_the_control():
    ops, root = _symmetric_root()
    rng = np.random.default_rng(9)
    a0 = root + _mass_neutral(rng, ops, 0.05)
    norms = []
    for gamma in (1e-3, 1e-2):
        ocp = OCPConfig(horizon=1.0, dt=0.01, gamma=gamma, eta=50.0,
                        eps_u=1e-12, max_iter=40)
        sol = solve_open_loop(a0, root, ocp, ops)
        norms.append(np.linalg.norm(sol.control.values))
    assert norms[1] < norms[0]


def test_mpc_stays_at_target():
    ops, root = _symmetric_root()
    ocp = OCPConfig(horizon=0.25, dt=0.01, gamma=0.1, eta=10.0, eps_u=1e-12,
                    max_iter=20)
    mpc = MPCConfig(total_time=1.0, n_outer_steps=4, ocp=ocp)
    res = mpc_loop(root, root, mpc, ops)
    assert np.abs(res.applied.values).max() <= 1e-8
    assert res.distances[-1] <= 1e-6


def test_mpc_feedback_responds_to_midrun_perturbation():
    ops, root = _symmetric_root()
    rng = np.random.default_rng(9)
    a0 = root + _mass_neutral(rng, ops, 0.02)
    ocp = OCPConfig(horizon=0.4, dt=0.01, gamma=1e-3, eta=50.0, delta=100.0,
                    eps_u=1e-6, max_iter=100)
    mpc = MPCConfig(total_time=2.0, n_outer_steps=5, ocp=ocp)

    base = mpc_loop(a0, root, mpc, ops)
    kick = _mass_neutral(np.random.default_rng(77), ops, 1e-3)

    def hook(step, a):
        return a + kick if step == 3 else a

    pert = mpc_loop(a0, root, mpc, ops, state_hook=hook)
    diff_after = np.linalg.norm(pert.applied.values[3:] - base.applied.values[3:])
    assert diff_after > 1e-7
    assert np.allclose(pert.applied.values[:3], base.applied.values[:3])
    # the loop absorbs the kick: final distance back at the unperturbed level
    assert pert.distances[-1] <= base.distances[-1] + 2e-4
