import numpy as np
import pytest

import dense_oracle as dense
from conftest import oscillating_state, rel_err, small_model
from pintopt.adjoint_mgrit import CycleTape, Piggyback, adjoint_cycle, estimate_time_lag, serial_adjoint
from pintopt.errors import MaxItersExceeded, TapeMismatch
from pintopt.mgrit import ConvergenceRecord, Mgrit, MgritConfig, serial_solve

CONFIGS = [(c, r) for c in ("V", "F") for r in ("F", "FC", "FCF")]


def solver_for(model, **kw):
    return Mgrit(model, model.cfg.N, model.cfg.dt, MgritConfig(**kw))


def perturbed(model, rng, scale=0.05):
    u = oscillating_state(model, rng, None)
    u[0] = model.initial_state()
    return u


def _defect(a, b, scale, floor):
    # a cycle can be exact (then H does not depend on u); both sides must then vanish
    if scale <= floor:
        return max(abs(a), abs(b)) / floor
    return abs(a - b) / scale


def dot_test(solver, u, rho, rng, eps=1e-6):
    """Normalized transpose defects ``(state, design)`` under central differences."""
    d, yb = rng.standard_normal((2,) + u.shape)
    d[0] = 0.0
    tape = CycleTape()
    solver.cycle(u, rho, tape)
    xb, rb = tape.transpose(yb)
    floor = 1e-12 * np.linalg.norm(yb) * np.linalg.norm(d)
    jd = (solver.cycle(u + eps * d, rho) - solver.cycle(u - eps * d, rho)) / (2 * eps)
    state = _defect(np.sum(yb * jd), np.sum(xb * d), np.linalg.norm(yb) * np.linalg.norm(jd), floor)
    h = 1e-4
    jr = (solver.cycle(u, rho + h) - solver.cycle(u, rho - h)) / (2 * h)
    design = _defect(np.sum(yb * jr), rb[0], np.linalg.norm(yb) * np.linalg.norm(jr), 1e-12 * np.linalg.norm(yb))
    return state, design


@pytest.mark.parametrize("N", [8, 16])
@pytest.mark.parametrize("cycle_type, relaxation", CONFIGS)
def test_cycle_transpose_dot_product(N, cycle_type, relaxation, rng):
    model = small_model(N=N, dt=2e-3)
    solver = solver_for(model, cycle_type=cycle_type, relaxation=relaxation)
    state, design = dot_test(solver, perturbed(model, rng), 2.0, rng)
    assert state <= 1e-6 and design <= 1e-6


@pytest.mark.parametrize("cycle_type, relaxation", CONFIGS)
def test_transpose_equals_dense_cycle_matrix_transpose(cycle_type, relaxation, rng):
    model = small_model(N=16, L=6, linear=True, a_target=1.0)
    solver = solver_for(model, cycle_type=cycle_type, relaxation=relaxation)
    u = perturbed(model, rng)
    C = dense.cycle_matrix(lambda x: solver.cycle(x, 2.0), u.shape)
    yb = rng.standard_normal(u.shape)
    yb[0] = 0.0
    tape = CycleTape()
    solver.cycle(u, 2.0, tape)
    xb, _ = tape.transpose(yb)
    np.testing.assert_allclose(xb[1:].ravel(), C.T @ yb[1:].ravel(), rtol=0, atol=1e-12)
    assert not xb[0].any()


def test_transpose_of_exact_two_level_cycle_vanishes(rng):
    # ideal coarse operator + F-relaxation: H(u) is the exact solution for every u
    model = small_model(N=16, dt=2e-3)
    solver = solver_for(model, max_levels=2, relaxation="F", coarse_operator="ideal")
    u = perturbed(model, rng)
    tape = CycleTape()
    solver.cycle(u, 2.5, tape)
    xb, _ = tape.transpose(rng.standard_normal(u.shape))
    assert np.max(np.abs(xb)) <= 1e-12
    state, design = dot_test(solver, u, 2.5, rng)
    assert state <= 1e-6 and design <= 1e-6


@pytest.mark.parametrize("cycle_type", ["V", "F"])
def test_replay_is_bitwise(model, rng, cycle_type):
    solver = solver_for(model, cycle_type=cycle_type)
    u = perturbed(model, rng)
    tape = CycleTape()
    out = solver.cycle(u, 2.0, tape)
    np.testing.assert_array_equal(tape.replay(), out)
    assert len(tape) > 0


def test_taping_leaves_primal_iterates_unchanged(model):
    solver = solver_for(model)
    a = b = solver.initial_guess()
    for _ in range(3):
        a = solver.cycle(a, 2.0)
        b = solver.cycle(b, 2.0, CycleTape())
        np.testing.assert_array_equal(a, b)


def test_zero_adjoint_gives_objective_gradient(model, rng):
    solver = solver_for(model)
    u = perturbed(model, rng)
    tape = CycleTape()
    solver.cycle(u, 2.0, tape)
    ubar, g_part = adjoint_cycle(tape, np.zeros_like(u), u, 2.0, model)
    np.testing.assert_array_equal(ubar, model.objective_grad_state(u, 2.0))
    assert g_part[0] == 0.0


def test_tape_mismatches_are_reported(model, rng):
    solver = solver_for(model)
    u = perturbed(model, rng)
    with pytest.raises(TapeMismatch):
        CycleTape().transpose(u)
    tape = CycleTape()
    solver.cycle(u, 2.0, tape)
    with pytest.raises(TapeMismatch):
        tape.transpose(u[:-1])
    with pytest.raises(TapeMismatch):
        adjoint_cycle(tape, np.zeros_like(u), u + 1.0, 2.0, model)
    with pytest.raises(TapeMismatch):
        adjoint_cycle(tape, np.zeros_like(u), u, 2.5, model)


def test_transpose_counts_adjoint_work(model, rng):
    solver = solver_for(model)
    u = perturbed(model, rng)
    tape = CycleTape()
    solver.cycle(u, 2.0, tape)
    before = solver.counter.snapshot()
    tape.transpose(np.ones_like(u))
    after = solver.counter.snapshot()
    assert after["adjoint_steps"] - before["adjoint_steps"] == before["steps"]
    assert after["adjoint_span"] - before["adjoint_span"] == before["span"]


# -- piggyback ----------------------------------------------------------------------


@pytest.fixture
def converged(model):
    pg = Piggyback(solver_for(model), model)
    u, ubar, g, record = pg.solve(2.0, tol=1e-12, max_iters=100)
    return pg, u, ubar, g, record


def test_first_adjoint_increment_is_objective_gradient(model):
    pg = Piggyback(solver_for(model), model)
    u0 = pg.solver.initial_guess()
    _, ubar, _, (_, adj) = pg.iterate(u0, pg.initial_adjoint(), 2.0)
    expected = np.linalg.norm(model.objective_grad_state(u0, 2.0))
    assert adj == pytest.approx(expected, rel=1e-14) and adj > 0


def test_converged_pair_is_a_fixed_point(converged, model):
    pg, u, ubar, _, _ = converged
    u1, ubar1, _, _ = pg.iterate(u, ubar, 2.0)
    assert np.max(np.abs(u1 - u)) <= 1e-12
    assert np.max(np.abs(ubar1 - ubar)) <= 1e-10 * np.max(np.abs(ubar))


def test_converged_state_matches_serial(converged, model):
    _, u, _, _, _ = converged
    assert np.max(np.abs(u - serial_solve(model, 64, model.cfg.dt, 2.0))) <= 1e-9


def test_reduced_gradient_matches_serial_adjoint(converged, model):
    _, u, _, g, _ = converged
    _, g_serial = serial_adjoint(model, u, 2.0, model.cfg.dt)
    assert rel_err(g, g_serial) <= 1e-8


@pytest.mark.parametrize("rho", [1.0, 2.0, 3.0, 4.0])
def test_reduced_gradient_matches_finite_differences(model, rho):
    pg = Piggyback(solver_for(model), model)
    _, _, g, _ = pg.solve(rho, tol=1e-12, max_iters=100)

    def J(r):
        return model.objective(serial_solve(model, 64, model.cfg.dt, r), r)

    eps = 1e-5
    fd = (J(rho + eps) - J(rho - eps)) / (2 * eps)
    assert abs(g[0] - fd) <= 1e-5 * abs(fd)


def test_serial_adjoint_gradient_matches_finite_differences(model):
    u = serial_solve(model, 64, model.cfg.dt, 2.0)
    _, g = serial_adjoint(model, u, 2.0, model.cfg.dt)
    eps = 1e-5
    Jp = model.objective(serial_solve(model, 64, model.cfg.dt, 2.0 + eps), 2.0 + eps)
    Jm = model.objective(serial_solve(model, 64, model.cfg.dt, 2.0 - eps), 2.0 - eps)
    assert g[0] == pytest.approx((Jp - Jm) / (2 * eps), rel=1e-6)


@pytest.mark.xfail(strict=True, reason="the cycle adjoint is not the time-step adjoint; only the gradient coincides")
def test_fixed_point_adjoint_reproduces_serial_recursion(converged, model):
    _, u, ubar, _, _ = converged
    lam, _ = serial_adjoint(model, u, 2.0, model.cfg.dt)
    assert np.max(np.abs(ubar[1:] - lam[1:])) <= 1e-8 * np.max(np.abs(lam))


def test_fixed_point_adjoint_solves_cycle_adjoint_equation(converged, model):
    pg, u, ubar, _, _ = converged
    tape = CycleTape()
    pg.solver.cycle(u, 2.0, tape)
    hbar, _ = tape.transpose(ubar)
    rhs = model.objective_grad_state(u, 2.0) + hbar
    assert np.max(np.abs(rhs - ubar)) <= 1e-10 * np.max(np.abs(ubar))


def test_fixed_point_adjoint_agrees_with_serial_at_endpoints(converged, model):
    _, u, ubar, _, _ = converged
    lam, _ = serial_adjoint(model, u, 2.0, model.cfg.dt)
    assert rel_err(ubar[-1], lam[-1]) <= 1e-8


def test_gradient_accuracy_improves_with_tolerance(model, converged):
    g_ref = converged[3]
    errors = []
    for tol in (0.5, 1e-3, 1e-8):
        pg = Piggyback(solver_for(model), model)
        _, _, g, _ = pg.solve(2.0, tol=tol, max_iters=100)
        errors.append(abs(g[0] - g_ref[0]))
    assert errors[0] >= errors[1] >= errors[2]
    assert errors[2] <= 1e-6 * abs(g_ref[0])


def test_piggyback_limit_exceeded_carries_partial(model):
    pg = Piggyback(solver_for(model), model)
    with pytest.raises(MaxItersExceeded) as info:
        pg.solve(2.0, tol=1e-15, max_iters=3)
    u, ubar, g, record = info.value.partial
    assert record.cycles == 3 and np.isfinite(g).all()


def test_piggyback_rejects_nonpositive_tol(model):
    with pytest.raises(ValueError):
        Piggyback(solver_for(model), model).solve(2.0, tol=0.0)


def test_adjoint_only_iteration_keeps_fixed_point(converged):
    pg, u, ubar, _, _ = converged
    out = pg.adjoint_only_iterate(u, ubar, 2.0)
    assert np.max(np.abs(out - ubar)) <= 1e-10 * np.max(np.abs(ubar))


def test_adjoint_only_iteration_converges_geometrically(converged):
    pg, u, ubar_star, _, _ = converged
    ubar = pg.initial_adjoint()
    errs = []
    for _ in range(3):
        ubar = pg.adjoint_only_iterate(u, ubar, 2.0)
        errs.append(np.linalg.norm(ubar - ubar_star))
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.all(ratios < 0.5), errs


def test_adjoint_only_iteration_decays_without_objective_forcing():
    base = small_model(a_target=0.0)
    solver = solver_for(base)
    u = serial_solve(base, 64, base.cfg.dt, 2.0)
    model = small_model(a_target=base.space_time_average(u))
    pg = Piggyback(solver_for(model), model)
    assert not model.objective_grad_state(u, 2.0).any()
    ubar = np.random.default_rng(0).standard_normal(u.shape)
    ubar[0] = 0.0
    start = np.linalg.norm(ubar)
    for _ in range(20):
        ubar = pg.adjoint_only_iterate(u, ubar, 2.0)
    assert np.linalg.norm(ubar) <= 1e-6 * start


def test_time_lag_estimate(converged):
    record = converged[4]
    lag = estimate_time_lag(record)
    ratios = np.array(record.adjoint_norms) / np.array(record.state_norms)
    assert lag == pytest.approx(ratios.max(), rel=0, abs=0) and np.isfinite(lag)
    with pytest.raises(ValueError):
        estimate_time_lag(ConvergenceRecord())


@pytest.mark.parametrize("workers", [2, 4])
def test_piggyback_is_worker_invariant(model, workers):
    ref = Piggyback(solver_for(model), model).solve(2.0, tol=1e-10)
    with Mgrit(model, 64, model.cfg.dt, workers=workers) as solver:
        out = Piggyback(solver, model).solve(2.0, tol=1e-10)
    for a, b in zip(out[:3], ref[:3]):
        assert np.max(np.abs(a - b)) <= 1e-10
