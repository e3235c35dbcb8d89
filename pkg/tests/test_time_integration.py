import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from alevem.ale_forms import ProblemData, assemble_forms, identity_map, interpolate_ale_map
from alevem.mesh import generate_cvt
from alevem.presets import MOTIONS, decaying_mode, experiment, heat_mode, vortex_field
from alevem.time_integration import (
    CLOSED_FORM,
    ODE_FIELD,
    BoundaryValueError,
    PrescribedMotion,
    ThetaSchemeState,
    apply_dirichlet,
    boundary_values,
    heun_advance_map,
    run_simulation,
    theta_step,
    time_grid,
)
from alevem.vem_core import VemSpace

from conftest import unit_square


def _static_identity():
    return PrescribedMotion(CLOSED_FORM, lambda xi, t: np.asarray(xi, dtype=float), lambda xi, t: np.zeros((len(xi), 2)), stationary=True)


def test_motion_validation():
    with pytest.raises(ValueError):
        PrescribedMotion(CLOSED_FORM, map_fn=None, velocity_fn=vortex_field)
    with pytest.raises(ValueError):
        PrescribedMotion(ODE_FIELD)
    with pytest.raises(ValueError):
        PrescribedMotion("teleport", velocity_fn=vortex_field)


def test_state_validation(cvt_spaces):
    space = cvt_spaces[1]
    ale = identity_map(space)
    forms = assemble_forms(space, ale, ProblemData())
    with pytest.raises(ValueError):
        ThetaSchemeState(np.zeros(space.n_dofs), ale, forms, 0.0, dt=0.1, theta=1.5)
    with pytest.raises(ValueError):
        ThetaSchemeState(np.zeros(space.n_dofs), ale, forms, 0.0, dt=0.0)


def test_time_grid_truncates_last_step():
    t = time_grid(0.0, 0.01, 0.003)
    np.testing.assert_allclose(t, [0.003, 0.006, 0.009, 0.01])
    assert len(time_grid(0.0, 0.0, 0.1)) == 0
    with pytest.raises(ValueError):
        time_grid(1.0, 0.0, 0.1)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_pure_transport_theta_step(cvt_spaces, k):
    space = cvt_spaces[k]
    ale = identity_map(space)
    problem = ProblemData(mu=0.0, b=None, f=None, exact=lambda x, t: np.cos(2 * x[:, 0]) + x[:, 1])
    rho = ale.interpolate_physical(lambda x: problem.exact(x, 0.0))
    forms = assemble_forms(space, ale, problem)
    state = ThetaSchemeState(rho, ale, forms, 0.0, dt=0.05)
    rho1 = theta_step(state, ale, problem, forms)
    np.testing.assert_allclose(rho1, rho, atol=1e-12)


def test_crank_nicolson_amplitude_factor():
    mesh = generate_cvt(400, lloyd_iterations=50)
    space = VemSpace(mesh, 2)
    problem = ProblemData(mu=1.0, b=None, f=None, exact=heat_mode)
    motion = _static_identity()
    dt = 0.01
    res = run_simulation(problem, motion, space, 2, 0.5, dt, dt)
    ale = identity_map(space)
    M = assemble_forms(space, ale, problem).M
    u0 = ale.interpolate_physical(lambda x: heat_mode(x, 0.0))
    factor = (res.rho @ M @ u0) / (u0 @ M @ u0)
    expected = (1 - math.pi ** 2 * dt) / (1 + math.pi ** 2 * dt)
    assert factor == pytest.approx(expected, rel=2e-3)


def test_heun_zero_field_keeps_map(cvt_spaces):
    motion = PrescribedMotion(ODE_FIELD, velocity_fn=lambda x, t: np.zeros_like(x))
    ale = motion.initial_map(cvt_spaces[2], 0.0)
    ale1 = heun_advance_map(ale, motion, 0.1)
    # point DoFs are untouched; moments are re-integrated, so equal to roundoff
    n = cvt_spaces[2].layout.n_point_dofs
    np.testing.assert_array_equal(ale1.map_dofs[:n], ale.map_dofs[:n])
    np.testing.assert_allclose(ale1.map_dofs, ale.map_dofs, atol=1e-14)


def test_vortex_field_value():
    np.testing.assert_allclose(vortex_field(np.array([[0.5, 0.25]])), [[math.sqrt(2), 0.0]], atol=1e-15)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_heun_constant_field_shift(cvt_spaces, k):
    motion = PrescribedMotion(ODE_FIELD, velocity_fn=lambda x, t: np.column_stack([np.ones(len(x)), np.zeros(len(x))]))
    ale = motion.initial_map(cvt_spaces[k], 0.0)
    ale1 = heun_advance_map(ale, motion, 0.1)
    n = cvt_spaces[k].layout.n_point_dofs
    shift = ale1.map_dofs[:n] - ale.map_dofs[:n]
    np.testing.assert_allclose(shift[:, 0], 0.1, atol=1e-14)
    np.testing.assert_allclose(shift[:, 1], 0.0, atol=1e-14)
    # moments are those of the translated identity
    moved = cvt_spaces[k].interpolate(lambda p: p + np.array([0.1, 0.0]))
    np.testing.assert_allclose(ale1.map_dofs, moved, atol=1e-14)
    assert ale1.t == pytest.approx(0.1)


def test_heun_rejects_closed_form(cvt_spaces):
    motion = MOTIONS["ce_linear"]()
    with pytest.raises(ValueError):
        heun_advance_map(motion.initial_map(cvt_spaces[1], 0.0), motion, 0.1)


def test_apply_dirichlet_homogeneous():
    G = sp.csr_matrix(np.array([[4.0, -1, 0], [-1, 4, -1], [0, -1, 4]]))
    Gd, rd = apply_dirichlet(G, np.ones(3), [0, 2], [0.0, 0.0])
    x = np.linalg.solve(Gd.toarray(), rd)
    assert x[0] == 0.0 and x[2] == 0.0
    assert x[1] == pytest.approx(0.25)
    np.testing.assert_array_equal(Gd.toarray(), Gd.toarray().T)


def test_apply_dirichlet_lifts_values():
    G = sp.csr_matrix(np.array([[2.0, -1, 0], [-1, 2, -1], [0, -1, 2]]))
    x_true = np.array([1.0, 2.0, 3.0])
    Gd, rd = apply_dirichlet(G, G @ x_true, [0, 2], [1.0, 3.0])
    np.testing.assert_allclose(np.linalg.solve(Gd.toarray(), rd), x_true)


def test_apply_dirichlet_errors():
    G = sp.identity(3, format="csr")
    with pytest.raises(BoundaryValueError):
        apply_dirichlet(G, np.zeros(3), [0, 2], [1.0])
    with pytest.raises(BoundaryValueError):
        apply_dirichlet(G, np.zeros(3), [0, 2], [1.0, np.nan])


def test_boundary_values_vanish_for_sine_mode(cvt_spaces):
    ale = identity_map(cvt_spaces[3])
    problem = ProblemData(exact=decaying_mode)
    assert np.abs(boundary_values(problem, ale, 0.0)).max() < 1e-14


def test_zero_steps_returns_initial_interpolant(cvt_spaces):
    ex = experiment("ce_static")
    space = cvt_spaces[2]
    res = run_simulation(ex.problem, ex.motion, space, 2, 0.5, 0.0, 1e-3)
    expected = ex.motion.initial_map(space, 0.0).interpolate_physical(lambda x: ex.problem.exact(x, 0.0))
    np.testing.assert_array_equal(res.rho, expected)
    assert res.n_steps == 0


@pytest.mark.parametrize("theta", [0.0, 0.5, 1.0])
def test_single_free_dof_reduces_to_scalar_recursion(theta):
    # unit square, k=2, zero boundary data: only the moment DoF evolves, so
    # the scheme is the scalar recursion (m - dt(1-theta)a) / (m + dt theta a)
    space = VemSpace(unit_square(), 2)
    problem = ProblemData(mu=1.0, exact=lambda x, t: np.zeros(len(x)))
    forms = assemble_forms(space, identity_map(space), problem)
    free = np.setdiff1d(np.arange(space.n_dofs), space.boundary_dofs)
    assert len(free) == 1
    m, a = forms.M[free[0], free[0]], forms.A[free[0], free[0]]
    dt, n = 0.01, 7
    bubble = lambda x: x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1])
    res = run_simulation(problem, _static_identity(), space, 2, theta, n * dt, dt, initial=bubble)
    rho0 = space.interpolate(bubble)[free[0]]
    factor = (m - dt * (1 - theta) * a) / (m + dt * theta * a)
    assert res.rho[free[0]] == pytest.approx(rho0 * factor ** n, rel=1e-12)


@pytest.mark.parametrize("name", ["ce_linear", "vorticial", "oscillating"])
def test_driver_matches_theta_step(cvt_spaces, name):
    # one step of the optimised driver equals the plain assembled theta step
    ex = experiment(name)
    space = cvt_spaces[2]
    dt = 1e-3
    res = run_simulation(ex.problem, ex.motion, space, 2, 0.5, dt, dt)
    ale0 = ex.motion.initial_map(space, 0.0)
    rho0 = ale0.interpolate_physical(lambda x: ex.problem.exact(x, 0.0))
    state = ThetaSchemeState(rho0, ale0, assemble_forms(space, ale0, ex.problem, 0.0), 0.0, dt)
    ale1 = ex.motion.advance(ale0, dt)
    rho1 = theta_step(state, ale1, ex.problem)
    np.testing.assert_allclose(res.rho, rho1, rtol=0, atol=1e-11 * np.abs(rho1).max())


def test_runs_are_bit_identical(cvt_spaces):
    ex = experiment("oscillating")
    a = run_simulation(ex.problem, ex.motion, cvt_spaces[1], 1, 0.5, 3e-3, 1e-3)
    b = run_simulation(ex.problem, ex.motion, cvt_spaces[1], 1, 0.5, 3e-3, 1e-3)
    np.testing.assert_array_equal(a.rho, b.rho)


def test_run_validation(cvt_spaces):
    ex = experiment("ce_static")
    with pytest.raises(ValueError):
        run_simulation(ex.problem, ex.motion, cvt_spaces[1], 1, 1.5, 0.01, 1e-3)
    with pytest.raises(ValueError):
        run_simulation(ex.problem, ex.motion, cvt_spaces[1], 2, 0.5, 0.01, 1e-3)


@settings(max_examples=10, deadline=None)
@given(n_steps=st.integers(1, 30), dt=st.floats(1e-3, 0.2), k=st.sampled_from([1, 2, 3]))
def test_pure_transport_invariant_over_many_steps(cvt_spaces, n_steps, dt, k):
    space = cvt_spaces[k]
    f0 = lambda x: np.exp(x[:, 0]) * np.sin(2 * x[:, 1])
    problem = ProblemData(mu=0.0, exact=lambda x, t: f0(x))
    res = run_simulation(problem, _static_identity(), space, k, 0.5, n_steps * dt, dt)
    rho0 = identity_map(space).interpolate_physical(f0)
    np.testing.assert_allclose(res.rho, rho0, atol=1e-10)
