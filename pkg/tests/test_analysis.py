import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alevem.analysis import (
    EocTable,
    ErrorReport,
    eoc,
    fitted_rate,
    h1_error,
    l1_mesh_error,
    l1_solution_error,
    l2_error,
    pairwise_rates,
)
from alevem.ale_forms import identity_map, interpolate_ale_map
from alevem.presets import zero_velocity


def test_pairwise_rates_exact_powers():
    h = [0.1, 0.05, 0.025]
    e = [c * 3.0 for c in (h[0] ** 2, h[1] ** 2, h[2] ** 2)]
    np.testing.assert_allclose(pairwise_rates(h, e), [2.0, 2.0])
    assert fitted_rate(h, e) == pytest.approx(2.0)


def test_rates_skip_missing_or_zero():
    assert pairwise_rates([0.1, 0.05, 0.025], [1.0, 0.0, None]) == [None, None]
    assert fitted_rate([0.1, 0.05], [1.0, 0.0]) is None


def test_headline_is_last_pairwise_rate():
    # last pairwise rate of a table with hand-picked values
    t = EocTable([ErrorReport(0.2, 10, l2=1e-2), ErrorReport(0.1, 40, l2=2.5e-3), ErrorReport(0.05, 160, l2=3.125e-4)])
    eoc(t)
    assert t.headline("l2") == pytest.approx(3.0)
    assert t.rates["l2"][0] == pytest.approx(2.0)
    assert t.headline("h1") is None


def test_table_needs_decreasing_h():
    with pytest.raises(ValueError):
        EocTable([ErrorReport(0.1, 10, l2=1.0), ErrorReport(0.1, 40, l2=0.5)])


def test_report_rejects_negative_or_nan():
    with pytest.raises(ValueError):
        ErrorReport(0.1, 10, l2=-1.0)
    with pytest.raises(ValueError):
        ErrorReport(0.1, 10, h1=float("nan"))


@settings(max_examples=40, deadline=None)
@given(
    rate=st.floats(0.5, 5.0),
    c=st.floats(1e-3, 1e3),
    h0=st.floats(0.05, 0.5),
    n=st.integers(2, 6),
)
def test_rates_recover_power_law(rate, c, h0, n):
    h = [h0 / 2 ** i for i in range(n)]
    e = [c * x ** rate for x in h]
    for r in pairwise_rates(h, e):
        assert r == pytest.approx(rate, rel=1e-9)
    assert fitted_rate(h, e) == pytest.approx(rate, rel=1e-9)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_errors_vanish_for_the_interpolant(cvt_spaces, k):
    space = cvt_spaces[k]
    ale = identity_map(space)
    f = lambda x: np.sin(3 * x[:, 0]) * x[:, 1]
    rho = ale.interpolate_physical(f)
    assert l2_error(rho, f, ale) == 0.0
    assert h1_error(rho, f, ale) == 0.0
    assert l1_solution_error(rho, f, ale) == 0.0


@pytest.mark.parametrize("k", [1, 2, 3])
def test_constant_offset_norms(cvt_spaces, k):
    # rho_h = I(u) + c: L2 error is c sqrt(|Omega|), H1 error is zero
    space = cvt_spaces[k]
    ale = interpolate_ale_map(lambda xi, t: 2.0 * xi, zero_velocity, space, 0.0)
    f = lambda x: x[:, 0] ** 2
    c = 0.3
    rho = ale.interpolate_physical(f) + c * space.interpolate(lambda x: np.ones(len(x)))
    assert l2_error(rho, f, ale) == pytest.approx(c * 2.0, rel=1e-12)
    assert h1_error(rho, f, ale) < 1e-10


def test_linear_offset_h1(cvt_spaces):
    # rho_h - I(u) = x on the physical square [0, 2]^2: |grad| = 1, area 4
    space = cvt_spaces[2]
    ale = interpolate_ale_map(lambda xi, t: 2.0 * xi, zero_velocity, space, 0.0)
    f = lambda x: np.zeros(len(x))
    rho = ale.interpolate_physical(lambda x: x[:, 0])
    assert h1_error(rho, f, ale) == pytest.approx(2.0, rel=1e-12)
    # int_0^2 int_0^2 x^2 = 16/3
    assert l2_error(rho, f, ale) == pytest.approx(math.sqrt(16 / 3), rel=1e-12)


def test_l1_mesh_error(disk60):
    from alevem.vem_core import VemSpace

    # k=1 boundary DoFs are the snapped vertices
    ale = identity_map(VemSpace(disk60, 1))
    assert l1_mesh_error(ale, 0.5) < 1e-14
    assert l1_mesh_error(ale, 0.6) == pytest.approx(0.1)
    # edge nodes of the straight polygon lie inside the circle
    assert 0 < l1_mesh_error(identity_map(VemSpace(disk60, 2)), 0.5) < 0.01


@pytest.mark.parametrize("k", [1, 2, 3])
def test_interpolant_convergence_orders(k):
    # exact function and gradient sampled at the quadrature points, no
    # interpolant involved on the reference side
    from alevem.mesh import generate_cvt, global_mesh_size
    from alevem.vem_core import VemSpace

    f = lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def grad_f(x):
        s, c = np.sin(np.pi * x), np.cos(np.pi * x)
        return np.pi * np.column_stack([c[:, 0] * s[:, 1], s[:, 0] * c[:, 1]])

    reports = []
    for n in (50, 200, 800):
        mesh = generate_cvt(n, lloyd_iterations=40)
        space = VemSpace(mesh, k)
        u = space.interpolate(f)
        l2 = h1 = 0.0
        for g, v, gr in zip(space.groups, space.pi_zero_at_quadrature(u), space.pi_one_at_quadrature(u)):
            x = g.qp.reshape(-1, 2)
            l2 += float((g.qw * (v - f(x).reshape(v.shape)) ** 2).sum())
            h1 += float((g.qw[..., None] * (gr - grad_f(x).reshape(gr.shape)) ** 2).sum())
        reports.append(ErrorReport(global_mesh_size(mesh), space.n_dofs, l2=math.sqrt(l2), h1=math.sqrt(h1)))
    table = EocTable(reports)
    eoc(table)
    assert table.headline("l2") == pytest.approx(k + 1, abs=0.3)
    assert table.headline("h1") == pytest.approx(k, abs=0.3)


@settings(max_examples=20, deadline=None)
@given(angle=st.floats(0.0, 2 * math.pi), k=st.sampled_from([1, 2, 3]))
def test_l1_mesh_error_rotation_invariant(disk60, angle, k):
    from alevem.ale_forms import AleMap

    space = _disk_spaces(disk60)[k]
    base = interpolate_ale_map(lambda xi, t: 1.1 * xi + 0.01 * xi ** 2, zero_velocity, space, 0.0)
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    turned = AleMap(space, base.map_dofs @ rot.T, np.zeros_like(base.map_dofs), 0.0)
    assert l1_mesh_error(turned, 0.5) == pytest.approx(l1_mesh_error(base, 0.5), rel=1e-12)


_SPACES = {}


def _disk_spaces(mesh):
    from alevem.vem_core import VemSpace

    if not _SPACES:
        _SPACES.update({k: VemSpace(mesh, k) for k in (1, 2, 3)})
    return _SPACES
