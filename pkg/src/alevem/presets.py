"""Domain motions and manufactured problems for the benchmark experiments.

Forcings were derived by hand from f = rho_t - mu lap(rho) + div(b rho) and
are checked against finite differences of the exact solution by
:func:`check_forcing` before a run starts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ale_forms import ProblemData
from .time_integration import CLOSED_FORM, ODE_FIELD, PrescribedMotion

PI = np.pi
FINAL_TIME = 0.01
OSC_AMPLITUDE = 0.1
OSC_UX = 20.0
OSC_UY = 20.0


class ForcingCheckError(Exception):
    pass


def _xy(p):
    p = np.asarray(p, dtype=float)
    return p[:, 0], p[:, 1]


# --------------------------------------------------------------------------
# maps


def ce_map(xi, t=0.0):
    x, y = _xy(xi)
    return np.column_stack([x + x * y * (1 - x) / 2, y + x * y * (1 - y) / 2])


def warped_square_map(xi, t=0.0):
    x, y = _xy(xi)
    return np.column_stack([np.sin(PI * x / 3), np.exp(y)])


def zero_velocity(xi, t=0.0):
    return np.zeros((len(xi), 2))


def ce_linear_map(xi, t, T=FINAL_TIME):
    x, y = _xy(xi)
    s = t / (2 * T)
    return np.column_stack([x + s * x * y * (1 - x), y + s * x * y * (1 - y)])


def ce_linear_velocity(xi, t, T=FINAL_TIME):
    x, y = _xy(xi)
    return np.column_stack([x * y * (1 - x), x * y * (1 - y)]) / (2 * T)


def vortex_field(x, t=0.0):
    a, b = _xy(x)
    return np.column_stack([2 * np.sin(PI * a) * np.cos(PI * b), -2 * np.cos(PI * a) * np.sin(PI * b)])


def oscillating_map(xi, t, amp=OSC_AMPLITUDE, uy=OSC_UY):
    x, y = _xy(xi)
    return np.column_stack([2 * x, y + amp * np.sin(PI * uy * t)])


def oscillating_velocity(xi, t, amp=OSC_AMPLITUDE, uy=OSC_UY):
    w = np.zeros((len(xi), 2))
    w[:, 1] = amp * uy * PI * np.cos(PI * uy * t)
    return w


MOTIONS = {
    "ce_static": lambda: PrescribedMotion(CLOSED_FORM, ce_map, zero_velocity, stationary=True),
    "warped_square": lambda: PrescribedMotion(CLOSED_FORM, warped_square_map, zero_velocity, stationary=True),
    "ce_linear": lambda: PrescribedMotion(CLOSED_FORM, ce_linear_map, ce_linear_velocity),
    "vorticial": lambda: PrescribedMotion(ODE_FIELD, velocity_fn=vortex_field),
    "oscillating": lambda: PrescribedMotion(CLOSED_FORM, oscillating_map, oscillating_velocity),
}


# --------------------------------------------------------------------------
# problems


def position_velocity(x, t=0.0):
    return np.asarray(x, dtype=float).copy()


def decaying_mode(x, t, rate=PI ** 2):
    a, b = _xy(x)
    return np.exp(-rate * t) * np.sin(PI * a) * np.sin(PI * b)


def decaying_mode_forcing(x, t):
    """Forcing for exp(-pi^2 t) sin(pi x) sin(pi y) with mu = 1 and b = x."""
    a, b = _xy(x)
    e = np.exp(-PI ** 2 * t)
    sx, sy, cx, cy = np.sin(PI * a), np.sin(PI * b), np.cos(PI * a), np.cos(PI * b)
    rho = e * sx * sy
    return (PI ** 2 + 2) * rho + PI * e * (a * cx * sy + b * sx * cy)


def heat_mode(x, t):
    return decaying_mode(x, t, rate=2 * PI ** 2)


def zero_forcing(x, t):
    return np.zeros(len(x))


def travelling_wave(x, t, amp=OSC_AMPLITUDE, ux=OSC_UX, uy=OSC_UY):
    a, b = _xy(x)
    return np.exp(-PI ** 2 * t) * np.sin(PI * (b - amp * np.sin(PI * uy * t))) * np.sin(PI * (a - ux * t))


def travelling_wave_forcing(x, t, amp=OSC_AMPLITUDE, ux=OSC_UX, uy=OSC_UY):
    a, b = _xy(x)
    e = np.exp(-PI ** 2 * t)
    X = PI * (a - ux * t)
    Y = PI * (b - amp * np.sin(PI * uy * t))
    rho = e * np.sin(X) * np.sin(Y)
    shift = amp * PI * uy * np.cos(PI * uy * t)
    return (PI ** 2 + 2) * rho + PI * e * ((a - ux) * np.sin(Y) * np.cos(X) + (b - shift) * np.cos(Y) * np.sin(X))


def _decaying_problem():
    return ProblemData(mu=1.0, b=position_velocity, f=decaying_mode_forcing, exact=decaying_mode, stationary_b=True)


def _heat_problem():
    return ProblemData(mu=1.0, b=None, f=zero_forcing, exact=heat_mode, stationary_b=True)


PROBLEMS = {
    "ce_static": _decaying_problem,
    "warped_square": _decaying_problem,
    "ce_linear": _heat_problem,
    "vorticial": _heat_problem,
    "oscillating": lambda: ProblemData(
        mu=1.0, b=position_velocity, f=travelling_wave_forcing, exact=travelling_wave, stationary_b=True
    ),
}


@dataclass
class Experiment:
    name: str
    problem: ProblemData
    motion: PrescribedMotion


def experiment(name):
    if name not in MOTIONS:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(MOTIONS)}")
    return Experiment(name, PROBLEMS[name](), MOTIONS[name]())


def _residual_fd(problem, x, t, eps=1e-3, eps_t=1e-4):
    """rho_t - mu lap(rho) + div(b rho) by fourth-order central differences."""
    u = problem.exact

    def d1(fn, shift, h=eps):
        return (-fn(2 * shift) + 8 * fn(shift) - 8 * fn(-shift) + fn(-2 * shift)) / (12 * h)

    def d2(fn, shift):
        return (-fn(2 * shift) + 16 * fn(shift) - 30 * fn(0 * shift) + 16 * fn(-shift) - fn(-2 * shift)) / (12 * eps ** 2)

    ex, ey = np.array([eps, 0.0]), np.array([0.0, eps])
    rho_t = d1(lambda s: u(x, t + s), eps_t, eps_t)
    lap = d2(lambda s: u(x + s, t), ex) + d2(lambda s: u(x + s, t), ey)
    res = rho_t - problem.mu * lap
    if problem.b is not None:
        for c, e in enumerate((ex, ey)):
            res += d1(lambda s, c=c: problem.b(x + s, t)[:, c] * u(x + s, t), e)
    return res


def check_forcing(problem, n_points=20, rtol=1e-6, seed=0, box=((0.0, 2.0), (0.0, 1.5)), t_max=FINAL_TIME):
    """Compare the forcing with a finite-difference residual of the exact solution.

    The tolerance is relative to the largest forcing (or solution) magnitude
    over the sample, so points where f happens to vanish do not blow up the
    ratio. Returns the observed relative error.
    """
    if problem.exact is None:
        raise ForcingCheckError("no exact solution to check the forcing against")
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = box
    x = np.column_stack([rng.uniform(x0, x1, n_points), rng.uniform(y0, y1, n_points)])
    t = rng.uniform(0.0, t_max, n_points)
    f = np.zeros(n_points) if problem.f is None else np.asarray(problem.f(x, t), dtype=float)
    fd = _residual_fd(problem, x, t)
    scale = max(np.abs(f).max(), np.abs(problem.exact(x, t)).max(), 1e-300)
    err = float(np.abs(f - fd).max() / scale)
    if not err <= rtol:
        raise ForcingCheckError(f"forcing disagrees with finite differences: relative error {err:.2e} > {rtol:.0e}")
    return err


def time_step(h, h0, k, dt0=1e-3):
    """Step size refined with the mesh so that dt^2 ~ h^(k+1)."""
    return dt0 * (h / h0) ** ((k + 1) / 2)
