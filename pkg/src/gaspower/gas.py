"""Gas physics on a single pipe.

Pressure law, Prandtl-Colebrook friction, flux and source terms of the
isothermal/isentropic Euler system, and the implicit box scheme residual
with its Jacobian blocks.  All functions are pure and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .model import GasConstants, Pipe

# Below this Reynolds number the Colebrook equation degenerates; the
# fully-rough limit is used instead.  The source term still vanishes at
# q = 0 through the q|q| factor.
REYNOLDS_ROUGH_LIMIT = 100.0

_COLEBROOK_TOL = 1e-13
_COLEBROOK_MAX_ITER = 100
_LN10 = np.log(10.0)

_DEFAULTS = GasConstants()


@dataclass(frozen=True)
class PipeState:
    """Densities and flows at the grid points 0..cell_count of one pipe."""

    rho: np.ndarray  # kg/m^3
    q: np.ndarray    # kg/(m^2 s)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if rho.shape != q.shape or rho.ndim != 1:
            raise ValueError("rho and q must be 1-d arrays of equal length")
        if np.any(rho <= 0):
            raise ValueError("densities must be positive")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "q", q)


def pressure_of_density(rho, constants: GasConstants = _DEFAULTS):
    """p(rho) = kappa * rho**gamma.  Accepts scalars or arrays; rho >= 0."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("density must be >= 0")
    p = constants.kappa * rho**constants.gamma
    return p if p.ndim else float(p)


def density_of_pressure(p, constants: GasConstants = _DEFAULTS):
    """Inverse pressure law, rho = (p/kappa)**(1/gamma)."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("pressure must be >= 0")
    rho = (p / constants.kappa) ** (1.0 / constants.gamma)
    return rho if rho.ndim else float(rho)


def dpressure_drho(rho, constants: GasConstants = _DEFAULTS):
    rho = np.asarray(rho, dtype=float)
    d = constants.kappa * constants.gamma * rho ** (constants.gamma - 1.0)
    return d if d.ndim else float(d)


def rough_friction_factor(diameter: float, roughness: float) -> float:
    """Fully-rough (high Reynolds) limit of the Colebrook equation."""
    x = -2.0 * np.log10(roughness / (3.71 * diameter))
    return 1.0 / (x * x)


def friction_factor_and_derivative(q, diameter: float, roughness: float,
                                   eta: float = _DEFAULTS.eta):
    """Colebrook friction factor lambda(q) and d lambda / d q, vectorized.

    Solves 1/sqrt(lam) = -2 log10(2.51/(Re sqrt(lam)) + k/(3.71 d)) with
    Re = d |q| / eta by damped fixed-point iteration on x = 1/sqrt(lam);
    the derivative comes from implicit differentiation of the same
    equation.  Below REYNOLDS_ROUGH_LIMIT the rough limit (with zero
    derivative) is returned.
    """
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    if roughness < 0:
        raise ValueError("roughness must be >= 0")
    q = np.asarray(q, dtype=float)
    scalar = q.ndim == 0
    q = np.atleast_1d(q)

    b = roughness / (3.71 * diameter)
    x_rough = -2.0 * np.log10(b)
    re = diameter * np.abs(q) / eta
    rough = re < REYNOLDS_ROUGH_LIMIT
    re_safe = np.where(rough, REYNOLDS_ROUGH_LIMIT, re)
    a = 2.51 / re_safe

    x = np.full_like(q, x_rough)
    omega = 1.0
    delta_prev = np.inf
    for _ in range(_COLEBROOK_MAX_ITER):
        x_new = -2.0 * np.log10(a * x + b)
        if omega != 1.0:
            x_new = (1.0 - omega) * x + omega * x_new
        delta = np.max(np.abs(x_new - x))
        if delta > delta_prev:
            omega *= 0.5
            continue
        x, delta_prev = x_new, delta
        if delta < _COLEBROOK_TOL:
            break
    else:
        raise RuntimeError("Colebrook iteration did not converge")

    lam = 1.0 / (x * x)
    # implicit derivative through G(x, Re) = x + 2 log10(a x + b) = 0
    denom = a * x + b
    dG_dx = 1.0 + 2.0 * a / (_LN10 * denom)
    dG_dre = -2.0 * a * x / (_LN10 * denom * re_safe)
    dx_dre = -dG_dre / dG_dx
    dlam_dq = (-2.0 / x**3) * dx_dre * (diameter / eta) * np.sign(q)
    dlam_dq = np.where(rough, 0.0, dlam_dq)
    lam = np.where(rough, 1.0 / (x_rough * x_rough), lam)

    if scalar:
        return float(lam[0]), float(dlam_dq[0])
    return lam, dlam_dq


def friction_factor(q, diameter: float, roughness: float,
                    eta: float = _DEFAULTS.eta):
    """Friction factor lambda satisfying the Colebrook equation."""
    lam, _ = friction_factor_and_derivative(q, diameter, roughness, eta)
    return lam


def source_term(rho, q, pipe: Pipe, constants: GasConstants = _DEFAULTS):
    """Momentum source S(rho, q) = -lambda(q)/(2 d) * q|q|/rho."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("density must be positive")
    lam, _ = friction_factor_and_derivative(q, pipe.diameter, pipe.roughness,
                                            constants.eta)
    q = np.asarray(q, dtype=float)
    s = -lam / (2.0 * pipe.diameter) * q * np.abs(q) / rho
    return s if s.ndim else float(s)


def source_term_with_derivatives(rho, q, pipe: Pipe,
                                 constants: GasConstants = _DEFAULTS,
                                 exact_friction_derivative: bool = True):
    """S and its partials (dS/drho, dS/dq) for Jacobian assembly."""
    rho = np.asarray(rho, dtype=float)
    q = np.asarray(q, dtype=float)
    lam, dlam = friction_factor_and_derivative(q, pipe.diameter,
                                               pipe.roughness, constants.eta)
    if not exact_friction_derivative:
        dlam = np.zeros_like(np.asarray(lam))
    c = 1.0 / (2.0 * pipe.diameter)
    s = -c * lam * q * np.abs(q) / rho
    ds_drho = c * lam * q * np.abs(q) / rho**2
    ds_dq = -c * (dlam * q * np.abs(q) + lam * 2.0 * np.abs(q)) / rho
    return s, ds_drho, ds_dq


def flux(rho, q, constants: GasConstants = _DEFAULTS):
    """Flux vector (q, p(rho) + q^2/rho) of the Euler system."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("density must be positive")
    q = np.asarray(q, dtype=float)
    f2 = pressure_of_density(rho, constants) + q * q / rho
    return np.stack([np.broadcast_to(q, f2.shape), f2]) if f2.ndim \
        else np.array([float(q), float(f2)])


def _box_blocks(prev: PipeState, next_: PipeState, dt: float, dx: float,
                pipe: Pipe, constants: GasConstants,
                exact_friction_derivative: bool = True):
    """Residuals and stencil derivatives of the implicit box scheme.

    Returns a dict of arrays indexed by the cell interval j = 1..n; the
    L/R suffix refers to the grid points j-1 and j.  The scheme for a
    balance law y_t + f(y)_x = g(y) averages states over the interval:

        (Y_{j-1} + Y_j)/2 |_new = (Y_{j-1} + Y_j)/2 |_old
            - dt/dx (f(Y_j) - f(Y_{j-1}))|_new + dt (g(Y_j)+g(Y_{j-1}))/2 |_new
    """
    if prev.rho.shape != next_.rho.shape:
        raise ValueError("pipe states have mismatched lengths")
    if dt <= 0 or dx <= 0:
        raise ValueError("dt and dx must be positive")
    rho, q = next_.rho, next_.q
    rho_o, q_o = prev.rho, prev.q
    r = dt / dx

    p = pressure_of_density(rho, constants)
    dp = dpressure_drho(rho, constants)
    f2 = p + q * q / rho
    df2_drho = dp - (q / rho) ** 2
    df2_dq = 2.0 * q / rho
    s, ds_drho, ds_dq = source_term_with_derivatives(
        rho, q, pipe, constants, exact_friction_derivative)

    res_mass = (0.5 * (rho[:-1] + rho[1:]) - 0.5 * (rho_o[:-1] + rho_o[1:])
                + r * (q[1:] - q[:-1]))
    res_mom = (0.5 * (q[:-1] + q[1:]) - 0.5 * (q_o[:-1] + q_o[1:])
               + r * (f2[1:] - f2[:-1]) - dt * 0.5 * (s[1:] + s[:-1]))

    n = len(res_mass)
    half = np.full(n, 0.5)
    return {
        "res_mass": res_mass,
        "res_mom": res_mom,
        # mass row, w.r.t. new states
        "m_drho_L": half, "m_drho_R": half,
        "m_dq_L": np.full(n, -r), "m_dq_R": np.full(n, r),
        # momentum row, w.r.t. new states
        "q_drho_L": -r * df2_drho[:-1] - dt * 0.5 * ds_drho[:-1],
        "q_drho_R": r * df2_drho[1:] - dt * 0.5 * ds_drho[1:],
        "q_dq_L": half - r * df2_dq[:-1] - dt * 0.5 * ds_dq[:-1],
        "q_dq_R": half + r * df2_dq[1:] - dt * 0.5 * ds_dq[1:],
        # w.r.t. old states (needed by the adjoint)
        "m_drho_L_prev": -half, "m_drho_R_prev": -half,
        "q_dq_L_prev": -half, "q_dq_R_prev": -half,
    }


def box_scheme_residual(prev: PipeState, next_: PipeState, dt: float,
                        dx: float, pipe: Pipe,
                        constants: GasConstants = _DEFAULTS) -> np.ndarray:
    """Residual of the implicit box scheme, 2 entries per cell interval.

    Ordered as [mass rows 1..n, momentum rows 1..n].
    """
    blocks = _box_blocks(prev, next_, dt, dx, pipe, constants)
    return np.concatenate([blocks["res_mass"], blocks["res_mom"]])


def box_scheme_jacobian(prev: PipeState, next_: PipeState, dt: float,
                        dx: float, pipe: Pipe,
                        constants: GasConstants = _DEFAULTS,
                        exact_friction_derivative: bool = True):
    """Sparse derivatives of the box residual.

    Returns (J_next, J_prev), each of shape (2n, 2(n+1)) with columns
    ordered [rho_0..rho_n, q_0..q_n].
    """
    blocks = _box_blocks(prev, next_, dt, dx, pipe, constants,
                         exact_friction_derivative)
    n = len(blocks["res_mass"])
    npts = n + 1
    jl = np.arange(n)       # left grid point of interval j
    jr = jl + 1

    rows, cols, vals = [], [], []

    def add(row, col, val):
        rows.append(row)
        cols.append(col)
        vals.append(val)

    add(jl, jl, blocks["m_drho_L"])
    add(jl, jr, blocks["m_drho_R"])
    add(jl, npts + jl, blocks["m_dq_L"])
    add(jl, npts + jr, blocks["m_dq_R"])
    add(n + jl, jl, blocks["q_drho_L"])
    add(n + jl, jr, blocks["q_drho_R"])
    add(n + jl, npts + jl, blocks["q_dq_L"])
    add(n + jl, npts + jr, blocks["q_dq_R"])
    j_next = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n, 2 * npts)).tocsr()

    rows, cols, vals = [], [], []
    add(jl, jl, blocks["m_drho_L_prev"])
    add(jl, jr, blocks["m_drho_R_prev"])
    add(n + jl, npts + jl, blocks["q_dq_L_prev"])
    add(n + jl, npts + jr, blocks["q_dq_R_prev"])
    j_prev = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n, 2 * npts)).tocsr()

    return j_next, j_prev
