"""Backward-in-time adjoint solve and total control derivatives.

The discretized trajectory satisfies one block of model equations per
time level: the steady-state block at level 0 and one implicit step per
later level.  Stacked over time the Jacobian is block lower bidiagonal,
so the transposed (adjoint) system is solved backwards with one sparse
transposed factorization per level; the total derivative of a scalar
functional then needs no further linear solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from .sim import Simulator, Trajectory


@dataclass(frozen=True)
class AdjointState:
    """Adjoint vectors xi_n, one per time level 0..M."""

    xi: np.ndarray  # (M+1, N_y)


def _solve_transposed(matrix, rhs):
    return splu(matrix.T.tocsc()).solve(rhs)


def adjoint_sweep(simulator: Simulator, trajectory: Trajectory,
                  dj_dy: np.ndarray) -> AdjointState:
    """Solve the stacked adjoint equation for given objective partials.

    dj_dy has one row per time level.  Level M is the recursion base;
    level 0 uses the steady-state block, whose state Jacobian is the sum
    of the within-step blocks evaluated at (y_0, y_0).
    """
    asm = simulator.assembler
    dt = simulator.scenario.dt
    states = trajectory.states
    control = trajectory.control
    m = trajectory.step_count
    dj_dy = np.asarray(dj_dy, dtype=float)
    if dj_dy.shape != states.shape:
        raise ValueError("objective partials do not match the trajectory")

    xi = np.zeros_like(states)
    carry = np.zeros(asm.index.size)   # (dE_{n+1}/dy_n)^T xi_{n+1}
    for n in range(m, -1, -1):
        if n == 0:
            jac_next, jac_prev, _ = asm.jacobian(
                states[0], states[0], control[0], simulator.snapshots[0], dt)
            block = (jac_next + jac_prev).tocsc()
            xi[0] = _solve_transposed(block, -dj_dy[0] - carry)
            break
        jac_next, jac_prev, _ = asm.jacobian(
            states[n - 1], states[n], control[n], simulator.snapshots[n], dt)
        xi[n] = _solve_transposed(jac_next, -dj_dy[n] - carry)
        carry = jac_prev.T @ xi[n]
    return AdjointState(xi)


def total_gradient(simulator: Simulator, trajectory: Trajectory,
                   adjoint: AdjointState, dj_du: np.ndarray) -> np.ndarray:
    """dJ/du_n = dJ/du_n|direct + xi_n . dE_n/du_n, per time level (Pa^-1)."""
    asm = simulator.assembler
    _, _, d_du = asm.jacobian(trajectory.states[0], trajectory.states[0],
                              trajectory.control[0], simulator.snapshots[0],
                              simulator.scenario.dt)
    dj_du = np.asarray(dj_du, dtype=float)
    return dj_du + adjoint.xi @ d_du


def fd_gradient(simulator: Simulator, functional, control: np.ndarray,
                components, h: float = 1.0e3) -> np.ndarray:
    """Central finite differences of functional(trajectory, control).

    `h` is the control perturbation in Pa (default 10^3 Pa, about
    0.01 bar on the physical scale).  Only the requested components are
    evaluated; each costs two full simulations.
    """
    control = np.asarray(control, dtype=float)
    out = np.full(len(control), np.nan)
    for j in components:
        up = control.copy()
        up[j] += h
        down = control.copy()
        down[j] -= h
        f_up = functional(simulator.run(up), up)
        f_down = functional(simulator.run(down), down)
        out[j] = (f_up - f_down) / (2.0 * h)
    return out
