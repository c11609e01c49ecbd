"""Coupled per-step system: assembly, Newton solve, and trajectories.

One time level stacks, in a fixed order, the unknowns of every pipe
(densities and flows at its grid points), one density-equivalent pressure
unknown per gas node, one flux unknown per compressor, and V, phi, P, Q
for every bus.  The step residual concatenates the box-scheme rows, the
node coupling and boundary rows, the compressor pressure equations, the
powerflow equations and the bus boundary rows; it is square by
construction and solved with a damped Newton method step by step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import gas, power
from .model import (FLOW_BOUNDARY, POWER_COUPLING, PQ, PRESSURE_BOUNDARY, PV,
                    SLACK, CoupledNetwork, nodal_admittance, validate_network)

log = logging.getLogger(__name__)

# Node mass-balance rows are written in kg/s and divided by this reference
# so that one Newton tolerance governs the mixed-unit system; momentum and
# compressor rows are divided by kappa for the same reason.
MASS_FLOW_SCALE = 100.0

# dt/dx regime (s/m) the implicit box scheme is routinely run at; strong
# deviations are logged, not rejected.
_REFERENCE_DT_DX = 900.0 / 1000.0

# pipe/compressor flux (kg/(m^2 s)) seeded into the steady-state guess
_STEADY_FLOW_SEED = 10.0

BUS_QUANTITIES = ("V", "phi", "P", "Q")


class SimulationError(Exception):
    pass


class MaxIterationsExceeded(SimulationError):
    def __init__(self, message, residual_norm, iterations):
        super().__init__(f"{message} (residual {residual_norm:.3e} "
                         f"after {iterations} iterations)")
        self.residual_norm = residual_norm
        self.iterations = iterations


class SingularJacobian(SimulationError):
    pass


class VariableIndex:
    """Bijective map between (entity, quantity, grid point) and flat indices."""

    def __init__(self, network: CoupledNetwork):
        self._map: dict[tuple, int] = {}
        self._labels: list[tuple] = []
        self.pipe_rho: dict[str, slice] = {}
        self.pipe_q: dict[str, slice] = {}
        self.node_rho: dict[str, int] = {}
        self.comp_q: dict[str, int] = {}
        self.bus: dict[tuple[str, str], int] = {}

        def push(label):
            self._map[label] = len(self._labels)
            self._labels.append(label)

        for pipe in network.gas.pipes:
            npts = pipe.cell_count + 1
            start = len(self._labels)
            for j in range(npts):
                push((pipe.id, "rho", j))
            self.pipe_rho[pipe.id] = slice(start, start + npts)
            start = len(self._labels)
            for j in range(npts):
                push((pipe.id, "q", j))
            self.pipe_q[pipe.id] = slice(start, start + npts)
        for node in network.gas.nodes:
            self.node_rho[node.id] = len(self._labels)
            push((node.id, "rho_node", None))
        for comp in network.gas.compressors:
            self.comp_q[comp.id] = len(self._labels)
            push((comp.id, "q", None))
        for bus in network.grid.busses:
            for quant in BUS_QUANTITIES:
                self.bus[(bus.id, quant)] = len(self._labels)
                push((bus.id, quant, None))
        self.size = len(self._labels)

    def index_of(self, entity: str, quantity: str, position=None) -> int:
        return self._map[(entity, quantity, position)]

    def label_of(self, i: int) -> tuple:
        return self._labels[i]


@dataclass(frozen=True)
class SystemState:
    """Flat value vector for one time level plus its index map."""

    index: VariableIndex
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.index.size,):
            raise ValueError("state vector does not match the variable index")
        object.__setattr__(self, "values", vals)

    def pipe_state(self, pipe_id: str) -> gas.PipeState:
        return gas.PipeState(self.values[self.index.pipe_rho[pipe_id]],
                             self.values[self.index.pipe_q[pipe_id]])

    def node_density(self, node_id: str) -> float:
        return float(self.values[self.index.node_rho[node_id]])

    def bus_value(self, bus_id: str, quantity: str) -> float:
        return float(self.values[self.index.bus[(bus_id, quantity)]])

    def compressor_flux(self, comp_id: str) -> float:
        return float(self.values[self.index.comp_q[comp_id]])


@dataclass(frozen=True)
class BoundaryData:
    """Piecewise-linear time series per (target id, quantity).

    Gas quantities: "pressure" (Pa) at pressure-boundary nodes and
    "outflow" (kg/(m^2 s)) at flow-boundary nodes.  Bus quantities are the
    per-unit values of V, phi, P, Q fixed by the bus kind.  Values are
    clamped outside the covered time range.
    """

    series: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]]

    def value(self, target: str, quantity: str, t: float) -> float:
        times, values = self.series[(target, quantity)]
        return float(np.interp(t, times, values))

    def has(self, target: str, quantity: str) -> bool:
        return (target, quantity) in self.series

    @staticmethod
    def from_breakpoints(data: dict[tuple[str, str], list[tuple[float, float]]]
                         ) -> "BoundaryData":
        series = {}
        for key, pts in data.items():
            pts = sorted(pts)
            times = np.array([p[0] for p in pts], dtype=float)
            values = np.array([p[1] for p in pts], dtype=float)
            series[key] = (times, values)
        return BoundaryData(series)


@dataclass(frozen=True)
class Scenario:
    """Run description: horizon, step, boundary data, bounds, solver knobs."""

    horizon: float                  # s
    dt: float                       # s
    boundary: BoundaryData
    pressure_bounds: dict[str, float] = field(default_factory=dict)  # node -> Pa
    control_max: float = 30.0e5     # Pa
    optimizer: dict = field(default_factory=dict)

    @property
    def step_count(self) -> int:
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integer number of steps")
        return int(round(steps))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.step_count + 1)


@dataclass(frozen=True)
class _Snapshot:
    """Boundary values evaluated at one time; aligned with assembler order."""

    node_rho_bc: np.ndarray      # per gas node, NaN where unused
    node_outflow: np.ndarray     # flux, per gas node, 0 where unused
    bus_fixed: np.ndarray        # (n_bus, 2) values of the two pinned quantities


@dataclass(frozen=True)
class Trajectory:
    """States at t_j = j dt together with the applied control sequence."""

    index: VariableIndex
    times: np.ndarray            # s
    states: np.ndarray           # (M+1, N_y)
    control: np.ndarray          # Pa, (M+1,)

    def state(self, j: int) -> SystemState:
        return SystemState(self.index, self.states[j])

    @property
    def step_count(self) -> int:
        return len(self.times) - 1

    def node_pressure(self, node_id: str, constants) -> np.ndarray:
        rho = self.states[:, self.index.node_rho[node_id]]
        return np.asarray(gas.pressure_of_density(rho, constants))

    def bus_series(self, bus_id: str, quantity: str) -> np.ndarray:
        return self.states[:, self.index.bus[(bus_id, quantity)]].copy()


class CoupledStepAssembler:
    """Assembles the residual and Jacobian blocks of one implicit step."""

    def __init__(self, network: CoupledNetwork):
        violations = validate_network(network.gas, network.grid, network.plants)
        if violations:
            raise ValueError("invalid network: " + "; ".join(violations))
        self.network = network
        self.constants = network.constants
        self.index = VariableIndex(network)

        self.nodes = list(network.gas.nodes)
        self.node_pos = {n.id: i for i, n in enumerate(self.nodes)}
        self.pipes = list(network.gas.pipes)
        self.comps = list(network.gas.compressors)

        # incident pipe/compressor ends per node: (q column, signed area into node)
        self.node_terms: list[list[tuple[int, float]]] = [[] for _ in self.nodes]
        for pipe in self.pipes:
            q_sl = self.index.pipe_q[pipe.id]
            self.node_terms[self.node_pos[pipe.from_node]].append(
                (q_sl.start, -pipe.area))
            self.node_terms[self.node_pos[pipe.to_node]].append(
                (q_sl.stop - 1, pipe.area))
        self.comp_area = {}
        for comp in self.comps:
            self.comp_area[comp.id] = self._area_near(comp)
            qc = self.index.comp_q[comp.id]
            self.node_terms[self.node_pos[comp.from_node]].append(
                (qc, -self.comp_area[comp.id]))
            self.node_terms[self.node_pos[comp.to_node]].append(
                (qc, self.comp_area[comp.id]))

        self.node_plant = {}
        for plant in network.plants:
            self.node_plant[plant.gas_node] = plant

        self.G, self.B, self.bus_order = nodal_admittance(network.grid)
        self.n_bus = len(self.bus_order)
        self.busses = list(network.grid.busses)

        # row layout
        self._build_rows()

    def _area_near(self, comp) -> float:
        for node_id in (comp.from_node, comp.to_node):
            for pipe in self.pipes:
                if node_id in (pipe.from_node, pipe.to_node):
                    return pipe.area
        raise ValueError(f"compressor {comp.id} has no adjacent pipe to take "
                         "a reference cross-section from")

    def _build_rows(self):
        self.row_labels: list[tuple] = []
        self.pipe_mass_rows: dict[str, int] = {}
        self.pipe_mom_rows: dict[str, int] = {}
        self.pipe_coupling_rows: dict[str, tuple[int, int]] = {}
        self.node_rows: dict[str, int] = {}
        self.comp_rows: dict[str, int] = {}
        self.bus_flow_rows: dict[str, tuple[int, int]] = {}
        self.bus_bc_rows: dict[str, tuple[int, int]] = {}

        def push(label):
            self.row_labels.append(label)
            return len(self.row_labels) - 1

        for pipe in self.pipes:
            n = pipe.cell_count
            self.pipe_mass_rows[pipe.id] = push((pipe.id, "mass", 0))
            for j in range(1, n):
                push((pipe.id, "mass", j))
            self.pipe_mom_rows[pipe.id] = push((pipe.id, "momentum", 0))
            for j in range(1, n):
                push((pipe.id, "momentum", j))
            r0 = push((pipe.id, "pressure-coupling", 0))
            r1 = push((pipe.id, "pressure-coupling", n))
            self.pipe_coupling_rows[pipe.id] = (r0, r1)
        for node in self.nodes:
            self.node_rows[node.id] = push((node.id, "node", None))
        for comp in self.comps:
            self.comp_rows[comp.id] = push((comp.id, "pressure-lift", None))
        for bus in self.busses:
            rp = push((bus.id, "P-flow", None))
            rq = push((bus.id, "Q-flow", None))
            self.bus_flow_rows[bus.id] = (rp, rq)
            r1 = push((bus.id, "bc-1", None))
            r2 = push((bus.id, "bc-2", None))
            self.bus_bc_rows[bus.id] = (r1, r2)

        if len(self.row_labels) != self.index.size:
            raise AssertionError("equation count does not match unknown count")
        self.n_rows = len(self.row_labels)

        scale = np.ones(self.n_rows)
        kappa = self.constants.kappa
        for pipe in self.pipes:
            n = pipe.cell_count
            r = self.pipe_mom_rows[pipe.id]
            scale[r:r + n] = 1.0 / kappa
        for node in self.nodes:
            if node.kind != PRESSURE_BOUNDARY:
                scale[self.node_rows[node.id]] = 1.0 / MASS_FLOW_SCALE
        for comp in self.comps:
            scale[self.comp_rows[comp.id]] = 1.0 / kappa
        self.row_scale = scale

    # -- boundary handling -------------------------------------------------

    def boundary_snapshot(self, boundary: BoundaryData, t: float) -> _Snapshot:
        node_rho = np.full(len(self.nodes), np.nan)
        node_out = np.zeros(len(self.nodes))
        for i, node in enumerate(self.nodes):
            if node.kind == PRESSURE_BOUNDARY:
                p = boundary.value(node.id, "pressure", t)
                node_rho[i] = gas.density_of_pressure(p, self.constants)
            elif node.kind == FLOW_BOUNDARY:
                node_out[i] = boundary.value(node.id, "outflow", t)
        bus_fixed = np.zeros((self.n_bus, 2))
        for i, bus in enumerate(self.busses):
            q1, q2 = _pinned_quantities(bus.kind)
            bus_fixed[i, 0] = boundary.value(bus.id, q1, t)
            bus_fixed[i, 1] = boundary.value(bus.id, q2, t)
        return _Snapshot(node_rho, node_out, bus_fixed)

    # -- state helpers -----------------------------------------------------

    def admissible(self, y: np.ndarray) -> bool:
        idx = self.index
        for pipe in self.pipes:
            if np.any(y[idx.pipe_rho[pipe.id]] <= 0):
                return False
        for node in self.nodes:
            if y[idx.node_rho[node.id]] <= 0:
                return False
        for bus in self.busses:
            if y[idx.bus[(bus.id, "V")]] <= 0:
                return False
        return True

    def flat_state(self, snap: _Snapshot, pressure_guess: float = 60e5
                   ) -> np.ndarray:
        """Near-stagnant admissible starting guess for the steady solve.

        Pipe and compressor fluxes are seeded with a small positive value:
        at exact stagnation the friction term q|q| has zero derivative and
        the flow split around network loops is linearly indeterminate.
        The power block is pre-solved on its own, which also provides the
        plant offtake operating point.
        """
        idx = self.index
        y = np.zeros(idx.size)
        anchored = snap.node_rho_bc[~np.isnan(snap.node_rho_bc)]
        rho0 = anchored[0] if len(anchored) else \
            gas.density_of_pressure(pressure_guess, self.constants)
        for pipe in self.pipes:
            y[idx.pipe_rho[pipe.id]] = rho0
            y[idx.pipe_q[pipe.id]] = _STEADY_FLOW_SEED
        for node in self.nodes:
            y[idx.node_rho[node.id]] = rho0
        for comp in self.comps:
            y[idx.comp_q[comp.id]] = _STEADY_FLOW_SEED
        if self.busses:
            fixed = {}
            for i, bus in enumerate(self.busses):
                q1, q2 = _pinned_quantities(bus.kind)
                fixed[(bus.id, q1)] = snap.bus_fixed[i, 0]
                fixed[(bus.id, q2)] = snap.bus_fixed[i, 1]
            state = power.solve_powerflow(self.network.grid, fixed)
            for i, bus in enumerate(self.busses):
                for quant in BUS_QUANTITIES:
                    y[idx.bus[(bus.id, quant)]] = getattr(state, quant)[i]
        return y

    def node_injection(self, y: np.ndarray, node_id: str) -> float:
        """Net mass flow (kg/s) entering the network through a node."""
        i = self.node_pos[node_id]
        return float(sum(-signed_area * y[col]
                         for col, signed_area in self.node_terms[i]))

    # -- residual ------------------------------------------------------------

    def residual(self, y_prev: np.ndarray, y_next: np.ndarray, u: float,
                 snap: _Snapshot, dt: float) -> np.ndarray:
        idx = self.index
        res = np.zeros(self.n_rows)
        cons = self.constants

        for pipe in self.pipes:
            prev = gas.PipeState(y_prev[idx.pipe_rho[pipe.id]],
                                 y_prev[idx.pipe_q[pipe.id]])
            nxt = gas.PipeState(y_next[idx.pipe_rho[pipe.id]],
                                y_next[idx.pipe_q[pipe.id]])
            blocks = gas._box_blocks(prev, nxt, dt, pipe.dx, pipe, cons)
            n = pipe.cell_count
            res[self.pipe_mass_rows[pipe.id]:
                self.pipe_mass_rows[pipe.id] + n] = blocks["res_mass"]
            res[self.pipe_mom_rows[pipe.id]:
                self.pipe_mom_rows[pipe.id] + n] = blocks["res_mom"]
            r0, r1 = self.pipe_coupling_rows[pipe.id]
            rho_from = y_next[idx.node_rho[pipe.from_node]]
            rho_to = y_next[idx.node_rho[pipe.to_node]]
            res[r0] = nxt.rho[0] - rho_from
            res[r1] = nxt.rho[-1] - rho_to

        for i, node in enumerate(self.nodes):
            row = self.node_rows[node.id]
            if node.kind == PRESSURE_BOUNDARY:
                res[row] = y_next[idx.node_rho[node.id]] - snap.node_rho_bc[i]
                continue
            balance = sum(signed_area * y_next[col]
                          for col, signed_area in self.node_terms[i])
            if node.kind == FLOW_BOUNDARY:
                # the recorded outflow flux leaves through the incident pipe area
                area = abs(self.node_terms[i][0][1])
                balance -= area * snap.node_outflow[i]
            if node.kind == POWER_COUPLING:
                plant = self.node_plant[node.id]
                p_bus = y_next[idx.bus[(plant.bus, "P")]]
                eps = power.plant_gas_offtake(p_bus, plant)
                balance -= plant.reference_density * eps
            res[row] = balance

        for comp in self.comps:
            p_out = gas.pressure_of_density(
                y_next[idx.node_rho[comp.to_node]], cons)
            p_in = gas.pressure_of_density(
                y_next[idx.node_rho[comp.from_node]], cons)
            res[self.comp_rows[comp.id]] = p_out - p_in - u

        if self.n_bus:
            state = self._power_state(y_next)
            pf = power.powerflow_residual(state, self.G, self.B)
            for i, bus in enumerate(self.busses):
                rp, rq = self.bus_flow_rows[bus.id]
                res[rp] = pf[i]
                res[rq] = pf[self.n_bus + i]
                r1, r2 = self.bus_bc_rows[bus.id]
                q1, q2 = _pinned_quantities(bus.kind)
                res[r1] = y_next[idx.bus[(bus.id, q1)]] - snap.bus_fixed[i, 0]
                res[r2] = y_next[idx.bus[(bus.id, q2)]] - snap.bus_fixed[i, 1]

        return res * self.row_scale

    def _power_state(self, y: np.ndarray) -> power.PowerState:
        idx = self.index
        get = lambda quant: np.array(
            [y[idx.bus[(b.id, quant)]] for b in self.busses])
        return power.PowerState(tuple(self.bus_order), get("V"), get("phi"),
                                get("P"), get("Q"))

    # -- jacobian ------------------------------------------------------------

    def jacobian(self, y_prev: np.ndarray, y_next: np.ndarray, u: float,
                 snap: _Snapshot, dt: float):
        """(dR/dy_next, dR/dy_prev, dR/du) with rows scaled like residual()."""
        idx = self.index
        cons = self.constants
        rows_a, cols_a, vals_a = [], [], []
        rows_b, cols_b, vals_b = [], [], []

        def add_a(r, c, v):
            rows_a.append(np.asarray(r).ravel())
            cols_a.append(np.asarray(c).ravel())
            vals_a.append(np.asarray(v, dtype=float).ravel())

        def add_b(r, c, v):
            rows_b.append(np.asarray(r).ravel())
            cols_b.append(np.asarray(c).ravel())
            vals_b.append(np.asarray(v, dtype=float).ravel())

        for pipe in self.pipes:
            prev = gas.PipeState(y_prev[idx.pipe_rho[pipe.id]],
                                 y_prev[idx.pipe_q[pipe.id]])
            nxt = gas.PipeState(y_next[idx.pipe_rho[pipe.id]],
                                y_next[idx.pipe_q[pipe.id]])
            blocks = gas._box_blocks(prev, nxt, dt, pipe.dx, pipe, cons)
            n = pipe.cell_count
            rho0 = idx.pipe_rho[pipe.id].start
            q0 = idx.pipe_q[pipe.id].start
            mrow = self.pipe_mass_rows[pipe.id] + np.arange(n)
            qrow = self.pipe_mom_rows[pipe.id] + np.arange(n)
            jl = np.arange(n)
            jr = jl + 1
            add_a(mrow, rho0 + jl, blocks["m_drho_L"])
            add_a(mrow, rho0 + jr, blocks["m_drho_R"])
            add_a(mrow, q0 + jl, blocks["m_dq_L"])
            add_a(mrow, q0 + jr, blocks["m_dq_R"])
            add_a(qrow, rho0 + jl, blocks["q_drho_L"])
            add_a(qrow, rho0 + jr, blocks["q_drho_R"])
            add_a(qrow, q0 + jl, blocks["q_dq_L"])
            add_a(qrow, q0 + jr, blocks["q_dq_R"])
            add_b(mrow, rho0 + jl, blocks["m_drho_L_prev"])
            add_b(mrow, rho0 + jr, blocks["m_drho_R_prev"])
            add_b(qrow, q0 + jl, blocks["q_dq_L_prev"])
            add_b(qrow, q0 + jr, blocks["q_dq_R_prev"])

            r0, r1 = self.pipe_coupling_rows[pipe.id]
            add_a([r0, r0, r1, r1],
                  [rho0, idx.node_rho[pipe.from_node],
                   rho0 + n, idx.node_rho[pipe.to_node]],
                  [1.0, -1.0, 1.0, -1.0])

        for i, node in enumerate(self.nodes):
            row = self.node_rows[node.id]
            if node.kind == PRESSURE_BOUNDARY:
                add_a([row], [idx.node_rho[node.id]], [1.0])
                continue
            for col, signed_area in self.node_terms[i]:
                add_a([row], [col], [signed_area])
            if node.kind == POWER_COUPLING:
                plant = self.node_plant[node.id]
                p_col = idx.bus[(plant.bus, "P")]
                deps = power.plant_gas_offtake_derivative(y_next[p_col], plant)
                add_a([row], [p_col], [-plant.reference_density * deps])

        for comp in self.comps:
            row = self.comp_rows[comp.id]
            c_to = idx.node_rho[comp.to_node]
            c_from = idx.node_rho[comp.from_node]
            add_a([row, row], [c_to, c_from],
                  [gas.dpressure_drho(y_next[c_to], cons),
                   -gas.dpressure_drho(y_next[c_from], cons)])

        if self.n_bus:
            state = self._power_state(y_next)
            dp_dv, dp_dphi, dq_dv, dq_dphi = power.injection_jacobians(
                state.V, state.phi, self.G, self.B)
            p_rows = np.array([self.bus_flow_rows[b.id][0] for b in self.busses])
            q_rows = np.array([self.bus_flow_rows[b.id][1] for b in self.busses])
            v_cols = np.array([idx.bus[(b.id, "V")] for b in self.busses])
            phi_cols = np.array([idx.bus[(b.id, "phi")] for b in self.busses])
            p_cols = np.array([idx.bus[(b.id, "P")] for b in self.busses])
            q_cols = np.array([idx.bus[(b.id, "Q")] for b in self.busses])
            rr, cc = np.meshgrid(p_rows, v_cols, indexing="ij")
            add_a(rr, cc, -dp_dv)
            rr, cc = np.meshgrid(p_rows, phi_cols, indexing="ij")
            add_a(rr, cc, -dp_dphi)
            rr, cc = np.meshgrid(q_rows, v_cols, indexing="ij")
            add_a(rr, cc, -dq_dv)
            rr, cc = np.meshgrid(q_rows, phi_cols, indexing="ij")
            add_a(rr, cc, -dq_dphi)
            add_a(p_rows, p_cols, np.ones(self.n_bus))
            add_a(q_rows, q_cols, np.ones(self.n_bus))
            for i, bus in enumerate(self.busses):
                r1, r2 = self.bus_bc_rows[bus.id]
                q1, q2 = _pinned_quantities(bus.kind)
                add_a([r1, r2],
                      [idx.bus[(bus.id, q1)], idx.bus[(bus.id, q2)]],
                      [1.0, 1.0])

        scale = self.row_scale
        rows = np.concatenate(rows_a)
        jac_next = sparse.coo_matrix(
            (np.concatenate(vals_a) * scale[rows],
             (rows, np.concatenate(cols_a))),
            shape=(self.n_rows, self.index.size)).tocsc()
        rows = np.concatenate(rows_b) if rows_b else np.array([], dtype=int)
        jac_prev = sparse.coo_matrix(
            ((np.concatenate(vals_b) * scale[rows]) if len(rows) else [],
             (rows, np.concatenate(cols_b) if len(rows) else [])),
            shape=(self.n_rows, self.index.size)).tocsc()

        d_du = np.zeros(self.n_rows)
        for comp in self.comps:
            row = self.comp_rows[comp.id]
            d_du[row] = -1.0 * scale[row]
        return jac_next, jac_prev, d_du


def _pinned_quantities(kind: str) -> tuple[str, str]:
    if kind == SLACK:
        return ("V", "phi")
    if kind == PV:
        return ("P", "V")
    if kind == PQ:
        return ("P", "Q")
    raise ValueError(f"unknown bus kind {kind!r}")


def _factorize(matrix):
    try:
        return splu(matrix.tocsc())
    except RuntimeError as exc:
        raise SingularJacobian(str(exc)) from None


def _solve_sparse(matrix, rhs):
    sol = _factorize(matrix).solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise SingularJacobian("non-finite Newton step")
    return sol


def newton_solve_step(assembler: CoupledStepAssembler, y_prev: np.ndarray,
                      u: float, snap: _Snapshot, dt: float,
                      tol: float = 1e-9, max_iter: int = 25,
                      polish: int = 2, y_guess: np.ndarray | None = None
                      ) -> np.ndarray:
    """Damped Newton solve of one implicit step, warm-started at y_prev.

    Step halving (up to 30 times) guards monotone residual decrease and
    admissibility.  After reaching `tol`, up to `polish` extra steps with
    the last factorization push the residual towards machine precision so
    that functionals of the state are smooth enough for finite-difference
    checks.
    """
    y = np.array(y_prev if y_guess is None else y_guess, dtype=float)
    if not assembler.admissible(y):
        y = np.array(y_prev, dtype=float)
    res = assembler.residual(y_prev, y, u, snap, dt)
    norm = np.max(np.abs(res))
    iterations = 0
    lu = None
    while norm >= tol:
        if iterations >= max_iter:
            raise MaxIterationsExceeded("Newton did not reach tolerance",
                                        norm, iterations)
        jac, _, _ = assembler.jacobian(y_prev, y, u, snap, dt)
        lu = _factorize(jac)
        step = lu.solve(-res)
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("non-finite Newton step")
        factor = 1.0
        for _ in range(30):
            cand = y + factor * step
            if assembler.admissible(cand):
                cand_res = assembler.residual(y_prev, cand, u, snap, dt)
                cand_norm = np.max(np.abs(cand_res))
                if cand_norm < norm or cand_norm < tol:
                    y, res, norm = cand, cand_res, cand_norm
                    break
            factor *= 0.5
        else:
            raise MaxIterationsExceeded("Newton line search stalled",
                                        norm, iterations)
        iterations += 1
    # reusing the last factorization keeps the polish cheap; close to the
    # solution the lagged-Jacobian step still contracts fast
    for _ in range(polish):
        if norm < 1e-14 or lu is None:
            break
        cand = y + lu.solve(-res)
        if not assembler.admissible(cand):
            break
        cand_res = assembler.residual(y_prev, cand, u, snap, dt)
        cand_norm = np.max(np.abs(cand_res))
        if cand_norm >= norm:
            break
        y, res, norm = cand, cand_res, cand_norm
    return y


def steady_state(assembler: CoupledStepAssembler, snap: _Snapshot,
                 u0: float, dt: float, tol: float = 1e-9,
                 max_iter: int = 60) -> np.ndarray:
    """Time-derivative-free solution of the coupled equations.

    Solves the step equations with y_prev == y_next as one nonlinear
    system; the result satisfies the step residual for every dt.
    """
    y = assembler.flat_state(snap)
    res = assembler.residual(y, y, u0, snap, dt)
    norm = np.max(np.abs(res))
    lu = None
    for iterations in range(max_iter):
        if norm < tol:
            break
        jac_next, jac_prev, _ = assembler.jacobian(y, y, u0, snap, dt)
        lu = _factorize(jac_next + jac_prev)
        step = lu.solve(-res)
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("non-finite Newton step")
        factor = 1.0
        for _ in range(40):
            cand = y + factor * step
            if assembler.admissible(cand):
                cand_res = assembler.residual(cand, cand, u0, snap, dt)
                cand_norm = np.max(np.abs(cand_res))
                if cand_norm < norm or cand_norm < tol:
                    y, res, norm = cand, cand_res, cand_norm
                    break
            factor *= 0.5
        else:
            raise MaxIterationsExceeded("steady-state line search stalled",
                                        norm, iterations)
    else:
        raise MaxIterationsExceeded("steady state did not converge",
                                    norm, max_iter)
    # polish towards machine precision, mirrors newton_solve_step
    for _ in range(3):
        if norm < 1e-14 or lu is None:
            break
        cand = y + lu.solve(-res)
        if not assembler.admissible(cand):
            break
        cand_res = assembler.residual(cand, cand, u0, snap, dt)
        cand_norm = np.max(np.abs(cand_res))
        if cand_norm >= norm:
            break
        y, res, norm = cand, cand_res, cand_norm
    return y


class Simulator:
    """Reusable forward model for one network + scenario."""

    def __init__(self, network: CoupledNetwork, scenario: Scenario,
                 tol: float = 1e-9, max_iter: int = 25):
        self.network = network
        self.scenario = scenario
        self.tol = tol
        self.max_iter = max_iter
        self.assembler = CoupledStepAssembler(network)
        self.snapshots = [
            self.assembler.boundary_snapshot(scenario.boundary, t)
            for t in scenario.times]
        self._check_grid_regime()

    def _check_grid_regime(self):
        dt = self.scenario.dt
        for pipe in self.network.gas.pipes:
            ratio = (dt / pipe.dx) / _REFERENCE_DT_DX
            if ratio > 20.0 or ratio < 0.05:
                log.warning("pipe %s: dt/dx = %.3g s/m is far from the "
                            "regime the implicit box scheme is validated in",
                            pipe.id, dt / pipe.dx)

    def run(self, control=None) -> Trajectory:
        m = self.scenario.step_count
        if control is None:
            control = np.zeros(m + 1)
        control = np.asarray(control, dtype=float)
        if control.shape != (m + 1,):
            raise ValueError(f"control must have {m + 1} entries")
        if not np.all(np.isfinite(control)):
            raise ValueError("control contains non-finite entries")
        if not self.assembler.comps and np.any(control != 0.0):
            raise ValueError("network has no compressor, control must be zero")

        dt = self.scenario.dt
        states = np.empty((m + 1, self.assembler.index.size))
        states[0] = steady_state(self.assembler, self.snapshots[0],
                                 control[0], dt, self.tol)
        for j in range(1, m + 1):
            # linear extrapolation in time cuts one Newton iteration
            guess = 2.0 * states[j - 1] - states[j - 2] if j >= 2 else None
            try:
                states[j] = newton_solve_step(
                    self.assembler, states[j - 1], control[j],
                    self.snapshots[j], dt, self.tol, self.max_iter,
                    y_guess=guess)
            except SimulationError as exc:
                raise SimulationError(
                    f"step {j} (t = {self.scenario.times[j] / 3600.0:.2f} h) "
                    f"failed: {exc}") from exc
        return Trajectory(self.assembler.index, self.scenario.times.copy(),
                          states, control.copy())


def simulate(network: CoupledNetwork, scenario: Scenario,
             control=None) -> Trajectory:
    """Steady initialisation followed by step-by-step implicit solves."""
    return Simulator(network, scenario).run(control)


def mass_balance_report(simulator: Simulator, trajectory: Trajectory):
    """Per-step network mass accounting in Newton-tolerance units.

    For each step, compares the change of stored gas mass with the net
    boundary inflow minus outflow minus plant offtake over the step.  The
    raw error in kg is normalised by the exact telescoping weight of the
    residual rows that enter the identity, so a converged step (max-norm
    residual < tol) implies a normalised error < tol.
    """
    asm = simulator.assembler
    net = simulator.network
    dt = simulator.scenario.dt

    weight = 0.0
    for pipe in asm.pipes:
        weight += pipe.dx * pipe.area * pipe.cell_count
    n_balance = sum(1 for n in asm.nodes if n.kind != PRESSURE_BOUNDARY)
    weight += dt * MASS_FLOW_SCALE * n_balance

    def stored(y):
        total = 0.0
        for pipe in asm.pipes:
            rho = y[asm.index.pipe_rho[pipe.id]]
            total += pipe.area * pipe.dx * np.sum(0.5 * (rho[:-1] + rho[1:]))
        return total

    errors = []
    for j in range(1, trajectory.step_count + 1):
        y = trajectory.states[j]
        snap = simulator.snapshots[j]
        net_in = 0.0
        for i, node in enumerate(asm.nodes):
            if node.kind == PRESSURE_BOUNDARY:
                net_in += asm.node_injection(y, node.id)
            elif node.kind == FLOW_BOUNDARY:
                area = abs(asm.node_terms[i][0][1])
                net_in -= area * snap.node_outflow[i]
            if node.kind == POWER_COUPLING:
                plant = asm.node_plant[node.id]
                p_bus = y[asm.index.bus[(plant.bus, "P")]]
                net_in -= plant.reference_density * \
                    power.plant_gas_offtake(p_bus, plant)
        raw = stored(y) - stored(trajectory.states[j - 1]) - dt * net_in
        errors.append(abs(raw) / weight)
    return np.array(errors)
