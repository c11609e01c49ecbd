"""Coupled gas-pipeline / power-grid simulation and optimal compressor control.

The package integrates transient isothermal gas dynamics (implicit box
scheme) and AC powerflow into one nonlinear system per time step, links
the two through gas-fired plants, and minimizes compressor energy cost
under pressure bounds using adjoint gradients inside a log-barrier
optimizer.

Main entry points:

    io.load_bundled()        -- the shipped example network and scenario
    sim.simulate()           -- steady start plus step-by-step Newton solves
    opt.optimize()           -- barrier optimization of the compressor lift
    adjoint.adjoint_sweep()  -- gradients of trajectory functionals
"""

from . import adjoint, cli, compressor, gas, io, model, opt, power, sim
from .model import (Bus, CompressorArc, CompressorCostModel, CoupledNetwork,
                    GasConstants, GasNetwork, GasNode, GasPowerPlant,
                    PerUnitSystem, Pipe, PowerGrid, TransmissionLine,
                    nodal_admittance, validate_network)
from .opt import OptimalControlProblem, OptimizationResult, optimize
from .sim import (BoundaryData, Scenario, Simulator, SystemState, Trajectory,
                  simulate)

__version__ = "0.1.0"

__all__ = [
    "adjoint", "cli", "compressor", "gas", "io", "model", "opt", "power",
    "sim",
    "Bus", "CompressorArc", "CompressorCostModel", "CoupledNetwork",
    "GasConstants", "GasNetwork", "GasNode", "GasPowerPlant",
    "PerUnitSystem", "Pipe", "PowerGrid", "TransmissionLine",
    "nodal_admittance", "validate_network",
    "OptimalControlProblem", "OptimizationResult", "optimize",
    "BoundaryData", "Scenario", "Simulator", "SystemState", "Trajectory",
    "simulate",
    "__version__",
]
