"""gasgrid: transient simulation and optimal control of gas pipeline networks.

Core pieces: a three-level pipe model hierarchy (algebraic law, semilinear and
nonlinear isothermal Euler equations) discretized by an implicit box scheme on
a network DAE, dual-weighted adjoint error estimators driving model/space/time
adaptivity, semiconvex compressor feasible sets, and a discrete-adjoint SQP
solver for nomination validation.
"""

from .adaptivity import AdaptivityOptions, ErrorEstimate, adapt, adaptive_simulate, estimate_errors
from .adjoint import AdjointTrajectory, Parameter, functional_gradient, solve_discrete_adjoint
from .compressor import (
    CharacteristicField,
    CompressorControl,
    SemiconvexField,
    build_semiconvex,
    constraint_values,
    contains,
    power,
)
from .errors import GasgridError
from .functional import ArcTerm, FunctionalSpec, FunctionalValue, NodeTerm, PipeTerm, evaluate, state_gradient
from .grids import BlockAssignment, ModelAssignment, PipeGrid, PipeSetting, TimeGrid
from .models import (
    EquationOfState,
    GasState,
    ModelLevel,
    PipeParameters,
    compressibility,
    flux,
    m1_pout,
    source,
)
from .network import (
    Arc,
    CompressorStation,
    ConditionKind,
    ControlValve,
    Network,
    Node,
    NodeCondition,
    NodeKind,
    Pipe,
    ShortPipe,
    Valve,
    build_network,
    network_from_components,
    node_mass_residual,
    node_pressure_residuals,
    valve_residuals,
)
from .optimize import (
    ConstraintSet,
    ControlVector,
    FlowBound,
    NominationReport,
    PressureBound,
    TerminalStationarity,
    control_gradient,
    validate_nomination,
)
from .sqp import NLPResult, SQPOptions, sqp_solve
from .system import Controls, SystemLayout, assemble_system, box_residual
from .timeseries import BoolSeries, TimeSeries
from .transient import (
    DiscreteState,
    NewtonOptions,
    SimulationModel,
    Trajectory,
    linepack,
    simulate,
    solve_time_step,
    steady_state,
)

__version__ = "0.1.0"
