"""Directed-graph data model of a gas network with node coupling algebra.

Nodes carry auxiliary variables (p_v, q_v); q_v > 0 means feed-in, q_v < 0
demand, and interior nodes fix q_v = 0.  Arcs are typed: pipes carry the PDE
hierarchy, everything else (short pipes, valves, control valves, compressor
stations) is algebraic.  Short pipes behave exactly like open valves.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import (
    DanglingEndpoint,
    DisconnectedGraph,
    DuplicateId,
    MissingFlow,
    MissingPressure,
)
from .models import GasState, PipeParameters
from .timeseries import BoolSeries, TimeSeries


class NodeKind(enum.Enum):
    INTERIOR = "interior"
    SOURCE = "source"
    SINK = "sink"


class ConditionKind(enum.Enum):
    PRESSURE = "prescribed_pressure"
    FLOW = "prescribed_flow"


@dataclass(frozen=True)
class NodeCondition:
    """Boundary condition at a source/sink: a pressure [Pa] or flow [m^3/s] profile."""

    kind: ConditionKind
    profile: TimeSeries


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind = NodeKind.INTERIOR
    boundary: NodeCondition | None = None
    p_bounds: tuple[float, float] | None = None  # [Pa], applied to the node variable

    def __post_init__(self):
        if self.kind is NodeKind.INTERIOR and self.boundary is not None:
            raise ValueError(f"interior node {self.id!r} must not carry a boundary condition")
        if self.kind is not NodeKind.INTERIOR and self.boundary is None:
            raise ValueError(f"{self.kind.value} node {self.id!r} needs exactly one boundary condition")


# ---------------------------------------------------------------------------
# arc variants


@dataclass(frozen=True)
class Pipe:
    params: PipeParameters


@dataclass(frozen=True)
class ShortPipe:
    """Frictionless zero-length connector; identified with an open valve."""


@dataclass(frozen=True)
class Valve:
    open: BoolSeries


@dataclass(frozen=True)
class ControlValve:
    """Pressure-reducing arc: p_in - p_out = u(t) with a control u."""

    dp_max: float = 20e5  # admissible control range [0, dp_max] in Pa


@dataclass(frozen=True)
class CompressorStation:
    field_id: str
    eta_ad: float = 0.8  # adiabatic efficiency
    kappa: float = 1.29  # isentropic exponent
    c: float = 340.0  # sound speed for density/head conversion [m/s]
    bypass_when_off: bool = False

    def __post_init__(self):
        if not 0.0 < self.eta_ad <= 1.0:
            raise ValueError("eta_ad must lie in (0, 1]")
        if self.kappa <= 1.0:
            raise ValueError("kappa must exceed 1")


ArcVariant = Pipe | ShortPipe | Valve | ControlValve | CompressorStation


@dataclass(frozen=True)
class Arc:
    id: str
    tail: str
    head: str
    variant: ArcVariant

    def __post_init__(self):
        if self.tail == self.head:
            raise ValueError(f"arc {self.id!r} is a self-loop")

    @property
    def is_pipe(self) -> bool:
        return isinstance(self.variant, Pipe)


@dataclass(frozen=True)
class Network:
    """Immutable validated network; safe to share read-only across threads."""

    nodes: dict[str, Node]
    arcs: dict[str, Arc]
    out_arcs: dict[str, tuple[str, ...]]  # delta_v^+ per node id
    in_arcs: dict[str, tuple[str, ...]]  # delta_v^- per node id
    diagnostics: tuple[str, ...] = field(default=())

    def node_order(self) -> list[str]:
        return list(self.nodes)

    def arc_order(self) -> list[str]:
        return list(self.arcs)

    def pipes(self) -> list[Arc]:
        return [a for a in self.arcs.values() if a.is_pipe]

    def compressors(self) -> list[Arc]:
        return [a for a in self.arcs.values() if isinstance(a.variant, CompressorStation)]

    def control_valves(self) -> list[Arc]:
        return [a for a in self.arcs.values() if isinstance(a.variant, ControlValve)]

    def degree(self, node_id: str) -> int:
        return len(self.out_arcs[node_id]) + len(self.in_arcs[node_id])


def build_network(spec) -> Network:
    """Validate topology and build incidence sets.

    ``spec`` is anything exposing ``.nodes`` and ``.arcs`` sequences (e.g. a
    parsed NetworkSpec).  Raises DuplicateId / DanglingEndpoint /
    DisconnectedGraph on malformed input, naming every offender.
    """
    nodes: dict[str, Node] = {}
    for n in spec.nodes:
        if n.id in nodes:
            raise DuplicateId(f"duplicate node id {n.id!r}")
        nodes[n.id] = n

    arcs: dict[str, Arc] = {}
    dangling: list[str] = []
    for a in spec.arcs:
        if a.id in arcs or a.id in nodes:
            raise DuplicateId(f"duplicate arc id {a.id!r}")
        for end in (a.tail, a.head):
            if end not in nodes:
                dangling.append(f"arc {a.id!r} references unknown node {end!r}")
        arcs[a.id] = a
    if dangling:
        raise DanglingEndpoint("; ".join(dangling))

    out_arcs = {nid: [] for nid in nodes}
    in_arcs = {nid: [] for nid in nodes}
    for a in arcs.values():
        out_arcs[a.tail].append(a.id)
        in_arcs[a.head].append(a.id)

    _check_weakly_connected(nodes, arcs)

    diagnostics = tuple(getattr(spec, "diagnostics", ()) or ())
    return Network(
        nodes=nodes,
        arcs=arcs,
        out_arcs={k: tuple(v) for k, v in out_arcs.items()},
        in_arcs={k: tuple(v) for k, v in in_arcs.items()},
        diagnostics=diagnostics,
    )


@dataclass
class _Spec:
    nodes: list
    arcs: list


def network_from_components(nodes, arcs) -> Network:
    """Convenience builder from plain node/arc lists (tests, programmatic use)."""
    return build_network(_Spec(list(nodes), list(arcs)))


def _check_weakly_connected(nodes, arcs) -> None:
    if not nodes:
        raise DisconnectedGraph("network has no nodes")
    neighbours = {nid: set() for nid in nodes}
    for a in arcs.values():
        neighbours[a.tail].add(a.head)
        neighbours[a.head].add(a.tail)
    seen = set()
    stack = [next(iter(nodes))]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        stack.extend(neighbours[nid] - seen)
    if len(seen) != len(nodes):
        missing = sorted(set(nodes) - seen)
        raise DisconnectedGraph(f"nodes unreachable from {next(iter(nodes))!r}: {missing}")


# ---------------------------------------------------------------------------
# node coupling residuals


def node_mass_residual(network: Network, node: Node, arc_end_flows: dict[str, float], q_v: float) -> float:
    """Mass balance at a node: sum(out-arc tail flows) - sum(in-arc head flows) - q_v.

    ``arc_end_flows`` maps arc id to the flow at the endpoint incident to this
    node.  Zero at a converged state.
    """
    total = 0.0
    for aid in network.out_arcs[node.id]:
        if aid not in arc_end_flows:
            raise MissingFlow(f"no flow supplied for out-arc {aid!r} at node {node.id!r}")
        total += arc_end_flows[aid]
    for aid in network.in_arcs[node.id]:
        if aid not in arc_end_flows:
            raise MissingFlow(f"no flow supplied for in-arc {aid!r} at node {node.id!r}")
        total -= arc_end_flows[aid]
    return total - q_v


def node_pressure_residuals(
    network: Network, node: Node, arc_end_pressures: dict[str, float], p_v: float
) -> list[float]:
    """One residual p(endpoint) - p_v per incident arc endpoint."""
    res = []
    for aid in network.out_arcs[node.id] + network.in_arcs[node.id]:
        if aid not in arc_end_pressures:
            raise MissingPressure(f"no pressure supplied for arc {aid!r} at node {node.id!r}")
        res.append(arc_end_pressures[aid] - p_v)
    return res


def valve_residuals(arc: Arc, state_in: GasState, state_out: GasState, t: float, u=None) -> tuple[float, float]:
    """Algebraic equations of valve-like arcs at time t.

    Open valve / short pipe: (q_in - q_out, p_in - p_out).
    Closed valve: (q_in, q_out).
    Control valve: (p_in - p_out - u(t), q_in - q_out), with u the pressure
    reduction control (TimeSeries or scalar).
    """
    v = arc.variant
    if isinstance(v, ShortPipe):
        return (state_in.q - state_out.q, state_in.p - state_out.p)
    if isinstance(v, Valve):
        if v.open(t):
            return (state_in.q - state_out.q, state_in.p - state_out.p)
        return (state_in.q, state_out.q)
    if isinstance(v, ControlValve):
        if u is None:
            raise ValueError(f"control valve {arc.id!r} needs a control u")
        du = u(t) if callable(u) else float(u)
        return (state_in.p - state_out.p - du, state_in.q - state_out.q)
    raise ValueError(f"arc {arc.id!r} is not valve-like")
