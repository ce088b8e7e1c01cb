"""Output functionals on discrete trajectories and their exact state gradients.

A functional is a sum of time integrals: space-time integrands over PDE pipes,
pointwise integrands at nodes, and integrands on algebraic arcs (notably the
compression energy).  Quadrature is trapezoidal over the accepted time steps
and midpoint over pipe cells, so the discrete value is exactly differentiable
with respect to every state unknown; those derivatives seed the adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MissingTarget
from .network import CompressorStation
from .timeseries import TimeSeries
from .transient import Trajectory

NODE_KINDS = ("track_pressure", "track_flow", "constant")
PIPE_KINDS = ("track_pressure", "constant")
ARC_KINDS = ("energy", "track_flow")


@dataclass(frozen=True)
class NodeTerm:
    node_id: str
    kind: str
    weight: float = 1.0
    target: TimeSeries | None = None

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node term kind {self.kind!r}")


@dataclass(frozen=True)
class PipeTerm:
    arc_id: str
    kind: str
    weight: float = 1.0
    target: TimeSeries | None = None

    def __post_init__(self):
        if self.kind not in PIPE_KINDS:
            raise ValueError(f"unknown pipe term kind {self.kind!r}")


@dataclass(frozen=True)
class ArcTerm:
    arc_id: str
    kind: str
    weight: float = 1.0
    target: TimeSeries | None = None

    def __post_init__(self):
        if self.kind not in ARC_KINDS:
            raise ValueError(f"unknown arc term kind {self.kind!r}")


@dataclass(frozen=True)
class FunctionalSpec:
    node_terms: tuple[NodeTerm, ...] = ()
    pipe_terms: tuple[PipeTerm, ...] = ()
    arc_terms: tuple[ArcTerm, ...] = ()
    rho0: float = 0.785  # standard density for energy terms [kg/m^3]

    def scaled(self, factor: float) -> "FunctionalSpec":
        return FunctionalSpec(
            tuple(replace(t, weight=t.weight * factor) for t in self.node_terms),
            tuple(replace(t, weight=t.weight * factor) for t in self.pipe_terms),
            tuple(replace(t, weight=t.weight * factor) for t in self.arc_terms),
            self.rho0,
        )

    def combined(self, other: "FunctionalSpec") -> "FunctionalSpec":
        return FunctionalSpec(
            self.node_terms + other.node_terms,
            self.pipe_terms + other.pipe_terms,
            self.arc_terms + other.arc_terms,
            self.rho0,
        )

    def terms(self):
        return list(self.node_terms) + list(self.pipe_terms) + list(self.arc_terms)


@dataclass
class FunctionalValue:
    total: float
    per_term: dict[int, float]  # index into spec.terms()
    per_block: np.ndarray

    def term_value(self, i: int) -> float:
        return self.per_term[i]


def _trapezoid_weights(times: np.ndarray) -> np.ndarray:
    w = np.zeros_like(times)
    dt = np.diff(times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def _target_value(term, t: float) -> float:
    if term.target is None:
        raise MissingTarget(f"term on {term!r} needs a target series")
    return float(term.target(t))


def _station(traj: Trajectory, arc_id: str) -> CompressorStation:
    arc = traj.blocks[0].layout.network.arcs[arc_id]
    if not isinstance(arc.variant, CompressorStation):
        raise ValueError(f"energy term expects a compressor arc, got {arc_id!r}")
    return arc.variant


def _term_density(term, traj: Trajectory, layout, x: np.ndarray, t: float, rho0: float) -> float:
    """Pointwise integrand value of one term at one accepted state."""
    if isinstance(term, NodeTerm):
        nb = layout.node_blocks[term.node_id]
        if term.kind == "track_pressure":
            return term.weight * (x[nb.x_off] - _target_value(term, t)) ** 2
        if term.kind == "track_flow":
            return term.weight * (x[nb.x_off + 1] - _target_value(term, t)) ** 2
        return term.weight
    if isinstance(term, PipeTerm):
        pb = layout.pipe_blocks.get(term.arc_id)
        if pb is not None:
            p = x[pb.p_indices()]
            mids = 0.5 * (p[:-1] + p[1:])
            dx = pb.dx
        else:
            ab = layout.arc_blocks[term.arc_id]
            mids = np.array([0.5 * (x[ab.x_off] + x[ab.x_off + 2])])
            dx = ab.m1_params.L
        if term.kind == "track_pressure":
            return term.weight * float(np.sum(dx * (mids - _target_value(term, t)) ** 2))
        return term.weight * dx * mids.size
    # ArcTerm
    ip_in, iq_in = layout.endpoint_indices(term.arc_id, "tail")
    if term.kind == "energy":
        station = _station(traj, term.arc_id)
        if not traj.controls.is_on(term.arc_id, t):
            return 0.0
        h_ad = traj.controls.head_at(term.arc_id, t)
        return term.weight * rho0 * x[iq_in] * h_ad / station.eta_ad
    return term.weight * (x[iq_in] - _target_value(term, t)) ** 2


def evaluate(traj: Trajectory, spec: FunctionalSpec) -> FunctionalValue:
    """Quadrature of all functional terms over the trajectory."""
    terms = spec.terms()
    per_term = {i: 0.0 for i in range(len(terms))}
    per_block = np.zeros(len(traj.blocks))
    for b, blk in enumerate(traj.blocks):
        w = _trapezoid_weights(blk.times)
        for k, t in enumerate(blk.times):
            x = blk.states[k]
            for i, term in enumerate(terms):
                v = w[k] * _term_density(term, traj, blk.layout, x, float(t), spec.rho0)
                per_term[i] += v
                per_block[b] += v
    return FunctionalValue(float(per_block.sum()), per_term, per_block)


def _term_state_gradient(term, traj, layout, x, t: float, rho0: float, out: np.ndarray) -> None:
    """Accumulate d(density)/d(state) of one term into ``out`` (SI derivative)."""
    if isinstance(term, NodeTerm):
        nb = layout.node_blocks[term.node_id]
        if term.kind == "track_pressure":
            out[nb.x_off] += term.weight * 2.0 * (x[nb.x_off] - _target_value(term, t))
        elif term.kind == "track_flow":
            out[nb.x_off + 1] += term.weight * 2.0 * (x[nb.x_off + 1] - _target_value(term, t))
        return
    if isinstance(term, PipeTerm):
        if term.kind != "track_pressure":
            return
        tgt = _target_value(term, t)
        pb = layout.pipe_blocks.get(term.arc_id)
        if pb is not None:
            pi = pb.p_indices()
            p = x[pi]
            mids = 0.5 * (p[:-1] + p[1:])
            coef = term.weight * pb.dx * (mids - tgt)  # d/dmid of dx*(mid-tgt)^2 is 2dx(mid-tgt); half to each end
            np.add.at(out, pi[:-1], coef)
            np.add.at(out, pi[1:], coef)
        else:
            ab = layout.arc_blocks[term.arc_id]
            mid = 0.5 * (x[ab.x_off] + x[ab.x_off + 2])
            coef = term.weight * ab.m1_params.L * (mid - tgt)
            out[ab.x_off] += coef
            out[ab.x_off + 2] += coef
        return
    ip_in, iq_in = layout.endpoint_indices(term.arc_id, "tail")
    if term.kind == "energy":
        station = _station(traj, term.arc_id)
        if traj.controls.is_on(term.arc_id, t):
            h_ad = traj.controls.head_at(term.arc_id, t)
            out[iq_in] += term.weight * rho0 * h_ad / station.eta_ad
    else:
        out[iq_in] += term.weight * 2.0 * (x[iq_in] - _target_value(term, t))


def state_gradient(traj: Trajectory, spec: FunctionalSpec) -> list[np.ndarray]:
    """Per block: array (n_times, n_unknowns) of dM/d(SI state), exact for evaluate."""
    grads = []
    terms = spec.terms()
    for blk in traj.blocks:
        w = _trapezoid_weights(blk.times)
        g = np.zeros((len(blk.times), blk.layout.n))
        for k, t in enumerate(blk.times):
            tmp = np.zeros(blk.layout.n)
            for term in terms:
                _term_state_gradient(term, traj, blk.layout, blk.states[k], float(t), spec.rho0, tmp)
            g[k] = w[k] * tmp
        grads.append(g)
    return grads
