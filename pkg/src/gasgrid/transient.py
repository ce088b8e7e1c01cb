"""Newton solution of the step systems, steady states, and transient simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import InputError, ModelError, NewtonDiverged
from .grids import BlockAssignment, ModelAssignment, PipeSetting
from .models import EquationOfState, ModelLevel
from .network import CompressorStation, ConditionKind, Network, Valve
from .system import Controls, P_SCALE, SystemLayout, assemble_system, project_state


@dataclass(frozen=True)
class NewtonOptions:
    tol: float = 1e-8  # max-norm of the scaled residual
    max_iter: int = 50
    retry_max: int = 4  # step-halving retries in simulate
    armijo_c: float = 1e-4
    max_backtracks: int = 30
    pressure_floor: float = 1e3  # Pa; line-search domain guard
    stall_accept: float = 100.0  # accept a line-search stall within this factor of tol


@dataclass
class NewtonInfo:
    iterations: int
    residual_norm: float


def newton_solve(x0: np.ndarray, fn, opts: NewtonOptions = NewtonOptions()):
    """Damped Newton with Armijo backtracking on the residual max-norm.

    ``fn(x, need_jacobian)`` returns (R, J or None); evaluations raising
    ModelError (state outside the physical domain) are treated as line-search
    rejections.
    """
    x = x0.copy()
    try:
        r, jac = fn(x, True)
    except ModelError as exc:
        raise NewtonDiverged(f"initial guess outside model domain: {exc}") from exc
    norm = float(np.max(np.abs(r)))
    for it in range(opts.max_iter):
        if norm <= opts.tol:
            return x, NewtonInfo(it, norm)
        try:
            lu = spla.splu(jac.tocsc())
            dx = lu.solve(-r)
        except RuntimeError as exc:
            raise NewtonDiverged(f"singular Jacobian: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise NewtonDiverged("non-finite Newton direction")
        alpha = 1.0
        for _ in range(opts.max_backtracks):
            x_try = x + alpha * dx
            try:
                r_try, _ = fn(x_try, False)
            except ModelError:
                alpha *= 0.5
                continue
            norm_try = float(np.max(np.abs(r_try))) if np.all(np.isfinite(r_try)) else math.inf
            if norm_try <= (1.0 - opts.armijo_c * alpha) * norm:
                x = x_try
                norm = norm_try
                break
            alpha *= 0.5
        else:
            # a stall just above tol is the round-off floor of this system,
            # not divergence; accepting keeps the step sequence deterministic
            if norm <= opts.stall_accept * opts.tol:
                return x, NewtonInfo(it, norm)
            raise NewtonDiverged(f"line search failed at residual {norm:.3e}")
        _, jac = fn(x, True)
        r, _ = fn(x, False)
        norm = float(np.max(np.abs(r)))
    if norm <= opts.tol:
        return x, NewtonInfo(opts.max_iter, norm)
    raise NewtonDiverged(f"no convergence in {opts.max_iter} iterations, residual {norm:.3e}")


# ---------------------------------------------------------------------------
# model container and state views


class SimulationModel:
    """Network plus gas configuration; builds and caches system layouts."""

    def __init__(
        self,
        network: Network,
        eos: EquationOfState = EquationOfState(),
        reference_pressure: float = 50e5,
        rho0: float = 0.785,
        newton: NewtonOptions = NewtonOptions(),
    ):
        self.network = network
        self.eos = eos
        self.reference_pressure = reference_pressure
        self.rho0 = rho0
        self.newton = newton
        self._layouts: dict[tuple, SystemLayout] = {}

    def layout_for(self, settings: dict[str, PipeSetting]) -> SystemLayout:
        key = tuple(sorted((aid, s.level.value, s.n_cells) for aid, s in settings.items()))
        if key not in self._layouts:
            self._layouts[key] = SystemLayout(
                self.network, settings, self.eos, self.reference_pressure
            )
        return self._layouts[key]

    def block_layout(self, assignment: ModelAssignment, k: int) -> SystemLayout:
        return self.layout_for(assignment.blocks[k].settings)


@dataclass
class DiscreteState:
    """Full network state at one time level (SI units) with its layout."""

    layout: SystemLayout
    x: np.ndarray  # SI
    t: float

    def node_pressure(self, node_id: str) -> float:
        return float(self.x[self.layout.node_blocks[node_id].x_off])

    def node_flow(self, node_id: str) -> float:
        return float(self.x[self.layout.node_blocks[node_id].x_off + 1])

    def pipe_profile(self, arc_id: str):
        """(positions, p, q) along a pipe; two-point profile for M1 pipes."""
        if arc_id in self.layout.pipe_blocks:
            pb = self.layout.pipe_blocks[arc_id]
            xs = np.linspace(0.0, pb.params.L, pb.n_points)
            return xs, self.x[pb.p_indices()], self.x[pb.q_indices()]
        ab = self.layout.arc_blocks[arc_id]
        L = self.layout.network.arcs[arc_id].variant.params.L
        return (
            np.array([0.0, L]),
            self.x[[ab.x_off, ab.x_off + 2]],
            self.x[[ab.x_off + 1, ab.x_off + 3]],
        )

    def arc_endpoints(self, arc_id: str) -> tuple[float, float, float, float]:
        """(p_in, q_in, p_out, q_out) of any arc."""
        ip_in, iq_in = self.layout.endpoint_indices(arc_id, "tail")
        ip_out, iq_out = self.layout.endpoint_indices(arc_id, "head")
        return tuple(float(self.x[i]) for i in (ip_in, iq_in, ip_out, iq_out))

    def min_pressure(self) -> float:
        return float(np.min(self.x[self.layout.col_scale == P_SCALE]))


def linepack(state: DiscreteState) -> dict[str, float]:
    """Stored gas per pipe in standard m^3: integral of A p / (rho0 c^2) dx."""
    out = {}
    for arc in state.layout.network.pipes():
        xs, p, _ = state.pipe_profile(arc.id)
        par = (
            state.layout.pipe_blocks[arc.id].params
            if arc.id in state.layout.pipe_blocks
            else state.layout.arc_blocks[arc.id].m1_params
        )
        out[arc.id] = float(np.trapezoid(p, xs) * par.A / (par.rho0 * par.c * par.c))
    return out


# ---------------------------------------------------------------------------
# stepping


def solve_time_step(
    layout: SystemLayout,
    x_old_internal: np.ndarray,
    t_old: float,
    dt: float,
    controls: Controls,
    opts: NewtonOptions,
) -> np.ndarray:
    """Advance the network state by one implicit step (internal units)."""
    t_new = t_old + dt

    def fn(x, need_jac):
        _check_pressure_floor(layout, x, opts.pressure_floor)
        return assemble_system(layout, x, x_old_internal, t_new, dt, controls, with_jacobian=need_jac)

    x_new, _ = newton_solve(x_old_internal, fn, opts)
    return x_new


def _check_pressure_floor(layout: SystemLayout, x: np.ndarray, floor: float) -> None:
    pmask = layout.col_scale == P_SCALE
    if np.any(x[pmask] * P_SCALE < floor):
        raise ModelError("pressure below floor")


def _tree_flow_guess(network: Network, controls: Controls, t0: float) -> tuple[dict[str, float], dict[str, float], float]:
    """Spanning-tree distribution of nominations for the steady initial guess.

    Returns (arc flows, node q_v, mean boundary pressure).
    """
    q_v: dict[str, float] = {nid: 0.0 for nid in network.nodes}
    pressures = []
    pressure_nodes = []
    for nid, node in network.nodes.items():
        if node.kind.value == "interior":
            continue
        cond = controls.boundary_condition(node)
        if cond.kind is ConditionKind.FLOW:
            q_v[nid] = float(cond.profile(t0))
        else:
            pressures.append(float(cond.profile(t0)))
            pressure_nodes.append(nid)
    if not pressure_nodes:
        raise InputError("steady state needs at least one pressure boundary condition")
    p_mean = float(np.mean(pressures))

    def arc_open(arc) -> bool:
        if isinstance(arc.variant, Valve):
            return arc.variant.open(t0)
        if isinstance(arc.variant, CompressorStation):
            return controls.is_on(arc.id, t0) or arc.variant.bypass_when_off
        return True

    adj: dict[str, list[tuple[str, str]]] = {nid: [] for nid in network.nodes}
    for arc in network.arcs.values():
        if arc_open(arc):
            adj[arc.tail].append((arc.id, arc.head))
            adj[arc.head].append((arc.id, arc.tail))

    flows = {aid: 0.0 for aid in network.arcs}
    seen: set[str] = set()
    for root in network.nodes:
        if root in seen:
            continue
        comp, order, parent_arc = [], [root], {}
        seen.add(root)
        while order:
            nid = order.pop()
            comp.append(nid)
            for aid, other in adj[nid]:
                if other not in seen:
                    seen.add(other)
                    parent_arc[other] = (aid, nid)
                    order.append(other)
        comp_pressure = [n for n in comp if n in pressure_nodes]
        imbalance = sum(q_v[n] for n in comp if n not in comp_pressure)
        if comp_pressure:
            for n in comp_pressure:
                q_v[n] = -imbalance / len(comp_pressure)
        # accumulate subtree sums leaf-to-root (reverse BFS discovery order)
        subtree = {n: q_v[n] for n in comp}
        for nid in reversed(comp):
            if nid == root or nid not in parent_arc:
                continue
            aid, par_node = parent_arc[nid]
            arc = network.arcs[aid]
            flows[aid] += subtree[nid] if arc.tail == nid else -subtree[nid]
            subtree[par_node] += subtree[nid]
    return flows, q_v, p_mean


def _steady_initial_guess(layout: SystemLayout, controls: Controls, t0: float) -> np.ndarray:
    network = layout.network
    flows, q_v, p_mean = _tree_flow_guess(network, controls, t0)
    x = np.zeros(layout.n)
    for pb in layout.pipe_blocks.values():
        x[pb.p_indices()] = p_mean / P_SCALE
        x[pb.q_indices()] = flows[pb.arc_id]
    for ab in layout.arc_blocks.values():
        x[[ab.x_off, ab.x_off + 2]] = p_mean / P_SCALE
        x[[ab.x_off + 1, ab.x_off + 3]] = flows[ab.arc_id]
    for nid, nb in layout.node_blocks.items():
        node = network.nodes[nid]
        p = p_mean
        if node.kind.value != "interior":
            cond = controls.boundary_condition(node)
            if cond.kind is ConditionKind.PRESSURE:
                p = float(cond.profile(t0))
        x[nb.x_off] = p / P_SCALE
        x[nb.x_off + 1] = q_v[nid]
    return x


def steady_state(
    model: SimulationModel,
    settings: dict[str, PipeSetting],
    controls: Controls,
    t0: float = 0.0,
) -> DiscreteState:
    """Stationary network state for the boundary data and controls frozen at t0.

    Solves the step system with the time-difference terms removed; falls back
    to pseudo-time marching with growing dt when Newton fails from the flat
    initial guess.
    """
    layout = model.layout_for(settings)
    guess = _steady_initial_guess(layout, controls, t0)
    opts = model.newton

    def fn(x, need_jac):
        _check_pressure_floor(layout, x, opts.pressure_floor)
        return assemble_system(
            layout, x, None, t0, 0.0, controls, steady=True, with_jacobian=need_jac
        )

    try:
        x, _ = newton_solve(guess, fn, opts)
    except NewtonDiverged:
        x = guess
        dt = 60.0
        for _ in range(40):
            try:
                x = solve_time_step(layout, x, t0 - dt, dt, controls, opts)
            except NewtonDiverged:
                dt *= 0.5
                continue
            dt *= 1.7
        x, _ = newton_solve(x, fn, opts)
    return DiscreteState(layout, layout.to_si(x), t0)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class BlockTrajectory:
    layout: SystemLayout
    times: np.ndarray  # accepted times; times[0] is the block start
    states: list[np.ndarray]  # SI state per accepted time

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def state(self, k: int, t: float | None = None) -> DiscreteState:
        return DiscreteState(self.layout, self.states[k], float(self.times[k]))


@dataclass
class Trajectory:
    blocks: list[BlockTrajectory]
    controls: Controls
    assignment: ModelAssignment

    @property
    def t_end(self) -> float:
        return float(self.blocks[-1].times[-1])

    def final_state(self) -> DiscreteState:
        blk = self.blocks[-1]
        return DiscreteState(blk.layout, blk.states[-1], self.t_end)

    def initial_state(self) -> DiscreteState:
        blk = self.blocks[0]
        return DiscreteState(blk.layout, blk.states[0], float(blk.times[0]))

    def n_steps(self) -> int:
        return sum(b.n_steps for b in self.blocks)

    def states_at_nodes(self, node_ids) -> dict[str, np.ndarray]:
        """Per node (t, p, q) arrays over all accepted steps (block joints deduplicated)."""
        out = {}
        ts = []
        per_node = {nid: [] for nid in node_ids}
        for bi, blk in enumerate(self.blocks):
            start = 0 if bi == 0 else 1
            for k in range(start, len(blk.times)):
                ts.append(blk.times[k])
                for nid in node_ids:
                    nb = blk.layout.node_blocks[nid]
                    per_node[nid].append((blk.states[k][nb.x_off], blk.states[k][nb.x_off + 1]))
        for nid in node_ids:
            arr = np.asarray(per_node[nid])
            out[nid] = np.column_stack([np.asarray(ts), arr])
        return out

    def sample(self, t: float) -> DiscreteState:
        """State at an accepted time level closest to t (no interpolation)."""
        best = None
        for blk in self.blocks:
            k = int(np.argmin(np.abs(blk.times - t)))
            cand = (abs(blk.times[k] - t), blk, k)
            if best is None or cand[0] < best[0]:
                best = cand
        _, blk, k = best
        return DiscreteState(blk.layout, blk.states[k], float(blk.times[k]))


def _advance_block(
    layout: SystemLayout,
    x0_internal: np.ndarray,
    t_start: float,
    t_end: float,
    dt: float,
    controls: Controls,
    opts: NewtonOptions,
    allow_bisection: bool = True,
) -> tuple[list[float], list[np.ndarray]]:
    """March one block; on Newton failure a step is bisected up to retry_max deep."""
    times = [t_start]
    states = [x0_internal]

    def step(x, t, h, depth):
        try:
            x_new = solve_time_step(layout, x, t, h, controls, opts)
        except NewtonDiverged:
            if depth >= opts.retry_max or not allow_bisection:
                raise
            x_mid = step(x, t, 0.5 * h, depth + 1)
            return step(x_mid, t + 0.5 * h, 0.5 * h, depth + 1)
        times.append(t + h)
        states.append(x_new)
        return x_new

    n_steps = max(1, round((t_end - t_start) / dt))
    h = (t_end - t_start) / n_steps
    x = x0_internal
    t = t_start
    for _ in range(n_steps):
        x = step(x, t, h, 0)
        t = times[-1]
    return times, states


def simulate(
    model: SimulationModel,
    assignment: ModelAssignment,
    controls: Controls,
    initial: DiscreteState,
    allow_bisection: bool = True,
) -> Trajectory:
    """Transient simulation over all time blocks with a fixed assignment.

    The initial state is projected onto each block's layout as the blocks are
    traversed; every accepted Newton step is recorded.  Gradient computations
    pass ``allow_bisection=False`` so the step sequence is part of the frozen
    discretization.
    """
    tg = assignment.time_grid
    blocks: list[BlockTrajectory] = []
    cur_layout = initial.layout
    cur_x_si = initial.x
    for k in range(tg.n_blocks):
        layout = model.layout_for(assignment.blocks[k].settings)
        x0_si = project_state(cur_x_si, cur_layout, layout) if layout is not cur_layout else cur_x_si
        t0, t1 = tg.block_span(k)
        times, states_int = _advance_block(
            layout,
            layout.from_si(x0_si),
            t0,
            t1,
            assignment.blocks[k].dt,
            controls,
            model.newton,
            allow_bisection=allow_bisection,
        )
        states_si = [layout.to_si(x) for x in states_int]
        blocks.append(BlockTrajectory(layout, np.asarray(times), states_si))
        cur_layout = layout
        cur_x_si = states_si[-1]
    return Trajectory(blocks, controls, assignment)
