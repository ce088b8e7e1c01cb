"""Optimal control of the network: control parameterization, trajectory
constraints with adjoint Jacobian rows, and nomination validation.

The discretization is frozen during one NLP solve: a preparatory adaptive run
picks the assignment, which is flattened to a time-uniform state layout (the
per-block dt survives).  Objective and constraint gradients are then exact
discrete adjoints of that frozen problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptivity import AdaptivityOptions, adaptive_simulate
from .adjoint import (
    Parameter,
    chain_rule_gradient,
    direct_energy_gradient,
    solve_discrete_adjoint,
    trajectory_factors,
)
from .compressor import SemiconvexField, constraint_gradients, constraint_values
from .errors import InputError, NewtonDiverged
from .functional import FunctionalSpec, evaluate, state_gradient
from .grids import ModelAssignment, TimeGrid
from .models import compressibility
from .network import CompressorStation, ControlValve
from .sqp import ConstraintEval, NLPResult, SQPOptions, sqp_solve
from .system import Controls, P_SCALE
from .timeseries import TimeSeries
from .transient import DiscreteState, SimulationModel, Trajectory, simulate


# ---------------------------------------------------------------------------
# control vector


@dataclass
class ControlVector:
    """Flattened time-node values of all controls with bounds and index map.

    Entries are nondimensionalized per control kind (heads by 1e4 m^2/s^2,
    pressure drops by 1 bar) so NLP tolerances like epsx act on O(1) numbers.
    The t=0 node of every series is frozen (it defines the initial steady
    state the transient starts from), so parameters cover nodes 1..end.
    """

    params: list[Parameter]
    values: np.ndarray  # scaled
    lower: np.ndarray
    upper: np.ndarray
    scale: np.ndarray  # physical units per entry unit
    template: Controls

    H_SCALE = 1e4
    DP_SCALE = 1e5

    @classmethod
    def build(
        cls,
        model: SimulationModel,
        controls0: Controls,
        fields: dict[str, SemiconvexField],
        horizon: float,
        control_dt: float = 1800.0,
    ) -> "ControlVector":
        n_nodes = max(2, round(horizon / control_dt) + 1)
        t_nodes = np.linspace(0.0, horizon, n_nodes)
        template = controls0.copy()
        params: list[Parameter] = []
        vals, lo, hi = [], [], []
        for arc in model.network.compressors():
            station: CompressorStation = arc.variant
            if arc.id not in controls0.h_ad:
                raise InputError(f"no initial head control for compressor {arc.id!r}")
            series = TimeSeries(t_nodes, controls0.h_ad[arc.id](t_nodes))
            template.h_ad[arc.id] = series
            f = fields.get(station.field_id)
            h_lo, h_hi = (f.h_min, f.h_max) if f is not None else (0.0, 1e6)
            for i in range(1, n_nodes):
                params.append(Parameter("h_ad", arc.id, i))
                vals.append(series.values[i] / cls.H_SCALE)
                lo.append(h_lo / cls.H_SCALE)
                hi.append(h_hi / cls.H_SCALE)
        for arc in model.network.control_valves():
            cv: ControlValve = arc.variant
            if arc.id not in controls0.dp:
                raise InputError(f"no initial pressure-drop control for valve {arc.id!r}")
            series = TimeSeries(t_nodes, controls0.dp[arc.id](t_nodes))
            template.dp[arc.id] = series
            for i in range(1, n_nodes):
                params.append(Parameter("dp", arc.id, i))
                vals.append(series.values[i] / cls.DP_SCALE)
                lo.append(0.0)
                hi.append(cv.dp_max / cls.DP_SCALE)
        scale = np.array([cls.H_SCALE if p.kind == "h_ad" else cls.DP_SCALE for p in params])
        return cls(params, np.array(vals), np.array(lo), np.array(hi), scale, template)

    @property
    def n(self) -> int:
        return len(self.params)

    def to_controls(self, x: np.ndarray) -> Controls:
        c = self.template.copy()
        edits: dict[tuple[str, str], np.ndarray] = {}
        for p, v in zip(self.params, x * self.scale):
            key = (p.kind, p.target_id)
            if key not in edits:
                series = c.h_ad[p.target_id] if p.kind == "h_ad" else c.dp[p.target_id]
                edits[key] = series.values.copy()
            edits[key][p.index] = v
        for (kind, aid), vals in edits.items():
            if kind == "h_ad":
                c.h_ad[aid] = c.h_ad[aid].with_values(vals)
            else:
                c.dp[aid] = c.dp[aid].with_values(vals)
        return c


# ---------------------------------------------------------------------------
# constraints on trajectories


@dataclass(frozen=True)
class PressureBound:
    node_id: str
    lower: TimeSeries | None = None
    upper: TimeSeries | None = None
    window: tuple[float, float] | None = None


@dataclass(frozen=True)
class FlowBound:
    node_id: str
    lower: TimeSeries | None = None
    upper: TimeSeries | None = None
    window: tuple[float, float] | None = None


@dataclass(frozen=True)
class TerminalStationarity:
    node_ids: tuple[str, ...]
    delta: float = 1800.0  # compare u(T) against u(T - delta)
    tol: float = 0.2e5  # Pa


@dataclass(frozen=True)
class ConstraintSet:
    pressure: tuple[PressureBound, ...] = ()
    flow: tuple[FlowBound, ...] = ()
    membership: tuple[str, ...] = ()  # compressor arc ids constrained to their field
    stationarity: TerminalStationarity | None = None


@dataclass
class ConstraintRow:
    label: str
    value: float  # scaled, feasible iff >= 0
    seeds: list[tuple[int, int, np.ndarray]]  # (block, step, d value / d SI state)
    h_ad_direct: tuple[str, float, float] | None = None  # (arc, dvalue/dH, t)
    family: str = ""  # rows of one family sample the same bound over time


def _inlet_q_vol_and_derivatives(layout, x, arc_id, rho0):
    """Q at compressor inlet plus dQ/dq_in, dQ/dp_in."""
    arc = layout.network.arcs[arc_id]
    station: CompressorStation = arc.variant
    ip_in, iq_in = layout.endpoint_indices(arc_id, "tail")
    p_in, q_in = float(x[ip_in]), float(x[iq_in])
    eos = layout.eos
    z = compressibility(p_in, eos)
    # Q = q rho0 / rho_in with rho_in = p z0 / (z c^2)
    coef = rho0 * station.c**2 / eos.z0
    Q = q_in * coef * z / p_in
    dQ_dq = coef * z / p_in
    dz = -eos.alpha if eos.kind == "affine" else 0.0
    dQ_dp = q_in * coef * (dz * p_in - z) / (p_in * p_in)
    return Q, dQ_dq, dQ_dp, ip_in, iq_in


def build_constraint_rows(
    model: SimulationModel,
    traj: Trajectory,
    cons: ConstraintSet,
    fields: dict[str, SemiconvexField],
) -> list[ConstraintRow]:
    """Pointwise rows sampled at every accepted step (initial state excluded)."""
    rows: list[ConstraintRow] = []

    def in_window(w, t):
        return w is None or (w[0] <= t <= w[1])

    for b, blk in enumerate(traj.blocks):
        layout = blk.layout
        for k in range(1, len(blk.times)):
            t = float(blk.times[k])
            x = blk.states[k]
            for pb in cons.pressure:
                if not in_window(pb.window, t):
                    continue
                nb = layout.node_blocks[pb.node_id]
                p = float(x[nb.x_off])
                if pb.lower is not None:
                    seed = np.zeros(layout.n)
                    seed[nb.x_off] = 1.0 / P_SCALE
                    rows.append(
                        ConstraintRow(
                            f"p[{pb.node_id}]>=lo@{t:.0f}",
                            (p - float(pb.lower(t))) / P_SCALE,
                            [(b, k, seed)],
                            family=f"p_lo:{pb.node_id}",
                        )
                    )
                if pb.upper is not None:
                    seed = np.zeros(layout.n)
                    seed[nb.x_off] = -1.0 / P_SCALE
                    rows.append(
                        ConstraintRow(
                            f"p[{pb.node_id}]<=hi@{t:.0f}",
                            (float(pb.upper(t)) - p) / P_SCALE,
                            [(b, k, seed)],
                            family=f"p_hi:{pb.node_id}",
                        )
                    )
            for fb in cons.flow:
                if not in_window(fb.window, t):
                    continue
                nb = layout.node_blocks[fb.node_id]
                q = float(x[nb.x_off + 1])
                if fb.lower is not None:
                    seed = np.zeros(layout.n)
                    seed[nb.x_off + 1] = 1.0
                    rows.append(
                        ConstraintRow(
                            f"q[{fb.node_id}]>=lo@{t:.0f}",
                            q - float(fb.lower(t)),
                            [(b, k, seed)],
                            family=f"q_lo:{fb.node_id}",
                        )
                    )
                if fb.upper is not None:
                    seed = np.zeros(layout.n)
                    seed[nb.x_off + 1] = -1.0
                    rows.append(
                        ConstraintRow(
                            f"q[{fb.node_id}]<=hi@{t:.0f}",
                            float(fb.upper(t)) - q,
                            [(b, k, seed)],
                            family=f"q_hi:{fb.node_id}",
                        )
                    )
            for aid in cons.membership:
                if not traj.controls.is_on(aid, t):
                    continue
                station = layout.network.arcs[aid].variant
                f = fields[station.field_id]
                h_ad = traj.controls.head_at(aid, t)
                Q, dQ_dq, dQ_dp, ip_in, iq_in = _inlet_q_vol_and_derivatives(
                    layout, x, aid, model.rho0
                )
                vals = constraint_values(f, Q, h_ad)
                grads = constraint_gradients(f, Q, h_ad)
                h_span = f.h_max - f.h_min
                q_span = float(np.max(f.q_hi) - np.min(f.q_lo)) or 1.0
                scales = np.array([h_span, h_span, q_span, q_span])
                for c in range(4):
                    sc = scales[c]
                    seed = np.zeros(layout.n)
                    seed[iq_in] = grads[c, 0] * dQ_dq / sc
                    seed[ip_in] = grads[c, 0] * dQ_dp / sc
                    rows.append(
                        ConstraintRow(
                            f"field[{aid}]#{c}@{t:.0f}",
                            float(vals[c]) / sc,
                            [(b, k, seed)],
                            h_ad_direct=(aid, float(grads[c, 1]) / sc, t),
                            family=f"field:{aid}:{c}",
                        )
                    )

    if cons.stationarity is not None:
        st = cons.stationarity
        blk = traj.blocks[-1]
        layout = blk.layout
        tT = float(blk.times[-1])
        kT = len(blk.times) - 1
        # walk back to the accepted step closest to T - delta
        k0 = int(np.argmin(np.abs(blk.times - (tT - st.delta))))
        k0 = max(0, min(k0, kT - 1))
        b = len(traj.blocks) - 1
        for nid in st.node_ids:
            nb = layout.node_blocks[nid]
            dp = float(blk.states[kT][nb.x_off] - blk.states[k0][nb.x_off])
            for sgn, tag in ((1.0, "+"), (-1.0, "-")):
                seed_T = np.zeros(layout.n)
                seed_T[nb.x_off] = -sgn / P_SCALE
                seed_0 = np.zeros(layout.n)
                seed_0[nb.x_off] = sgn / P_SCALE
                seeds = [(b, kT, seed_T)]
                if k0 > 0:
                    seeds.append((b, k0, seed_0))
                rows.append(
                    ConstraintRow(
                        f"stat[{nid}]{tag}",
                        (st.tol - sgn * dp) / P_SCALE,
                        seeds,
                        family=f"stat:{nid}:{tag}",
                    )
                )
    return rows


def constraint_jacobian_rows(
    traj: Trajectory,
    rows: list[ConstraintRow],
    indices: np.ndarray,
    params: list[Parameter],
    factors: list[list] | None = None,
) -> np.ndarray:
    """Adjoint-based gradient rows d value_i / d params for the requested rows.

    All rows share one batched backward sweep (and the step factorizations)."""
    m = len(indices)
    if m == 0:
        return np.zeros((0, len(params)))
    seeds = [np.zeros((len(blk.times), blk.layout.n, m)) for blk in traj.blocks]
    for r, i in enumerate(indices):
        for b, k, vec in rows[int(i)].seeds:
            seeds[b][k, :, r] += vec
    adj = solve_discrete_adjoint(traj, seeds, factors)
    out = chain_rule_gradient(traj, adj, params)
    for r, i in enumerate(indices):
        row = rows[int(i)]
        if row.h_ad_direct is not None:
            aid, dval_dh, t = row.h_ad_direct
            w = traj.controls.h_ad[aid].weights(t)
            for j, p in enumerate(params):
                if p.kind == "h_ad" and p.target_id == aid:
                    out[r, j] += dval_dh * w[p.index]
    return out


# ---------------------------------------------------------------------------
# the NLP: objective/constraint callbacks around the simulator


def control_gradient(
    model: SimulationModel,
    cv: ControlVector,
    x: np.ndarray,
    assignment: ModelAssignment,
    initial: DiscreteState,
    spec: FunctionalSpec,
) -> tuple[float, np.ndarray, Trajectory]:
    """Objective value and exact gradient at controls x on the frozen assignment."""
    controls = cv.to_controls(x)
    traj = simulate(model, assignment, controls, initial, allow_bisection=False)
    val = evaluate(traj, spec)
    seeds = state_gradient(traj, spec)
    adj = solve_discrete_adjoint(traj, seeds)
    grad = direct_energy_gradient(traj, spec, cv.params) + chain_rule_gradient(
        traj, adj, cv.params
    )
    return val.total, grad * cv.scale, traj


@dataclass
class NominationReport:
    nlp: NLPResult
    trajectory: Trajectory
    controls: Controls
    post_hoc_violation: float
    stationarity_measure: float
    tracking_residuals: dict[str, float]
    assignment: ModelAssignment

    @property
    def feasible(self) -> bool:
        return self.nlp.converged


def _tracking_residuals(traj: Trajectory, spec: FunctionalSpec) -> dict[str, float]:
    """Relative RMS mismatch of every tracking term against its target."""
    out = {}
    for term in spec.node_terms + spec.arc_terms:
        if term.kind not in ("track_pressure", "track_flow") or term.target is None:
            continue
        num = 0.0
        den = 0.0
        span = 0.0
        for blk in traj.blocks:
            layout = blk.layout
            for k in range(1, len(blk.times)):
                t = float(blk.times[k])
                dt = float(blk.times[k] - blk.times[k - 1])
                if hasattr(term, "node_id"):
                    nb = layout.node_blocks[term.node_id]
                    v = blk.states[k][nb.x_off if term.kind == "track_pressure" else nb.x_off + 1]
                    label = term.node_id
                else:
                    _, iq = layout.endpoint_indices(term.arc_id, "tail")
                    v = blk.states[k][iq]
                    label = term.arc_id
                tgt = float(term.target(t))
                num += dt * (v - tgt) ** 2
                den += dt * tgt * tgt
                span += dt
        scale = math.sqrt(den / span) if den > 0 else 1.0
        out[label] = math.sqrt(num / span) / scale
    return out


def validate_nomination(
    model: SimulationModel,
    state_a: DiscreteState,
    nomination_b: dict[str, TimeSeries],
    cons: ConstraintSet,
    spec: FunctionalSpec,
    cv: ControlVector,
    fields: dict[str, SemiconvexField],
    time_grid: TimeGrid,
    sqp_opts: SQPOptions = SQPOptions(),
    adapt_opts: AdaptivityOptions = AdaptivityOptions(),
    prep_tol: float = 5e-3,
) -> NominationReport:
    """Can the network reach the nominated state B from steady state A?

    The ramped nomination profiles are hard boundary conditions; compressor
    heads and control-valve drops are optimized to minimize the functional
    (tracking plus energy) subject to pressure/flow bounds and semiconvex
    field membership.  Feasibility is re-checked post hoc by an independent
    re-simulation at the returned controls.
    """
    from .network import ConditionKind, NodeCondition

    base_controls = cv.to_controls(cv.values)
    for nid, series in nomination_b.items():
        node = model.network.nodes[nid]
        kind = node.boundary.kind if node.boundary else ConditionKind.FLOW
        base_controls.boundary[nid] = NodeCondition(kind, series)
    cv = replace_template(cv, base_controls)

    # preparatory adaptive run fixes the discretization
    _, _, assignment = adaptive_simulate(
        model, spec, base_controls, prep_tol, state_a, time_grid, adapt_opts
    )
    frozen = assignment.flattened()
    # steps coarser than the control grid would leave control nodes without
    # influence (flat NLP directions); cap dt at the control spacing
    control_dts = [np.min(np.diff(s.times)) for s in cv.template.h_ad.values()]
    control_dts += [np.min(np.diff(s.times)) for s in cv.template.dp.values()]
    if control_dts:
        dt_cap = float(min(control_dts))
        from .grids import BlockAssignment

        frozen = ModelAssignment(
            frozen.time_grid,
            tuple(BlockAssignment(b.settings, min(b.dt, dt_cap)) for b in frozen.blocks),
        )

    cache: dict[bytes, tuple[Trajectory, list]] = {}

    def traj_at(x: np.ndarray) -> tuple[Trajectory, list]:
        key = x.tobytes()
        if key not in cache:
            controls = cv.to_controls(x)
            traj = simulate(model, frozen, controls, state_a, allow_bisection=False)
            cache.clear()
            cache[key] = (traj, trajectory_factors(traj))
        return cache[key]

    def objective(x):
        try:
            traj, factors = traj_at(x)
        except NewtonDiverged:
            # reject this probe point through the merit function
            return 1e30, np.zeros(cv.n)
        val = evaluate(traj, spec)
        seeds = state_gradient(traj, spec)
        adj = solve_discrete_adjoint(traj, seeds, factors)
        grad = direct_energy_gradient(traj, spec, cv.params) + chain_rule_gradient(
            traj, adj, cv.params
        )
        return val.total, grad * cv.scale

    def constraints(x):
        try:
            traj, factors = traj_at(x)
        except NewtonDiverged:
            return ConstraintEval(np.array([-1e30]), lambda idx: np.zeros((len(idx), cv.n)))
        rows = build_constraint_rows(model, traj, cons, fields)
        values = np.array([r.value for r in rows] + list(x - cv.lower) + list(cv.upper - x))
        n_rows = len(rows)
        fam_codes: dict[str, int] = {}
        groups = np.empty(values.size, dtype=int)
        for i, r in enumerate(rows):
            groups[i] = fam_codes.setdefault(r.family or f"row{i}", len(fam_codes))
        for i in range(n_rows, values.size):
            groups[i] = fam_codes.setdefault(f"box{i - n_rows}", len(fam_codes))

        def jac(indices):
            idx = np.asarray(indices, dtype=int)
            out = np.zeros((idx.size, cv.n))
            traj_rows = idx[idx < n_rows]
            if traj_rows.size:
                out[: traj_rows.size] = (
                    constraint_jacobian_rows(traj, rows, traj_rows, cv.params, factors)
                    * cv.scale[None, :]
                )
            for r, i in enumerate(idx):
                if i >= n_rows:  # box rows
                    j = int(i - n_rows)
                    if j < cv.n:
                        out[r, j] = 1.0
                    else:
                        out[r, j - cv.n] = -1.0
            return out

        return ConstraintEval(values, jac, groups)

    nlp = sqp_solve(objective, constraints, cv.values.copy(), sqp_opts)

    # post hoc: independent re-simulation and direct constraint re-evaluation
    final_controls = cv.to_controls(nlp.x)
    final_traj = simulate(model, frozen, final_controls, state_a, allow_bisection=False)
    rows = build_constraint_rows(model, final_traj, cons, fields)
    post_viol = max([0.0] + [-r.value for r in rows])
    box_viol = max(
        0.0, float(np.max(cv.lower - nlp.x, initial=0.0)), float(np.max(nlp.x - cv.upper, initial=0.0))
    )
    post_viol = max(post_viol, box_viol)
    stat = _stationarity_measure(final_traj, cons.stationarity)
    status = nlp.status
    if nlp.converged and post_viol > sqp_opts.feas_tol:
        status = "infeasible"
    nlp = replace_status(nlp, status, post_viol)
    return NominationReport(
        nlp=nlp,
        trajectory=final_traj,
        controls=final_controls,
        post_hoc_violation=post_viol,
        stationarity_measure=stat,
        tracking_residuals=_tracking_residuals(final_traj, spec),
        assignment=frozen,
    )


def _stationarity_measure(traj: Trajectory, stationarity: TerminalStationarity | None) -> float:
    blk = traj.blocks[-1]
    delta = stationarity.delta if stationarity is not None else 1800.0
    tT = float(blk.times[-1])
    kT = len(blk.times) - 1
    k0 = int(np.argmin(np.abs(blk.times - (tT - delta))))
    k0 = max(0, min(k0, kT - 1))
    diff = blk.states[kT] - blk.states[k0]
    return float(np.max(np.abs(diff / blk.layout.col_scale)))


def replace_template(cv: ControlVector, controls: Controls) -> ControlVector:
    return ControlVector(cv.params, cv.values, cv.lower, cv.upper, cv.scale, controls)


def replace_status(nlp: NLPResult, status: str, post_viol: float) -> NLPResult:
    nlp.status = status
    nlp.max_violation = max(nlp.max_violation, post_viol)
    return nlp
