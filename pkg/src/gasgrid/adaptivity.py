"""Dual-weighted error estimators and the model/space/time adaptive driver.

Per pipe and per time block three estimators are formed by weighting residual
differences with block-local adjoint multipliers of the output functional:

* model: residual of the next-higher model evaluated on the current solution
  (same grid for M2->M3; for M1 pipes the semilinear box residual on the
  linearly interpolated endpoint solution, weighted with interface adjoints);
* space: box residual on a once-refined grid, states interpolated;
* time: box residuals of two half steps, states interpolated in time.

The driver spends a tolerance budget proportional to block length, split
equally between the three error sources, refining worst offenders first and
coarsening when a block runs far below budget.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import solve_block_adjoint
from .errors import BudgetUnreachable
from .functional import FunctionalSpec, evaluate, state_gradient
from .grids import BlockAssignment, ModelAssignment, PipeSetting, TimeGrid, fit_dt
from .models import ModelLevel
from .system import Controls, P_SCALE, SystemLayout, pipe_box_rows
from .transient import (
    BlockTrajectory,
    DiscreteState,
    SimulationModel,
    Trajectory,
    _advance_block,
    project_state,
)


@dataclass(frozen=True)
class AdaptivityOptions:
    theta_coarsen: float = 0.1
    redo_limit: int = 3
    gamma_model: float = 0.1  # projected estimate shrink per refinement kind
    gamma_dx: float = 0.25
    gamma_dt: float = 0.5
    dt_init: float = 3600.0
    dt_min: float = 10.0
    dx_init: float = 5000.0
    dx_min: float = 200.0
    initial_level: ModelLevel = ModelLevel.M1
    coarsen_safety: float = 0.8
    strict_budget: bool = False


@dataclass
class ErrorEstimate:
    """Per-pipe estimates for one block.

    Magnitudes accumulate per step (no cancellation across a block, which
    would mask oscillatory transients); the sign of the plain signed sum is
    kept for reporting.
    """

    model_err: dict[str, float]
    dx_err: dict[str, float]
    dt_err: dict[str, float]

    def kind_sum(self, kind: str) -> float:
        d = getattr(self, f"{kind}_err")
        return float(sum(abs(v) for v in d.values()))

    def total(self) -> float:
        return self.kind_sum("model") + self.kind_sum("dx") + self.kind_sum("dt")


def _interface_weights(layout: SystemLayout, mu_k: np.ndarray, arc_id: str):
    """(pressure-row, mass-row) adjoint values at both endpoints of an arc."""
    net = layout.network
    arc = net.arcs[arc_id]
    vals = {}
    for end, nid in (("tail", arc.tail), ("head", arc.head)):
        nb = layout.node_blocks[nid]
        p_row = next(row for aid, e, row in nb.pressure_rows if aid == arc_id and e == end)
        vals[end] = (mu_k[p_row], mu_k[nb.mass_row])
    return vals


def estimate_errors(
    model: SimulationModel,
    blk: BlockTrajectory,
    controls: Controls,
    mu: np.ndarray,
    settings: dict[str, PipeSetting],
) -> ErrorEstimate:
    """Adjoint-weighted model/space/time estimates for one simulated block."""
    layout = blk.layout
    pipes = [a for a in layout.network.pipes()]
    est = ErrorEstimate(
        {a.id: 0.0 for a in pipes}, {a.id: 0.0 for a in pipes}, {a.id: 0.0 for a in pipes}
    )
    mags = {
        "model": {a.id: 0.0 for a in pipes},
        "dx": {a.id: 0.0 for a in pipes},
        "dt": {a.id: 0.0 for a in pipes},
    }
    for k in range(1, len(blk.times)):
        x_new, x_old = blk.states[k], blk.states[k - 1]
        dt = float(blk.times[k] - blk.times[k - 1])
        mu_k = mu[k - 1]
        for arc in pipes:
            aid = arc.id
            pb = layout.pipe_blocks.get(aid)
            if pb is not None:
                pi, qi = pb.p_indices(), pb.q_indices()
                p_new, q_new = x_new[pi], x_new[qi]
                p_old, q_old = x_old[pi], x_old[qi]
                rows1 = mu_k[pb.eq_off : pb.eq_off + 2 * pb.n_cells : 2]
                rows2 = mu_k[pb.eq_off + 1 : pb.eq_off + 2 * pb.n_cells : 2]
                if pb.level == ModelLevel.M2:
                    # M3 adds a q^2/p term to the second flux component only
                    a = pb.params.rho0 * pb.params.c**2 / pb.params.A
                    d = a * q_new * q_new / p_new
                    diff2 = dt / pb.dx * (d[1:] - d[:-1])
                    inner = -float(rows2 @ diff2)
                    est.model_err[aid] += inner
                    mags["model"][aid] += abs(inner)
                # space: once-refined grid, linear interpolation, half dual weight
                xs = np.arange(pb.n_points)
                xf = np.linspace(0.0, pb.n_points - 1, 2 * pb.n_cells + 1)
                pf_new, qf_new = np.interp(xf, xs, p_new), np.interp(xf, xs, q_new)
                pf_old, qf_old = np.interp(xf, xs, p_old), np.interp(xf, xs, q_old)
                c1f, c2f = pipe_box_rows(
                    pb.params, pb.level, pf_new, qf_new, pf_old, qf_old, pb.dx / 2.0, dt
                )
                w1 = 0.5 * np.repeat(rows1, 2)
                w2 = 0.5 * np.repeat(rows2, 2)
                inner = -float(w1 @ (c1f / P_SCALE) + w2 @ c2f)
                est.dx_err[aid] += inner
                mags["dx"][aid] += abs(inner)
                # time: two half steps on time-interpolated states
                p_half, q_half = 0.5 * (p_old + p_new), 0.5 * (q_old + q_new)
                c1a, c2a = pipe_box_rows(pb.params, pb.level, p_half, q_half, p_old, q_old, pb.dx, dt / 2)
                c1b, c2b = pipe_box_rows(pb.params, pb.level, p_new, q_new, p_half, q_half, pb.dx, dt / 2)
                inner = -float(
                    0.5 * rows1 @ ((c1a + c1b) / P_SCALE) + 0.5 * rows2 @ (c2a + c2b)
                )
                est.dt_err[aid] += inner
                mags["dt"][aid] += abs(inner)
            else:
                # M1 pipe: semilinear residual on the interpolated endpoint
                # solution, dual-weighted with interface multipliers converted
                # to equivalent box-row sensitivities:
                #   continuity defect over a cell == injected flow of
                #   dx A /(rho0 c^2 dt) * (residual in Pa), weighted with the
                #   node mass-row duals;
                #   momentum defect == pressure jump rho0 dx/(A dt) * residual,
                #   weighted with the pressure-equality duals.
                ab = layout.arc_blocks[aid]
                par = ab.m1_params
                n = max(1, settings[aid].n_cells)
                dx = par.L / n
                frac = np.linspace(0.0, 1.0, n + 1)
                ends_new = x_new[[ab.x_off, ab.x_off + 2]], x_new[[ab.x_off + 1, ab.x_off + 3]]
                ends_old = x_old[[ab.x_off, ab.x_off + 2]], x_old[[ab.x_off + 1, ab.x_off + 3]]
                # the algebraic law fixes the interior profile: p(s)^2 affine in s
                p_new_i = np.sqrt((1.0 - frac) * ends_new[0][0] ** 2 + frac * ends_new[0][1] ** 2)
                q_new_i = ends_new[1][0] + frac * (ends_new[1][1] - ends_new[1][0])
                p_old_i = np.sqrt((1.0 - frac) * ends_old[0][0] ** 2 + frac * ends_old[0][1] ** 2)
                q_old_i = ends_old[1][0] + frac * (ends_old[1][1] - ends_old[1][0])
                c1, c2 = pipe_box_rows(
                    par, ModelLevel.M2, p_new_i, q_new_i, p_old_i, q_old_i, dx, dt
                )
                w = _interface_weights(layout, mu_k, aid)
                mid = 0.5 * (frac[:-1] + frac[1:])
                mu_peq = (1.0 - mid) * w["tail"][0] + mid * w["head"][0]
                mu_mass = (1.0 - mid) * w["tail"][1] + mid * w["head"][1]
                flow_per_c1 = dx * par.A / (par.rho0 * par.c**2 * dt)  # m^3/s per Pa of residual
                dp_per_c2 = par.rho0 * dx / (par.A * dt) / P_SCALE  # bar per (m^3/s) of residual
                inner = -float((mu_mass * flow_per_c1) @ c1 + (mu_peq * dp_per_c2) @ c2)
                est.model_err[aid] += inner
                mags["model"][aid] += abs(inner)
    # magnitude accumulated per step, sign from the plain signed sum
    for kind in ("model", "dx", "dt"):
        d = getattr(est, f"{kind}_err")
        for aid in d:
            d[aid] = math.copysign(mags[kind][aid], d[aid]) if d[aid] != 0.0 else mags[kind][aid]
    return est


def adapt(
    estimates: ErrorEstimate,
    budget: float,
    block: BlockAssignment,
    opts: AdaptivityOptions = AdaptivityOptions(),
    pipe_lengths: dict[str, float] | None = None,
    block_length: float | None = None,
    direction: str = "both",
) -> BlockAssignment:
    """One refinement/coarsening decision for a block.

    Refines worst offenders per estimator kind until the projected sums meet
    the per-kind budget; coarsens smallest contributors when the whole block
    runs below theta_coarsen of its budget.  Deterministic: ties break on arc
    id.  Idempotent when the budget is met and coarsening is not indicated.
    ``direction`` restricts the moves: 'refine' (redo loop), 'coarsen'
    (carry-over to the next block), or 'both'.
    """
    settings = dict(block.settings)
    dt = block.dt
    kind_budget = budget / 3.0
    lengths = pipe_lengths or {}

    def order(d, reverse):
        return sorted(d.items(), key=lambda kv: (-abs(kv[1]), kv[0]) if reverse else (abs(kv[1]), kv[0]))

    n_pipes = max(1, len(settings))
    if direction in ("both", "refine"):
        # -- model refinement: one level per pipe per call; only contributors
        # above their equidistributed share are marked (worst offenders).
        # Upgraded pipes drop out of the running sum entirely: the redo loop
        # re-estimates their residual error at the new level.
        s = estimates.kind_sum("model")
        fair = kind_budget / n_pipes
        if s > kind_budget:
            for aid, eta in order(estimates.model_err, reverse=True):
                if s <= kind_budget or abs(eta) < fair:
                    break
                if settings[aid].level < ModelLevel.M3:
                    settings[aid] = settings[aid].upgraded_level()
                    s -= abs(eta)
        # -- space refinement: halve the worst projected contributor until the
        # budget is met (a pipe may halve repeatedly within one call)
        s = estimates.kind_sum("dx")
        if s > kind_budget:
            projected = {aid: abs(v) for aid, v in estimates.dx_err.items()}
            for _ in range(64):
                if s <= kind_budget:
                    break
                refinable = [
                    aid
                    for aid in projected
                    if projected[aid] >= fair
                    and (
                        lengths.get(aid) is None
                        or lengths[aid] / (2 * settings[aid].n_cells) >= opts.dx_min
                    )
                ]
                if not refinable:
                    break
                aid = max(refinable, key=lambda a: (projected[a], a))
                settings[aid] = settings[aid].refined_dx()
                s -= (1.0 - opts.gamma_dx) * projected[aid]
                projected[aid] *= opts.gamma_dx
        # -- time refinement (dt is global per block)
        s = estimates.kind_sum("dt")
        while s > kind_budget and dt > opts.dt_min:
            dt = max(dt / 2.0, opts.dt_min)
            s *= opts.gamma_dt

    # -- coarsening, only when comfortably below the whole budget
    if direction in ("both", "coarsen") and estimates.total() < opts.theta_coarsen * budget:
        s = estimates.kind_sum("model")
        for aid, eta in order(estimates.model_err, reverse=False):
            if settings[aid].level > ModelLevel.M1:
                projected = s - abs(eta) + abs(eta) / opts.gamma_model
                if projected <= opts.coarsen_safety * kind_budget:
                    settings[aid] = settings[aid].downgraded_level()
                    s = projected
        s = estimates.kind_sum("dx")
        for aid, eta in order(estimates.dx_err, reverse=False):
            if settings[aid].n_cells > 1:
                projected = s - abs(eta) + abs(eta) / opts.gamma_dx
                if projected <= opts.coarsen_safety * kind_budget:
                    settings[aid] = settings[aid].coarsened_dx()
                    s = projected
        if estimates.kind_sum("dt") / opts.gamma_dt <= opts.coarsen_safety * kind_budget:
            if block_length is not None:
                dt = min(dt * 2.0, block_length)
    return BlockAssignment(settings, dt)


@dataclass
class BlockReport:
    index: int
    t_start: float
    t_end: float
    dt: float
    redos: int
    eta_model: float
    eta_dx: float
    eta_dt: float
    budget: float
    usage: dict[str, float]  # level name -> share of pipes
    accepted: bool


@dataclass
class AdaptationReport:
    tol: float
    blocks: list[BlockReport] = field(default_factory=list)
    functional_value: float = 0.0
    functional_per_block: np.ndarray | None = None
    wall_time: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def model_usage(self) -> dict[str, float]:
        total = sum(b.t_end - b.t_start for b in self.blocks)
        usage = {"M1": 0.0, "M2": 0.0, "M3": 0.0}
        for b in self.blocks:
            w = (b.t_end - b.t_start) / total
            for lvl, share in b.usage.items():
                usage[lvl] += w * share
        return usage

    def dt_range(self) -> tuple[float, float]:
        dts = [b.dt for b in self.blocks]
        return (max(dts), min(dts))


def initial_assignment(
    model: SimulationModel, time_grid: TimeGrid, opts: AdaptivityOptions
) -> ModelAssignment:
    settings = {}
    for arc in model.network.pipes():
        n = max(1, round(arc.variant.params.L / opts.dx_init))
        settings[arc.id] = PipeSetting(opts.initial_level, n)
    blocks = tuple(
        BlockAssignment(dict(settings), min(opts.dt_init, time_grid.block_length(k)))
        for k in range(time_grid.n_blocks)
    )
    return ModelAssignment(time_grid, blocks)


def _usage_shares(settings: dict[str, PipeSetting]) -> dict[str, float]:
    n = max(1, len(settings))
    out = {"M1": 0.0, "M2": 0.0, "M3": 0.0}
    for s in settings.values():
        out[s.level.name] += 1.0 / n
    return out


def adaptive_simulate(
    model: SimulationModel,
    spec: FunctionalSpec,
    controls: Controls,
    tol: float,
    initial: DiscreteState,
    time_grid: TimeGrid,
    opts: AdaptivityOptions = AdaptivityOptions(),
    start_assignment: ModelAssignment | None = None,
) -> tuple[Trajectory, AdaptationReport, ModelAssignment]:
    """Block-wise adaptive simulation meeting a user tolerance on the functional.

    Per block: simulate, solve the block-local adjoint, estimate model/space/
    time errors, accept or refine-and-redo (bounded); far below budget the
    next block starts coarser.  Returns the accepted trajectory, a report with
    per-block statistics, and the accepted assignment.
    """
    t_wall = _time.perf_counter()
    report = AdaptationReport(tol=tol)
    assignment = start_assignment or initial_assignment(model, time_grid, opts)
    horizon = time_grid.horizon
    pipe_lengths = {a.id: a.variant.params.L for a in model.network.pipes()}

    accepted_blocks: list[BlockTrajectory] = []
    accepted_assign: list[BlockAssignment] = []
    cur_state = initial
    carry_settings: dict[str, PipeSetting] | None = None

    for k in range(time_grid.n_blocks):
        t0, t1 = time_grid.block_span(k)
        budget = tol * (t1 - t0) / horizon
        block = assignment.blocks[k]
        if carry_settings is not None:
            block = BlockAssignment(dict(carry_settings), block.dt)
        block = BlockAssignment(block.settings, fit_dt(t1 - t0, block.dt))

        accepted = False
        redos = 0
        while True:
            layout = model.layout_for(block.settings)
            x0_si = (
                project_state(cur_state.x, cur_state.layout, layout)
                if layout is not cur_state.layout
                else cur_state.x
            )
            times, states_int = _advance_block(
                layout, layout.from_si(x0_si), t0, t1, block.dt, controls, model.newton
            )
            blk = BlockTrajectory(layout, np.asarray(times), [layout.to_si(x) for x in states_int])
            sub_assignment = ModelAssignment(
                TimeGrid(np.array([t0, t1])), (BlockAssignment(block.settings, block.dt),)
            )
            sub_traj = Trajectory([blk], controls, sub_assignment)
            seeds = state_gradient(sub_traj, spec)
            mu = solve_block_adjoint(blk, controls, seeds[0])
            est = estimate_errors(model, blk, controls, mu, block.settings)
            if est.total() <= budget or redos >= opts.redo_limit:
                if est.total() > budget:
                    msg = (
                        f"block {k}: estimate {est.total():.3e} above budget {budget:.3e} "
                        f"after {redos} redos"
                    )
                    if opts.strict_budget:
                        raise BudgetUnreachable(msg)
                    report.warnings.append(msg)
                accepted = est.total() <= budget
                break
            block = adapt(
                est, budget, block, opts, pipe_lengths, block_length=t1 - t0, direction="refine"
            )
            block = BlockAssignment(block.settings, fit_dt(t1 - t0, block.dt))
            redos += 1

        report.blocks.append(
            BlockReport(
                index=k,
                t_start=t0,
                t_end=t1,
                dt=block.dt,
                redos=redos,
                eta_model=est.kind_sum("model"),
                eta_dx=est.kind_sum("dx"),
                eta_dt=est.kind_sum("dt"),
                budget=budget,
                usage=_usage_shares(block.settings),
                accepted=accepted,
            )
        )
        accepted_blocks.append(blk)
        accepted_assign.append(block)
        cur_state = DiscreteState(layout, blk.states[-1], t1)

        # the next block inherits the accepted settings, possibly coarsened
        next_block = adapt(
            est, budget, block, opts, pipe_lengths, block_length=t1 - t0, direction="coarsen"
        )
        carry_settings = next_block.settings
        if k + 1 < time_grid.n_blocks:
            assignment = assignment.with_block(
                k + 1, BlockAssignment(dict(next_block.settings), next_block.dt)
            )

    final_assignment = ModelAssignment(time_grid, tuple(accepted_assign))
    traj = Trajectory(accepted_blocks, controls, final_assignment)
    val = evaluate(traj, spec)
    report.functional_value = val.total
    report.functional_per_block = val.per_block
    report.wall_time = _time.perf_counter() - t_wall
    return traj, report, final_assignment
