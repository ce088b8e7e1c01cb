"""Command-line front end: steady, simulate, optimize, check-field, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .adaptivity import AdaptivityOptions, adaptive_simulate
from .errors import GasgridError
from .functional import evaluate
from .grids import ModelAssignment, PipeSetting, TimeGrid
from .models import ModelLevel
from .optimize import ControlVector, control_gradient, validate_nomination
from .system import Controls
from .transient import (
    BlockTrajectory,
    NewtonOptions,
    SimulationModel,
    Trajectory,
    simulate,
    steady_state,
)

log = logging.getLogger("gasgrid")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


@dataclass
class RunConfig:
    command: str
    network: Path | None = None
    scenario: Path | None = None
    tol: float | None = None
    out: Path = Path("out")
    fixed_model: str | None = None
    dt: float | None = None
    dx_max: float | None = None
    resample: float | None = None
    horizon_split: int = 1
    verbosity: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.fixed_model is not None and self.fixed_model not in ("m1", "m2", "m3"):
            raise ValueError(f"unknown model level {self.fixed_model!r}")


def max_workers() -> int:
    cap = os.environ.get("GASGRID_THREADS")
    try:
        return max(1, int(cap)) if cap else max(1, os.cpu_count() or 1)
    except ValueError:
        return 1


def _parse_args(argv) -> RunConfig:
    ap = argparse.ArgumentParser(prog="gasgrid", description=__doc__)
    ap.add_argument("command", choices=["steady", "simulate", "optimize", "check-field", "gradcheck"])
    ap.add_argument("--network", type=Path, help="network file (.json native or .xml GasLib subset)")
    ap.add_argument("--scenario", type=Path, help="scenario file (.json)")
    ap.add_argument("--tol", type=float, help="adaptivity tolerance override")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    ap.add_argument("--fixed-model", choices=["m1", "m2", "m3"], help="disable model adaptivity")
    ap.add_argument("--dt", type=float, help="fixed time step (disables time adaptivity)")
    ap.add_argument("--dx-max", type=float, help="target cell size for pipe grids")
    ap.add_argument("--resample", type=float, help="uniform output sampling interval [s]")
    ap.add_argument("--horizon-split", type=int, default=1, help="sequential optimization sub-horizons")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ns = ap.parse_args(argv)
    if ns.fixed_model is not None and ns.tol is not None:
        ap.error("--fixed-model disables adaptivity; --tol cannot be combined with it")
    return RunConfig(
        command=ns.command,
        network=ns.network,
        scenario=ns.scenario,
        tol=ns.tol,
        out=ns.out,
        fixed_model=ns.fixed_model,
        dt=ns.dt,
        dx_max=ns.dx_max,
        resample=ns.resample,
        horizon_split=ns.horizon_split,
        verbosity=ns.verbose,
        seed=ns.seed,
    )


def _load(config: RunConfig):
    if config.network is None or config.scenario is None:
        raise GasgridError(f"{config.command} needs --network and --scenario")
    spec = fileio.parse_network(config.network)
    scenario = fileio.parse_scenario(config.scenario, spec)
    spec = fileio.apply_boundary(spec, scenario.boundary)
    network = spec.to_network()
    gas = spec.gas or {}
    model = SimulationModel(
        network,
        eos=spec.eos,
        reference_pressure=float(gas.get("reference_pressure", 50e5)),
        rho0=float(gas.get("rho0", 0.785)),
        newton=NewtonOptions(),
    )
    return model, scenario


def _settings(model, config: RunConfig, level=ModelLevel.M2):
    dx = config.dx_max or 5000.0
    if config.fixed_model:
        level = ModelLevel[config.fixed_model.upper()]
    return {
        a.id: PipeSetting(level, max(1, round(a.variant.params.L / dx)))
        for a in model.network.pipes()
    }


def _single_state_trajectory(state) -> Trajectory:
    blk = BlockTrajectory(state.layout, np.array([state.t]), [state.x])
    tg = TimeGrid(np.array([state.t, state.t + 1.0]))
    from .grids import BlockAssignment

    assignment = ModelAssignment(tg, (BlockAssignment(dict(state.layout.settings), 1.0),))
    return Trajectory([blk], Controls(), assignment)


def run(config: RunConfig) -> int:
    """Execute one command; returns the process exit status."""
    logging.basicConfig(
        level=logging.DEBUG if config.verbosity > 1 else logging.INFO if config.verbosity else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    np.random.seed(config.seed)
    try:
        if config.command == "check-field":
            return _run_check_field(config)
        if config.command == "steady":
            return _run_steady(config)
        if config.command == "simulate":
            return _run_simulate(config)
        if config.command == "gradcheck":
            return _run_gradcheck(config)
        if config.command == "optimize":
            return _run_optimize(config)
        raise GasgridError(f"unknown command {config.command!r}")
    except GasgridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"status": "error", "error": str(exc)}), file=sys.stderr)
        return EXIT_ERROR


def _run_steady(config: RunConfig) -> int:
    model, scenario = _load(config)
    st = steady_state(model, _settings(model, config), scenario.controls)
    traj = _single_state_trajectory(st)
    files = fileio.write_results(traj, None, config.out, {"command": "steady"})
    print(json.dumps({"status": "ok", "files": {k: str(v) for k, v in files.items()}}))
    return EXIT_OK


def _run_simulate(config: RunConfig) -> int:
    model, scenario = _load(config)
    tg = TimeGrid.uniform(scenario.horizon, scenario.n_time_blocks)
    if config.fixed_model:
        settings = _settings(model, config)
        st = steady_state(model, settings, scenario.controls)
        from .grids import BlockAssignment

        dt = config.dt or 600.0
        assignment = ModelAssignment(
            tg, tuple(BlockAssignment(settings, dt) for _ in range(tg.n_blocks))
        )
        traj = simulate(model, assignment, scenario.controls, st)
        val = evaluate(traj, scenario.functional)
        report = None
        extra = {"command": "simulate", "functional_value": val.total, "adaptive": False}
    else:
        opts = AdaptivityOptions(
            dt_init=config.dt or 3600.0, dx_init=config.dx_max or 5000.0
        )
        settings = {
            a.id: PipeSetting(opts.initial_level, max(1, round(a.variant.params.L / opts.dx_init)))
            for a in model.network.pipes()
        }
        st = steady_state(model, settings, scenario.controls)
        tol = config.tol if config.tol is not None else scenario.tol
        traj, report, _ = adaptive_simulate(
            model, scenario.functional, scenario.controls, tol, st, tg, opts
        )
        extra = {"command": "simulate", "adaptive": True}
    files = fileio.write_results(traj, report, config.out, extra, resample=config.resample)
    print(json.dumps({"status": "ok", "files": {k: str(v) for k, v in files.items()}}))
    return EXIT_OK


def _run_check_field(config: RunConfig) -> int:
    if config.scenario is None:
        raise GasgridError("check-field needs --scenario (with a fields section)")
    scenario = fileio.parse_scenario(config.scenario)
    if not scenario.fields:
        raise GasgridError("scenario carries no compressor fields")
    stats = {}
    for fid, sc_field in scenario.fields.items():
        stats[fid] = {
            "levels": int(sc_field.levels.size),
            "h_min": sc_field.h_min,
            "h_max": sc_field.h_max,
            "q_min": float(np.min(sc_field.q_lo)),
            "q_max": float(np.max(sc_field.q_hi)),
            "absorbed_hole_levels": list(sc_field.absorbed_holes),
            "max_bound_slope": sc_field.max_bound_slope,
        }
        print(
            f"{fid}: {stats[fid]['levels']} levels, H_ad in [{sc_field.h_min:.5g}, {sc_field.h_max:.5g}],"
            f" Q in [{stats[fid]['q_min']:.5g}, {stats[fid]['q_max']:.5g}],"
            f" {len(sc_field.absorbed_holes)} bridged gap level(s)"
        )
    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "fields.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(json.dumps({"status": "ok", "fields": list(stats)}))
    return EXIT_OK


def _run_gradcheck(config: RunConfig) -> int:
    model, scenario = _load(config)
    # verification runs need states well below the FD noise floor
    model.newton = NewtonOptions(tol=1e-9)
    settings = _settings(model, config)
    controls0 = scenario.controls
    st = steady_state(model, settings, controls0)
    tg = TimeGrid.uniform(scenario.horizon, scenario.n_time_blocks)
    from .grids import BlockAssignment

    dt = config.dt or min(scenario.control_dt, 1800.0)
    assignment = ModelAssignment(tg, tuple(BlockAssignment(settings, dt) for _ in range(tg.n_blocks)))
    cv = ControlVector.build(model, controls0, scenario.fields, scenario.horizon, scenario.control_dt)
    if cv.n == 0:
        raise GasgridError("no controls to check (network has no compressors or control valves)")
    x = cv.values.copy()
    _, grad, _ = control_gradient(model, cv, x, assignment, st, scenario.functional)

    def fd_entry(j: int) -> float:
        h = 5e-5 * max(1.0, abs(x[j]))
        vals = []
        for s in (h, -h):
            x2 = x.copy()
            x2[j] += s
            t2 = simulate(model, assignment, cv.to_controls(x2), st, allow_bisection=False)
            vals.append(evaluate(t2, scenario.functional).total)
        return (vals[0] - vals[1]) / (2 * h)

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        fd = np.array(list(pool.map(fd_entry, range(cv.n))))
    floor = 1e-3 * np.max(np.abs(fd)) if np.any(fd) else 1.0
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), floor)
    worst = float(np.max(rel))
    print(f"gradcheck: {cv.n} parameters, max rel. error {worst:.3e}")
    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "gradcheck.json").write_text(
        json.dumps({"max_rel_error": worst, "n_params": cv.n}, indent=2) + "\n"
    )
    print(json.dumps({"status": "ok", "max_rel_error": worst}))
    return EXIT_OK


def _run_optimize(config: RunConfig) -> int:
    model, scenario = _load(config)
    if not scenario.nomination:
        raise GasgridError("optimize needs a nomination section in the scenario")
    settings = _settings(model, config)
    st = steady_state(model, settings, scenario.controls)
    n_split = max(1, config.horizon_split)
    edges = np.linspace(0.0, scenario.horizon, n_split + 1)
    statuses = []
    state = st
    summaries = []
    last = None
    for seg in range(n_split):
        tg = TimeGrid.uniform(edges[seg + 1] - edges[seg], max(1, scenario.n_time_blocks // n_split), t0=edges[seg])
        cv = ControlVector.build(
            model, scenario.controls, scenario.fields, scenario.horizon, scenario.control_dt
        )
        rep = validate_nomination(
            model,
            state,
            scenario.nomination,
            scenario.constraints,
            scenario.functional,
            cv,
            scenario.fields,
            tg,
            sqp_opts=scenario.sqp,
            prep_tol=scenario.tol,
        )
        statuses.append(rep.nlp.status)
        state = rep.trajectory.final_state()
        last = rep
        summaries.append(
            {
                "segment": seg,
                "status": rep.nlp.status,
                "objective": rep.nlp.objective,
                "iterations": rep.nlp.iterations,
                "max_violation": rep.post_hoc_violation,
                "stationarity": rep.stationarity_measure,
                "tracking_residuals": rep.tracking_residuals,
            }
        )
    status = "converged" if all(s == "converged" for s in statuses) else (
        "infeasible" if "infeasible" in statuses else "max_iter"
    )
    extra = {"command": "optimize", "status": status, "segments": summaries}
    fileio.write_results(last.trajectory, None, config.out, extra, resample=config.resample)
    controls_out = {
        "compressors": {
            aid: [[float(t), float(v)] for t, v in zip(s.times, s.values)]
            for aid, s in last.controls.h_ad.items()
        },
        "control_valves": {
            aid: [[float(t), float(v)] for t, v in zip(s.times, s.values)]
            for aid, s in last.controls.dp.items()
        },
    }
    (config.out / "controls.json").write_text(json.dumps(controls_out, indent=2) + "\n")
    print(json.dumps({"status": status, "segments": summaries}, default=float))
    return EXIT_OK if status == "converged" else EXIT_INFEASIBLE if status == "infeasible" else EXIT_ERROR


def main(argv=None) -> int:
    try:
        config = _parse_args(argv if argv is not None else sys.argv[1:])
    except SystemExit as exc:
        return int(exc.code or 0)
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
