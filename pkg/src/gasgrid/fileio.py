"""File formats: network and scenario ingestion, results emission.

Native JSON is the canonical format (all quantities SI); a subset of the
GasLib network XML dialect is read best-effort (topology and pipe parameters;
compressor feasible sets always come from the JSON polygon format).  Results
are written as CSV series plus a schema-versioned JSON run summary.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptivity import AdaptationReport
from .compressor import CharacteristicField, SemiconvexField, build_semiconvex
from .errors import ParseError, UnitError
from .functional import ArcTerm, FunctionalSpec, NodeTerm, PipeTerm
from .models import EquationOfState, PipeParameters
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
)
from .optimize import ConstraintSet, FlowBound, PressureBound, TerminalStationarity
from .sqp import SQPOptions
from .system import Controls
from .timeseries import BoolSeries, TimeSeries
from .transient import Trajectory

log = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1
DEFAULT_TOL = 5e-3

# unit value -> factor to SI
_LENGTH_UNITS = {"m": 1.0, "meter": 1.0, "km": 1e3, "mm": 1e-3}
_PRESSURE_UNITS = {"pa": 1.0, "bar": 1e5, "barg": 1e5}
_TEMPERATURE_UNITS = {"k": 1.0, "celsius": 1.0}


@dataclass
class NetworkSpec:
    """Parsed network data prior to validation/boundary assembly."""

    nodes: list[Node]
    arcs: list[Arc]
    eos: EquationOfState = field(default_factory=EquationOfState)
    gas: dict = field(default_factory=dict)  # rho0, reference_pressure overrides
    provenance: str = ""
    diagnostics: list[str] = field(default_factory=list)

    def to_network(self) -> Network:
        return build_network(self)


@dataclass
class ScenarioSpec:
    horizon: float
    tol: float
    n_time_blocks: int
    boundary: dict[str, NodeCondition]
    controls: Controls
    functional: FunctionalSpec
    constraints: ConstraintSet
    fields: dict[str, SemiconvexField]
    raw_fields: dict[str, CharacteristicField]
    sqp: SQPOptions
    control_dt: float
    nomination: dict[str, TimeSeries] = field(default_factory=dict)
    provenance: str = ""


def _series(pairs, what: str) -> TimeSeries:
    try:
        return TimeSeries.from_pairs(pairs)
    except Exception as exc:
        raise ParseError(f"bad time series for {what}: {exc}") from exc


def _bool_series(pairs, what: str) -> BoolSeries:
    try:
        arr = [(float(t), bool(v)) for t, v in pairs]
        return BoolSeries(np.array([t for t, _ in arr]), np.array([v for _, v in arr]))
    except Exception as exc:
        raise ParseError(f"bad schedule for {what}: {exc}") from exc


def nikuradse_friction(diameter: float, roughness: float) -> float:
    """Fully rough friction coefficient from pipe roughness (both in metres)."""
    if roughness <= 0.0:
        return 0.011
    return (2.0 * math.log10(diameter / roughness) + 1.138) ** -2


# ---------------------------------------------------------------------------
# native JSON network


def parse_network(path, fmt: str | None = None) -> NetworkSpec:
    """Read a network file; format from extension unless given
    ('native-json' or 'gaslib-xml')."""
    path = Path(path)
    if fmt is None:
        fmt = "gaslib-xml" if path.suffix.lower() == ".xml" else "native-json"
    if fmt == "native-json":
        return _parse_network_json(path)
    if fmt == "gaslib-xml":
        return _parse_gaslib_xml(path)
    raise ParseError(f"unknown network format {fmt!r}")


def _node_from_json(d: dict) -> Node:
    try:
        kind = NodeKind(d.get("kind", "interior"))
    except ValueError as exc:
        raise ParseError(f"node {d.get('id')!r}: unknown kind {d.get('kind')!r}") from exc
    boundary = None
    if d.get("boundary") is not None:
        b = d["boundary"]
        ckind = ConditionKind.PRESSURE if b["type"] == "pressure" else ConditionKind.FLOW
        boundary = NodeCondition(ckind, _series(b["series"], f"node {d.get('id')}"))
    p_bounds = None
    if d.get("p_min") is not None or d.get("p_max") is not None:
        p_bounds = (float(d.get("p_min", 0.0)), float(d.get("p_max", math.inf)))
    return Node(d["id"], kind, boundary, p_bounds)


def _arc_from_json(d: dict) -> Arc:
    kind = d.get("type")
    aid, tail, head = d["id"], d["from"], d["to"]
    if kind == "pipe":
        lam = d.get("friction")
        if lam is None:
            lam = nikuradse_friction(float(d["diameter"]), float(d.get("roughness", 0.0)))
        par = PipeParameters.create(
            L=float(d["length"]),
            d=float(d["diameter"]),
            lam=float(lam),
            c=float(d.get("sound_speed", 340.0)),
            rho0=float(d.get("rho0", 0.785)),
            A=d.get("area"),
        )
        return Arc(aid, tail, head, Pipe(par))
    if kind == "short_pipe":
        return Arc(aid, tail, head, ShortPipe())
    if kind == "valve":
        sched = _bool_series(d.get("schedule", [[0.0, True]]), f"valve {aid}")
        return Arc(aid, tail, head, Valve(sched))
    if kind == "control_valve":
        return Arc(aid, tail, head, ControlValve(dp_max=float(d.get("dp_max", 20e5))))
    if kind == "compressor":
        return Arc(
            aid,
            tail,
            head,
            CompressorStation(
                field_id=d["field"],
                eta_ad=float(d.get("eta_ad", 0.8)),
                kappa=float(d.get("kappa", 1.29)),
                c=float(d.get("sound_speed", 340.0)),
                bypass_when_off=bool(d.get("bypass_when_off", False)),
            ),
        )
    raise ParseError(f"arc {aid!r}: unknown type {kind!r}")


def _parse_network_json(path: Path) -> NetworkSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        nodes = [_node_from_json(d) for d in data["nodes"]]
        arcs = [_arc_from_json(d) for d in data["arcs"]]
    except KeyError as exc:
        raise ParseError(f"{path}: missing key {exc}") from exc
    eos_d = data.get("eos", {})
    eos = EquationOfState(
        eos_d.get("kind", "ideal"), float(eos_d.get("z0", 1.0)), float(eos_d.get("alpha", 0.0))
    )
    return NetworkSpec(nodes, arcs, eos, dict(data.get("gas", {})), provenance=f"{path}:native-json")


def emit_network_json(spec: NetworkSpec) -> dict:
    """Canonical JSON form of a network spec (SI units)."""
    nodes = []
    for n in spec.nodes:
        d = {"id": n.id, "kind": n.kind.value}
        if n.boundary is not None:
            d["boundary"] = {
                "type": "pressure" if n.boundary.kind is ConditionKind.PRESSURE else "flow",
                "series": [[float(t), float(v)] for t, v in zip(n.boundary.profile.times, n.boundary.profile.values)],
            }
        if n.p_bounds is not None:
            d["p_min"], d["p_max"] = n.p_bounds
        nodes.append(d)
    arcs = []
    for a in spec.arcs:
        d = {"id": a.id, "from": a.tail, "to": a.head}
        v = a.variant
        if isinstance(v, Pipe):
            d.update(
                type="pipe",
                length=v.params.L,
                diameter=v.params.d,
                area=v.params.A,
                friction=v.params.lam,
                sound_speed=v.params.c,
                rho0=v.params.rho0,
            )
        elif isinstance(v, ShortPipe):
            d["type"] = "short_pipe"
        elif isinstance(v, Valve):
            d["type"] = "valve"
            d["schedule"] = [[float(t), bool(s)] for t, s in zip(v.open.times, v.open.states)]
        elif isinstance(v, ControlValve):
            d["type"] = "control_valve"
            d["dp_max"] = v.dp_max
        elif isinstance(v, CompressorStation):
            d.update(
                type="compressor",
                field=v.field_id,
                eta_ad=v.eta_ad,
                kappa=v.kappa,
                sound_speed=v.c,
                bypass_when_off=v.bypass_when_off,
            )
        arcs.append(d)
    out = {"schema": "gasgrid-network-v1", "nodes": nodes, "arcs": arcs}
    out["eos"] = {"kind": spec.eos.kind, "z0": spec.eos.z0, "alpha": spec.eos.alpha}
    if spec.gas:
        out["gas"] = dict(spec.gas)
    return out


# ---------------------------------------------------------------------------
# GasLib XML subset


def _localname(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _unit_value(el, units: dict[str, float], what: str) -> float:
    val = el.get("value")
    if val is None:
        raise ParseError(f"{what}: element {_localname(el.tag)!r} has no value attribute")
    unit = (el.get("unit") or "").strip().lower()
    if unit and unit not in units:
        raise UnitError(f"{what}: unknown unit {unit!r} on {_localname(el.tag)!r}")
    return float(val) * units.get(unit, 1.0)


def _parse_gaslib_xml(path: Path) -> NetworkSpec:
    try:
        tree = ET.parse(path)
    except (OSError, ET.ParseError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    root = tree.getroot()
    nodes: list[Node] = []
    arcs: list[Arc] = []
    diagnostics: list[str] = []

    node_kinds = {"source": NodeKind.SOURCE, "sink": NodeKind.SINK, "innode": NodeKind.INTERIOR}
    for el in root.iter():
        name = _localname(el.tag)
        if name in node_kinds:
            nid = el.get("id")
            if nid is None:
                raise ParseError(f"{path}: {name} without id")
            p_min = p_max = None
            for child in el:
                cname = _localname(child.tag)
                if cname == "pressureMin":
                    p_min = _unit_value(child, _PRESSURE_UNITS, nid)
                elif cname == "pressureMax":
                    p_max = _unit_value(child, _PRESSURE_UNITS, nid)
            bounds = (p_min or 0.0, p_max) if (p_min is not None or p_max is not None) else None
            if bounds is not None and bounds[1] is None:
                bounds = (bounds[0], math.inf)
            # boundary profiles come from the scenario; GasLib nodes carry none
            kind = node_kinds[name]
            nodes.append(
                Node(nid, kind, boundary=_PLACEHOLDER if kind is not NodeKind.INTERIOR else None, p_bounds=bounds)
            )
        elif name == "pipe":
            aid, tail, head = el.get("id"), el.get("from"), el.get("to")
            length = diameter = None
            roughness = 0.0
            for child in el:
                cname = _localname(child.tag)
                if cname == "length":
                    length = _unit_value(child, _LENGTH_UNITS, aid)
                elif cname == "diameter":
                    diameter = _unit_value(child, _LENGTH_UNITS, aid)
                elif cname == "roughness":
                    roughness = _unit_value(child, _LENGTH_UNITS, aid)
                else:
                    diagnostics.append(f"pipe {aid}: skipped element {cname}")
            if length is None or diameter is None:
                raise ParseError(f"pipe {aid!r}: missing length or diameter")
            par = PipeParameters.create(
                L=length, d=diameter, lam=nikuradse_friction(diameter, roughness)
            )
            arcs.append(Arc(aid, tail, head, Pipe(par)))
        elif name == "shortPipe":
            arcs.append(Arc(el.get("id"), el.get("from"), el.get("to"), ShortPipe()))
        elif name == "valve":
            arcs.append(Arc(el.get("id"), el.get("from"), el.get("to"), Valve(BoolSeries.always(True))))
        elif name == "controlValve":
            arcs.append(Arc(el.get("id"), el.get("from"), el.get("to"), ControlValve()))
        elif name == "compressorStation":
            aid = el.get("id")
            arcs.append(Arc(aid, el.get("from"), el.get("to"), CompressorStation(field_id=aid)))
            diagnostics.append(
                f"compressor {aid}: physical maps not read from XML; supply a polygon field {aid!r}"
            )
        elif name in ("resistor", "heater", "cooler"):
            diagnostics.append(f"skipped unsupported arc element {name} id={el.get('id')}")
    for msg in diagnostics:
        log.warning("%s: %s", path, msg)
    return NetworkSpec(nodes, arcs, provenance=f"{path}:gaslib-xml", diagnostics=diagnostics)


# sources/sinks in GasLib carry no profile; the scenario must supply one.
# The placeholder satisfies the Node invariant and is replaced on merge.
_PLACEHOLDER = NodeCondition(ConditionKind.FLOW, TimeSeries.constant(0.0))


def apply_boundary(spec: NetworkSpec, boundary: dict[str, NodeCondition]) -> NetworkSpec:
    """Replace/install boundary conditions from a scenario; validates coverage."""
    missing = []
    nodes = []
    for n in spec.nodes:
        if n.kind is NodeKind.INTERIOR:
            nodes.append(n)
            continue
        cond = boundary.get(n.id, None if n.boundary is _PLACEHOLDER else n.boundary)
        if cond is None:
            missing.append(n.id)
            cond = _PLACEHOLDER
        nodes.append(Node(n.id, n.kind, cond, n.p_bounds))
    if missing:
        raise ParseError(f"boundary condition missing for nodes: {missing}")
    return NetworkSpec(nodes, spec.arcs, spec.eos, spec.gas, spec.provenance, spec.diagnostics)


# ---------------------------------------------------------------------------
# scenario


def parse_scenario(path, network_spec: NetworkSpec | None = None) -> ScenarioSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc

    try:
        horizon = float(data["horizon"])
    except KeyError as exc:
        raise ParseError(f"{path}: scenario needs a horizon") from exc
    tol = data.get("tol")
    if tol is None:
        tol = DEFAULT_TOL
        log.info("%s: no tol given, using default %.1e", path, DEFAULT_TOL)
    n_blocks = int(data.get("time_blocks", 4))

    boundary: dict[str, NodeCondition] = {}
    for nid, b in data.get("boundary", {}).items():
        ckind = ConditionKind.PRESSURE if b["type"] == "pressure" else ConditionKind.FLOW
        boundary[nid] = NodeCondition(ckind, _series(b["series"], f"boundary {nid}"))

    controls = Controls(boundary=dict(boundary))
    ctrl = data.get("controls", {})
    for aid, c in ctrl.get("compressors", {}).items():
        controls.h_ad[aid] = _series(c["series"], f"compressor {aid}")
        if "on" in c:
            controls.on[aid] = _bool_series(c["on"], f"compressor {aid}")
    for aid, c in ctrl.get("control_valves", {}).items():
        controls.dp[aid] = _series(c["series"], f"control valve {aid}")

    fn = data.get("functional", {})
    node_terms = tuple(
        NodeTerm(
            t["node"],
            t["kind"],
            float(t.get("weight", 1.0)),
            _series(t["target"], f"term {t['node']}") if t.get("target") is not None else None,
        )
        for t in fn.get("node_terms", ())
    )
    pipe_terms = tuple(
        PipeTerm(
            t["arc"],
            t["kind"],
            float(t.get("weight", 1.0)),
            _series(t["target"], f"term {t['arc']}") if t.get("target") is not None else None,
        )
        for t in fn.get("pipe_terms", ())
    )
    arc_terms = tuple(
        ArcTerm(
            t["arc"],
            t["kind"],
            float(t.get("weight", 1.0)),
            _series(t["target"], f"term {t['arc']}") if t.get("target") is not None else None,
        )
        for t in fn.get("arc_terms", ())
    )
    gas = (network_spec.gas if network_spec else {}) or data.get("gas", {})
    functional = FunctionalSpec(node_terms, pipe_terms, arc_terms, rho0=float(gas.get("rho0", 0.785)))

    cn = data.get("constraints", {})
    pressure = tuple(
        PressureBound(
            c["node"],
            _series(c["min"], f"p_min {c['node']}") if c.get("min") is not None else None,
            _series(c["max"], f"p_max {c['node']}") if c.get("max") is not None else None,
            tuple(c["window"]) if c.get("window") else None,
        )
        for c in cn.get("pressure", ())
    )
    flow = tuple(
        FlowBound(
            c["node"],
            _series(c["min"], f"q_min {c['node']}") if c.get("min") is not None else None,
            _series(c["max"], f"q_max {c['node']}") if c.get("max") is not None else None,
            tuple(c["window"]) if c.get("window") else None,
        )
        for c in cn.get("flow", ())
    )
    stat = None
    if cn.get("stationarity"):
        s = cn["stationarity"]
        stat = TerminalStationarity(tuple(s["nodes"]), float(s.get("delta", 1800.0)), float(s.get("tol", 0.2e5)))
    constraints = ConstraintSet(pressure, flow, tuple(cn.get("membership", ())), stat)

    raw_fields: dict[str, CharacteristicField] = {}
    fields: dict[str, SemiconvexField] = {}
    for fid, f in data.get("fields", {}).items():
        raw = CharacteristicField(tuple(np.asarray(p, dtype=float) for p in f["polygons"]))
        raw_fields[fid] = raw
        fields[fid] = build_semiconvex(raw, int(f.get("levels", 32)))

    opt = data.get("optimizer", {})
    sqp = SQPOptions(
        epsx=float(opt.get("epsx", 5e-4)),
        opt_tol=float(opt.get("opt_tol", 1e-6)),
        feas_tol=float(opt.get("feas_tol", 1e-6)),
        max_iter=int(opt.get("max_iter", 200)),
        act_band=float(opt.get("act_band", 1e-3)),
    )
    nomination = {
        nid: _series(pairs, f"nomination {nid}") for nid, pairs in data.get("nomination", {}).items()
    }
    # series extend constantly beyond their breakpoints, so partial spans are
    # fine; breakpoints outside [0, horizon] indicate a likely unit mistake
    for nid, series in list(nomination.items()) + [(n, c.profile) for n, c in boundary.items()]:
        if series.times[0] < -1e-9 or series.times[-1] > horizon * (1 + 1e-9):
            raise ParseError(
                f"series for {nid!r} has breakpoints outside the horizon [0, {horizon}]"
            )

    return ScenarioSpec(
        horizon=horizon,
        tol=float(tol),
        n_time_blocks=n_blocks,
        boundary=boundary,
        controls=controls,
        functional=functional,
        constraints=constraints,
        fields=fields,
        raw_fields=raw_fields,
        sqp=sqp,
        control_dt=float(opt.get("control_dt", 1800.0)),
        nomination=nomination,
        provenance=str(path),
    )


# ---------------------------------------------------------------------------
# results


def write_results(
    traj: Trajectory,
    report: AdaptationReport | None,
    out_dir,
    summary_extra: dict | None = None,
    resample: float | None = None,
) -> dict[str, Path]:
    """Write node series CSV, adaptation report CSV, and the JSON run summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, Path] = {}

    nodes_csv = out / "nodes.csv"
    node_ids = list(traj.blocks[0].layout.network.nodes)
    series = traj.states_at_nodes(node_ids)
    with nodes_csv.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "node", "p_Pa", "q_m3_per_s"])
        if resample:
            t_grid = np.arange(series[node_ids[0]][0, 0], traj.t_end + 0.5 * resample, resample)
            for nid in node_ids:
                arr = series[nid]
                p = np.interp(t_grid, arr[:, 0], arr[:, 1])
                q = np.interp(t_grid, arr[:, 0], arr[:, 2])
                for t, pv, qv in zip(t_grid, p, q):
                    w.writerow([f"{t:.6g}", nid, f"{pv:.10g}", f"{qv:.10g}"])
        else:
            for nid in node_ids:
                for t, pv, qv in series[nid]:
                    w.writerow([f"{t:.6g}", nid, f"{pv:.10g}", f"{qv:.10g}"])
    files["nodes"] = nodes_csv

    if report is not None:
        adapt_csv = out / "adaptation.csv"
        with adapt_csv.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["block", "t_start_s", "t_end_s", "dt_s", "pct_m1", "pct_m2", "pct_m3",
                 "eta_model", "eta_dx", "eta_dt", "budget", "redos", "accepted"]
            )
            for b in report.blocks:
                w.writerow(
                    [b.index, f"{b.t_start:.6g}", f"{b.t_end:.6g}", f"{b.dt:.6g}",
                     f"{b.usage['M1']:.4f}", f"{b.usage['M2']:.4f}", f"{b.usage['M3']:.4f}",
                     f"{b.eta_model:.6e}", f"{b.eta_dx:.6e}", f"{b.eta_dt:.6e}",
                     f"{b.budget:.6e}", b.redos, int(b.accepted)]
                )
        files["adaptation"] = adapt_csv

    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "status": "ok",
        "t_end_s": traj.t_end,
        "n_steps": traj.n_steps(),
    }
    if report is not None:
        summary.update(
            functional_value=report.functional_value,
            tol=report.tol,
            wall_time_s=report.wall_time,
            model_usage=report.model_usage(),
            dt_max_s=report.dt_range()[0],
            dt_min_s=report.dt_range()[1],
            warnings=list(report.warnings),
        )
    if summary_extra:
        summary.update(summary_extra)
    summary_json = out / "summary.json"
    summary_json.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files["summary"] = summary_json
    return files
