"""Per-time-step nonlinear system of the whole network.

Unknown vector layout (one block per component):

* PDE pipe (level M2/M3, n cells): interleaved (p_0, q_0, ..., p_n, q_n)
* non-PDE arc (M1 pipe, short pipe, valve, control valve, compressor):
  (p_in, q_in, p_out, q_out)
* node: (p_v, q_v)

Equations: two box-scheme rows per pipe cell, two algebraic rows per non-PDE
arc, and per node one mass balance, one boundary/interior condition and one
pressure-equality row per incident arc endpoint.  The system is square by
construction.

The box rows are nondimensionalized by dt (state-sized residuals), and the
whole system is diagonally scaled: pressures are carried in bar internally,
residual rows are divided by per-row reference magnitudes.  Newton tolerances
and adjoint multipliers refer to this scaled system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InputError
from .compressor import pressure_ratio_derivatives
from .models import (
    EquationOfState,
    GasState,
    ModelLevel,
    PipeParameters,
    effective_sound_speed,
    flux,
    flux_arrays,
    flux_jacobian_arrays,
    m1_friction_coefficient,
    source,
    source_arrays,
    source_jacobian_arrays,
)
from .network import (
    Arc,
    CompressorStation,
    ConditionKind,
    ControlValve,
    Network,
    Node,
    NodeCondition,
    Pipe,
    ShortPipe,
    Valve,
)
from .grids import PipeSetting
from .timeseries import BoolSeries, TimeSeries

P_SCALE = 1e5  # Pa per internal pressure unit (bar)
M1_PRESSURE_REF = 50e5  # Pa; scales the quadratic algebraic pipe row
STEADY_DT_REF = 600.0  # s; nondimensionalization constant for steady rows


# ---------------------------------------------------------------------------
# controls


@dataclass
class Controls:
    """Everything time-dependent that drives a simulation besides the state.

    ``boundary`` overrides node boundary profiles (used by optimization to
    perturb boundary data without rebuilding the network).
    """

    h_ad: dict[str, TimeSeries] = field(default_factory=dict)  # compressor head [m^2/s^2]
    on: dict[str, BoolSeries] = field(default_factory=dict)  # compressor on/off
    dp: dict[str, TimeSeries] = field(default_factory=dict)  # control valve drop [Pa]
    boundary: dict[str, NodeCondition] = field(default_factory=dict)

    def head_at(self, arc_id: str, t: float) -> float:
        if arc_id not in self.h_ad:
            raise InputError(f"no head control for compressor {arc_id!r}")
        return float(self.h_ad[arc_id](t))

    def is_on(self, arc_id: str, t: float) -> bool:
        sched = self.on.get(arc_id)
        return True if sched is None else sched(t)

    def dp_at(self, arc_id: str, t: float) -> float:
        if arc_id not in self.dp:
            raise InputError(f"no pressure-drop control for control valve {arc_id!r}")
        return float(self.dp[arc_id](t))

    def boundary_condition(self, node: Node) -> NodeCondition:
        cond = self.boundary.get(node.id, node.boundary)
        if cond is None:
            raise InputError(f"node {node.id!r} has no boundary condition")
        return cond

    def copy(self) -> "Controls":
        return Controls(dict(self.h_ad), dict(self.on), dict(self.dp), dict(self.boundary))


# ---------------------------------------------------------------------------
# public box-scheme stencil


def box_residual(
    level: ModelLevel,
    u_old: tuple[GasState, GasState],
    u_new: tuple[GasState, GasState],
    par: PipeParameters,
    dx: float,
    dt: float,
) -> np.ndarray:
    """Implicit box-scheme residual of one cell (SI units).

    0.5*(uL' + uR' - uL - uR)/dt + (f(uR') - f(uL'))/dx - 0.5*(g(uL') + g(uR'))
    with primes denoting the new time level; zero at a converged step.
    """
    uL, uR = u_old
    uLn, uRn = u_new
    fL = flux(level, uLn, par)
    fR = flux(level, uRn, par)
    gL = source(uLn, par)
    gR = source(uRn, par)
    r = np.empty(2)
    r[0] = 0.5 * ((uLn.p - uL.p) + (uRn.p - uR.p)) / dt + (fR[0] - fL[0]) / dx - 0.5 * (gL[0] + gR[0])
    r[1] = 0.5 * ((uLn.q - uL.q) + (uRn.q - uR.q)) / dt + (fR[1] - fL[1]) / dx - 0.5 * (gL[1] + gR[1])
    return r


def pipe_box_rows(par, level, p_new, q_new, p_old, q_old, dx, dt, steady=False):
    """Vectorized dt-scaled box rows for all cells of one pipe (SI units).

    Returns (comp1, comp2) arrays of length n_cells; equals dt * box_residual
    per cell.  With ``steady`` the time-difference terms are dropped.
    """
    f1, f2 = flux_arrays(level, p_new, q_new, par)
    _, g2 = source_arrays(p_new, q_new, par)
    r = dt / dx
    c1 = r * (f1[1:] - f1[:-1])
    c2 = r * (f2[1:] - f2[:-1]) - 0.5 * dt * (g2[:-1] + g2[1:])
    if not steady:
        c1 = c1 + 0.5 * ((p_new[:-1] - p_old[:-1]) + (p_new[1:] - p_old[1:]))
        c2 = c2 + 0.5 * ((q_new[:-1] - q_old[:-1]) + (q_new[1:] - q_old[1:]))
    return c1, c2


def pipe_box_jacobian(par, level, p_new, q_new, dx, dt, steady=False):
    """Cell-wise derivatives of pipe_box_rows w.r.t. (pL, qL, pR, qR) at the new level.

    Returns two (n_cells, 4) arrays, one per row component.
    """
    d11, d12, d21, d22 = flux_jacobian_arrays(level, p_new, q_new, par)
    dg2p, dg2q = source_jacobian_arrays(p_new, q_new, par)
    r = dt / dx
    half = 0.0 if steady else 0.5
    n = p_new.size - 1
    j1 = np.empty((n, 4))
    j2 = np.empty((n, 4))
    j1[:, 0] = half - r * d11[:-1]
    j1[:, 1] = -r * d12[:-1]
    j1[:, 2] = half + r * d11[1:]
    j1[:, 3] = r * d12[1:]
    j2[:, 0] = -r * d21[:-1] - 0.5 * dt * dg2p[:-1]
    j2[:, 1] = half - r * d22[:-1] - 0.5 * dt * dg2q[:-1]
    j2[:, 2] = r * d21[1:] - 0.5 * dt * dg2p[1:]
    j2[:, 3] = half + r * d22[1:] - 0.5 * dt * dg2q[1:]
    return j1, j2


# ---------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class PipeBlock:
    arc_id: str
    params: PipeParameters  # with the equation of state folded into c
    level: ModelLevel
    n_cells: int
    x_off: int
    eq_off: int

    @property
    def n_points(self) -> int:
        return self.n_cells + 1

    @property
    def dx(self) -> float:
        return self.params.L / self.n_cells

    def p_indices(self) -> np.ndarray:
        return self.x_off + 2 * np.arange(self.n_points)

    def q_indices(self) -> np.ndarray:
        return self.x_off + 2 * np.arange(self.n_points) + 1

    def rows(self) -> np.ndarray:
        """All equation rows (comp1 and comp2 interleaved per cell)."""
        return self.eq_off + np.arange(2 * self.n_cells)


@dataclass(frozen=True)
class ArcBlock:
    arc_id: str
    x_off: int  # (p_in, q_in, p_out, q_out)
    eq_off: int  # flow row; pressure row is eq_off + 1
    m1_params: PipeParameters | None = None  # set for pipes running at level M1


@dataclass(frozen=True)
class NodeBlock:
    node_id: str
    x_off: int  # (p_v, q_v)
    mass_row: int
    cond_row: int
    pressure_rows: tuple[tuple[str, str, int], ...]  # (arc_id, 'tail'|'head', row)


class SystemLayout:
    """Index map of unknowns and equations for one (network, pipe settings) pair."""

    def __init__(
        self,
        network: Network,
        settings: dict[str, PipeSetting],
        eos: EquationOfState = EquationOfState(),
        reference_pressure: float = 50e5,
    ):
        self.network = network
        self.settings = dict(settings)
        self.eos = eos
        self.reference_pressure = reference_pressure
        self.pipe_blocks: dict[str, PipeBlock] = {}
        self.arc_blocks: dict[str, ArcBlock] = {}
        self.node_blocks: dict[str, NodeBlock] = {}

        x_off = 0
        pde, algebraic = [], []
        for arc in network.arcs.values():
            if arc.is_pipe:
                s = settings.get(arc.id)
                if s is None:
                    raise DimensionMismatch(f"no setting for pipe {arc.id!r}")
                (pde if s.level >= ModelLevel.M2 else algebraic).append(arc)
            else:
                algebraic.append(arc)

        eq_off = 0
        for arc in pde:
            s = settings[arc.id]
            par = self._effective_params(arc.variant.params)
            self.pipe_blocks[arc.id] = PipeBlock(arc.id, par, s.level, s.n_cells, x_off, eq_off)
            x_off += 2 * (s.n_cells + 1)
            eq_off += 2 * s.n_cells
        for arc in algebraic:
            m1par = self._effective_params(arc.variant.params) if arc.is_pipe else None
            self.arc_blocks[arc.id] = ArcBlock(arc.id, x_off, eq_off, m1par)
            x_off += 4
            eq_off += 2
        for nid in network.nodes:
            mass = eq_off
            cond = eq_off + 1
            eq_off += 2
            prows = []
            for aid in network.out_arcs[nid]:
                prows.append((aid, "tail", eq_off))
                eq_off += 1
            for aid in network.in_arcs[nid]:
                prows.append((aid, "head", eq_off))
                eq_off += 1
            self.node_blocks[nid] = NodeBlock(nid, x_off, mass, cond, tuple(prows))
            x_off += 2

        self.n = x_off
        if eq_off != x_off:
            raise DimensionMismatch(f"system not square: {eq_off} equations, {x_off} unknowns")

        self.col_scale = np.ones(self.n)
        for pb in self.pipe_blocks.values():
            self.col_scale[pb.p_indices()] = P_SCALE
        for ab in self.arc_blocks.values():
            self.col_scale[[ab.x_off, ab.x_off + 2]] = P_SCALE
        for nb in self.node_blocks.values():
            self.col_scale[nb.x_off] = P_SCALE

    def _effective_params(self, par: PipeParameters) -> PipeParameters:
        c_eff = effective_sound_speed(par, self.eos, self.reference_pressure)
        return par.with_sound_speed(c_eff) if c_eff != par.c else par

    # -- index helpers ------------------------------------------------------

    def endpoint_indices(self, arc_id: str, end: str) -> tuple[int, int]:
        """(pressure index, flow index) of an arc endpoint ('tail' or 'head')."""
        if arc_id in self.pipe_blocks:
            pb = self.pipe_blocks[arc_id]
            j = 0 if end == "tail" else pb.n_points - 1
            return (pb.x_off + 2 * j, pb.x_off + 2 * j + 1)
        ab = self.arc_blocks[arc_id]
        return (ab.x_off, ab.x_off + 1) if end == "tail" else (ab.x_off + 2, ab.x_off + 3)

    def node_indices(self, node_id: str) -> tuple[int, int]:
        nb = self.node_blocks[node_id]
        return (nb.x_off, nb.x_off + 1)

    def layout_key(self) -> tuple:
        return tuple(sorted((aid, s.level.value, s.n_cells) for aid, s in self.settings.items()))

    def to_si(self, x_internal: np.ndarray) -> np.ndarray:
        return x_internal * self.col_scale

    def from_si(self, x_si: np.ndarray) -> np.ndarray:
        return x_si / self.col_scale

    # -- scaling ------------------------------------------------------------

    def row_scales(self, t: float, controls: Controls) -> np.ndarray:
        """Per-row reference magnitudes dividing the SI residual.

        Valve rows depend on the open/closed state at time t, so this is a
        function of time; box-row and node-row scales are static.
        """
        s = np.ones(self.n)
        for pb in self.pipe_blocks.values():
            s[pb.eq_off : pb.eq_off + 2 * pb.n_cells : 2] = P_SCALE
        for ab in self.arc_blocks.values():
            arc = self.network.arcs[ab.arc_id]
            v = arc.variant
            if ab.m1_params is not None:
                s[ab.eq_off + 1] = 2.0 * M1_PRESSURE_REF * P_SCALE
            elif isinstance(v, Valve) and not v.open(t):
                pass  # both rows are plain flows
            elif isinstance(v, CompressorStation) and not controls.is_on(arc.id, t) and not v.bypass_when_off:
                pass
            else:
                s[ab.eq_off + 1] = P_SCALE
        for nid, nb in self.node_blocks.items():
            node = self.network.nodes[nid]
            if node.kind.value != "interior":
                if controls.boundary_condition(node).kind is ConditionKind.PRESSURE:
                    s[nb.cond_row] = P_SCALE
            for _, _, row in nb.pressure_rows:
                s[row] = P_SCALE
        return s

    def old_state_matrix(self) -> sp.csr_matrix:
        """d(residual)/d(previous state) in internal scaling; constant per layout.

        Only box rows couple to the old state, with coefficient -1/2 on each
        cell endpoint (identical in internal units because row and column
        scales cancel per component).
        """
        rows, cols, vals = [], [], []
        for pb in self.pipe_blocks.values():
            for cell in range(pb.n_cells):
                r1 = pb.eq_off + 2 * cell
                pl, ql = pb.x_off + 2 * cell, pb.x_off + 2 * cell + 1
                pr, qr = pl + 2, ql + 2
                rows += [r1, r1, r1 + 1, r1 + 1]
                cols += [pl, pr, ql, qr]
                vals += [-0.5, -0.5, -0.5, -0.5]
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))


# ---------------------------------------------------------------------------
# assembly


def assemble_system(
    layout: SystemLayout,
    x_guess: np.ndarray,
    x_old: np.ndarray | None,
    t_new: float,
    dt: float,
    controls: Controls,
    steady: bool = False,
    with_jacobian: bool = True,
    pipe_level_override: dict[str, ModelLevel] | None = None,
):
    """Residual (and exact sparse Jacobian) of the coupled step system.

    States are in internal units.  ``steady`` drops the time-difference terms
    (and uses a fixed reference dt for row conditioning).  ``pipe_level_override``
    evaluates selected pipes with a different flux/source level on the same
    grid (used by the model-error estimator).
    """
    if x_guess.shape != (layout.n,):
        raise DimensionMismatch(f"state has size {x_guess.shape}, expected {layout.n}")
    if not steady and (x_old is None or x_old.shape != (layout.n,)):
        raise DimensionMismatch("transient assembly needs a previous state of matching size")
    dt_eff = STEADY_DT_REF if steady else dt
    u = layout.to_si(x_guess)
    u_old = layout.to_si(x_old) if x_old is not None else None

    R = np.zeros(layout.n)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for pb in layout.pipe_blocks.values():
        level = (pipe_level_override or {}).get(pb.arc_id, pb.level)
        pi, qi = pb.p_indices(), pb.q_indices()
        p_new, q_new = u[pi], u[qi]
        p_old = u_old[pi] if u_old is not None else None
        q_old = u_old[qi] if u_old is not None else None
        c1, c2 = pipe_box_rows(pb.params, level, p_new, q_new, p_old, q_old, pb.dx, dt_eff, steady)
        r0 = pb.eq_off
        R[r0 : r0 + 2 * pb.n_cells : 2] = c1
        R[r0 + 1 : r0 + 2 * pb.n_cells : 2] = c2
        if with_jacobian:
            j1, j2 = pipe_box_jacobian(pb.params, level, p_new, q_new, pb.dx, dt_eff, steady)
            cells = np.arange(pb.n_cells)
            cell_rows1 = r0 + 2 * cells
            cell_cols = np.column_stack([pi[:-1], qi[:-1], pi[1:], qi[1:]])
            for comp, jmat in ((0, j1), (1, j2)):
                rr = np.repeat(cell_rows1 + comp, 4)
                cc = cell_cols.ravel()
                vv = jmat.ravel()
                rows.extend(rr.tolist())
                cols.extend(cc.tolist())
                vals.extend(vv.tolist())

    for ab in layout.arc_blocks.values():
        arc = layout.network.arcs[ab.arc_id]
        ip_in, iq_in, ip_out, iq_out = ab.x_off, ab.x_off + 1, ab.x_off + 2, ab.x_off + 3
        p_in, q_in, p_out, q_out = u[ip_in], u[iq_in], u[ip_out], u[iq_out]
        fr, pr = ab.eq_off, ab.eq_off + 1
        v = arc.variant
        if ab.m1_params is not None:
            C = m1_friction_coefficient(ab.m1_params)
            R[fr] = q_in - q_out
            R[pr] = p_out * p_out - p_in * p_in + C * abs(q_in) * q_in
            if with_jacobian:
                add(fr, iq_in, 1.0)
                add(fr, iq_out, -1.0)
                add(pr, ip_in, -2.0 * p_in)
                add(pr, ip_out, 2.0 * p_out)
                add(pr, iq_in, 2.0 * C * abs(q_in))
        elif isinstance(v, (ShortPipe, Valve)):
            is_open = True if isinstance(v, ShortPipe) else v.open(t_new)
            if is_open:
                R[fr] = q_in - q_out
                R[pr] = p_in - p_out
                if with_jacobian:
                    add(fr, iq_in, 1.0)
                    add(fr, iq_out, -1.0)
                    add(pr, ip_in, 1.0)
                    add(pr, ip_out, -1.0)
            else:
                R[fr] = q_in
                R[pr] = q_out
                if with_jacobian:
                    add(fr, iq_in, 1.0)
                    add(pr, iq_out, 1.0)
        elif isinstance(v, ControlValve):
            R[fr] = q_in - q_out
            R[pr] = p_in - p_out - controls.dp_at(arc.id, t_new)
            if with_jacobian:
                add(fr, iq_in, 1.0)
                add(fr, iq_out, -1.0)
                add(pr, ip_in, 1.0)
                add(pr, ip_out, -1.0)
        elif isinstance(v, CompressorStation):
            if controls.is_on(arc.id, t_new):
                h = controls.head_at(arc.id, t_new)
                r_, dr_dh, dr_dp = pressure_ratio_derivatives(h, p_in, layout.eos, v.c, v.kappa)
                R[fr] = q_in - q_out
                R[pr] = p_out - p_in * r_
                if with_jacobian:
                    add(fr, iq_in, 1.0)
                    add(fr, iq_out, -1.0)
                    add(pr, ip_out, 1.0)
                    add(pr, ip_in, -r_ - p_in * dr_dp)
            elif v.bypass_when_off:
                R[fr] = q_in - q_out
                R[pr] = p_in - p_out
                if with_jacobian:
                    add(fr, iq_in, 1.0)
                    add(fr, iq_out, -1.0)
                    add(pr, ip_in, 1.0)
                    add(pr, ip_out, -1.0)
            else:
                R[fr] = q_in
                R[pr] = q_out
                if with_jacobian:
                    add(fr, iq_in, 1.0)
                    add(pr, iq_out, 1.0)
        else:
            raise DimensionMismatch(f"arc {arc.id!r} has no algebraic equations")

    for nid, nb in layout.node_blocks.items():
        node = layout.network.nodes[nid]
        ipv, iqv = nb.x_off, nb.x_off + 1
        acc = -u[iqv]
        if with_jacobian:
            add(nb.mass_row, iqv, -1.0)
        for aid in layout.network.out_arcs[nid]:
            _, iq = layout.endpoint_indices(aid, "tail")
            acc += u[iq]
            if with_jacobian:
                add(nb.mass_row, iq, 1.0)
        for aid in layout.network.in_arcs[nid]:
            _, iq = layout.endpoint_indices(aid, "head")
            acc -= u[iq]
            if with_jacobian:
                add(nb.mass_row, iq, -1.0)
        R[nb.mass_row] = acc

        if node.kind.value == "interior":
            R[nb.cond_row] = u[iqv]
            if with_jacobian:
                add(nb.cond_row, iqv, 1.0)
        else:
            cond = controls.boundary_condition(node)
            target = float(cond.profile(t_new))
            if cond.kind is ConditionKind.PRESSURE:
                R[nb.cond_row] = u[ipv] - target
                if with_jacobian:
                    add(nb.cond_row, ipv, 1.0)
            else:
                R[nb.cond_row] = u[iqv] - target
                if with_jacobian:
                    add(nb.cond_row, iqv, 1.0)

        for aid, end, row in nb.pressure_rows:
            ip, _ = layout.endpoint_indices(aid, end)
            R[row] = u[ip] - u[ipv]
            if with_jacobian:
                add(row, ip, 1.0)
                add(row, ipv, -1.0)

    rscale = layout.row_scales(t_new, controls)
    R /= rscale
    if not with_jacobian:
        return R, None
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    vals *= layout.col_scale[cols] / rscale[rows]
    J = sp.coo_matrix((vals, (rows, cols)), shape=(layout.n, layout.n)).tocsc()
    return R, J


# ---------------------------------------------------------------------------
# state projection between layouts


def project_state(x_si: np.ndarray, src: SystemLayout, dst: SystemLayout) -> np.ndarray:
    """Map an SI state onto another layout of the same network.

    Pipe profiles are linearly interpolated onto the destination grid; a pipe
    leaving level M1 is expanded linearly between its endpoint values, a pipe
    entering M1 keeps its endpoint values.  Node and non-pipe arc unknowns are
    copied.
    """
    if src.network is not dst.network and src.network.arcs.keys() != dst.network.arcs.keys():
        raise DimensionMismatch("projection requires the same network")
    y = np.zeros(dst.n)

    for aid, arc in dst.network.arcs.items():
        if not arc.is_pipe:
            ab_d = dst.arc_blocks[aid]
            ab_s = src.arc_blocks[aid]
            y[ab_d.x_off : ab_d.x_off + 4] = x_si[ab_s.x_off : ab_s.x_off + 4]
            continue
        L = arc.variant.params.L
        if aid in src.pipe_blocks:
            pb = src.pipe_blocks[aid]
            xs = np.linspace(0.0, L, pb.n_points)
            ps, qs = x_si[pb.p_indices()], x_si[pb.q_indices()]
        else:
            ab = src.arc_blocks[aid]
            xs = np.array([0.0, L])
            ps = x_si[[ab.x_off, ab.x_off + 2]]
            qs = x_si[[ab.x_off + 1, ab.x_off + 3]]
        if aid in dst.pipe_blocks:
            pb_d = dst.pipe_blocks[aid]
            xd = np.linspace(0.0, L, pb_d.n_points)
            y[pb_d.p_indices()] = np.interp(xd, xs, ps)
            y[pb_d.q_indices()] = np.interp(xd, xs, qs)
        else:
            ab_d = dst.arc_blocks[aid]
            y[[ab_d.x_off, ab_d.x_off + 2]] = ps[[0, -1]]
            y[[ab_d.x_off + 1, ab_d.x_off + 3]] = qs[[0, -1]]

    for nid, nb_d in dst.node_blocks.items():
        nb_s = src.node_blocks[nid]
        y[nb_d.x_off : nb_d.x_off + 2] = x_si[nb_s.x_off : nb_s.x_off + 2]
    return y
