"""Acceptance suite: every criterion runs at its stated tolerance and prints
one PASS/FAIL line.  Run with `pytest tests/test_acceptance.py -v -s`."""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from gasgrid.adaptivity import AdaptivityOptions, adaptive_simulate
from gasgrid.adjoint import Parameter, functional_gradient
from gasgrid.compressor import build_semiconvex, contains
from gasgrid.functional import ArcTerm, FunctionalSpec, NodeTerm, evaluate, state_gradient
from gasgrid.grids import BlockAssignment, ModelAssignment, PipeSetting, TimeGrid
from gasgrid.models import ModelLevel, m1_pout
from gasgrid.network import ConditionKind, Node, NodeCondition, NodeKind, network_from_components
from gasgrid.optimize import (
    ConstraintSet,
    ControlVector,
    PressureBound,
    TerminalStationarity,
    validate_nomination,
)
from gasgrid.sqp import ConstraintEval, SQPOptions, sqp_solve
from gasgrid.system import Controls
from gasgrid.timeseries import TimeSeries
from gasgrid.transient import NewtonOptions, SimulationModel, linepack, simulate, steady_state

from netfixtures import (
    TUTORIAL_HORIZON,
    demand_swap_profiles,
    demo_characteristic_field,
    five_node_line,
    flow_bc,
    pipe,
    pressure_bc,
    single_pipe_network,
    small_characteristic_field,
    three_compressor_controls,
    three_compressor_network,
    tutorial_controls,
    tutorial_functional,
    tutorial_network,
)


@contextmanager
def criterion(num: int, name: str):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {num} ({name}): FAIL  [{time.perf_counter() - t0:.1f}s]")
        raise
    print(f"\nACCEPTANCE {num} ({name}): PASS  [{time.perf_counter() - t0:.1f}s]")


def test_criterion_1_algebraic_pipe_law_oracle():
    """Steady M2/M3 single pipe vs the closed-form law, refined up to L/256."""
    with criterion(1, "algebraic pipe law oracle"):
        net = single_pipe_network(p_in=60e5, q_out=100.0)
        model = SimulationModel(net)
        par = net.arcs["p1"].variant.params
        exact = m1_pout(60e5, 100.0, par)
        m2_err = []
        for n in (16, 32, 64, 128, 256):
            st = steady_state(model, {"p1": PipeSetting(ModelLevel.M2, n)}, Controls())
            m2_err.append(abs(st.node_pressure("B") - exact) / exact)
        orders = np.log2(np.array(m2_err[:-1]) / np.array(m2_err[1:]))
        assert np.all(orders >= 1.8), f"observed orders {orders}"
        assert m2_err[-1] <= 1e-3
        # the nonlinear model carries an O(Mach^2) offset from the law but must
        # agree within tolerance at the finest grid, without error growth
        m3_err = []
        for n in (64, 256):
            st = steady_state(model, {"p1": PipeSetting(ModelLevel.M3, n)}, Controls())
            m3_err.append(abs(st.node_pressure("B") - exact) / exact)
        assert m3_err[-1] <= 1e-3
        assert m3_err[-1] <= m3_err[0] + 1e-12


def test_criterion_2_adjoint_exactness():
    """5-node network with one compressor: every control and boundary
    parameter gradient matches central differences to 1e-5."""
    with criterion(2, "adjoint gradient exactness"):
        net = five_node_line()
        model = SimulationModel(net, newton=NewtonOptions(tol=3e-10))
        horizon = 7200.0
        controls = Controls(
            h_ad={"cs": TimeSeries.from_pairs([(0.0, 1.1e4), (3600.0, 1.4e4), (7200.0, 1.2e4)])}
        )
        settings = {a.id: PipeSetting(ModelLevel.M2, 2) for a in net.pipes()}
        st = steady_state(model, settings, controls)
        tg = TimeGrid.uniform(horizon, 2)
        assignment = ModelAssignment(tg, tuple(BlockAssignment(settings, 600.0) for _ in range(2)))
        spec = FunctionalSpec(
            node_terms=(
                NodeTerm("j", "track_pressure", 1e-11, TimeSeries.constant(62e5)),
                NodeTerm("S", "track_flow", 1e-2, TimeSeries.constant(80.0)),
            ),
            arc_terms=(ArcTerm("cs", "energy", 1e-9),),
        )
        traj = simulate(model, assignment, controls, st, allow_bisection=False)
        params = (
            [Parameter("h_ad", "cs", i) for i in range(1, 3)]
            + [Parameter("boundary", "S", i) for i in range(2)]
            + [Parameter("boundary", "T", i) for i in range(1, 4)]
        )
        grad = functional_gradient(traj, spec, params)
        scales = {"h_ad": 1.1e4, "boundary:S": 60e5, "boundary:T": 70.0}

        def perturbed(par, h):
            c2 = controls.copy()
            if par.kind == "h_ad":
                v = c2.h_ad[par.target_id].values.copy()
                v[par.index] += h
                c2.h_ad = dict(c2.h_ad)
                c2.h_ad[par.target_id] = c2.h_ad[par.target_id].with_values(v)
            else:
                node = net.nodes[par.target_id]
                cond = c2.boundary.get(par.target_id, node.boundary)
                v = cond.profile.values.copy()
                v[par.index] += h
                c2.boundary = dict(c2.boundary)
                c2.boundary[par.target_id] = NodeCondition(cond.kind, cond.profile.with_values(v))
            return c2

        fd = np.zeros(len(params))
        for j, par in enumerate(params):
            key = par.kind if par.kind == "h_ad" else f"boundary:{par.target_id}"
            h = 1e-4 * scales[key]
            vals = []
            for s in (h, -h):
                t2 = simulate(model, assignment, perturbed(par, s), st, allow_bisection=False)
                vals.append(evaluate(t2, spec).total)
            fd[j] = (vals[0] - vals[1]) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
        assert np.max(rel) <= 1e-5, f"max rel error {np.max(rel):.2e}"


def test_criterion_3_conservation():
    """Node mass residuals at every converged step; frictionless linepack
    bookkeeping over 12 simulated hours."""
    with criterion(3, "conservation"):
        from gasgrid.network import node_mass_residual

        # ramped mixed network: mass balance at every accepted step
        from netfixtures import mixed_controls, mixed_network, mixed_settings

        net = mixed_network()
        model = SimulationModel(net)
        controls = mixed_controls()
        controls.boundary["T1"] = NodeCondition(
            ConditionKind.FLOW,
            TimeSeries.from_pairs([(0.0, -55.0), (1800.0, -55.0), (5400.0, -70.0), (7200.0, -70.0)]),
        )
        st = steady_state(model, mixed_settings(), controls)
        tg = TimeGrid.uniform(7200.0, 2)
        assignment = ModelAssignment(tg, tuple(BlockAssignment(mixed_settings(), 600.0) for _ in range(2)))
        traj = simulate(model, assignment, controls, st)
        worst = 0.0
        for blk in traj.blocks:
            for k in range(len(blk.times)):
                state = blk.state(k)
                for nid in net.nodes:
                    flows = {}
                    for aid in net.out_arcs[nid]:
                        _, iq = blk.layout.endpoint_indices(aid, "tail")
                        flows[aid] = float(blk.states[k][iq])
                    for aid in net.in_arcs[nid]:
                        _, iq = blk.layout.endpoint_indices(aid, "head")
                        flows[aid] = float(blk.states[k][iq])
                    r = node_mass_residual(net, net.nodes[nid], flows, state.node_flow(nid))
                    worst = max(worst, abs(r))
        assert worst <= 1e-8, f"worst node mass residual {worst:.2e}"

        # lambda = 0 pipe: linepack change equals the boundary flux integral
        nodes = [
            Node("A", NodeKind.SOURCE, pressure_bc(60e5)),
            Node(
                "B",
                NodeKind.SINK,
                flow_bc(
                    TimeSeries.from_pairs(
                        [(0.0, -80.0), (3600.0, -80.0), (7200.0, -140.0), (28800.0, -140.0), (32400.0, -90.0)]
                    )
                ),
            ),
        ]
        net2 = network_from_components(nodes, [pipe("p1", "A", "B", lam=1e-12)])
        model2 = SimulationModel(net2)
        settings = {"p1": PipeSetting(ModelLevel.M2, 16)}
        st2 = steady_state(model2, settings, Controls())
        horizon = 12 * 3600.0
        assignment2 = ModelAssignment(
            TimeGrid.uniform(horizon, 1), (BlockAssignment(settings, 300.0),)
        )
        traj2 = simulate(model2, assignment2, Controls(), st2)
        lp0 = sum(linepack(st2).values())
        lp1 = sum(linepack(traj2.final_state()).values())
        blk = traj2.blocks[0]
        flux_integral = 0.0
        for k in range(1, len(blk.times)):
            dt = blk.times[k] - blk.times[k - 1]
            _, _, q = blk.state(k).pipe_profile("p1")
            flux_integral += dt * (q[0] - q[-1])
        assert abs((lp1 - lp0) - flux_integral) <= 1e-6 * lp0


@pytest.fixture(scope="module")
def tutorial_trend_runs():
    net = tutorial_network()
    model = SimulationModel(net)
    controls = tutorial_controls()
    spec = tutorial_functional()
    tg = TimeGrid.uniform(TUTORIAL_HORIZON, 4)
    fine = {
        a.id: PipeSetting(ModelLevel.M3, max(4, round(a.variant.params.L / 1000.0)))
        for a in net.pipes()
    }
    st = steady_state(model, fine, controls)
    runs = {}
    finest_dt = 3600.0
    finest_cells = {a.id: 1 for a in net.pipes()}
    for tol in (1e-1, 1e-2, 1e-3, 1e-4):
        t0 = time.perf_counter()
        traj, report, assignment = adaptive_simulate(
            model, spec, controls, tol, st, tg, AdaptivityOptions()
        )
        wall = time.perf_counter() - t0
        runs[tol] = (report, wall)
        for blk in assignment.blocks:
            finest_dt = min(finest_dt, blk.dt)
            for aid, s in blk.settings.items():
                finest_cells[aid] = max(finest_cells[aid], s.n_cells)
    # reference: uniform most-detailed model, 4x finer than the finest level used
    ref_settings = {aid: PipeSetting(ModelLevel.M3, 4 * n) for aid, n in finest_cells.items()}
    aref = ModelAssignment(
        tg, tuple(BlockAssignment(ref_settings, finest_dt / 4.0) for _ in range(4))
    )
    m_ref = evaluate(simulate(model, aref, controls, st), spec).total
    return runs, m_ref


def test_criterion_4_error_and_cpu_trend(tutorial_trend_runs):
    """Functional error non-increasing (20% band) and CPU non-decreasing
    across TOL in {1e-1, 1e-2, 1e-3, 1e-4}."""
    with criterion(4, "error/CPU trend vs tolerance"):
        runs, m_ref = tutorial_trend_runs
        tols = [1e-1, 1e-2, 1e-3, 1e-4]
        errors = [abs(runs[t][0].functional_value - m_ref) for t in tols]
        walls = [runs[t][1] for t in tols]
        print(f"\n  errors: {['%.3e' % e for e in errors]}")
        print(f"  cpu   : {['%.2f' % w for w in walls]}")
        for a, b in zip(errors, errors[1:]):
            assert b <= 1.2 * a, f"error increased beyond the noise band: {a:.3e} -> {b:.3e}"
        for a, b in zip(walls, walls[1:]):
            assert b >= 0.8 * a, f"CPU time decreased: {a:.2f} -> {b:.2f}"


def test_criterion_5_model_usage_trend(tutorial_trend_runs):
    """Share of the coarsest model non-increasing, of the finest model
    non-decreasing, as the tolerance tightens."""
    with criterion(5, "model usage trend vs tolerance"):
        runs, _ = tutorial_trend_runs
        tols = [1e-1, 1e-2, 1e-3, 1e-4]
        m1 = [runs[t][0].model_usage()["M1"] for t in tols]
        m3 = [runs[t][0].model_usage()["M3"] for t in tols]
        print(f"\n  M1 shares: {['%.2f' % v for v in m1]}")
        print(f"  M3 shares: {['%.2f' % v for v in m3]}")
        assert m1[0] > 0.0, "coarsest run should retain the algebraic model somewhere"
        for a, b in zip(m1, m1[1:]):
            assert b <= a + 1e-12
        for a, b in zip(m3, m3[1:]):
            assert b >= a - 1e-12


def test_criterion_6_semiconvexity():
    """Convex combinations of feasible points stay feasible (1e4 samples);
    membership agrees with a point-in-polygon oracle up to absorbed holes and
    one slice spacing."""
    with criterion(6, "semiconvex feasible sets"):
        from shapely.geometry import LineString, Point, Polygon
        from shapely.ops import unary_union

        field = demo_characteristic_field()
        m = 32
        sc = build_semiconvex(field, m=m)
        rng = np.random.default_rng(2024)
        n_checked = 0
        for _ in range(40000):
            q1, q2 = rng.uniform(0.0, 15.0, 2)
            h = rng.uniform(sc.h_min, sc.h_max)
            lam = rng.uniform(0.0, 1.0)
            if contains(sc, q1, h) >= 0 and contains(sc, q2, h) >= 0:
                assert contains(sc, lam * q1 + (1 - lam) * q2, h) >= -1e-12
                n_checked += 1
            if n_checked >= 10_000:
                break
        assert n_checked >= 10_000

        union = unary_union([Polygon(p) for p in field.polygons])
        slice_dh = (sc.h_max - sc.h_min) / (m - 1)
        band_q = (sc.max_bound_slope + 1e-9) * slice_dh
        pts = np.column_stack(
            [rng.uniform(0.0, 15.0, 10_000), rng.uniform(1e3, 7e4, 10_000)]
        )
        disagreements = 0
        for q, h in pts:
            inside_sc = contains(sc, q, h) >= 0.0
            inside_poly = union.covers(Point(q, h))
            if inside_sc == inside_poly:
                continue
            cut = union.intersection(LineString([(-100.0, h), (100.0, h)]))
            if not cut.is_empty:
                lo, _, hi, _ = cut.bounds
                if inside_sc and not inside_poly and lo - 1e-9 <= q <= hi + 1e-9:
                    continue  # absorbed hole
                if min(abs(q - lo), abs(q - hi)) <= band_q:
                    continue  # linearization band
            elif inside_sc:
                continue  # bridged vertical gap
            disagreements += 1
        assert disagreements == 0


def test_criterion_7_nomination_validation():
    """Three-compressor demand swap: converged with epsx = 5e-4, post-hoc
    feasible to 1e-6, tracking within 1%; an unreachable bound is infeasible."""
    with criterion(7, "nomination validation"):
        horizon = 43200.0
        net = three_compressor_network()
        model = SimulationModel(net, newton=NewtonOptions(tol=1e-9))
        fields = {"f": build_semiconvex(demo_characteristic_field(), 32)}
        controls0 = three_compressor_controls()
        settings = {
            a.id: PipeSetting(ModelLevel.M2, max(1, round(a.variant.params.L / 5e3)))
            for a in net.pipes()
        }
        st = steady_state(model, settings, controls0)
        cons = ConstraintSet(
            pressure=(
                PressureBound(
                    "T2",
                    lower=TimeSeries.from_pairs([(0.0, 69e5), (10800.0, 71.5e5), (horizon, 71.5e5)]),
                ),
                PressureBound("T3", lower=TimeSeries.constant(68.5e5), upper=TimeSeries.constant(71e5)),
            ),
            membership=("Cs1", "Cs2", "Cs3"),
            stationarity=TerminalStationarity(("T2", "T3"), delta=3600.0, tol=0.2e5),
        )
        spec = FunctionalSpec(
            node_terms=(NodeTerm("S", "track_flow", 1e-2, TimeSeries.constant(100.0)),),
            arc_terms=tuple(ArcTerm(f"Cs{i}", "energy", 2e-10) for i in (1, 2, 3)),
        )
        cv = ControlVector.build(model, controls0, fields, horizon, control_dt=1800.0)
        rep = validate_nomination(
            model, st, demand_swap_profiles(), cons, spec, cv, fields,
            TimeGrid.uniform(horizon, 4),
            sqp_opts=SQPOptions(epsx=5e-4, max_iter=80),
            prep_tol=0.5,
        )
        assert rep.nlp.status == "converged"
        assert rep.post_hoc_violation <= 1e-6
        assert max(rep.tracking_residuals.values()) <= 0.01

        # infeasible variant: bound above what the head-limited field can deliver
        net_i = three_compressor_network()
        model_i = SimulationModel(net_i, newton=NewtonOptions(tol=1e-9))
        fields_i = {"f": build_semiconvex(small_characteristic_field(), 32)}
        st_i = steady_state(model_i, settings, controls0)
        cons_i = ConstraintSet(
            pressure=(PressureBound("T2", lower=TimeSeries.constant(90e5)),),
            membership=("Cs1", "Cs2", "Cs3"),
        )
        cv_i = ControlVector.build(model_i, controls0, fields_i, horizon, control_dt=3600.0)
        rep_i = validate_nomination(
            model_i, st_i, demand_swap_profiles(), cons_i, spec, cv_i, fields_i,
            TimeGrid.uniform(horizon, 4),
            sqp_opts=SQPOptions(epsx=5e-4, max_iter=40),
            prep_tol=0.5,
        )
        assert rep_i.nlp.status == "infeasible"


def test_criterion_8_sqp_unit():
    """Hand-solvable constrained fixtures to 1e-8 with a monotone merit."""
    with criterion(8, "SQP unit fixtures"):
        def quadratic(Q, c):
            def f(x):
                return 0.5 * x @ Q @ x + c @ x, Q @ x + c

            return f

        def linear_cons(A, b):
            A = np.asarray(A, dtype=float)
            b = np.asarray(b, dtype=float)

            def cons(x):
                return ConstraintEval(A @ x - b, lambda idx: A[idx])

            return cons

        fixtures = []
        # min x1^2 + x2^2 s.t. x1 + x2 >= 1 -> (0.5, 0.5), lambda = 1
        res = sqp_solve(
            quadratic(2 * np.eye(2), np.zeros(2)),
            linear_cons([[1.0, 1.0]], [1.0]),
            np.array([2.0, 0.0]),
            SQPOptions(epsx=1e-12),
        )
        np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-8)
        fixtures.append(res)
        # min (x-3)^2 s.t. 0 <= x <= 1 -> x = 1
        res = sqp_solve(
            quadratic(2 * np.eye(1), np.array([-6.0])),
            linear_cons([[1.0], [-1.0]], [0.0, -1.0]),
            np.array([0.5]),
            SQPOptions(epsx=1e-12),
        )
        np.testing.assert_allclose(res.x, [1.0], atol=1e-8)
        fixtures.append(res)
        # unconstrained anisotropic quadratic -> exact minimizer
        res = sqp_solve(quadratic(np.diag([2.0, 8.0]), np.array([-2.0, -8.0])), None, np.array([5.0, -3.0]))
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-8)
        fixtures.append(res)
        for res in fixtures:
            assert res.converged
            diffs = np.diff(res.merit_history)
            assert np.all(diffs <= 1e-12), "merit increased across accepted iterations"
