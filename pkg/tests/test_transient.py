"""Tests for steady states, time stepping and full simulations."""

import numpy as np
import pytest

from gasgrid.errors import InputError, NewtonDiverged
from gasgrid.grids import ModelAssignment, PipeSetting, TimeGrid
from gasgrid.models import ModelLevel, m1_pout
from gasgrid.network import Node, NodeKind, network_from_components
from gasgrid.system import Controls
from gasgrid.transient import SimulationModel, linepack, simulate, solve_time_step, steady_state
from gasgrid.timeseries import TimeSeries

from netfixtures import (
    flow_bc,
    mixed_controls,
    mixed_network,
    mixed_settings,
    pipe,
    pressure_bc,
    single_pipe_network,
    y_junction_network,
)


class TestSteadyState:
    def test_m2_single_pipe_matches_algebraic_law_with_order_two(self):
        # the algebraic law is the exact steady solution of the semilinear model
        net = single_pipe_network(p_in=60e5, q_out=100.0)
        model = SimulationModel(net)
        par = net.arcs["p1"].variant.params
        exact = m1_pout(60e5, 100.0, par)
        errors = []
        for n in (4, 8, 16):
            st = steady_state(model, {"p1": PipeSetting(ModelLevel.M2, n)}, Controls())
            errors.append(abs(st.node_pressure("B") - exact) / exact)
        orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(orders > 1.8)
        assert errors[-1] < 1e-6

    def test_m3_single_pipe_agrees_within_mach_squared(self):
        # the nonlinear model's steady state differs from the algebraic law by
        # an O(Mach^2) model gap, so errors stop decreasing but stay small
        net = single_pipe_network(p_in=60e5, q_out=100.0)
        model = SimulationModel(net)
        par = net.arcs["p1"].variant.params
        exact = m1_pout(60e5, 100.0, par)
        errors = []
        for n in (16, 32, 64):
            st = steady_state(model, {"p1": PipeSetting(ModelLevel.M3, n)}, Controls())
            errors.append(abs(st.node_pressure("B") - exact) / exact)
        assert np.all(np.diff(errors) <= 1e-12)
        assert errors[-1] < 1e-3

    def test_zero_demand_gives_uniform_pressure(self):
        nodes = [
            Node("A", NodeKind.SOURCE, pressure_bc(52e5)),
            Node("B", NodeKind.SINK, flow_bc(0.0)),
        ]
        net = network_from_components(nodes, [pipe("p1", "A", "B")])
        st = steady_state(SimulationModel(net), {"p1": PipeSetting(ModelLevel.M2, 8)}, Controls())
        _, p, q = st.pipe_profile("p1")
        np.testing.assert_allclose(p, 52e5, rtol=1e-9)
        np.testing.assert_allclose(q, 0.0, atol=1e-6)

    def test_y_junction_mass_balance(self):
        net = y_junction_network()
        model = SimulationModel(net)
        settings = {a.id: PipeSetting(ModelLevel.M2, 4) for a in net.pipes()}
        st = steady_state(model, settings, Controls())
        assert st.node_flow("T") == pytest.approx(-7.0, abs=1e-7)
        _, _, q_c = st.pipe_profile("c")
        np.testing.assert_allclose(q_c, 7.0, atol=1e-7)

    def test_steady_is_fixed_point_of_stepping(self):
        net = mixed_network()
        model = SimulationModel(net)
        controls = mixed_controls()
        st = steady_state(model, mixed_settings(), controls)
        x = st.layout.from_si(st.x)
        x_next = solve_time_step(st.layout, x, 0.0, 600.0, controls, model.newton)
        np.testing.assert_allclose(x_next, x, atol=1e-6)

    def test_requires_a_pressure_condition(self):
        nodes = [
            Node("A", NodeKind.SOURCE, flow_bc(5.0)),
            Node("B", NodeKind.SINK, flow_bc(-5.0)),
        ]
        net = network_from_components(nodes, [pipe("p1", "A", "B")])
        with pytest.raises(InputError):
            steady_state(SimulationModel(net), {"p1": PipeSetting(ModelLevel.M2, 4)}, Controls())

    def test_compressor_raises_outlet_pressure(self):
        net = mixed_network()
        model = SimulationModel(net)
        st = steady_state(model, mixed_settings(), mixed_controls(h_ad=1.5e4))
        p_in, q_in, p_out, q_out = st.arc_endpoints("cs")
        assert q_in == pytest.approx(q_out, abs=1e-8)
        assert p_out > p_in * 1.05

    def test_control_valve_drops_pressure(self):
        net = mixed_network()
        model = SimulationModel(net)
        st = steady_state(model, mixed_settings(), mixed_controls(dp=1.5e5))
        p_in, _, p_out, _ = st.arc_endpoints("cv")
        assert p_in - p_out == pytest.approx(1.5e5, rel=1e-9)


class TestSimulate:
    def test_constant_boundary_keeps_steady_state(self):
        net = mixed_network()
        model = SimulationModel(net)
        controls = mixed_controls()
        st = steady_state(model, mixed_settings(), controls)
        tg = TimeGrid.uniform(2 * 3600.0, 2)
        from gasgrid.grids import BlockAssignment

        assignment = ModelAssignment(
            tg, tuple(BlockAssignment(mixed_settings(), 600.0) for _ in range(2))
        )
        traj = simulate(model, assignment, controls, st)
        final = traj.final_state()
        np.testing.assert_allclose(final.x, st.x, rtol=1e-6, atol=1e-4)

    def test_frictionless_linepack_bookkeeping(self):
        """lambda = 0: linepack change equals implicit boundary flux integral."""
        nodes = [
            Node("A", NodeKind.SOURCE, pressure_bc(60e5)),
            Node(
                "B",
                NodeKind.SINK,
                flow_bc(
                    TimeSeries.from_pairs(
                        [(0.0, -80.0), (3600.0, -80.0), (7200.0, -140.0), (14400.0, -140.0), (18000.0, -80.0)]
                    )
                ),
            ),
        ]
        net = network_from_components(nodes, [pipe("p1", "A", "B", lam=1e-12)])
        model = SimulationModel(net)
        settings = {"p1": PipeSetting(ModelLevel.M2, 16)}
        st = steady_state(model, settings, Controls())
        horizon = 12 * 3600.0
        assignment = ModelAssignment.uniform(
            net, TimeGrid.uniform(horizon, 1), level=ModelLevel.M2, dt=300.0, dx_target=1e4 / 16
        )
        traj = simulate(model, assignment, Controls(), st)
        lp0 = sum(linepack(st).values())
        lp1 = sum(linepack(traj.final_state()).values())
        flux_integral = 0.0
        blk = traj.blocks[0]
        for k in range(1, len(blk.times)):
            dt = blk.times[k] - blk.times[k - 1]
            state = blk.state(k)
            _, _, q = state.pipe_profile("p1")
            flux_integral += dt * (q[0] - q[-1])
        assert abs((lp1 - lp0) - flux_integral) <= 1e-6 * lp0

    def test_ramp_converges_and_balances_mass(self):
        net = y_junction_network()
        model = SimulationModel(net)
        controls = Controls(
            boundary={
                "S1": flow_bc(TimeSeries.from_pairs([(0.0, 3.0), (1800.0, 3.0), (5400.0, 6.0)]))
            }
        )
        settings = {a.id: PipeSetting(ModelLevel.M2, 4) for a in net.pipes()}
        st = steady_state(model, settings, controls)
        assignment = ModelAssignment.uniform(
            net, TimeGrid.uniform(2 * 3600.0, 1), level=ModelLevel.M2, dt=300.0, dx_target=2000.0
        )
        traj = simulate(model, assignment, controls, st)
        final = traj.final_state()
        # converged node mass balance at every accepted step
        from gasgrid.network import node_mass_residual

        for k in range(len(traj.blocks[0].times)):
            state = traj.blocks[0].state(k)
            for nid in net.nodes:
                flows = {}
                for aid in net.out_arcs[nid]:
                    _, _, q = state.pipe_profile(aid)
                    flows[aid] = float(q[0])
                for aid in net.in_arcs[nid]:
                    _, _, q = state.pipe_profile(aid)
                    flows[aid] = float(q[-1])
                r = node_mass_residual(net, net.nodes[nid], flows, state.node_flow(nid))
                assert abs(r) <= 1e-7
        assert final.node_flow("S1") == pytest.approx(6.0, abs=1e-8)

    def test_m1_overload_raises_not_nan(self):
        net = single_pipe_network(p_in=20e5, q_out=150.0, L=1e5)
        model = SimulationModel(net)
        settings = {"p1": PipeSetting(ModelLevel.M1, 1)}
        with pytest.raises(NewtonDiverged):
            steady_state(model, settings, Controls())

    def test_step_halving_on_hard_transient(self):
        """A violent demand jump still completes by bisecting the step."""
        nodes = [
            Node("A", NodeKind.SOURCE, pressure_bc(60e5)),
            Node(
                "B",
                NodeKind.SINK,
                flow_bc(TimeSeries.from_pairs([(0.0, -10.0), (599.0, -10.0), (601.0, -300.0)])),
            ),
        ]
        net = network_from_components(nodes, [pipe("p1", "A", "B", d=1.0)])
        model = SimulationModel(net)
        settings = {"p1": PipeSetting(ModelLevel.M2, 8)}
        st = steady_state(model, settings, Controls())
        assignment = ModelAssignment.uniform(
            net, TimeGrid.uniform(1800.0, 1), level=ModelLevel.M2, dt=900.0, dx_target=1250.0
        )
        traj = simulate(model, assignment, Controls(), st)
        assert traj.t_end == 1800.0
