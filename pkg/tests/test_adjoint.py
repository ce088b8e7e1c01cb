"""Adjoint consistency: discrete KKT stationarity and gradients vs finite differences."""

import numpy as np
import pytest

from gasgrid.adjoint import (
    Parameter,
    chain_rule_gradient,
    direct_energy_gradient,
    functional_gradient,
    solve_discrete_adjoint,
)
from gasgrid.functional import ArcTerm, FunctionalSpec, NodeTerm, evaluate, state_gradient
from gasgrid.grids import BlockAssignment, ModelAssignment, PipeSetting, TimeGrid
from gasgrid.models import ModelLevel
from gasgrid.network import ConditionKind, NodeCondition
from gasgrid.system import Controls, assemble_system
from gasgrid.timeseries import TimeSeries
from gasgrid.transient import NewtonOptions, SimulationModel, simulate, steady_state

from netfixtures import mixed_network, mixed_settings


def build_problem():
    """Mixed network, ramped demand, 2 blocks sharing one layout."""
    net = mixed_network()
    model = SimulationModel(net, newton=NewtonOptions(tol=3e-10))
    controls = Controls(
        h_ad={"cs": TimeSeries.from_pairs([(0.0, 1.2e4), (3600.0, 1.5e4), (7200.0, 1.1e4)])},
        dp={"cv": TimeSeries.from_pairs([(0.0, 0.5e5), (7200.0, 0.9e5)])},
        boundary={
            "T1": NodeCondition(
                ConditionKind.FLOW,
                TimeSeries.from_pairs([(0.0, -55.0), (1800.0, -55.0), (5400.0, -70.0), (7200.0, -70.0)]),
            )
        },
    )
    st = steady_state(model, mixed_settings(), controls)
    tg = TimeGrid.uniform(7200.0, 2)
    assignment = ModelAssignment(
        tg, tuple(BlockAssignment(mixed_settings(), 600.0) for _ in range(2))
    )
    spec = FunctionalSpec(
        node_terms=(
            NodeTerm("T2", "track_pressure", 1e-10, TimeSeries.constant(47e5)),
            NodeTerm("S", "track_flow", 1e-2, TimeSeries.constant(95.0)),
        ),
        arc_terms=(ArcTerm("cs", "energy", 1e-9),),
    )
    return model, controls, st, assignment, spec


@pytest.fixture(scope="module")
def problem():
    return build_problem()


class TestAdjointBasics:
    def test_zero_functional_gives_zero_adjoint(self, problem):
        model, controls, st, assignment, _ = problem
        traj = simulate(model, assignment, controls, st)
        seeds = state_gradient(traj, FunctionalSpec())
        adj = solve_discrete_adjoint(traj, seeds)
        for mu in adj.blocks:
            assert np.all(mu == 0.0)

    def test_discrete_stationarity_including_block_joint(self, problem):
        """J_k^T mu_k + B^T mu_{k+1} reproduces dM/du_k at every interior step,
        the block joint included."""
        model, controls, st, assignment, spec = problem
        traj = simulate(model, assignment, controls, st)
        seeds = state_gradient(traj, spec)
        adj = solve_discrete_adjoint(traj, seeds)
        layout = traj.blocks[0].layout
        B = layout.old_state_matrix()

        # flatten steps: (block, local index k>=1)
        steps = [(b, k) for b, blk in enumerate(traj.blocks) for k in range(1, len(blk.times))]
        for idx, (b, k) in enumerate(steps):
            blk = traj.blocks[b]
            x_new = layout.from_si(blk.states[k])
            x_old = layout.from_si(blk.states[k - 1])
            dt = float(blk.times[k] - blk.times[k - 1])
            _, jac = assemble_system(layout, x_new, x_old, float(blk.times[k]), dt, controls)
            lhs = jac.T @ adj.blocks[b][k - 1]
            if idx + 1 < len(steps):
                b2, k2 = steps[idx + 1]
                lhs = lhs + B.T @ adj.blocks[b2][k2 - 1]
            rhs = seeds[b][k] * layout.col_scale
            if k == len(blk.times) - 1 and b + 1 < len(traj.blocks):
                rhs = rhs + seeds[b + 1][0] * layout.col_scale
            np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, np.abs(rhs).max()))


class TestGradientOracle:
    def test_gradient_matches_central_differences(self, problem):
        model, controls, st, assignment, spec = problem
        traj = simulate(model, assignment, controls, st)
        params = (
            [Parameter("h_ad", "cs", i) for i in range(3)]
            + [Parameter("dp", "cv", i) for i in range(2)]
            + [Parameter("boundary", "T1", i) for i in range(1, 3)]
        )
        grad = functional_gradient(traj, spec, params)

        scales = {"h_ad": 1.2e4, "dp": 0.5e5, "boundary": 55.0}
        fd = np.zeros(len(params))
        for j, par in enumerate(params):
            h = 1e-4 * scales[par.kind]
            vals = []
            for sgn in (+1.0, -1.0):
                c2 = controls.copy()
                if par.kind == "boundary":
                    cond = c2.boundary[par.target_id]
                    v = cond.profile.values.copy()
                    v[par.index] += sgn * h
                    c2.boundary = dict(c2.boundary)
                    c2.boundary[par.target_id] = NodeCondition(cond.kind, cond.profile.with_values(v))
                elif par.kind == "h_ad":
                    v = c2.h_ad[par.target_id].values.copy()
                    v[par.index] += sgn * h
                    c2.h_ad = dict(c2.h_ad)
                    c2.h_ad[par.target_id] = c2.h_ad[par.target_id].with_values(v)
                else:
                    v = c2.dp[par.target_id].values.copy()
                    v[par.index] += sgn * h
                    c2.dp = dict(c2.dp)
                    c2.dp[par.target_id] = c2.dp[par.target_id].with_values(v)
                t2 = simulate(model, assignment, c2, st)
                vals.append(evaluate(t2, spec).total)
            fd[j] = (vals[0] - vals[1]) / (2 * h)

        floor = 1e-3 * np.max(np.abs(fd))
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), floor)
        assert np.max(rel) <= 1e-5

    def test_pure_energy_gradient_sign(self, problem):
        """More head costs more power when the objective is energy alone."""
        model, controls, st, assignment, _ = problem
        spec = FunctionalSpec(arc_terms=(ArcTerm("cs", "energy", 1.0),))
        traj = simulate(model, assignment, controls, st)
        params = [Parameter("h_ad", "cs", i) for i in range(3)]
        grad = functional_gradient(traj, spec, params)
        assert np.all(grad > 0.0)

    def test_functional_without_compressor_terms_has_zero_direct_part(self, problem):
        model, controls, st, assignment, _ = problem
        spec = FunctionalSpec(node_terms=(NodeTerm("T2", "track_pressure", 1.0, TimeSeries.constant(47e5)),))
        traj = simulate(model, assignment, controls, st)
        params = [Parameter("h_ad", "cs", 0)]
        assert np.all(direct_energy_gradient(traj, spec, params) == 0.0)
