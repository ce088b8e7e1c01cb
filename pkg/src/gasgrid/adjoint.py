"""Discrete adjoints of the step systems and gradients w.r.t. parameters.

First-discretize-then-optimize: the multipliers satisfy, backwards in time,

    J_k^T mu_k = dM/du_k - B^T mu_{k+1},

where J_k is the step Jacobian and B = dR/d(previous state).  Gradients of a
functional M w.r.t. a parameter theta then follow as

    dM/dtheta = (direct dM/dtheta) - sum_k mu_k^T dR_k/dtheta,

exact for the frozen discretization.  Multipliers refer to the internally
scaled system; seeds given as SI state derivatives are converted here.  One
LU factorization per step serves both the forward solve and all (possibly
batched) transposed adjoint solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .errors import SingularJacobianTranspose
from .compressor import pressure_ratio_derivatives
from .network import CompressorStation, ConditionKind, ControlValve
from .system import Controls, P_SCALE, SystemLayout, assemble_system
from .transient import BlockTrajectory, Trajectory


@dataclass(frozen=True)
class Parameter:
    """Handle to one scalar degree of freedom of the time-dependent inputs."""

    kind: str  # 'h_ad' | 'dp' | 'boundary'
    target_id: str  # compressor / control valve arc id, or node id
    index: int  # breakpoint index in the corresponding series


@dataclass
class AdjointTrajectory:
    """Multipliers per block: array (n_steps, n) or (n_steps, n, m) when batched."""

    blocks: list[np.ndarray]


def _step_factor(layout: SystemLayout, blk: BlockTrajectory, k: int, controls: Controls):
    x_new = layout.from_si(blk.states[k])
    x_old = layout.from_si(blk.states[k - 1])
    t_new = float(blk.times[k])
    dt = float(blk.times[k] - blk.times[k - 1])
    _, jac = assemble_system(layout, x_new, x_old, t_new, dt, controls)
    try:
        return spla.splu(jac.tocsc())
    except RuntimeError as exc:
        raise SingularJacobianTranspose(str(exc)) from exc


def trajectory_factors(traj: Trajectory) -> list[list]:
    """LU factorizations of every step Jacobian, reusable across adjoint solves."""
    out = []
    for blk in traj.blocks:
        out.append([_step_factor(blk.layout, blk, k, traj.controls) for k in range(1, len(blk.times))])
    return out


def solve_block_adjoint(
    blk: BlockTrajectory,
    controls: Controls,
    seeds: np.ndarray,
    mu_next_coupling: np.ndarray | None = None,
    factors: list | None = None,
) -> np.ndarray:
    """Backward sweep over one block.

    ``seeds`` is (n_times, n) or (n_times, n, m) of dM/d(SI state); row 0 (the
    block's initial state) carries no multiplier.  ``mu_next_coupling`` is the
    B^T mu term crossing from the following block.
    """
    layout = blk.layout
    n_steps = blk.n_steps
    batched = seeds.ndim == 3
    shape = (n_steps, layout.n, seeds.shape[2]) if batched else (n_steps, layout.n)
    mu = np.zeros(shape)
    B = layout.old_state_matrix()
    scale = layout.col_scale[:, None] if batched else layout.col_scale
    carry = mu_next_coupling if mu_next_coupling is not None else np.zeros(shape[1:])
    for k in range(n_steps, 0, -1):
        rhs = seeds[k] * scale - carry
        lu = factors[k - 1] if factors is not None else _step_factor(layout, blk, k, controls)
        mu[k - 1] = lu.solve(rhs, trans="T")
        carry = B.T @ mu[k - 1]
    return mu


def solve_discrete_adjoint(
    traj: Trajectory, seeds: list[np.ndarray], factors: list[list] | None = None
) -> AdjointTrajectory:
    """Full-horizon adjoint for a trajectory with one shared state layout.

    ``seeds`` as produced by functional.state_gradient (optionally with a
    trailing batch dimension).  Blocks are chained: a block-joint state is one
    state, so its seed splits across both blocks and the coupling term B^T mu
    crosses the joint.
    """
    layouts = {id(b.layout) for b in traj.blocks}
    if len(layouts) != 1:
        raise ValueError("full-horizon adjoint needs a time-uniform layout; flatten the assignment")
    layout = traj.blocks[0].layout
    B = layout.old_state_matrix()
    out: list[np.ndarray] = [None] * len(traj.blocks)
    batched = seeds[0].ndim == 3
    tail_shape = (layout.n, seeds[0].shape[2]) if batched else (layout.n,)
    carry = np.zeros(tail_shape)
    pending = np.zeros(tail_shape)
    for b in range(len(traj.blocks) - 1, -1, -1):
        blk = traj.blocks[b]
        seeds_b = seeds[b].copy()
        seeds_b[-1] += pending
        mu = solve_block_adjoint(
            blk,
            traj.controls,
            seeds_b,
            mu_next_coupling=carry,
            factors=factors[b] if factors is not None else None,
        )
        out[b] = mu
        carry = B.T @ mu[0]
        pending = seeds[b][0]
    # seeds[0][0] (the initial condition) carries no multiplier by convention
    return AdjointTrajectory(out)


# ---------------------------------------------------------------------------
# parameter derivatives of the residual


def param_residual_entries(
    layout: SystemLayout,
    x_si: np.ndarray,
    t: float,
    controls: Controls,
    param: Parameter,
) -> list[tuple[int, float]]:
    """Nonzero entries of dR_internal/dparam at one step time."""
    net = layout.network
    if param.kind == "h_ad":
        arc = net.arcs[param.target_id]
        station: CompressorStation = arc.variant
        if not controls.is_on(param.target_id, t):
            return []
        w = controls.h_ad[param.target_id].weights(t)[param.index]
        if w == 0.0:
            return []
        ab = layout.arc_blocks[param.target_id]
        p_in = x_si[ab.x_off]
        h = controls.head_at(param.target_id, t)
        _, dr_dh, _ = pressure_ratio_derivatives(h, p_in, layout.eos, station.c, station.kappa)
        return [(ab.eq_off + 1, -p_in * dr_dh * w / P_SCALE)]
    if param.kind == "dp":
        if not isinstance(net.arcs[param.target_id].variant, ControlValve):
            raise ValueError(f"{param.target_id!r} is not a control valve")
        w = controls.dp[param.target_id].weights(t)[param.index]
        if w == 0.0:
            return []
        ab = layout.arc_blocks[param.target_id]
        return [(ab.eq_off + 1, -w / P_SCALE)]
    if param.kind == "boundary":
        node = net.nodes[param.target_id]
        cond = controls.boundary_condition(node)
        w = cond.profile.weights(t)[param.index]
        if w == 0.0:
            return []
        nb = layout.node_blocks[param.target_id]
        scale = P_SCALE if cond.kind is ConditionKind.PRESSURE else 1.0
        return [(nb.cond_row, -w / scale)]
    raise ValueError(f"unknown parameter kind {param.kind!r}")


def chain_rule_gradient(
    traj: Trajectory, adj: AdjointTrajectory, params: list[Parameter]
) -> np.ndarray:
    """-sum_k mu_k^T dR_k/dtheta per parameter.

    For batched multipliers (n_steps, n, m) the result is (m, n_params).
    """
    batched = adj.blocks[0].ndim == 3
    m = adj.blocks[0].shape[2] if batched else 1
    grad = np.zeros((m, len(params)))
    for blk, mu in zip(traj.blocks, adj.blocks):
        layout = blk.layout
        for k in range(1, len(blk.times)):
            t = float(blk.times[k])
            x_si = blk.states[k]
            mu_k = mu[k - 1]
            for j, param in enumerate(params):
                for row, val in param_residual_entries(layout, x_si, t, traj.controls, param):
                    if batched:
                        grad[:, j] -= mu_k[row, :] * val
                    else:
                        grad[0, j] -= mu_k[row] * val
    return grad if batched else grad[0]


def direct_energy_gradient(traj: Trajectory, spec, params: list[Parameter]) -> np.ndarray:
    """Direct dM/dtheta of compressor energy terms (M depends on H_ad explicitly)."""
    from .functional import ArcTerm, _trapezoid_weights

    grad = np.zeros(len(params))
    energy_terms = [t for t in spec.arc_terms if isinstance(t, ArcTerm) and t.kind == "energy"]
    if not energy_terms:
        return grad
    for blk in traj.blocks:
        layout = blk.layout
        w = _trapezoid_weights(blk.times)
        for k, t in enumerate(blk.times):
            t = float(t)
            for term in energy_terms:
                if not traj.controls.is_on(term.arc_id, t):
                    continue
                station = layout.network.arcs[term.arc_id].variant
                _, iq_in = layout.endpoint_indices(term.arc_id, "tail")
                q_in = blk.states[k][iq_in]
                coeff = w[k] * term.weight * spec.rho0 * q_in / station.eta_ad
                for j, param in enumerate(params):
                    if param.kind == "h_ad" and param.target_id == term.arc_id:
                        grad[j] += coeff * traj.controls.h_ad[term.arc_id].weights(t)[param.index]
    return grad


def functional_gradient(
    traj: Trajectory, spec, params: list[Parameter], factors: list[list] | None = None
) -> np.ndarray:
    """Exact dM/dtheta on the frozen discretization (uniform layout)."""
    from .functional import state_gradient

    seeds = state_gradient(traj, spec)
    adj = solve_discrete_adjoint(traj, seeds, factors)
    return direct_energy_gradient(traj, spec, params) + chain_rule_gradient(traj, adj, params)
