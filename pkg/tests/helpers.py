"""Shared builders for consensus tests."""

import numpy as np
import scipy.linalg as sla

from cadmm.config import ScenarioConfig
from cadmm.consensus import local_cost, reference_block
from cadmm.dynamics import AgentState
from cadmm.mpc import MpcContext, build_solvers, straight_line_copy
from cadmm.network import NeighborGraph
from cadmm.qp import QpProblem, solve_qp


def setup(starts, goals, variant="convex", graph=None, **cfg):
    starts, goals = np.asarray(starts, float), np.asarray(goals, float)
    N, d = starts.shape
    sc = ScenarioConfig(n_agents=N, dim=d).replace(**cfg)
    ctx = MpcContext(sc, variant)
    states = [AgentState.at_rest(p) for p in starts]
    graph = graph or NeighborGraph.complete(N)
    straight = straight_line_copy(ctx.packing, states, goals)
    solvers = build_solvers(ctx, states, goals, graph, variant,
                            reference_copy=straight if variant == "nonconvex" else None)
    theta0 = [straight.copy() for _ in range(N)]
    lam0 = [np.zeros(ctx.packing.size) for _ in range(N)]
    return sc, ctx, solvers, graph, theta0, lam0


def centralized_qp(solvers, packing, cp):
    """Joint problem: sum of every agent's cost over its own block, all constraints."""
    n, nb = packing.size, packing.n_b
    P = np.zeros((n, n))
    q = np.zeros(n)
    eqs, ins = [], []
    W = cp.block_weight(packing.layout)
    for s in solvers:
        i, prob = s.i, s.problem
        blk = packing.block(i)
        P[blk, blk] = 2 * W
        q[blk] = -2 * W @ reference_block(packing.layout, prob.x_ref)
        A = np.zeros((prob.A_eq.shape[0], n))
        A[:, blk] = prob.A_eq
        eqs.append((A, prob.b_eq))
        A = np.zeros((prob.A_in.shape[0], n))
        A[:, blk] = prob.A_in
        ins.append((A, prob.b_in))
    return QpProblem(P, q, np.vstack([a for a, _ in eqs]), np.concatenate([b for _, b in eqs]),
                     np.vstack([a for a, _ in ins]), np.concatenate([b for _, b in ins]))


def kkt_certified(prob: QpProblem, tol=1e-9):
    """Optimum of ``prob`` certified by a direct KKT solve.

    The candidate active set comes from solve_qp, but the point and
    multipliers are recomputed by one dense KKT factorization and then
    checked for primal feasibility and dual sign, which together prove
    optimality for a convex QP independently of the active-set iterations.
    """
    guess = solve_qp(prob)
    act = list(guess.active)
    A = np.vstack([prob.A_eq, prob.A_in[act]])
    b = np.concatenate([prob.b_eq, prob.b_in[act]])
    k = A.shape[0]
    K = np.block([[prob.P, A.T], [A, np.zeros((k, k))]])
    sol = sla.lstsq(K, np.concatenate([-prob.q, b]))[0]
    z, mult = sol[: prob.n], sol[prob.n:]
    assert np.max(prob.A_in @ z - prob.b_in) <= tol
    assert np.max(np.abs(prob.A_eq @ z - prob.b_eq)) <= tol
    assert np.all(mult[prob.A_eq.shape[0]:] >= -tol)
    resid = prob.P @ z + prob.q + A.T @ mult
    assert np.max(np.abs(resid)) <= 1e-7
    return z
