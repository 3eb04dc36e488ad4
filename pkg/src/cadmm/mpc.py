"""Receding-horizon loop around either consensus ADMM variant."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bvc import build_bvc
from .config import ScenarioConfig
from .consensus import (AdmmResult, ConvexLocalSolver, GlobalPacking, ResidualRecord,
                        build_agent_problem, run_admm)
from .dynamics import AgentState, BlockLayout, HorizonConfig, build_dynamics, step
from .errors import AgentFailure, ConfigError
from .network import NeighborGraph, SyncTransport, audit_locality
from .noncvx import CollisionConstraintSpec, LinearizationState, NonconvexLocalSolver

log = logging.getLogger(__name__)

GOAL_REACHED = "goal_reached"
STALLED = "stalled"
MAX_STEPS = "max_steps"
FAILED = "failed"


@dataclass
class MpcState:
    goals: np.ndarray
    states: list = field(default_factory=list)  # states[t][i] -> AgentState
    inputs: list = field(default_factory=list)  # inputs[t] -> (N, d) applied at step t
    traces: list = field(default_factory=list)  # per-step list of ResidualRecord
    step_iters: list = field(default_factory=list)
    step_converged: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    relaxed_iters: int = 0
    cumulative_iters: int = 0
    locality_violations: list = field(default_factory=list)
    status: str | None = None
    error: str | None = None
    copies: list | None = None
    duals: list | None = None

    @property
    def t(self) -> int:
        return len(self.states) - 1

    @property
    def N(self) -> int:
        return len(self.goals)

    def positions(self, t: int = -1) -> np.ndarray:
        return np.array([s.position for s in self.states[t]])

    def velocities(self, t: int = -1) -> np.ndarray:
        return np.array([s.velocity for s in self.states[t]])


def initial_state(starts, goals) -> MpcState:
    starts = np.asarray(starts, dtype=float)
    return MpcState(np.asarray(goals, dtype=float), [[AgentState.at_rest(p) for p in starts]])


class MpcContext:
    """Per-run constants shared by every outer step."""

    def __init__(self, sc: ScenarioConfig, variant: str | None = None, dump=None):
        self.sc = sc
        # optional text stream receiving one JSON line per delivered message
        self.dump = dump
        self.variant = variant or sc.variant
        self.dyn = build_dynamics(sc.dim, sc.dt)
        self.horizon = HorizonConfig(sc.T, sc.dt)
        self.layout = BlockLayout(sc.dim, sc.T)
        self.packing = GlobalPacking(sc.n_agents, self.layout)
        self.cost = sc.cost
        self.lin = LinearizationState(sc.n_agents, sc.T, sc.dim, sc.seed)
        self.transports: list[SyncTransport] = []

    def graph_at(self, positions) -> NeighborGraph:
        if self.sc.graph == "radius":
            return NeighborGraph.within_radius(positions, self.sc.graph_radius).validate()
        return NeighborGraph.complete(self.sc.n_agents)


def straight_line_copy(packing: GlobalPacking, states, goals) -> np.ndarray:
    """Every block: positions interpolated from the current position to the goal, zero velocity/input."""
    layout = packing.layout
    T, d = layout.T, layout.d
    theta = np.zeros(packing.size)
    frac = np.arange(T + 1)[:, None] / T
    for j, (s, g) in enumerate(zip(states, goals)):
        pos = s.position + frac * (np.asarray(g) - s.position)
        st = np.hstack([pos, np.zeros((T + 1, d))])
        theta[packing.block(j)] = layout.pack(st, np.zeros((T, d)))
    return theta


def shift_copy(packing: GlobalPacking, theta) -> np.ndarray:
    """Advance every block one step, repeating the last state and input."""
    layout = packing.layout
    out = np.empty_like(theta)
    for j in range(packing.N):
        states, inputs = layout.unpack(theta[packing.block(j)])
        st = np.vstack([states[1:], states[-1:]])
        ins = np.vstack([inputs[1:], inputs[-1:]])
        out[packing.block(j)] = layout.pack(st, ins)
    return out


def _pairwise_min(positions) -> float:
    p = np.asarray(positions)
    if len(p) < 2:
        return np.inf
    iu = np.triu_indices(len(p), 1)
    return float(np.min(np.linalg.norm(p[iu[0]] - p[iu[1]], axis=1)))


def build_solvers(ctx: MpcContext, states, goals, graph: NeighborGraph, variant: str,
                  reference_copy=None):
    sc = ctx.sc
    positions = np.array([s.position for s in states])
    solvers = []
    for i, x in enumerate(states):
        x_ref = np.concatenate([goals[i], np.zeros(sc.dim)])
        nbrs = graph.neighbors(i)
        if variant == "convex":
            bvc = build_bvc(i, positions, sc.bvc_radius, neighbors=nbrs) if nbrs else None
            prob = build_agent_problem(i, x, x_ref, ctx.dyn, ctx.horizon, sc.a_max, bvc)
            solvers.append(ConvexLocalSolver(prob, ctx.packing, len(nbrs), sc.admm, ctx.cost))
        else:
            prob = build_agent_problem(i, x, x_ref, ctx.dyn, ctx.horizon, sc.a_max)
            spec = CollisionConstraintSpec.for_agent(i, nbrs, sc.d_min, sc.T)
            if spec.d_min == 0 or not nbrs:
                solvers.append(ConvexLocalSolver(prob, ctx.packing, len(nbrs), sc.admm, ctx.cost))
            else:
                solvers.append(NonconvexLocalSolver(
                    prob, ctx.packing, nbrs, sc.admm, ctx.cost, spec, ctx.lin,
                    initial_reference=reference_copy))
    return solvers


def mpc_step(state: MpcState, variant: str, sc: ScenarioConfig, ctx: MpcContext | None = None) -> MpcState:
    """Run one outer step: rebuild constraints, run ADMM, apply each agent's own first input.

    On failure the state is left untouched and :class:`AgentFailure` propagates.
    """
    ctx = ctx or MpcContext(sc, variant)
    states = state.states[-1]
    positions = state.positions()
    goals = state.goals
    if variant == "convex" and _pairwise_min(positions) < sc.d_min - 1e-9:
        raise AgentFailure(
            f"step {state.t}: current positions closer than d_min={sc.d_min}",
            {-1: f"min pairwise distance {_pairwise_min(positions):.6g}"})
    graph = ctx.graph_at(positions)
    transport = SyncTransport(graph, record=sc.record_reads, dump=ctx.dump)

    straight = straight_line_copy(ctx.packing, states, goals)
    warm = sc.warm_start and state.copies is not None and len(state.copies) == graph.N
    if warm:
        theta0 = [shift_copy(ctx.packing, th) for th in state.copies]
        if sc.warm_start_duals:
            lam0 = [shift_copy(ctx.packing, l) for l in state.duals]
        else:
            lam0 = [np.zeros(ctx.packing.size) for _ in range(graph.N)]
    else:
        theta0 = [straight.copy() for _ in range(graph.N)]
        lam0 = [np.zeros(ctx.packing.size) for _ in range(graph.N)]

    reference = straight if sc.noncvx_reference == "straight_line" else None
    solvers = build_solvers(ctx, states, goals, graph, variant, reference)
    result: AdmmResult = run_admm(solvers, graph, theta0, lam0, sc.admm, transport, sc.workers)

    next_states, applied = [], []
    for i, x in enumerate(states):
        u = ctx.packing.first_input(result.copies[i], i)
        applied.append(u)
        next_states.append(step(ctx.dyn, x, u))

    state.states.append(next_states)
    state.inputs.append(np.array(applied))
    state.traces.append(result.trace)
    state.step_iters.append(result.iterations)
    state.step_converged.append(result.converged)
    state.objectives.append(result.trace[-1].global_objective)
    state.cumulative_iters += result.iterations
    state.relaxed_iters += result.relaxed_iterations
    state.copies, state.duals = result.copies, result.duals
    if sc.record_reads:
        state.locality_violations.extend(audit_locality(transport.reads, graph))
    ctx.transports.append(transport)
    return state


def goal_reached(state: MpcState, sc: ScenarioConfig) -> bool:
    dp = np.linalg.norm(state.positions() - state.goals, axis=1)
    v = np.linalg.norm(state.velocities(), axis=1)
    return bool(np.all(dp <= sc.stop.pos_tol) and np.all(v <= sc.stop.vel_tol))


def run_mpc(sc: ScenarioConfig, variant: str | None = None, starts=None, goals=None,
            state: MpcState | None = None, dump=None) -> MpcState:
    """Outer loop until goal reached, objective stall, or ``max_outer_steps``."""
    variant = variant or sc.variant
    if state is None:
        starts = sc.starts if starts is None else starts
        goals = sc.goals if goals is None else goals
        if starts is None or goals is None:
            raise ConfigError("scenario has no concrete starts/goals; call generate_scenario first")
        state = initial_state(starts, goals)
    ctx = MpcContext(sc, variant, dump)
    stop = sc.stop
    while True:
        if goal_reached(state, sc):
            state.status = GOAL_REACHED
            break
        objs = state.objectives
        if len(objs) > stop.obj_window and objs[-1 - stop.obj_window] - objs[-1] < stop.obj_tol:
            state.status = STALLED
            break
        if state.t >= stop.max_outer_steps:
            state.status = MAX_STEPS
            break
        mpc_step(state, variant, sc, ctx)
        log.debug("step %d: %d inner iterations, objective %.4g", state.t,
                  state.step_iters[-1], state.objectives[-1])
    return state
