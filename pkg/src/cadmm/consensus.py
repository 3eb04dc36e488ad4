"""Consensus ADMM over a neighbor graph.

Every agent i keeps a copy ``theta_i`` of the global variable (all agents'
blocks, agent-major) and a dual ``lam_i`` of the same length. One iteration:

    theta_i <- argmin L_i(theta) + lam_i' theta
                      + rho * sum_j || theta - (theta_i + theta_j)/2 ||^2
               s.t. agent i's own constraints
    lam_i   <- lam_i + rho * sum_j (theta_i - theta_j)

Agent i's constraints only touch its own block in the convex variant, so
the minimization splits: the own block is a small QP and every other entry
has the closed form ``mean_j((theta_i + theta_j)/2) - lam_i/(2 rho deg)``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .bvc import BvcSet, bvc_to_rows
from .dynamics import (AgentState, BlockLayout, DiscreteLinearDynamics, HorizonConfig,
                       stack_dynamics_constraints)
from .errors import AgentFailure, ConfigError, RoundAborted
from .network import NeighborGraph, SyncTransport
from .qp import DEFAULT_MAX_ITERS, DEFAULT_TOL, PreparedQp, QpProblem, QpStatus


@dataclass(frozen=True)
class GlobalPacking:
    N: int
    layout: BlockLayout

    @property
    def n_b(self) -> int:
        return self.layout.size

    @property
    def size(self) -> int:
        return self.N * self.n_b

    def block(self, i: int) -> slice:
        return slice(i * self.n_b, (i + 1) * self.n_b)

    def state_span(self, i: int) -> slice:
        return slice(i * self.n_b, i * self.n_b + self.layout.n_states)

    def input_span(self, i: int) -> slice:
        return slice(i * self.n_b + self.layout.n_states, (i + 1) * self.n_b)

    def own(self, theta, i: int) -> np.ndarray:
        return np.asarray(theta)[self.block(i)]

    def position_indices(self, i: int, steps=None) -> np.ndarray:
        return i * self.n_b + self.layout.position_indices(steps)

    def positions(self, theta, i: int) -> np.ndarray:
        """(T+1, d) planned positions of agent i inside ``theta``."""
        states, _ = self.layout.unpack(self.own(theta, i))
        return states[:, : self.layout.d]

    def first_input(self, theta, i: int) -> np.ndarray:
        return np.asarray(theta)[i * self.n_b + self.layout.n_states:][: self.layout.d].copy()


@dataclass
class LocalCopy:
    owner: int
    theta: np.ndarray


@dataclass
class DualState:
    owner: int
    lam: np.ndarray


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    eps_primal: float = 1e-3
    eps_dual: float = 1e-3
    max_inner_iters: int = 500
    # thresholds are multiplied by sqrt(len(theta)) when set
    scale_by_dim: bool = True
    qp_tol: float = DEFAULT_TOL
    qp_max_iters: int = DEFAULT_MAX_ITERS
    # also require rho * max_i ||theta_i(n+1) - theta_i(n)|| <= eps_dual before stopping
    stop_on_change: bool = True

    def __post_init__(self):
        for name in ("rho", "eps_primal", "eps_dual", "max_inner_iters", "qp_tol", "qp_max_iters"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"AdmmConfig.{name} must be positive")

    def thresholds(self, size: int) -> tuple[float, float]:
        s = math.sqrt(size) if self.scale_by_dim else 1.0
        return self.eps_primal * s, self.eps_dual * s


@dataclass(frozen=True)
class CostParams:
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "Qf"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.allclose(M, M.T):
                raise ConfigError(f"cost matrix {name} must be symmetric")
            object.__setattr__(self, name, M)
        if np.linalg.eigvalsh(self.Q)[0] < -1e-12 or np.linalg.eigvalsh(self.Qf)[0] < -1e-12:
            raise ConfigError("Q and Qf must be positive semidefinite")
        if np.linalg.eigvalsh(self.R)[0] < -1e-12:
            raise ConfigError("R must be positive (semi)definite")

    @classmethod
    def default(cls, d: int, q_pos=1.0, q_vel=0.1, r=0.01, qf_scale=10.0) -> "CostParams":
        Q = np.diag([q_pos] * d + [q_vel] * d)
        return cls(Q, r * np.eye(d), qf_scale * Q)

    def block_weight(self, layout: BlockLayout) -> np.ndarray:
        """Weight W with L(z) = (z - z_ref)' W (z - z_ref) over one agent block."""
        W = np.zeros((layout.size, layout.size))
        for k in range(layout.T):
            W[layout.state(k), layout.state(k)] = self.Q
            W[layout.input(k), layout.input(k)] = self.R
        W[layout.state(layout.T), layout.state(layout.T)] = self.Qf
        return W


def reference_block(layout: BlockLayout, x_ref) -> np.ndarray:
    return layout.pack(np.tile(np.asarray(x_ref, dtype=float), (layout.T + 1, 1)),
                       np.zeros((layout.T, layout.d)))


def local_cost(i: int, theta_i, refs, cp: CostParams, packing: GlobalPacking) -> float:
    """Tracking cost of agent i evaluated on its own block of ``theta_i``."""
    theta = theta_i.theta if isinstance(theta_i, LocalCopy) else theta_i
    layout = packing.layout
    states, inputs = layout.unpack(packing.own(theta, i))
    err = states - np.asarray(refs[i], dtype=float)
    stage = np.einsum("ka,ab,kb->", err[:-1], cp.Q, err[:-1])
    effort = np.einsum("ka,ab,kb->", inputs, cp.R, inputs)
    return float(stage + effort + err[-1] @ cp.Qf @ err[-1])


@dataclass
class AgentProblem:
    """Agent i's own-block constraints for one MPC step."""

    agent: int
    x_init: AgentState
    x_ref: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    # (family, first row, stop row) over A_in
    families: list[tuple[str, int, int]] = field(default_factory=list)

    def family_of(self, row: int) -> str:
        for name, lo, hi in self.families:
            if lo <= row < hi:
                return name
        return "unknown"


def actuator_rows(layout: BlockLayout, a_max: float):
    """Box |u_k| <= a_max component-wise as 2*d*T rows over one block."""
    idx = layout.input_indices()
    n = idx.size
    rows = np.zeros((2 * n, layout.size))
    rows[np.arange(n), idx] = 1.0
    rows[n + np.arange(n), idx] = -1.0
    return rows, np.full(2 * n, float(a_max))


def build_agent_problem(i: int, x_init: AgentState, x_ref, dyn: DiscreteLinearDynamics,
                        horizon: HorizonConfig, a_max: float, bvc: BvcSet | None = None) -> AgentProblem:
    layout = BlockLayout(dyn.dim, horizon.T)
    A_eq, b_eq = stack_dynamics_constraints(dyn, horizon, x_init)
    blocks, families, start = [], [], 0
    if bvc is not None and bvc.halfspaces:
        rows, rhs = bvc_to_rows(bvc, horizon, layout)
        blocks.append((rows, rhs))
        families.append(("bvc", start, start + rows.shape[0]))
        start += rows.shape[0]
    if a_max is not None and np.isfinite(a_max):
        rows, rhs = actuator_rows(layout, a_max)
        blocks.append((rows, rhs))
        families.append(("actuator", start, start + rows.shape[0]))
        start += rows.shape[0]
    if blocks:
        A_in = np.vstack([b[0] for b in blocks])
        b_in = np.concatenate([b[1] for b in blocks])
    else:
        A_in, b_in = np.zeros((0, layout.size)), np.zeros(0)
    return AgentProblem(i, x_init, np.asarray(x_ref, dtype=float), A_eq, b_eq, A_in, b_in, families)


def _neighbor_sum(theta_i, neighbor_thetas):
    """deg * theta_i + sum_j theta_j, accumulated in inbox (sender) order."""
    acc = len(neighbor_thetas) * theta_i
    for th in neighbor_thetas:
        acc = acc + th
    return acc


class ConvexLocalSolver:
    """Primal update for one agent whose constraints only touch its own block."""

    def __init__(self, problem: AgentProblem, packing: GlobalPacking, degree: int,
                 cfg: AdmmConfig, cp: CostParams):
        self.i = problem.agent
        self.problem = problem
        self.packing = packing
        self.degree = degree
        self.cfg = cfg
        self.cp = cp
        layout = packing.layout
        W = cp.block_weight(layout)
        self._lin = -2.0 * W @ reference_block(layout, problem.x_ref)
        P = 2.0 * W + 2.0 * cfg.rho * degree * np.eye(layout.size)
        self.qp = PreparedQp(P, problem.A_eq, problem.b_eq, problem.A_in, problem.b_in)
        self.hint = None
        self.last_solution = None
        if not self.qp.eq_consistent:
            raise AgentFailure(f"agent {self.i}: dynamics constraints are inconsistent",
                               {self.i: "dynamics"})

    def local_cost(self, theta) -> float:
        return local_cost(self.i, theta, {self.i: self.problem.x_ref}, self.cp, self.packing)

    def _free_entries(self, s, lam):
        if self.degree == 0:
            return np.zeros_like(lam)
        return s / (2.0 * self.degree) - lam / (2.0 * self.cfg.rho * self.degree)

    def _solve(self, q):
        sol = self.qp.solve(q, self.cfg.qp_tol, self.cfg.qp_max_iters, self.hint)
        if sol.status == QpStatus.INFEASIBLE:
            fam = (self.problem.family_of(sol.blocking_row)
                   if sol.blocking_row is not None else "unknown")
            raise AgentFailure(
                f"agent {self.i}: local QP infeasible ({fam} constraints)",
                {self.i: f"infeasible: {fam} constraints cannot be met together with "
                          f"dynamics and active rows {sorted(sol.active)[:8]}"})
        if sol.status != QpStatus.OPTIMAL:
            raise AgentFailure(
                f"agent {self.i}: local QP did not reach tolerance ({sol.kkt})",
                {self.i: f"{sol.status.value}: {sol.kkt}"})
        self.hint = sol.active
        self.last_solution = sol
        return sol

    def update(self, theta_i, neighbor_thetas, lam_i, iteration=0):
        """Returns (new copy, relaxed flag)."""
        own = self.packing.block(self.i)
        s = _neighbor_sum(theta_i, neighbor_thetas)
        out = self._free_entries(s, lam_i)
        q = lam_i[own] - self.cfg.rho * s[own] + self._lin
        out[own] = self._solve(q).z
        return out, False


def assemble_primal_qp(i: int, theta_i, neighbor_thetas, lam_i, problem: AgentProblem,
                       packing: GlobalPacking, cfg: AdmmConfig, cp: CostParams,
                       extra_rows=None) -> QpProblem:
    """The full-length primal subproblem over all of theta_i (constant terms dropped).

    Used as a reference for the block-split update; ``extra_rows`` adds
    inequality rows given over the full vector.
    """
    n = packing.size
    own = packing.block(i)
    deg = len(neighbor_thetas)
    W = np.zeros((n, n))
    W[own, own] = cp.block_weight(packing.layout)
    z_ref = np.zeros(n)
    z_ref[own] = reference_block(packing.layout, problem.x_ref)
    P = 2.0 * W + 2.0 * cfg.rho * deg * np.eye(n)
    centers = sum(0.5 * (theta_i + th) for th in neighbor_thetas) if deg else np.zeros(n)
    q = lam_i - 2.0 * cfg.rho * centers - 2.0 * W @ z_ref
    A_eq = np.zeros((problem.A_eq.shape[0], n))
    A_eq[:, own] = problem.A_eq
    A_in = np.zeros((problem.A_in.shape[0], n))
    A_in[:, own] = problem.A_in
    b_in = problem.b_in
    if extra_rows is not None:
        A_in = np.vstack([A_in, extra_rows[0]])
        b_in = np.concatenate([b_in, extra_rows[1]])
    return QpProblem(P, q, A_eq, problem.b_eq, A_in, b_in)


def primal_update(i: int, theta_i: LocalCopy, neighbor_copies, lam_i: DualState,
                  problem: AgentProblem, cfg: AdmmConfig, cp: CostParams,
                  packing: GlobalPacking) -> LocalCopy:
    solver = ConvexLocalSolver(problem, packing, len(neighbor_copies), cfg, cp)
    theta, _ = solver.update(theta_i.theta, [c.theta for c in neighbor_copies], lam_i.lam)
    return LocalCopy(i, theta)


def dual_step(lam_i, theta_i, neighbor_thetas, rho: float) -> np.ndarray:
    acc = np.zeros_like(lam_i)
    for th in neighbor_thetas:
        acc = acc + (theta_i - th)
    return lam_i + rho * acc


def dual_update(i: int, lam_i: DualState, theta_i: LocalCopy, neighbor_copies, rho: float) -> DualState:
    return DualState(i, dual_step(lam_i.lam, theta_i.theta, [c.theta for c in neighbor_copies], rho))


@dataclass(frozen=True)
class ResidualRecord:
    iter: int
    primal: float
    dual: float
    global_objective: float
    relaxed: int = 0
    # rho * max_i ||theta_i(n) - theta_i(n-1)||
    change: float = 0.0


def residuals(iteration: int, copies, duals_prev, duals_next, graph: NeighborGraph,
              objective=None, relaxed: int = 0, copies_prev=None, rho: float = 1.0) -> ResidualRecord:
    """Monitor-side residuals: max edge disagreement and max dual change.

    ``objective`` is either a callable ``(i, theta_i) -> L_i`` or None.
    With ``copies_prev`` the record also carries the iterate change
    ``rho * max_i ||theta_i - theta_i_prev||``.
    """
    X = np.asarray([c.theta if isinstance(c, LocalCopy) else c for c in copies])
    edges = graph.edges
    primal = 0.0
    if edges:
        e = np.asarray(edges)
        primal = float(np.max(np.linalg.norm(X[e[:, 0]] - X[e[:, 1]], axis=1)))
    L0 = np.asarray([d.lam if isinstance(d, DualState) else d for d in duals_prev])
    L1 = np.asarray([d.lam if isinstance(d, DualState) else d for d in duals_next])
    dual = float(np.max(np.linalg.norm(L1 - L0, axis=1))) if len(L0) else 0.0
    obj = float(sum(objective(i, X[i]) for i in range(len(X)))) if objective else float("nan")
    change = 0.0
    # an isolated agent's update ignores its previous iterate, so only
    # connected agents can be caught between two different points
    linked = [i for i in range(len(X)) if graph.degree(i) > 0]
    if copies_prev is not None and linked:
        Xp = np.asarray([c.theta if isinstance(c, LocalCopy) else c for c in copies_prev])
        change = rho * float(np.max(np.linalg.norm(X[linked] - Xp[linked], axis=1)))
    return ResidualRecord(iteration, primal, dual, obj, relaxed, change)


def stop_test(rec: ResidualRecord, eps_p: float, eps_d: float, cfg: AdmmConfig) -> bool:
    """Both residuals under threshold and, unless disabled, the iterates at rest.

    Because ``lam_i`` moves by ``rho * sum_j (theta_i - theta_j)``, the dual
    change vanishes whenever the copies agree, including transiently on the
    way to the solution; agreement plus an unchanged iterate is what makes
    (theta, lam) a fixed point of the iteration.
    """
    ok = rec.primal <= eps_p and rec.dual <= eps_d
    if cfg.stop_on_change:
        ok = ok and rec.change <= eps_d
    return ok


@dataclass
class AdmmResult:
    copies: list[np.ndarray]
    duals: list[np.ndarray]
    iterations: int
    trace: list[ResidualRecord]
    converged: bool
    relaxed_iterations: int = 0


def run_admm(solvers, graph: NeighborGraph, theta0, lam0, cfg: AdmmConfig,
             transport: SyncTransport | None = None, workers: int = 1) -> AdmmResult:
    """Iterate until both residuals are under threshold or ``max_inner_iters``.

    ``solvers[i]`` provides ``update(theta_i, neighbor_thetas, lam_i, iteration)``
    and ``local_cost(theta)``. ``workers == 1`` runs the single-threaded
    reference loop (agents in index order); ``workers > 1`` runs agents on that
    many threads which only meet at the transport barrier. Both produce the
    same bits.
    """
    N = graph.N
    if len(solvers) != N or len(theta0) != N or len(lam0) != N:
        raise ValueError("need one solver, copy and dual per agent")
    graph.validate()
    if transport is None:
        transport = SyncTransport(graph)
    size = len(theta0[0])
    eps_p, eps_d = cfg.thresholds(size)

    def objective(i, th):
        return solvers[i].local_cost(th)

    theta = [np.array(t, dtype=float) for t in theta0]
    lam = [np.array(l, dtype=float) for l in lam0]
    trace = [residuals(0, theta, lam, lam, graph, objective)]
    if workers <= 1 or N == 1:
        return _run_serial(solvers, graph, theta, lam, cfg, transport, trace, eps_p, eps_d, objective)
    return _run_threaded(solvers, graph, theta, lam, cfg, transport, trace, eps_p, eps_d,
                         objective, min(workers, N))


def _run_serial(solvers, graph, theta, lam, cfg, transport, trace, eps_p, eps_d, objective):
    N = graph.N
    relaxed_total = 0
    converged = False
    n = 0
    for n in range(1, cfg.max_inner_iters + 1):
        inbox = transport.exchange(transport.next_round, {i: theta[i] for i in range(N)})
        new_theta, relaxed = [], 0
        for i in range(N):
            th, rel = solvers[i].update(theta[i], [p for _, p in inbox[i]], lam[i], n)
            new_theta.append(th)
            relaxed += rel
        inbox = transport.exchange(transport.next_round, {i: new_theta[i] for i in range(N)})
        new_lam = [dual_step(lam[i], new_theta[i], [p for _, p in inbox[i]], cfg.rho)
                   for i in range(N)]
        rec = residuals(n, new_theta, lam, new_lam, graph, objective, relaxed, theta, cfg.rho)
        trace.append(rec)
        theta, lam = new_theta, new_lam
        relaxed_total += relaxed > 0
        if stop_test(rec, eps_p, eps_d, cfg):
            converged = True
            break
    return AdmmResult(theta, lam, n, trace, converged, relaxed_total)


def _run_threaded(solvers, graph, theta, lam, cfg, transport, trace, eps_p, eps_d, objective, workers):
    N = graph.N
    groups = [list(range(w, N, workers)) for w in range(workers)]
    slots_theta = list(theta)
    slots_lam = list(lam)
    slots_relaxed = [0] * N
    state = {"stop": False, "n": 0, "converged": False, "relaxed_total": 0}
    errors = []
    base_round = transport.next_round

    def monitor():
        n = state["n"] + 1
        relaxed = sum(slots_relaxed)
        rec = residuals(n, slots_theta, state["lam_prev"], slots_lam, graph, objective, relaxed,
                        state["theta_prev"], cfg.rho)
        trace.append(rec)
        state["n"] = n
        state["relaxed_total"] += relaxed > 0
        if stop_test(rec, eps_p, eps_d, cfg):
            state["stop"], state["converged"] = True, True
        elif n >= cfg.max_inner_iters:
            state["stop"] = True
        if not state["stop"]:
            state["lam_prev"] = list(slots_lam)
            state["theta_prev"] = list(slots_theta)

    state["lam_prev"] = list(lam)
    state["theta_prev"] = list(theta)
    barrier = threading.Barrier(workers, action=monitor)

    def worker(agents):
        local_theta = {i: theta[i] for i in agents}
        local_lam = {i: lam[i] for i in agents}
        try:
            n = 0
            while True:
                n += 1
                r0 = base_round + 2 * (n - 1)
                for i in agents:
                    transport.post(r0, i, local_theta[i])
                new_theta = {}
                for i in agents:
                    inbox = transport.collect(r0, i)
                    th, rel = solvers[i].update(local_theta[i], [p for _, p in inbox], local_lam[i], n)
                    new_theta[i] = th
                    slots_relaxed[i] = int(rel)
                for i in agents:
                    transport.post(r0 + 1, i, new_theta[i])
                for i in agents:
                    inbox = transport.collect(r0 + 1, i)
                    local_lam[i] = dual_step(local_lam[i], new_theta[i], [p for _, p in inbox], cfg.rho)
                    local_theta[i] = new_theta[i]
                    slots_theta[i] = new_theta[i]
                    slots_lam[i] = local_lam[i]
                barrier.wait()
                if state["stop"]:
                    return
        except (RoundAborted, threading.BrokenBarrierError):
            return
        except BaseException as exc:  # noqa: BLE001 - re-raised by the caller
            errors.append(exc)
            transport.abort(f"worker for agents {agents} failed: {exc}")
            barrier.abort()

    threads = [threading.Thread(target=worker, args=(g,), daemon=True) for g in groups]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return AdmmResult(list(slots_theta), list(slots_lam), state["n"], trace,
                      state["converged"], state["relaxed_total"])
