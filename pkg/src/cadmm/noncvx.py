"""Non-convex variant: pairwise minimum-distance constraints.

Agent i requires ``||p_i,k - p_j,k|| >= d_min`` for every neighbor j and
k = 1..T, on its own copy theta_i, i.e. the constraint couples agent i's block
with the neighbor blocks stored inside theta_i. Each primal update replaces
the constraint by its supporting half-space at the previous iterate

    eta' (p_i,k - p_j,k) >= d_min,   eta = unit(p_i,k_ref - p_j,k_ref)

which is conservative (eta' x <= ||x||). The reference moves every
iteration, so fixed points of the scheme satisfy the true constraint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consensus import (AdmmConfig, AgentProblem, ConvexLocalSolver, CostParams, GlobalPacking,
                        LocalCopy, _neighbor_sum, local_cost, reference_block)
from .errors import AgentFailure, ConfigError
from .qp import PreparedQp, QpStatus

SLACK_WEIGHT = 1e4
COINCIDENT_TOL = 1e-9


@dataclass(frozen=True)
class CollisionConstraintSpec:
    d_min: float
    pairs: tuple[tuple[int, int], ...]
    T: int

    def __post_init__(self):
        if self.d_min < 0:
            raise ConfigError(f"d_min must be nonnegative, got {self.d_min}")

    @classmethod
    def for_agent(cls, i: int, neighbors, d_min: float, T: int) -> "CollisionConstraintSpec":
        return cls(float(d_min), tuple((i, int(j)) for j in neighbors), T)

    @classmethod
    def all_pairs(cls, N: int, d_min: float, T: int) -> "CollisionConstraintSpec":
        return cls(float(d_min), tuple((i, j) for i in range(N) for j in range(i + 1, N)), T)


class LinearizationState:
    """Fallback directions for pairs whose reference positions coincide.

    One unit vector per unordered pair and step, drawn once from ``seed``;
    the ordered pair (j, i) uses the negated vector so both agents agree on
    the separating direction.
    """

    def __init__(self, N: int, T: int, d: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x11AE]))
        v = rng.normal(size=(N, N, T + 1, d))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        self.directions = v
        self.reference = None

    def direction(self, i: int, j: int, k: int) -> np.ndarray:
        if i < j:
            return self.directions[i, j, k]
        return -self.directions[j, i, k]


def _pair_indices(spec: CollisionConstraintSpec, packing: GlobalPacking):
    """(n_pairs, T, d) position indices of the first and second agent of every pair."""
    d = packing.layout.d
    steps = range(1, spec.T + 1)
    shape = (len(spec.pairs), spec.T, d)
    idx_i = np.array([packing.position_indices(i, steps) for i, _ in spec.pairs], dtype=int)
    idx_j = np.array([packing.position_indices(j, steps) for _, j in spec.pairs], dtype=int)
    return idx_i.reshape(shape), idx_j.reshape(shape)


def _normals(theta, spec, idx_i, idx_j, lin):
    delta = theta[idx_i] - theta[idx_j]
    norms = np.linalg.norm(delta, axis=2)
    eta = np.empty_like(delta)
    ok = norms > COINCIDENT_TOL
    eta[ok] = delta[ok] / norms[ok][:, None]
    for p, k in zip(*np.nonzero(~ok)):
        i, j = spec.pairs[p]
        if lin is None:
            raise ValueError(f"reference positions of agents {i} and {j} coincide at step {k + 1}")
        eta[p, k] = lin.direction(i, j, k + 1)
    return eta


def linearize_collision(theta_ref, spec: CollisionConstraintSpec, packing: GlobalPacking,
                        lin: LinearizationState | None = None, indices=None, columns=None):
    """Rows ``A theta <= b`` over the full vector, ordered pair-major then by step.

    ``columns`` (an index array into theta) restricts the returned matrix to
    those columns; every referenced position must be among them.
    """
    theta = theta_ref.theta if isinstance(theta_ref, LocalCopy) else np.asarray(theta_ref)
    n_rows = len(spec.pairs) * spec.T
    b = np.full(n_rows, -float(spec.d_min))
    width = packing.size if columns is None else len(columns)
    A = np.zeros((n_rows, width))
    if not n_rows:
        return A, b
    idx_i, idx_j = indices if indices is not None else _pair_indices(spec, packing)
    eta = _normals(theta, spec, idx_i, idx_j, lin).reshape(n_rows, -1)
    if columns is not None:
        where = np.full(packing.size, -1)
        where[columns] = np.arange(len(columns))
        idx_i, idx_j = where[idx_i], where[idx_j]
        if np.any(idx_i < 0) or np.any(idx_j < 0):
            raise ValueError("columns do not cover every constrained position")
    rows = np.repeat(np.arange(n_rows), eta.shape[1])
    A[rows, idx_i.reshape(n_rows, -1).ravel()] = -eta.ravel()
    A[rows, idx_j.reshape(n_rows, -1).ravel()] = eta.ravel()
    return A, b


@dataclass
class MarginReport:
    pairs: tuple[tuple[int, int], ...]
    margins: np.ndarray  # (n_pairs, T)

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins)) if self.margins.size else float("inf")

    @property
    def feasible(self) -> bool:
        return self.min_margin >= 0.0


def check_true_feasibility(theta, spec: CollisionConstraintSpec, packing: GlobalPacking) -> MarginReport:
    """Exact distances minus d_min for every pair in ``spec`` at k = 1..T."""
    th = theta.theta if isinstance(theta, LocalCopy) else np.asarray(theta)
    margins = np.zeros((len(spec.pairs), spec.T))
    for r, (i, j) in enumerate(spec.pairs):
        pi = packing.positions(th, i)[1: spec.T + 1]
        pj = packing.positions(th, j)[1: spec.T + 1]
        margins[r] = np.linalg.norm(pi - pj, axis=1) - spec.d_min
    return MarginReport(spec.pairs, margins)


def pairwise_margins(positions, d_min: float) -> np.ndarray:
    """Upper-triangle margins ``||p_i - p_j|| - d_min`` for one set of positions, pair order (0,1),(0,2).."""
    p = np.asarray(positions, dtype=float)
    iu = np.triu_indices(len(p), 1)
    return np.linalg.norm(p[iu[0]] - p[iu[1]], axis=1) - d_min


class NonconvexLocalSolver:
    """Primal update over agent i's block plus the neighbor positions it constrains."""

    def __init__(self, problem: AgentProblem, packing: GlobalPacking, neighbors,
                 cfg: AdmmConfig, cp: CostParams, spec: CollisionConstraintSpec,
                 lin: LinearizationState, initial_reference=None):
        self.i = problem.agent
        self.problem = problem
        self.packing = packing
        self.degree = len(neighbors)
        self.cfg = cfg
        self.cp = cp
        self.spec = spec
        self.lin = lin
        self.initial_reference = initial_reference
        self.hint = None
        self.last_solution = None
        self.relaxed_count = 0

        layout = packing.layout
        own = np.arange(packing.block(self.i).start, packing.block(self.i).stop)
        nbr_pos = np.concatenate([packing.position_indices(j) for j in neighbors]) if neighbors else np.zeros(0, int)
        self.var = np.concatenate([own, nbr_pos])
        nv, nb = self.var.size, own.size
        rho_term = 2.0 * cfg.rho * self.degree
        W = cp.block_weight(layout)
        P = np.zeros((nv, nv))
        P[:nb, :nb] = 2.0 * W + rho_term * np.eye(nb)
        P[nb:, nb:] = rho_term * np.eye(nv - nb)
        self._P = P
        self._lin = np.zeros(nv)
        self._lin[:nb] = -2.0 * W @ reference_block(layout, problem.x_ref)
        A_eq = np.zeros((problem.A_eq.shape[0], nv))
        A_eq[:, :nb] = problem.A_eq
        self._A_eq = A_eq
        self._A_own = np.zeros((problem.A_in.shape[0], nv))
        self._A_own[:, :nb] = problem.A_in
        self.qp = PreparedQp(P, A_eq, problem.b_eq, self._A_own, problem.b_in)
        self._n_own_rows = problem.A_in.shape[0]
        self._pair_idx = _pair_indices(spec, packing)

    def local_cost(self, theta) -> float:
        return local_cost(self.i, theta, {self.i: self.problem.x_ref}, self.cp, self.packing)

    def collision_rows(self, reference):
        return linearize_collision(reference, self.spec, self.packing, self.lin,
                                   self._pair_idx, self.var)

    def update(self, theta_i, neighbor_thetas, lam_i, iteration=0):
        reference = theta_i
        if self.initial_reference is not None:
            reference, self.initial_reference = self.initial_reference, None
        s = _neighbor_sum(theta_i, neighbor_thetas)
        out = s / (2.0 * self.degree) - lam_i / (2.0 * self.cfg.rho * self.degree)
        q = lam_i[self.var] - self.cfg.rho * s[self.var] + self._lin

        A_col, b_col = self.collision_rows(reference)
        self.qp.set_extra_inequalities(A_col, b_col)
        sol = self.qp.solve(q, self.cfg.qp_tol, self.cfg.qp_max_iters, self.hint)
        relaxed = False
        if sol.status == QpStatus.INFEASIBLE:
            sol = self._relaxed_solve(q, A_col, b_col)
            relaxed = True
            self.relaxed_count += 1
        if sol.status != QpStatus.OPTIMAL:
            raise AgentFailure(f"agent {self.i}: non-convex local QP failed ({sol.status.value})",
                               {self.i: f"{sol.status.value}: {sol.kkt}"})
        if not relaxed:
            self.hint = sol.active
        self.last_solution = sol
        out[self.var] = sol.z[: self.var.size]
        return out, relaxed

    def _relaxed_solve(self, q, A_col, b_col):
        """Same subproblem with a penalized nonnegative slack on every collision row."""
        nv, m = self.var.size, A_col.shape[0]
        P = np.zeros((nv + m, nv + m))
        P[:nv, :nv] = self._P
        P[nv:, nv:] = 2.0 * SLACK_WEIGHT * np.eye(m)
        qq = np.concatenate([q, SLACK_WEIGHT * np.ones(m)])
        A_eq = np.hstack([self._A_eq, np.zeros((self._A_eq.shape[0], m))])
        A_in = np.vstack([
            np.hstack([self._A_own, np.zeros((self._n_own_rows, m))]),
            np.hstack([A_col, -np.eye(m)]),
            np.hstack([np.zeros((m, nv)), -np.eye(m)]),
        ])
        b_in = np.concatenate([self.problem.b_in, b_col, np.zeros(m)])
        prepared = PreparedQp(P, A_eq, self.problem.b_eq, A_in, b_in)
        # multipliers of relaxed rows are of order SLACK_WEIGHT; scale the
        # absolute KKT tolerance with them
        return prepared.solve(qq, self.cfg.qp_tol * SLACK_WEIGHT, self.cfg.qp_max_iters)


def primal_update_noncvx(i: int, theta_i: LocalCopy, neighbor_copies, lam_i, problem: AgentProblem,
                         spec: CollisionConstraintSpec, cfg: AdmmConfig, cp: CostParams,
                         packing: GlobalPacking, lin: LinearizationState | None = None) -> LocalCopy:
    """One non-convex primal update, linearized about ``theta_i``."""
    neighbors = [c.owner for c in neighbor_copies]
    if lin is None:
        lin = LinearizationState(packing.N, packing.layout.T, packing.layout.d)
    thetas = [c.theta for c in neighbor_copies]
    lam = lam_i.lam if hasattr(lam_i, "lam") else lam_i
    if spec.d_min == 0 or not spec.pairs:
        solver = ConvexLocalSolver(problem, packing, len(neighbors), cfg, cp)
    else:
        solver = NonconvexLocalSolver(problem, packing, neighbors, cfg, cp, spec, lin)
    theta, _ = solver.update(theta_i.theta, thetas, lam)
    return LocalCopy(i, theta)
