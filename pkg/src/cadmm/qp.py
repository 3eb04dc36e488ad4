"""Dense convex QP solver with KKT residual reporting.

Solves

    minimize    1/2 z'Pz + q'z
    subject to  A_eq z  = b_eq
                A_in z <= b_in

Equalities are eliminated once through an SVD null-space basis; the
inequalities are then handled by a dual active-set method (Goldfarb-Idnani)
that works entirely on the constraint Gram matrix ``C H^-1 C'``. Because the
Gram matrix only depends on (P, A_eq, A_in), :class:`PreparedQp` caches it so
that a sequence of solves with changing ``q`` (the situation inside ADMM) costs
a few small dense solves each.

:func:`brute_force_qp` is an independent test oracle that enumerates every
active set and solves the full KKT system for each.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 20000
REGULARIZATION = 1e-9


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITERS = "MaxIters"
    INFEASIBLE = "Infeasible"


def _as_matrix(M, n):
    if M is None:
        return np.zeros((0, n))
    M = np.asarray(M, dtype=float)
    return M.reshape(-1, n) if M.size else np.zeros((0, n))


def _as_vector(v, m):
    if v is None:
        return np.zeros(m)
    return np.asarray(v, dtype=float).reshape(-1)


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        n = self.P.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"P must be square, got {self.P.shape}")
        self.q = _as_vector(self.q, n)
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0])
        self.A_in = _as_matrix(self.A_in, n)
        self.b_in = _as_vector(self.b_in, self.A_in.shape[0])
        if self.q.size != n:
            raise ValueError(f"q has length {self.q.size}, expected {n}")
        if self.b_eq.size != self.A_eq.shape[0] or self.b_in.size != self.A_in.shape[0]:
            raise ValueError("constraint right-hand sides do not match their matrices")
        if np.max(np.abs(self.P - self.P.T), initial=0.0) > 1e-10:
            raise ValueError("P is not symmetric")
        for name in ("P", "q", "A_eq", "b_eq", "A_in", "b_in"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.P @ z + self.q @ z)


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    equality: float
    inequality: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.equality, self.inequality, self.complementarity)


@dataclass
class QpSolution:
    z: np.ndarray
    status: QpStatus
    kkt: KktResiduals
    y_eq: np.ndarray
    y_in: np.ndarray
    active: tuple = ()
    iterations: int = 0
    regularized: bool = False
    # inequality row that could not be added when infeasibility was detected
    blocking_row: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == QpStatus.OPTIMAL


def kkt_residuals(P, q, A_eq, b_eq, A_in, b_in, z, y_eq, y_in) -> KktResiduals:
    stat = P @ z + q + A_eq.T @ y_eq + A_in.T @ y_in
    eq = A_eq @ z - b_eq
    slack = A_in @ z - b_in
    return KktResiduals(
        float(np.max(np.abs(stat), initial=0.0)),
        float(np.max(np.abs(eq), initial=0.0)),
        float(np.max(slack, initial=0.0).clip(min=0.0)),
        float(np.max(np.abs(y_in * slack), initial=0.0)),
    )


class PreparedQp:
    """Factorized (P, A_eq, b_eq) with an optional inequality block.

    ``solve(q)`` may then be called repeatedly. ``set_inequalities`` replaces
    the inequality block and refreshes the cached Gram matrix.
    """

    def __init__(self, P, A_eq=None, b_eq=None, A_in=None, b_in=None):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        n = P.shape[0]
        self.n = n
        self.regularized = False
        if n and np.linalg.eigvalsh(P)[0] < REGULARIZATION:
            P = P + REGULARIZATION * np.eye(n)
            self.regularized = True
        self.P = P
        self.A_eq = _as_matrix(A_eq, n)
        self.b_eq = _as_vector(b_eq, self.A_eq.shape[0])

        m_eq = self.A_eq.shape[0]
        if m_eq:
            U, S, Vt = np.linalg.svd(self.A_eq)
            rank = int(np.sum(S > S[0] * max(self.A_eq.shape) * np.finfo(float).eps)) if S.size else 0
            self._eq_pinv_t = U[:, :rank] / S[:rank]       # maps A_eq' residual back to y_eq
            self._eq_row_basis = Vt[:rank].T
            self.Z = Vt[rank:].T
            self.z_p = self._eq_row_basis @ (self._eq_pinv_t.T @ self.b_eq)
            scale = 1.0 + np.max(np.abs(self.b_eq))
            self.eq_consistent = bool(np.max(np.abs(self.A_eq @ self.z_p - self.b_eq)) <= 1e-9 * scale)
        else:
            self._eq_pinv_t = np.zeros((0, 0))
            self._eq_row_basis = np.zeros((n, 0))
            self.Z = np.eye(n)
            self.z_p = np.zeros(n)
            self.eq_consistent = True

        H = self.Z.T @ P @ self.Z
        H = 0.5 * (H + H.T)
        if H.size:
            cho = sla.cho_factor(H, lower=True)
            self.Hinv = sla.cho_solve(cho, np.eye(H.shape[0]))
            self.Hinv = 0.5 * (self.Hinv + self.Hinv.T)
        else:
            self.Hinv = np.zeros((0, 0))
        self._ZtPzp = self.Z.T @ (P @ self.z_p)
        self.set_inequalities(A_in, b_in)

    def set_inequalities(self, A_in, b_in):
        self.A_in = _as_matrix(A_in, self.n)
        self.b_in = _as_vector(b_in, self.A_in.shape[0])
        self.C = self.A_in @ self.Z
        self.d = self.b_in - self.A_in @ self.z_p
        self.HCt = self.Hinv @ self.C.T
        self.G = self.C @ self.HCt
        self._base = (self.A_in, self.b_in, self.C, self.d, self.HCt, self.G)

    def set_extra_inequalities(self, A_extra, b_extra):
        """Append rows to the block given at construction (or by ``set_inequalities``).

        Only the Gram entries touching the new rows are recomputed, which is
        what makes per-iteration relinearization affordable.
        """
        A0, b0, C0, d0, HCt0, G0 = self._base
        A_extra = _as_matrix(A_extra, self.n)
        b_extra = _as_vector(b_extra, A_extra.shape[0])
        C1 = A_extra @ self.Z
        HCt1 = self.Hinv @ C1.T
        G01 = C0 @ HCt1
        self.A_in = np.vstack([A0, A_extra])
        self.b_in = np.concatenate([b0, b_extra])
        self.C = np.vstack([C0, C1])
        self.d = np.concatenate([d0, b_extra - A_extra @ self.z_p])
        self.HCt = np.hstack([HCt0, HCt1])
        self.G = np.block([[G0, G01], [G01.T, C1 @ HCt1]])

    def eq_multipliers(self, resid):
        """Least-squares y_eq with A_eq' y_eq = -resid."""
        if not self.A_eq.shape[0]:
            return np.zeros(0)
        return -self._eq_pinv_t @ (self._eq_row_basis.T @ resid)

    def solve(self, q, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, active_hint=None) -> QpSolution:
        q = _as_vector(q, self.n)
        m = self.C.shape[0]
        if not self.eq_consistent:
            z = self.z_p.copy()
            return self._finish(q, z, np.zeros(m), (), QpStatus.INFEASIBLE, 0, tol)

        g = self.Z.T @ q + self._ZtPzp
        Hg = self.Hinv @ g
        w = self.C @ Hg
        active, mu, status, iters, blocking = _dual_active_set(
            self.G, w, self.d, tol, max_iters, active_hint)

        mu_full = np.zeros(m)
        if active:
            idx = list(active)
            mu_full[idx] = mu
        y = -Hg - self.HCt @ mu_full if m else -Hg
        z = self.z_p + self.Z @ y
        sol = self._finish(q, z, mu_full, tuple(active), status, iters, tol)
        sol.blocking_row = blocking
        return sol

    def _finish(self, q, z, mu, active, status, iters, tol):
        base = self.P @ z + q + self.A_in.T @ mu
        y_eq = self.eq_multipliers(base)
        kkt = kkt_residuals(self.P, q, self.A_eq, self.b_eq, self.A_in, self.b_in, z, y_eq, mu)
        if status == QpStatus.OPTIMAL and kkt.max() > tol:
            status = QpStatus.MAX_ITERS
        return QpSolution(z, status, kkt, y_eq, mu, active, iters, self.regularized)


def _dual_active_set(G, w, d, tol, max_iters, hint):
    """Goldfarb-Idnani iterations on the reduced problem.

    Works on the Gram matrix ``G = C H^-1 C'`` only: with multipliers ``mu`` on
    the active set, the constraint values are ``Cy = -w - G[:, A] mu``.
    Returns (active list, multipliers, status, iteration count, blocking row).
    """
    m = G.shape[0]
    if m == 0:
        return [], np.zeros(0), QpStatus.OPTIMAL, 0, None
    feas_tol = 0.1 * tol
    diag = np.maximum(np.diag(G), 1e-300)

    def equality_solve(A):
        """Multipliers making every row of A tight; None if rows are dependent."""
        if not A:
            return np.zeros(0)
        M = G[np.ix_(A, A)]
        try:
            cho = sla.cho_factor(M, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        if np.min(np.abs(np.diag(cho[0]))) ** 2 < 1e-13 * np.max(np.diag(M)):
            return None
        return sla.cho_solve(cho, -(d[A] + w[A]), check_finite=False)

    active: list[int] = []
    mu = np.zeros(0)
    if hint:
        active = sorted(set(int(j) for j in hint if 0 <= j < m))
        while active:
            mu = equality_solve(active)
            if mu is None:
                active, mu = [], np.zeros(0)
                break
            worst = int(np.argmin(mu))
            if mu[worst] >= 0:
                break
            del active[worst]
        else:
            mu = np.zeros(0)

    cy = -w - (G[:, active] @ mu if active else 0.0)
    iters = 0
    while True:
        viol = cy - d
        if active:
            viol[active] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] <= feas_tol:
            break
        mu_p = 0.0
        while True:
            if iters >= max_iters:
                return active, _polish(active, mu, equality_solve), QpStatus.MAX_ITERS, iters, None
            iters += 1
            if active:
                M = G[np.ix_(active, active)]
                r = np.linalg.solve(M, G[active, p])
                cs = G[p, p] - G[active, p] @ r
            else:
                r = np.zeros(0)
                cs = G[p, p]
            t1, k_drop = np.inf, -1
            if active:
                pos = r > 1e-12 * (1.0 + np.abs(r).max())
                if np.any(pos):
                    ratios = np.full(len(active), np.inf)
                    ratios[pos] = mu[pos] / r[pos]
                    k_drop = int(np.argmin(ratios))
                    t1 = ratios[k_drop]
            primal_step = cs > 1e-11 * diag[p]
            t2 = (cy[p] - d[p]) / cs if primal_step else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                return active, _polish(active, mu, equality_solve), QpStatus.INFEASIBLE, iters, p
            t = min(t1, t2)
            if primal_step:
                col = G[:, p] - (G[:, active] @ r if active else 0.0)
                cy = cy - t * col
            mu = mu - t * r
            mu_p += t
            if t2 <= t1:
                active.append(p)
                mu = np.append(mu, mu_p)
                break
            del active[k_drop]
            mu = np.delete(mu, k_drop)
    return active, _polish(active, mu, equality_solve), QpStatus.OPTIMAL, iters, None


def _polish(active, mu, equality_solve):
    if not active:
        return np.zeros(0)
    exact = equality_solve(active)
    if exact is None:
        return np.maximum(mu, 0.0)
    return np.maximum(exact, 0.0)


def solve_qp(prob: QpProblem, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
             active_hint=None) -> QpSolution:
    """Solve ``prob`` to the given KKT tolerance.

    Deterministic: the returned point only depends on the inputs (and on
    ``active_hint`` when one is given).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    prepared = PreparedQp(prob.P, prob.A_eq, prob.b_eq, prob.A_in, prob.b_in)
    return prepared.solve(prob.q, tol, max_iters, active_hint)


def brute_force_qp(prob: QpProblem, tol: float = DEFAULT_TOL) -> QpSolution:
    """Exhaustive active-set oracle for small problems (m_in <= 20).

    Every subset of inequality rows is treated as a set of equalities; the
    full KKT system is solved for each and the feasible candidate with the
    lowest objective wins.
    """
    m = prob.A_in.shape[0]
    if m > 20:
        raise ValueError(f"brute_force_qp enumerates 2^m active sets; m={m} is too large")
    n, m_eq = prob.n, prob.A_eq.shape[0]
    best = None
    for size in range(m + 1):
        for subset in itertools.combinations(range(m), size):
            rows = list(subset)
            A_act = np.vstack([prob.A_eq, prob.A_in[rows]])
            b_act = np.concatenate([prob.b_eq, prob.b_in[rows]])
            k = A_act.shape[0]
            K = np.block([[prob.P, A_act.T], [A_act, np.zeros((k, k))]])
            rhs = np.concatenate([-prob.q, b_act])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            if np.max(np.abs(K @ sol - rhs), initial=0.0) > 1e-7 * (1.0 + np.max(np.abs(rhs), initial=0.0)):
                continue
            z = sol[:n]
            if np.max(np.abs(prob.A_eq @ z - prob.b_eq), initial=0.0) > tol:
                continue
            if np.max(prob.A_in @ z - prob.b_in, initial=-np.inf) > tol:
                continue
            obj = prob.objective(z)
            if best is None or obj < best[0] - 1e-12 * (1.0 + abs(obj)):
                y_in = np.zeros(m)
                y_in[rows] = sol[n + m_eq:]
                best = (obj, z, sol[n:n + m_eq], y_in, tuple(rows))
    if best is None:
        z = np.zeros(n)
        kkt = kkt_residuals(prob.P, prob.q, prob.A_eq, prob.b_eq, prob.A_in, prob.b_in,
                            z, np.zeros(m_eq), np.zeros(m))
        return QpSolution(z, QpStatus.INFEASIBLE, kkt, np.zeros(m_eq), np.zeros(m))
    _, z, y_eq, y_in, rows = best
    kkt = kkt_residuals(prob.P, prob.q, prob.A_eq, prob.b_eq, prob.A_in, prob.b_in, z, y_eq, y_in)
    return QpSolution(z, QpStatus.OPTIMAL, kkt, y_eq, y_in, rows)
