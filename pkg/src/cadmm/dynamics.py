"""Discrete double-integrator dynamics and horizon-stacked constraints.

Every agent shares the same (A, B). An agent's trajectory is packed into a
single block vector

    z = [x_0, x_1, ..., x_T, u_0, ..., u_{T-1}]

with x_k = [p_k, v_k] (length 2d) and u_k (length d). All states come first,
time-major, then all inputs. Every other module indexes into this layout
through :class:`BlockLayout`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(-1)
        v = np.asarray(self.velocity, dtype=float).reshape(-1)
        if p.shape != v.shape or p.size not in (2, 3):
            raise ConfigError(
                f"position/velocity must share length 2 or 3, got {p.size} and {v.size}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise ConfigError("agent state has non-finite entries")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)

    @property
    def dim(self) -> int:
        return self.position.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, x) -> "AgentState":
        x = np.asarray(x, dtype=float)
        d = x.size // 2
        return cls(x[:d], x[d:])

    @classmethod
    def at_rest(cls, position) -> "AgentState":
        p = np.asarray(position, dtype=float)
        return cls(p, np.zeros_like(p))


@dataclass(frozen=True)
class DiscreteLinearDynamics:
    A: np.ndarray
    B: np.ndarray
    dt: float

    @property
    def dim(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class HorizonConfig:
    T: int
    dt: float

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"horizon T must be a positive integer, got {self.T}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class BlockLayout:
    """Index map for one agent's block ``[x_0..x_T, u_0..u_{T-1}]``."""

    d: int
    T: int

    @property
    def nx(self) -> int:
        return 2 * self.d

    @property
    def n_states(self) -> int:
        return self.nx * (self.T + 1)

    @property
    def size(self) -> int:
        return self.n_states + self.d * self.T

    def state(self, k: int) -> slice:
        return slice(self.nx * k, self.nx * (k + 1))

    def position(self, k: int) -> slice:
        return slice(self.nx * k, self.nx * k + self.d)

    def velocity(self, k: int) -> slice:
        return slice(self.nx * k + self.d, self.nx * (k + 1))

    def input(self, k: int) -> slice:
        start = self.n_states + self.d * k
        return slice(start, start + self.d)

    def position_indices(self, steps=None) -> np.ndarray:
        """Flat indices of the position entries for the given steps (default 1..T)."""
        if steps is None:
            steps = range(1, self.T + 1)
        return np.array([self.nx * k + a for k in steps for a in range(self.d)], dtype=int)

    def input_indices(self) -> np.ndarray:
        return np.arange(self.n_states, self.size)

    def pack(self, states, inputs) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(self.T + 1, self.nx)
        inputs = np.asarray(inputs, dtype=float).reshape(self.T, self.d)
        return np.concatenate([states.ravel(), inputs.ravel()])

    def unpack(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z)
        return (z[: self.n_states].reshape(self.T + 1, self.nx),
                z[self.n_states: self.size].reshape(self.T, self.d))


def build_dynamics(d: int, dt: float) -> DiscreteLinearDynamics:
    """Exact zero-order-hold double integrator in ``d`` spatial dimensions."""
    if d not in (2, 3):
        raise ConfigError(f"spatial dimension must be 2 or 3, got {d}")
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    eye = np.eye(d)
    zero = np.zeros((d, d))
    A = np.block([[eye, dt * eye], [zero, eye]])
    B = np.vstack([0.5 * dt * dt * eye, dt * eye])
    return DiscreteLinearDynamics(A, B, float(dt))


def step(dyn: DiscreteLinearDynamics, x: AgentState, u) -> AgentState:
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.dim != dyn.dim or u.size != dyn.dim:
        raise ValueError(
            f"dimension mismatch: dynamics d={dyn.dim}, state d={x.dim}, input d={u.size}")
    return AgentState.from_vector(dyn.A @ x.as_vector() + dyn.B @ u)


def rollout(dyn: DiscreteLinearDynamics, x0: AgentState, inputs) -> list[AgentState]:
    """States ``x_0..x_T`` obtained by applying ``inputs`` (T x d) from ``x0``."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != dyn.dim:
        raise ValueError(f"inputs must have {dyn.dim} columns, got shape {inputs.shape}")
    states = [x0]
    for u in inputs:
        states.append(step(dyn, states[-1], u))
    return states


def pack_rollout(dyn: DiscreteLinearDynamics, x0: AgentState, inputs) -> np.ndarray:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    layout = BlockLayout(dyn.dim, inputs.shape[0])
    states = np.array([s.as_vector() for s in rollout(dyn, x0, inputs)])
    return layout.pack(states, inputs)


def stack_dynamics_constraints(dyn: DiscreteLinearDynamics, cfg: HorizonConfig,
                               x_init: AgentState) -> tuple[np.ndarray, np.ndarray]:
    """Equality system ``A_eq z = b_eq`` pinning x_0 and enforcing x_{k+1} = A x_k + B u_k.

    Rows are ordered as the initial-condition block followed by the T
    transition blocks, 2d rows each.
    """
    if x_init.dim != dyn.dim:
        raise ValueError(f"x_init has d={x_init.dim}, dynamics has d={dyn.dim}")
    layout = BlockLayout(dyn.dim, cfg.T)
    nx = layout.nx
    A_eq = np.zeros((nx * (cfg.T + 1), layout.size))
    b_eq = np.zeros(nx * (cfg.T + 1))
    A_eq[:nx, layout.state(0)] = np.eye(nx)
    b_eq[:nx] = x_init.as_vector()
    for k in range(cfg.T):
        rows = slice(nx * (k + 1), nx * (k + 2))
        A_eq[rows, layout.state(k + 1)] = np.eye(nx)
        A_eq[rows, layout.state(k)] = -dyn.A
        A_eq[rows, layout.input(k)] = -dyn.B
    return A_eq, b_eq
