"""Scenario configuration and its TOML file format.

The file is the sole source of truth for a run: no environment variables are
read. Sections mirror the dataclass groups::

    [scenario]  n_agents, dim, box, seed, variant, starts, goals, min_start_goal
    [horizon]   T, dt
    [safety]    d_min, r_s, a_max
    [cost]      q_pos, q_vel, r, qf_scale
    [admm]      rho, eps_primal, eps_dual, max_inner_iters, scale_by_dim, qp_tol,
                qp_max_iters, stop_on_change
    [mpc]       pos_tol, vel_tol, obj_tol, obj_window, max_outer_steps,
                warm_start, warm_start_duals, noncvx_reference
    [network]   graph, radius, workers, record_reads

See ``configs/paper_5agent.toml`` for a commented reference file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .consensus import AdmmConfig, CostParams
from .errors import ConfigError

VARIANTS = ("convex", "nonconvex")


@dataclass(frozen=True)
class StopTolerances:
    pos_tol: float = 0.05
    vel_tol: float = 0.05
    obj_tol: float = 1e-4
    obj_window: int = 5
    max_outer_steps: int = 200


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 5
    dim: int = 3
    box: tuple = (3.5, 3.5, 2.5)
    T: int = 10
    dt: float = 0.1
    d_min: float = 0.3
    # BVC buffer; None means d_min / 2
    r_s: float | None = None
    a_max: float = 2.0
    q_pos: float = 1.0
    q_vel: float = 0.1
    r: float = 0.01
    qf_scale: float = 10.0
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    stop: StopTolerances = field(default_factory=StopTolerances)
    variant: str = "convex"
    seed: int = 0
    min_start_goal: float = 1.0
    warm_start: bool = True
    warm_start_duals: bool = True
    # first linearization reference of every MPC step: "straight_line" or "initial_copy"
    noncvx_reference: str = "straight_line"
    graph: str = "complete"
    graph_radius: float = float("inf")
    workers: int = 1
    record_reads: bool = False
    starts: tuple | None = None
    goals: tuple | None = None

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")
        box = tuple(float(b) for b in np.broadcast_to(np.asarray(self.box, dtype=float), (self.dim,)))
        if any(b <= 0 for b in box):
            raise ConfigError("box extents must be positive")
        object.__setattr__(self, "box", box)
        if not self.d_min > 0:
            raise ConfigError("d_min must be positive")
        if self.r_s is not None and not self.r_s > 0:
            raise ConfigError("r_s must be positive")
        if self.T < 1 or not self.dt > 0:
            raise ConfigError("need T >= 1 and dt > 0")
        if not self.a_max > 0:
            raise ConfigError("a_max must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.noncvx_reference not in ("straight_line", "initial_copy"):
            raise ConfigError("noncvx_reference must be 'straight_line' or 'initial_copy'")
        if self.graph not in ("complete", "radius"):
            raise ConfigError("graph must be 'complete' or 'radius'")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for name in ("starts", "goals"):
            val = getattr(self, name)
            if val is not None:
                arr = np.asarray(val, dtype=float)
                if arr.shape != (self.n_agents, self.dim):
                    raise ConfigError(f"{name} must have shape ({self.n_agents}, {self.dim})")
                object.__setattr__(self, name, tuple(map(tuple, arr.tolist())))

    @property
    def bvc_radius(self) -> float:
        return self.d_min / 2.0 if self.r_s is None else self.r_s

    @property
    def cost(self) -> CostParams:
        return CostParams.default(self.dim, self.q_pos, self.q_vel, self.r, self.qf_scale)

    @property
    def concrete(self) -> bool:
        return self.starts is not None and self.goals is not None

    def replace(self, **changes) -> "ScenarioConfig":
        admm = {k[5:]: changes.pop(k) for k in list(changes) if k.startswith("admm_")}
        stop = {k[5:]: changes.pop(k) for k in list(changes) if k.startswith("stop_")}
        if admm:
            changes["admm"] = dataclasses.replace(changes.get("admm", self.admm), **admm)
        if stop:
            changes["stop"] = dataclasses.replace(changes.get("stop", self.stop), **stop)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["box"] = list(self.box)
        for name in ("starts", "goals"):
            if out[name] is not None:
                out[name] = [list(p) for p in out[name]]
        return out


_SECTIONS = {
    "scenario": {"n_agents": int, "dim": int, "box": list, "seed": int, "variant": str,
                 "starts": list, "goals": list, "min_start_goal": float},
    "horizon": {"T": int, "dt": float},
    "safety": {"d_min": float, "r_s": float, "a_max": float},
    "cost": {"q_pos": float, "q_vel": float, "r": float, "qf_scale": float},
    "admm": {"rho": float, "eps_primal": float, "eps_dual": float, "max_inner_iters": int,
             "scale_by_dim": bool, "qp_tol": float, "qp_max_iters": int,
             "stop_on_change": bool},
    "mpc": {"pos_tol": float, "vel_tol": float, "obj_tol": float, "obj_window": int,
            "max_outer_steps": int, "warm_start": bool, "warm_start_duals": bool,
            "noncvx_reference": str},
    "network": {"graph": str, "radius": float, "workers": int, "record_reads": bool},
}
_STOP_KEYS = {f.name for f in dataclasses.fields(StopTolerances)}


def _coerce(section, key, value, kind):
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, kind):
        return value
    raise ConfigError(f"[{section}] {key}: expected {kind.__name__}, got {type(value).__name__}")


def config_from_dict(data: dict) -> ScenarioConfig:
    kwargs, admm, stop = {}, {}, {}
    for section, values in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        schema = _SECTIONS[section]
        for key, value in values.items():
            if key not in schema:
                raise ConfigError(f"unknown key [{section}] {key}")
            value = _coerce(section, key, value, schema[key])
            if section == "admm":
                admm[key] = value
            elif section == "mpc" and key in _STOP_KEYS:
                stop[key] = value
            elif section == "network" and key == "radius":
                kwargs["graph_radius"] = value
            else:
                kwargs[key] = value
    try:
        kwargs["admm"] = AdmmConfig(**admm)
        kwargs["stop"] = StopTolerances(**stop)
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return config_from_dict(data)
