"""Random scenarios, single trials, Monte Carlo tables and metric files."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import VARIANTS, ScenarioConfig
from .consensus import ResidualRecord
from .errors import AgentFailure, ConfigError
from .mpc import FAILED, GOAL_REACHED, MpcState, initial_state, run_mpc
from .noncvx import pairwise_margins

log = logging.getLogger(__name__)

MAX_REJECTIONS = 10000

RESIDUAL_HEADER = ["iter", "primal", "dual", "objective"]
DISTANCE_HEADER = ["step", "pair_i", "pair_j", "distance"]
AXES = "xyz"


def trajectory_header(dim: int) -> list[str]:
    axes = AXES[:dim]
    return (["step", "agent"] + [f"p{a}" for a in axes] + [f"v{a}" for a in axes]
            + [f"u{a}" for a in axes])


def generate_scenario(base: ScenarioConfig, seed: int | None = None) -> ScenarioConfig:
    """Concrete starts and goals drawn uniformly in ``[0, box]``.

    Agent by agent, a (start, goal) pair is redrawn until the start is at
    least 2 d_min from the accepted starts, the goal 2 d_min from the
    accepted goals, and the two are ``min_start_goal`` apart. More than
    ``MAX_REJECTIONS`` rejections in total raise :class:`ConfigError`.
    """
    seed = base.seed if seed is None else int(seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    box = np.asarray(base.box)
    sep = 2.0 * base.d_min
    if base.min_start_goal > float(np.linalg.norm(box)):
        raise ConfigError(f"min_start_goal={base.min_start_goal} exceeds the box diagonal")
    starts, goals = [], []
    rejections = 0
    while len(starts) < base.n_agents:
        s = rng.uniform(0.0, 1.0, base.dim) * box
        g = rng.uniform(0.0, 1.0, base.dim) * box
        if (np.linalg.norm(s - g) >= base.min_start_goal
                and all(np.linalg.norm(s - p) >= sep for p in starts)
                and all(np.linalg.norm(g - p) >= sep for p in goals)):
            starts.append(s)
            goals.append(g)
            continue
        rejections += 1
        if rejections > MAX_REJECTIONS:
            raise ConfigError(
                f"could not place {base.n_agents} agents {sep:g} m apart in box {base.box} "
                f"after {MAX_REJECTIONS} rejections; use a larger box or fewer agents")
    return base.replace(seed=seed, starts=np.array(starts), goals=np.array(goals))


@dataclass
class TrialMetrics:
    variant: str
    n_agents: int
    dim: int
    seed: int
    status: str
    cumulative_iters: int
    wall_time: float
    residuals: list[ResidualRecord]   # every step's trace, iterations numbered cumulatively
    distances: np.ndarray             # (steps+1, N(N-1)/2) executed pairwise distances
    positions: np.ndarray             # (steps+1, N, d)
    velocities: np.ndarray
    inputs: np.ndarray                # (steps, N, d)
    step_iters: list[int] = field(default_factory=list)
    relaxed_iters: int = 0
    d_min: float = 0.0
    error: str | None = None
    locality_violations: int = 0

    @property
    def steps(self) -> int:
        return len(self.positions) - 1

    @property
    def goal_reached(self) -> bool:
        return self.status == GOAL_REACHED

    @property
    def failed(self) -> bool:
        return self.status == FAILED

    @property
    def min_distance(self) -> float:
        return float(self.distances.min()) if self.distances.size else math.inf

    @property
    def violating_steps(self) -> int:
        """Executed steps with at least one pair closer than d_min."""
        if not self.distances.size:
            return 0
        return int(np.sum(np.any(self.distances - self.d_min < 0.0, axis=1)))

    @property
    def safe(self) -> bool:
        return self.violating_steps == 0


def _cumulative_trace(state: MpcState) -> list[ResidualRecord]:
    """Concatenate per-step traces; step s starts where step s-1 stopped.

    Only the first step keeps its iteration-0 record (the initial guess);
    later steps drop theirs (the shifted warm start), so the trace has
    exactly cumulative iterations + 1 records.
    """
    out: list[ResidualRecord] = []
    offset = 0
    for s, trace in enumerate(state.traces):
        for rec in trace if s == 0 else trace[1:]:
            out.append(ResidualRecord(offset + rec.iter, rec.primal, rec.dual,
                                      rec.global_objective, rec.relaxed, rec.change))
        offset += trace[-1].iter
    return out


def metrics_from_state(state: MpcState, sc: ScenarioConfig, variant: str, wall: float) -> TrialMetrics:
    P = np.array([[x.position for x in row] for row in state.states])
    V = np.array([[x.velocity for x in row] for row in state.states])
    U = np.array(state.inputs) if state.inputs else np.zeros((0, sc.n_agents, sc.dim))
    D = np.array([pairwise_margins(p, 0.0) for p in P]) if sc.n_agents > 1 else np.zeros((len(P), 0))
    return TrialMetrics(
        variant=variant, n_agents=sc.n_agents, dim=sc.dim, seed=sc.seed,
        status=state.status or FAILED, cumulative_iters=state.cumulative_iters,
        wall_time=wall, residuals=_cumulative_trace(state), distances=D,
        positions=P, velocities=V, inputs=U, step_iters=list(state.step_iters),
        relaxed_iters=state.relaxed_iters, d_min=sc.d_min, error=state.error,
        locality_violations=len(state.locality_violations))


def run_trial(sc: ScenarioConfig, variant: str | None = None, dump=None) -> TrialMetrics:
    """Run one concrete scenario to termination.

    An :class:`AgentFailure` does not propagate: the metrics of the steps
    executed so far are returned with status ``failed`` and the error text.
    """
    variant = variant or sc.variant
    if not sc.concrete:
        raise ConfigError("scenario has no starts/goals; call generate_scenario first")
    state = initial_state(sc.starts, sc.goals)
    t0 = time.perf_counter()
    try:
        run_mpc(sc, variant, state=state, dump=dump)
    except AgentFailure as exc:
        state.status = FAILED
        state.error = str(exc)
        log.warning("%s trial seed=%d failed at step %d: %s", variant, sc.seed, state.t, exc)
    return metrics_from_state(state, sc, variant, time.perf_counter() - t0)


def trial_seeds(seed: int, n_trials: int, n_agents: int) -> list[int]:
    """Independent per-trial seeds, a pure function of (seed, N, trial index)."""
    ss = np.random.SeedSequence([int(seed), int(n_agents)])
    return [int(c.generate_state(2, np.uint32).view(np.uint64)[0]) for c in ss.spawn(n_trials)]


def _stats(values) -> dict:
    if not values:
        return {"mean": None, "median": None, "std": None}
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "std": float(v.std())}


def summarize(trials: list[TrialMetrics]) -> dict:
    """One row of the Monte Carlo table from trials of a single (variant, N)."""
    ok = [t for t in trials if not t.failed]
    steps = sum(t.steps for t in trials)
    row = {
        "variant": trials[0].variant if trials else None,
        "n_agents": trials[0].n_agents if trials else None,
        "trials": len(trials),
        "failures": len(trials) - len(ok),
        "iterations": _stats([t.cumulative_iters for t in ok]),
        "violation_rate": (sum(t.violating_steps for t in trials) / steps) if steps else 0.0,
        "unsafe_trials": sum(not t.safe for t in trials),
        "goal_reached_rate": (sum(t.goal_reached for t in trials) / len(trials)) if trials else 0.0,
        "min_distance": min((t.min_distance for t in trials), default=math.inf),
    }
    return row


def monte_carlo(base: ScenarioConfig, n_trials: int, agent_counts=(3, 5), variants=VARIANTS,
                progress=None) -> dict:
    """Both variants on the same random scenarios for every agent count.

    Returns ``{"rows": [...], "ratios": [...], "trials": {(variant, N): [TrialMetrics]}}``.
    Ratio rows divide mean convex by mean non-convex cumulative iterations.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    trials: dict[tuple[str, int], list[TrialMetrics]] = {}
    for N in agent_counts:
        cfg = base.replace(n_agents=int(N), starts=None, goals=None)
        for k, seed in enumerate(trial_seeds(base.seed, n_trials, N)):
            sc = generate_scenario(cfg, seed)
            for variant in variants:
                tm = run_trial(sc, variant)
                trials.setdefault((variant, N), []).append(tm)
                if progress:
                    progress(variant, N, k, tm)
    rows = [summarize(trials[key]) for key in sorted(trials, key=lambda k: (k[1], k[0]))]
    ratios = []
    for N in agent_counts:
        c = trials.get(("convex", N))
        n = trials.get(("nonconvex", N))
        if not c or not n:
            continue
        mc = summarize(c)["iterations"]["mean"]
        mn = summarize(n)["iterations"]["mean"]
        ratio = mc / mn if mc is not None and mn else None
        ratios.append({"n_agents": N, "convex_mean": mc, "nonconvex_mean": mn,
                       "ratio": ratio})
    return {"rows": rows, "ratios": ratios, "trials": trials}


def _fmt(x) -> str:
    return repr(float(x))


def json_safe(obj):
    """JSON-safe copy: non-finite floats become None."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def export_metrics(obj, path, fmt: str = "csv") -> list[Path]:
    """Write a trial's metrics (or a Monte Carlo summary) under directory ``path``.

    A :class:`TrialMetrics` gives ``residuals``, ``distances`` and
    ``trajectories`` tables (``.csv`` or ``.json``) plus ``summary.json``;
    a Monte Carlo result gives ``summary.json``. Floats are written with
    ``repr`` so that re-parsing gives back the same doubles.
    """
    if fmt not in ("csv", "json"):
        raise ConfigError(f"format must be csv or json, got {fmt!r}")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, TrialMetrics):
        tables = {
            "residuals": (RESIDUAL_HEADER, _residual_rows(obj)),
            "distances": (DISTANCE_HEADER, _distance_rows(obj)),
            "trajectories": (trajectory_header(obj.dim), _trajectory_rows(obj)),
        }
        written = []
        for name, (header, rows) in tables.items():
            target = out / f"{name}.{fmt}"
            if fmt == "csv":
                with open(target, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(header)
                    w.writerows([[c if isinstance(c, int) else _fmt(c) for c in r] for r in rows])
            else:
                with open(target, "w") as fh:
                    json.dump(json_safe([dict(zip(header, r)) for r in rows]), fh, allow_nan=False)
            written.append(target)
        target = out / "summary.json"
        with open(target, "w") as fh:
            json.dump(json_safe(trial_summary(obj)), fh, indent=2, sort_keys=True, allow_nan=False)
        return written + [target]
    target = out / "summary.json"
    with open(target, "w") as fh:
        json.dump(json_safe({"rows": obj["rows"], "ratios": obj["ratios"]}), fh, indent=2,
                  sort_keys=True, allow_nan=False)
    return [target]


def trial_summary(tm: TrialMetrics) -> dict:
    return {
        "variant": tm.variant, "n_agents": tm.n_agents, "seed": tm.seed, "status": tm.status,
        "steps": tm.steps, "cumulative_iters": tm.cumulative_iters,
        "step_iters": tm.step_iters, "relaxed_iters": tm.relaxed_iters,
        "min_distance": tm.min_distance, "violating_steps": tm.violating_steps,
        "d_min": tm.d_min, "error": tm.error, "locality_violations": tm.locality_violations,
    }


def _residual_rows(tm: TrialMetrics):
    return [[r.iter, r.primal, r.dual, r.global_objective] for r in tm.residuals]


def _distance_rows(tm: TrialMetrics):
    iu = np.triu_indices(tm.n_agents, 1)
    rows = []
    for step, dist in enumerate(tm.distances):
        for a, b, v in zip(iu[0], iu[1], dist):
            rows.append([step, int(a), int(b), float(v)])
    return rows


def _trajectory_rows(tm: TrialMetrics):
    rows = []
    nan = [math.nan] * tm.dim
    for step in range(len(tm.positions)):
        for i in range(tm.n_agents):
            u = list(tm.inputs[step, i]) if step < len(tm.inputs) else nan
            rows.append([step, i, *map(float, tm.positions[step, i]),
                         *map(float, tm.velocities[step, i]), *map(float, u)])
    return rows


def read_csv(path) -> tuple[list[str], list[list[float]]]:
    """Header and numeric rows of a file written by :func:`export_metrics`."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[float(c) for c in row] for row in r]
