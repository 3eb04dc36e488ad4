"""Command line entry point.

    cadmm run        --config FILE --variant {convex,nonconvex} --seed N --out DIR
    cadmm montecarlo --config FILE --trials N --agents 3,5 --out DIR
    cadmm compare    --config FILE --seed N --out DIR

Exit status: 0 completed, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

from .config import VARIANTS, ScenarioConfig, load_config
from .errors import AgentFailure, ConfigError
from .scenario import export_metrics, generate_scenario, json_safe, monte_carlo, run_trial

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("cadmm")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _agent_list(text: str) -> list[int]:
    try:
        out = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("agent counts must be positive")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cadmm", description="Consensus ADMM multi-robot trajectory planning")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario TOML file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--workers", type=int, default=None, help="override [network] workers")

    r = sub.add_parser("run", help="one variant on one scenario")
    common(r)
    r.add_argument("--variant", choices=VARIANTS, default=None)
    r.add_argument("--seed", type=_u64, default=None)
    r.add_argument("--trace-dump", default=None,
                   help="write one JSON line per delivered message to this file")

    m = sub.add_parser("montecarlo", help="both variants over random scenarios")
    common(m)
    m.add_argument("--trials", type=int, required=True)
    m.add_argument("--agents", type=_agent_list, default=[3, 5])
    m.add_argument("--seed", type=_u64, default=None)

    c = sub.add_parser("compare", help="both variants on the same scenario")
    common(c)
    c.add_argument("--seed", type=_u64, default=None)
    return p


def _scenario(args) -> ScenarioConfig:
    sc = load_config(args.config)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        sc = sc.replace(workers=args.workers)
    if getattr(args, "seed", None) is not None:
        sc = sc.replace(seed=args.seed)
    return sc


def _concrete(sc: ScenarioConfig) -> ScenarioConfig:
    return sc if sc.concrete else generate_scenario(sc, sc.seed)


def _report(tm) -> str:
    return (f"{tm.variant}: {tm.status} after {tm.steps} steps, {tm.cumulative_iters} inner "
            f"iterations, min distance {tm.min_distance:.4f} m ({tm.violating_steps} unsafe steps)")


def cmd_run(args) -> int:
    sc = _concrete(_scenario(args))
    variant = args.variant or sc.variant
    with contextlib.ExitStack() as stack:
        dump = stack.enter_context(open(args.trace_dump, "w")) if args.trace_dump else None
        tm = run_trial(sc, variant, dump=dump)
    export_metrics(tm, args.out, args.format)
    print(_report(tm))
    if tm.failed:
        print(f"error: {tm.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = _concrete(_scenario(args))
    out = Path(args.out)
    failed = False
    summary = {}
    for variant in VARIANTS:
        tm = run_trial(sc, variant)
        export_metrics(tm, out / variant, args.format)
        print(_report(tm))
        summary[variant] = {"status": tm.status, "cumulative_iters": tm.cumulative_iters,
                            "min_distance": tm.min_distance, "violating_steps": tm.violating_steps}
        if tm.failed:
            print(f"error ({variant}): {tm.error}", file=sys.stderr)
            failed = True
    c, n = summary["convex"]["cumulative_iters"], summary["nonconvex"]["cumulative_iters"]
    summary["ratio"] = c / n if n else None
    with open(out / "compare.json", "w") as fh:
        json.dump(json_safe(summary), fh, indent=2, sort_keys=True, allow_nan=False)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_montecarlo(args) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    sc = _scenario(args)

    def progress(variant, N, k, tm):
        log.info("N=%d trial %d %s", N, k, _report(tm))

    result = monte_carlo(sc, args.trials, args.agents, progress=progress)
    export_metrics(result, args.out, args.format)
    for row in result["rows"]:
        it = row["iterations"]
        mean = f"{it['mean']:.1f}" if it["mean"] is not None else "n/a"
        print(f"{row['variant']:>9} N={row['n_agents']}: mean iterations {mean}, "
              f"goal rate {row['goal_reached_rate']:.2f}, violation rate {row['violation_rate']:.4f}, "
              f"failures {row['failures']}")
    for r in result["ratios"]:
        ratio = f"{r['ratio']:.3f}" if r["ratio"] is not None else "n/a"
        print(f"N={r['n_agents']}: convex/non-convex iteration ratio {ratio}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "montecarlo": cmd_montecarlo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AgentFailure, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
