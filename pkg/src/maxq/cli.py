"""Command-line entry point: ``maxq run|audit|count|oracle``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .audit import COUNT_MODES, count_values, run_audit
from .experiment import ConfigError, load_config, run_experiment, with_seed, write_csv
from .experiment import DEFAULT_NOISE, _NOISY
from .oracle import flat_value_iteration, hierarchical_dp_oracle
from .taxi import TaxiConfig, taxi_model, taxi_task_graph

OUTPUT_ENV = "MAXQ_OUTPUT_DIR"


class UsageError(ValueError):
    pass


def parse_domain(text: str) -> float:
    """Noise level of a domain name: ``taxi`` or ``taxi-deterministic`` is
    noise-free, ``taxi-noisy`` uses the default slip, ``taxi-noisy(p)`` uses p."""
    if text in ("taxi", "taxi-deterministic"):
        return 0.0
    if text == "taxi-noisy":
        return DEFAULT_NOISE
    match = _NOISY.match(text)
    if match:
        try:
            noise = float(match.group(1))
        except ValueError:
            raise UsageError(f"bad noise level in domain {text!r}") from None
        if not 0.0 <= noise <= 1.0:
            raise UsageError(f"noise must lie in [0, 1] in domain {text!r}")
        return noise
    raise UsageError(f"unknown domain {text!r}; expected taxi, taxi-deterministic, taxi-noisy or taxi-noisy(p)")


def _output_dir(flag: str | None, default: str) -> Path:
    path = Path(flag or os.environ.get(OUTPUT_ENV) or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    if args.workers is not None:
        from dataclasses import replace
        config = replace(config, workers=args.workers)
    out = _output_dir(args.out, "maxq-output")
    result = run_experiment(config)
    write_csv(result.curve, out / "curve.csv")
    _write(out / "config.txt", config.to_text())
    summary = result.summary()
    _write(out / "summary.txt", "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                                        for k, v in summary.items()))
    reached = result.steps_to_threshold()
    rows = ["trial,steps_to_threshold,final_return,episodes,truncated_episodes"]
    for t, s in zip(result.trials, reached):
        rows.append(f"{t.index},{'' if s is None else s},{t.points[-1][1]!r},{t.episodes},{t.truncations}")
    _write(out / "trials.csv", "\n".join(rows) + "\n")
    tables = out / "tables"
    tables.mkdir(exist_ok=True)
    for t in result.trials:
        _write(tables / f"trial-{t.index:03d}.txt", t.snapshot)
    print(f"wrote {out / 'curve.csv'}")
    for key in ("oracle_mean_return", "final_mean_return", "trials_reaching_threshold", "steps_to_threshold_mean"):
        if key in summary:
            print(f"{key} = {summary[key]}")
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    model = taxi_model(TaxiConfig(parse_domain(args.domain)))
    report = run_audit(model, taxi_task_graph(), policies=args.policies,
                       seed=args.seed if args.seed is not None else 0)
    if args.machine:
        sys.stdout.write(report.to_lines())
    elif args.verbose:
        sys.stdout.write(report.to_text())
    else:
        print("\n".join(report.summary_lines()))
    return 0 if report.passed else 1


def cmd_count(args: argparse.Namespace) -> int:
    if args.mode not in COUNT_MODES:
        raise UsageError(f"unknown count mode {args.mode!r}; expected one of {', '.join(COUNT_MODES)}")
    model = taxi_model(TaxiConfig(parse_domain(args.domain)))
    result = count_values(taxi_task_graph(), model, args.mode)
    sys.stdout.write(result.to_text() if args.breakdown else f"{result.total}\n")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    model = taxi_model(TaxiConfig(parse_domain(args.domain)))
    graph = taxi_task_graph()
    flat = flat_value_iteration(model, args.gamma)
    hier = hierarchical_dp_oracle(model, graph, args.gamma)
    out = _output_dir(args.out, "maxq-oracle")
    states = [model.decode(s) for s in range(model.num_states)]
    lines = ["state\tvalue\taction"]
    for s, state in enumerate(states):
        lines.append(f"{model.describe(state)}\t{flat.values[s]!r}\t{model.actions[flat.policy[s]]}")
    _write(out / "flat.tsv", "\n".join(lines) + "\n")
    h = hier.compiled
    lines = ["node\tstate\tvalue\tchoice"]
    for name in graph.subtasks:
        node = h.index[name]
        for s, state in enumerate(states):
            if h.term[node][s]:
                continue
            pos = int(hier.policy[name][s])
            choice = h.slots[node][pos].ref if pos >= 0 else "-"
            lines.append(f"{name}\t{model.describe(state)}\t{hier.values[name][s]!r}\t{choice}")
    _write(out / "hierarchical.tsv", "\n".join(lines) + "\n")
    diff = float(np.max(np.abs(hier.root_values - flat.values)))
    print(f"flat mean start value = {flat.mean_start_value(model)!r}")
    print(f"bellman residual = {flat.residual:.3g}")
    print(f"max |V_root - V_flat| = {diff:.3g}")
    print(f"wrote {out / 'flat.tsv'} and {out / 'hierarchical.tsv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maxq", description="MAXQ-Q experiments on Taxi")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a configured experiment")
    p.add_argument("config")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./maxq-output)")
    p.add_argument("--workers", type=int, default=None, help="parallel trial processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("audit", help="check the five abstraction conditions")
    p.add_argument("domain")
    p.add_argument("--policies", type=int, default=20, help="random abstract policies per check")
    p.add_argument("--verbose", action="store_true", help="one line per checked subject")
    p.add_argument("--machine", action="store_true", help="tab-separated output")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("count", help="number of stored values per representation")
    p.add_argument("domain")
    p.add_argument("mode", help=" | ".join(COUNT_MODES))
    p.add_argument("--breakdown", action="store_true")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("oracle", help="solve exactly and write value tables")
    p.add_argument("domain")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./maxq-oracle)")
    p.add_argument("--gamma", type=float, default=1.0)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
