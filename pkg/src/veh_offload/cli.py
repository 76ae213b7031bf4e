"""Command-line interface.

Subcommands: ``run`` (Monte-Carlo evaluation of one or more policies),
``sweep`` (parameter sweeps), ``dp-oracle`` (exact quantized optimum),
``estimate-transitions`` (transition matrices from trace CSVs), and
``prealloc`` (dump the opening reference schedule).

Exit codes: 0 success, 2 configuration error, 3 solver infeasibility.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .baselines import Quantizer, StateBudgetExceeded, exact_dp
from .dynamics import initial_state
from .harness import (POLICIES, ConfigError, ExperimentConfig, emit_results,
                      run_experiment, sweep_super_slot)
from .preallocate import InfeasibleAllocation, schedule_to_csv, solve_preallocation
from .scenario import (ScenarioError, estimate_transition_matrix, load_scenario,
                       read_trace_file, scenario_to_dict)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="veh-offload",
                                     description="Vehicular task-offloading simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate policies on a scenario")
    run.add_argument("--scenario", required=True)
    run.add_argument("--policy", required=True,
                     help="comma-separated subset of " + ",".join(POLICIES))
    run.add_argument("--trials", type=int, default=500)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--quantize-levels", type=int, default=0)
    run.add_argument("--quantize-max-bits", type=float, default=0.0)

    sweep = sub.add_parser("sweep", help="sweep a scenario parameter")
    sweep.add_argument("--scenario", required=True)
    sweep.add_argument("--param", required=True,
                       choices=["task_size", "arrival", "gamma", "omega1", "vehicles"])
    sweep.add_argument("--values", required=True,
                       help="comma-separated sweep values")
    sweep.add_argument("--policy", default="proposed")
    sweep.add_argument("--trials", type=int, default=500)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--workers", type=int, default=1)

    dp = sub.add_parser("dp-oracle", help="exact quantized DP value")
    dp.add_argument("--scenario", required=True)
    dp.add_argument("--levels", type=int, default=21)
    dp.add_argument("--max-bits", type=float, default=0.0)
    dp.add_argument("--max-states", type=int, default=2_000_000)

    est = sub.add_parser("estimate-transitions",
                         help="estimate transition matrices from traces")
    est.add_argument("--traces", required=True)
    est.add_argument("--scenario", default=None,
                     help="base scenario whose transitions get replaced")
    est.add_argument("--out", required=True)

    pre = sub.add_parser("prealloc", help="dump the opening reference schedule")
    pre.add_argument("--scenario", required=True)
    pre.add_argument("--out", required=True)
    return parser


def _parse_values(text: str):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        out.append(float(tok) if any(c in tok for c in ".eE") else int(tok))
    if not out:
        raise ConfigError("no sweep values given")
    return tuple(out)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleAllocation, StateBudgetExceeded) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


def _dispatch(args) -> int:
    if args.command == "run":
        config = ExperimentConfig(
            scenario_path=args.scenario,
            policies=tuple(p.strip() for p in args.policy.split(",") if p.strip()),
            trials=args.trials, master_seed=args.seed, workers=args.workers,
            quantize_levels=args.quantize_levels,
            quantize_max_bits=args.quantize_max_bits)
        rows = run_experiment(config)
        for written in emit_results(rows, args.out):
            print(written)
        return EXIT_OK

    if args.command == "sweep":
        values = _parse_values(args.values)
        config = ExperimentConfig(
            scenario_path=args.scenario,
            policies=tuple(p.strip() for p in args.policy.split(",") if p.strip()),
            trials=args.trials, master_seed=args.seed, workers=args.workers,
            sweep_param=args.param, sweep_values=values)
        if args.param == "gamma":
            rows = sweep_super_slot(dataclasses_replace_sweepless(config), values)
        else:
            rows = run_experiment(config)
        for written in emit_results(rows, args.out):
            print(written)
        return EXIT_OK

    if args.command == "dp-oracle":
        scenario = load_scenario(args.scenario)
        max_bits = args.max_bits or max(t.size_bits for t in scenario.tasks)
        quantizer = Quantizer(args.levels, max_bits)
        sizes = [r.n_waypoints for r in scenario.routes]
        n_states = int(np.prod([quantizer.levels * w for w in sizes])) \
            * scenario.time.horizon_slots
        _, _, value = exact_dp(scenario, quantizer, max_states=args.max_states)
        print(f"states: {n_states}")
        print(f"optimal_average_cost: {value!r}")
        return EXIT_OK

    if args.command == "estimate-transitions":
        traces = read_trace_file(args.traces)
        if args.scenario:
            scenario = load_scenario(args.scenario)
            transitions = []
            for n, route in enumerate(scenario.routes):
                if n not in traces:
                    raise ConfigError(f"traces missing vehicle {n}")
                transitions.append(estimate_transition_matrix(traces[n], route))
            doc = scenario_to_dict(scenario)
            doc["transitions"] = [tm.probs.tolist() for tm in transitions]
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2)
                fh.write("\n")
        else:
            from .mobility import Route

            matrices = {}
            for vehicle, seqs in traces.items():
                width = 1 + max(int(np.max(s)) for s in seqs if s.size)
                dummy = Route(np.zeros((width, 2)))
                matrices[vehicle] = estimate_transition_matrix(seqs, dummy).probs.tolist()
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump({"transitions_by_vehicle": matrices}, fh, indent=2)
                fh.write("\n")
        print(args.out)
        return EXIT_OK

    if args.command == "prealloc":
        scenario = load_scenario(args.scenario)
        schedule = solve_preallocation(scenario, initial_state(scenario), 1)
        schedule_to_csv(schedule, args.out)
        print(args.out)
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command}")


def dataclasses_replace_sweepless(config: ExperimentConfig) -> ExperimentConfig:
    import dataclasses

    return dataclasses.replace(config, sweep_param="none", sweep_values=())


if __name__ == "__main__":
    sys.exit(main())
