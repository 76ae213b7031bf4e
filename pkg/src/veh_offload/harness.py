"""Monte-Carlo experiment driver, aggregation, and result files.

Every trial derives its random stream from the master seed and its trial
index alone (``SeedSequence(master_seed, spawn_key=(trial,))``), and each
trial pre-draws the full mobility realization before any policy runs, so
every policy sees identical trajectories per trial index (paired seeds)
and the output is a pure function of (scenario, config) regardless of
how trials are scheduled across workers.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import (Quantizer, quantized_scenario, run_da, run_pao,
                        run_pas3, run_pp)
from .metrics import TrialMetrics
from .online import run_proposed_policy, sample_full_trajectories
from .preallocate import DEFAULT_SETTINGS, SolverSettings
from .scenario import Scenario, load_scenario

POLICIES = {
    "proposed": run_proposed_policy,
    "da": run_da,
    "pao": run_pao,
    "pas3": run_pas3,
    "pp": run_pp,
}

SWEEP_PARAMS = ("task_size", "arrival", "gamma", "omega1", "vehicles")

RESULTS_HEADER = ["policy", "sweep_param", "sweep_value", "mean_cost", "se_cost",
                  "mean_tx_slots", "mean_energy_j", "mean_residual_bits"]


class ConfigError(ValueError):
    """Bad experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario_path: str
    policies: tuple[str, ...]
    trials: int = 500
    master_seed: int = 0
    sweep_param: str = "none"
    sweep_values: tuple = ()
    quantize_levels: int = 0
    quantize_max_bits: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy '{p}'")
        if self.sweep_param != "none" and self.sweep_param not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter '{self.sweep_param}'")


@dataclass(frozen=True)
class ResultRow:
    policy: str
    sweep_param: str
    sweep_value: float
    mean_cost: float
    se_cost: float
    mean_tx_slots: float
    mean_energy_j: float
    mean_residual_bits: float


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    """The documented seed-split rule; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(master_seed,
                                                        spawn_key=(trial,)))


def apply_sweep(scenario: Scenario, param: str, value) -> Scenario:
    """Scenario variant for one sweep point."""
    if param == "none":
        return scenario
    if param == "task_size":
        return scenario.with_task_sizes(float(value))
    if param == "arrival":
        tasks = list(scenario.tasks)
        tasks[0] = dataclasses.replace(tasks[0], arrival_slot=int(value))
        return dataclasses.replace(scenario, tasks=tuple(tasks))
    if param == "gamma":
        value = int(value)
        if scenario.time.horizon_slots % value != 0:
            raise ConfigError(f"super slot {value} does not divide horizon "
                              f"{scenario.time.horizon_slots}")
        return scenario.with_super_slot(value)
    if param == "omega1":
        weights = dataclasses.replace(scenario.weights, energy_weight=float(value))
        return dataclasses.replace(scenario, weights=weights)
    if param == "vehicles":
        k = int(value)
        if not 1 <= k <= scenario.n_vehicles:
            raise ConfigError(f"vehicle sweep value {k} outside [1, {scenario.n_vehicles}]")
        return dataclasses.replace(
            scenario, n_vehicles=k, routes=scenario.routes[:k],
            transitions=scenario.transitions[:k], tasks=scenario.tasks[:k])
    raise ConfigError(f"unknown sweep parameter '{param}'")


def run_single_trial(scenario: Scenario, policy: str, trial: int, master_seed: int,
                     settings: SolverSettings = DEFAULT_SETTINGS,
                     quantizer: Quantizer | None = None) -> TrialMetrics:
    rng = trial_rng(master_seed, trial)
    trajectories = sample_full_trajectories(scenario, rng)
    scen = scenario
    step = None
    if quantizer is not None:
        scen = quantized_scenario(scenario, quantizer)
        step = quantizer.step
    trace = POLICIES[policy](scen, trajectories=trajectories, settings=settings,
                             quantize_step=step)
    return trace.metrics


def _trial_task(args):
    scenario, policy, trial, master_seed, settings, quantizer = args
    return trial, run_single_trial(scenario, policy, trial, master_seed,
                                   settings, quantizer)


def run_trials(scenario: Scenario, policy: str, trials: int, master_seed: int,
               settings: SolverSettings = DEFAULT_SETTINGS,
               quantizer: Quantizer | None = None,
               workers: int = 1) -> list[TrialMetrics]:
    """Per-trial metrics in trial order; order-independent under workers."""
    tasks = [(scenario, policy, t, master_seed, settings, quantizer)
             for t in range(trials)]
    if workers <= 1:
        results = [_trial_task(a) for a in tasks]
    else:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_trial_task, tasks)
    results.sort(key=lambda pair: pair[0])
    return [m for _, m in results]


def _mean_se(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def aggregate(policy: str, sweep_param: str, sweep_value,
              metrics: list[TrialMetrics]) -> ResultRow:
    mean_cost, se_cost = _mean_se([m.total_cost for m in metrics])
    mean_tx, _ = _mean_se([m.mean_transmission_slots for m in metrics])
    mean_energy, _ = _mean_se([m.energy_j for m in metrics])
    mean_res, _ = _mean_se([m.residual_bits for m in metrics])
    return ResultRow(policy, sweep_param, sweep_value, mean_cost, se_cost,
                     mean_tx, mean_energy, mean_res)


def run_experiment(config: ExperimentConfig,
                   scenario: Scenario | None = None,
                   settings: SolverSettings = DEFAULT_SETTINGS) -> list[ResultRow]:
    """Aggregated metrics per (policy, sweep point)."""
    if scenario is None:
        scenario = load_scenario(config.scenario_path)
    quantizer = None
    if config.quantize_levels:
        max_bits = config.quantize_max_bits or max(t.size_bits for t in scenario.tasks)
        quantizer = Quantizer(config.quantize_levels, max_bits)
    points = config.sweep_values if config.sweep_param != "none" else (0,)
    rows = []
    for value in points:
        scen = apply_sweep(scenario, config.sweep_param, value)
        for policy in config.policies:
            metrics = run_trials(scen, policy, config.trials, config.master_seed,
                                 settings=settings, quantizer=quantizer,
                                 workers=config.workers)
            rows.append(aggregate(policy, config.sweep_param, value, metrics))
    return rows


def sweep_super_slot(config: ExperimentConfig, gammas,
                     scenario: Scenario | None = None,
                     settings: SolverSettings = DEFAULT_SETTINGS) -> list[ResultRow]:
    """One aggregated row per super-slot length."""
    if scenario is None:
        scenario = load_scenario(config.scenario_path)
    for g in gammas:
        if scenario.time.horizon_slots % int(g) != 0:
            raise ConfigError(f"super slot {g} does not divide horizon "
                              f"{scenario.time.horizon_slots}")
    cfg = dataclasses.replace(config, sweep_param="gamma",
                              sweep_values=tuple(int(g) for g in gammas))
    return run_experiment(cfg, scenario=scenario, settings=settings)


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_results(rows: list[ResultRow], path) -> list[Path]:
    """Write the results CSV and a readable summary next to it."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for r in rows:
            writer.writerow([r.policy, r.sweep_param, _format_value(r.sweep_value),
                             repr(r.mean_cost), repr(r.se_cost),
                             repr(r.mean_tx_slots), repr(r.mean_energy_j),
                             repr(r.mean_residual_bits)])
    summary = path.with_suffix(path.suffix + ".summary.txt")
    lines = [f"{'policy':>10} {'sweep':>12} {'value':>12} {'mean_cost':>14} "
             f"{'se':>10} {'tx_slots':>10} {'energy_J':>12} {'residual':>12}"]
    for r in rows:
        lines.append(f"{r.policy:>10} {r.sweep_param:>12} {_format_value(r.sweep_value):>12} "
                     f"{r.mean_cost:>14.4f} {r.se_cost:>10.4f} "
                     f"{r.mean_tx_slots:>10.3f} {r.mean_energy_j:>12.4g} "
                     f"{r.mean_residual_bits:>12.4g}")
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [path, summary]


def read_results(path) -> list[ResultRow]:
    """Parse a results CSV back into rows (inverse of emit_results)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != RESULTS_HEADER:
            raise ConfigError(f"unexpected results header {header}")
        for rec in reader:
            def num(s):
                return int(s) if ("." not in s and "e" not in s and "inf" not in s) \
                    else float(s)
            rows.append(ResultRow(rec[0], rec[1], num(rec[2]), float(rec[3]),
                                  float(rec[4]), float(rec[5]), float(rec[6]),
                                  float(rec[7])))
    return rows
