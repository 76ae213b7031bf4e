"""Static world model: scenario files, validation, and transition estimation.

A scenario is a JSON document with explicit SI units (meters, bits, watts,
hertz, seconds). Schema (see README for the full description)::

    {
      "n_vehicles": 2, "n_bs": 2,
      "bs_positions": [[0.0, 50.0], [400.0, 50.0]],
      "routes": [{"waypoints": [[0,0], [100,0]], "start_index": 0}, ...],
      "transitions": [[[0.5, 0.5], [0.0, 1.0]], ...],
      "radio": {"bandwidth_hz": 2e7, "path_loss_const": 1e6,
                "path_loss_exp": 4.0, "noise_plus_interference_w": 1e-3,
                "fading_mean_power": 6.0, "p_max_w": 5.0, "slot_seconds": 1.0},
      "tasks": [{"arrival_slot": 1, "size_bits": 1.6e9}, ...],
      "weights": {"energy_weight": 2.0, "residual_weight": 5.0},
      "time": {"horizon_slots": 50, "super_slot_len": 10}
    }

Scenarios are immutable after load and safe to share across trials.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mobility import Route, TransitionMatrix
from .radio import RadioParams


class ScenarioError(ValueError):
    """Scenario file failed to parse or violates an invariant."""


@dataclass(frozen=True)
class TaskSpec:
    """One computing task: arrival slot (1-based) and size in bits."""

    arrival_slot: int
    size_bits: float


@dataclass(frozen=True)
class CostWeights:
    energy_weight: float      # omega_1, weights P * tau (T_s absorbed)
    residual_weight: float    # omega_2, weights leftover bits at the horizon


@dataclass(frozen=True)
class TimeGrid:
    horizon_slots: int        # T
    super_slot_len: int       # Gamma

    @property
    def n_super_slots(self) -> int:
        return self.horizon_slots // self.super_slot_len


@dataclass(frozen=True)
class Scenario:
    """Immutable description of vehicles, BSs, radio, tasks and time grid."""

    n_vehicles: int
    n_bs: int
    bs_positions: np.ndarray            # (M, 2)
    routes: tuple[Route, ...]
    transitions: tuple[TransitionMatrix, ...]
    radio: RadioParams
    tasks: tuple[TaskSpec, ...]
    weights: CostWeights
    time: TimeGrid

    def __post_init__(self):
        object.__setattr__(self, "bs_positions",
                           np.asarray(self.bs_positions, dtype=float).reshape(-1, 2))

    @property
    def omega1_prime(self) -> float:
        """Energy weight per exponent unit: omega_1 / (T_s * B)."""
        return self.weights.energy_weight / self.radio.bits_per_share

    def with_super_slot(self, super_slot_len: int) -> "Scenario":
        """Copy of this scenario with a different super-slot length."""
        return dataclasses.replace(self, time=TimeGrid(self.time.horizon_slots,
                                                       super_slot_len))

    def with_task_sizes(self, size_bits) -> "Scenario":
        sizes = np.broadcast_to(np.asarray(size_bits, dtype=float), (self.n_vehicles,))
        tasks = tuple(TaskSpec(t.arrival_slot, float(s))
                      for t, s in zip(self.tasks, sizes))
        return dataclasses.replace(self, tasks=tasks)


def validate_scenario(s: Scenario) -> list[str]:
    """Return the list of invariant violations; empty when the scenario is valid."""
    v: list[str] = []
    if s.n_vehicles < 1:
        v.append("n_vehicles must be >= 1")
    if s.n_bs < 1:
        v.append("n_bs must be >= 1")
    if s.bs_positions.shape != (s.n_bs, 2):
        v.append(f"bs_positions must have shape ({s.n_bs}, 2)")
    if not np.all(np.isfinite(s.bs_positions)):
        v.append("bs_positions must be finite")
    if len(s.routes) != s.n_vehicles:
        v.append("routes must have one entry per vehicle")
    if len(s.transitions) != s.n_vehicles:
        v.append("transitions must have one entry per vehicle")
    for n, route in enumerate(s.routes):
        if route.n_waypoints < 1:
            v.append(f"routes[{n}] must contain at least one waypoint")
        if not np.all(np.isfinite(route.waypoints)):
            v.append(f"routes[{n}] waypoints must be finite")
        if not 0 <= route.start_index < max(route.n_waypoints, 1):
            v.append(f"routes[{n}].start_index out of range")
    for n, (route, tm) in enumerate(zip(s.routes, s.transitions)):
        if tm.probs.shape != (route.n_waypoints, route.n_waypoints):
            v.append(f"transitions[{n}] shape {tm.probs.shape} does not match "
                     f"route of size {route.n_waypoints}")
            continue
        for issue in tm.validate():
            v.append(f"transitions[{n}] {issue}")
    r = s.radio
    for name in ("bandwidth_hz", "path_loss_const", "fading_mean_power",
                 "p_max_w", "slot_seconds"):
        if getattr(r, name) <= 0:
            v.append(f"radio.{name} must be > 0")
    if np.any(np.asarray(r.noise_plus_interference_w) <= 0):
        v.append("radio.noise_plus_interference_w must be > 0")
    if r.path_loss_exp < 2:
        v.append("radio.path_loss_exp must be >= 2")
    if len(s.tasks) != s.n_vehicles:
        v.append("tasks must have one entry per vehicle")
    for n, task in enumerate(s.tasks):
        if not 1 <= task.arrival_slot <= s.time.horizon_slots:
            v.append(f"tasks[{n}].arrival_slot must lie in [1, {s.time.horizon_slots}]")
        if task.size_bits < 0:
            v.append(f"tasks[{n}].size_bits must be >= 0")
    if s.weights.energy_weight < 0:
        v.append("weights.energy_weight must be >= 0")
    if s.weights.residual_weight < 0:
        v.append("weights.residual_weight must be >= 0")
    if s.time.horizon_slots < 1:
        v.append("time.horizon_slots must be >= 1")
    if s.time.super_slot_len < 1:
        v.append("time.super_slot_len must be >= 1")
    elif s.time.horizon_slots % s.time.super_slot_len != 0:
        v.append("super_slot_len must divide horizon_slots")
    return v


def scenario_from_dict(doc: dict) -> Scenario:
    """Build and validate a Scenario from a parsed JSON document."""
    try:
        radio_doc = dict(doc["radio"])
        noise = radio_doc.pop("noise_plus_interference_w")
        if isinstance(noise, (list, tuple)):
            noise = tuple(float(x) for x in noise)
        else:
            noise = float(noise)
        radio = RadioParams(noise_plus_interference_w=noise,
                            **{k: float(v) for k, v in radio_doc.items()})
        scenario = Scenario(
            n_vehicles=int(doc["n_vehicles"]),
            n_bs=int(doc["n_bs"]),
            bs_positions=np.asarray(doc["bs_positions"], dtype=float),
            routes=tuple(Route(np.asarray(r["waypoints"], dtype=float),
                               int(r.get("start_index", 0)))
                         for r in doc["routes"]),
            transitions=tuple(TransitionMatrix(np.asarray(p, dtype=float))
                              for p in doc["transitions"]),
            radio=radio,
            tasks=tuple(TaskSpec(int(t["arrival_slot"]), float(t["size_bits"]))
                        for t in doc["tasks"]),
            weights=CostWeights(float(doc["weights"]["energy_weight"]),
                                float(doc["weights"]["residual_weight"])),
            time=TimeGrid(int(doc["time"]["horizon_slots"]),
                          int(doc["time"]["super_slot_len"])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario document: {exc}") from exc
    violations = validate_scenario(scenario)
    if violations:
        raise ScenarioError("invalid scenario: " + "; ".join(violations))
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    noise = s.radio.noise_plus_interference_w
    return {
        "n_vehicles": s.n_vehicles,
        "n_bs": s.n_bs,
        "bs_positions": s.bs_positions.tolist(),
        "routes": [{"waypoints": r.waypoints.tolist(), "start_index": r.start_index}
                   for r in s.routes],
        "transitions": [tm.probs.tolist() for tm in s.transitions],
        "radio": {
            "bandwidth_hz": s.radio.bandwidth_hz,
            "path_loss_const": s.radio.path_loss_const,
            "path_loss_exp": s.radio.path_loss_exp,
            "noise_plus_interference_w": list(noise) if isinstance(noise, tuple) else noise,
            "fading_mean_power": s.radio.fading_mean_power,
            "p_max_w": s.radio.p_max_w,
            "slot_seconds": s.radio.slot_seconds,
        },
        "tasks": [{"arrival_slot": t.arrival_slot, "size_bits": t.size_bits}
                  for t in s.tasks],
        "weights": {"energy_weight": s.weights.energy_weight,
                    "residual_weight": s.weights.residual_weight},
        "time": {"horizon_slots": s.time.horizon_slots,
                 "super_slot_len": s.time.super_slot_len},
    }


def load_scenario(path) -> Scenario:
    """Load and validate a scenario JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file {path} is not valid JSON: {exc}") from exc
    return scenario_from_dict(doc)


def save_scenario(s: Scenario, path) -> None:
    """Write a scenario as JSON; load_scenario(save_scenario(s)) is identity."""
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n",
                          encoding="utf-8")


def estimate_transition_matrix(traces, route: Route) -> TransitionMatrix:
    """Frequency-estimate a transition matrix from waypoint-index traces.

    Entry (j -> i) is the count of observed j-to-i transitions divided by
    the departures from j; waypoints never departed from become self-loops.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("cannot estimate a transition matrix from zero traces")
    w = route.n_waypoints
    counts = np.zeros((w, w))
    for trace in traces:
        idx = np.asarray(trace, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= w):
            raise ValueError(f"trace index outside [0, {w - 1}]")
        np.add.at(counts, (idx[:-1], idx[1:]), 1.0)
    departures = counts.sum(axis=1)
    probs = np.eye(w)
    seen = departures > 0
    probs[seen] = counts[seen] / departures[seen, None]
    return TransitionMatrix(probs)


def read_trace_file(path) -> dict[int, list[np.ndarray]]:
    """Read a trace CSV (header ``trial,vehicle,slot,waypoint_index``).

    Returns per-vehicle lists of waypoint-index sequences, one per trial,
    ordered by slot.
    """
    rows: dict[tuple[int, int], list[tuple[int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["trial", "vehicle", "slot", "waypoint_index"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise ScenarioError(
                f"trace file must have header {','.join(expected)}, "
                f"got {reader.fieldnames}")
        for rec in reader:
            key = (int(rec["trial"]), int(rec["vehicle"]))
            rows.setdefault(key, []).append((int(rec["slot"]), int(rec["waypoint_index"])))
    out: dict[int, list[np.ndarray]] = {}
    for (trial, vehicle), pairs in sorted(rows.items()):
        pairs.sort()
        out.setdefault(vehicle, []).append(np.array([w for _, w in pairs], dtype=np.int64))
    return out


def write_trace_file(path, traces_by_vehicle: dict[int, list]) -> None:
    """Write traces in the CSV interchange format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "vehicle", "slot", "waypoint_index"])
        for vehicle in sorted(traces_by_vehicle):
            for trial, trace in enumerate(traces_by_vehicle[vehicle]):
                for slot, w in enumerate(np.asarray(trace, dtype=np.int64), start=1):
                    writer.writerow([trial, vehicle, slot, int(w)])
