"""Shared scenario builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from veh_offload.mobility import Route, TransitionMatrix
from veh_offload.radio import RadioParams
from veh_offload.scenario import CostWeights, Scenario, TaskSpec, TimeGrid


DEFAULT_RADIO = dict(bandwidth_hz=2e7, path_loss_const=1e6, path_loss_exp=4.0,
                     noise_plus_interference_w=1e-3, fading_mean_power=6.0,
                     p_max_w=5.0, slot_seconds=1.0)


def forward_chain(n_states: int, stay: float = 0.3) -> np.ndarray:
    """Mostly-forward chain with a self-loop tail state."""
    p = np.zeros((n_states, n_states))
    for j in range(n_states - 1):
        p[j, j] = stay
        p[j, j + 1] = 1.0 - stay
    p[-1, -1] = 1.0
    return p


def line_route(n_waypoints: int, length: float = 400.0, y: float = 20.0,
               jitter: float = 0.0, rng=None) -> np.ndarray:
    xs = np.linspace(0.0, length, n_waypoints)
    ys = np.full(n_waypoints, y)
    if jitter and rng is not None:
        xs = xs + rng.normal(0, jitter, n_waypoints)
        ys = ys + rng.normal(0, jitter / 2, n_waypoints)
    return np.stack([xs, ys], axis=1)


def build_scenario(n_vehicles=1, n_bs=1, horizon=10, super_slot=5,
                   task_bits=3e8, arrival=1, n_waypoints=5, stay=0.3,
                   weights=(2.0, 5.0), radio_overrides=None,
                   transitions=None, routes=None, bs_positions=None,
                   seed=0) -> Scenario:
    rng = np.random.default_rng(seed)
    radio_kwargs = dict(DEFAULT_RADIO)
    if radio_overrides:
        radio_kwargs.update(radio_overrides)
    radio = RadioParams(**radio_kwargs)
    if bs_positions is None:
        bs_positions = np.stack([np.linspace(60, 340, n_bs), np.zeros(n_bs)], axis=1)
    if routes is None:
        routes = tuple(Route(line_route(n_waypoints, y=20.0 + 30 * n,
                                        jitter=8.0, rng=rng))
                       for n in range(n_vehicles))
    else:
        routes = tuple(routes)
    if transitions is None:
        transitions = tuple(TransitionMatrix(forward_chain(r.n_waypoints, stay))
                            for r in routes)
    else:
        transitions = tuple(transitions)
    arrivals = np.broadcast_to(np.asarray(arrival), (n_vehicles,))
    sizes = np.broadcast_to(np.asarray(task_bits, dtype=float), (n_vehicles,))
    tasks = tuple(TaskSpec(int(a), float(d)) for a, d in zip(arrivals, sizes))
    return Scenario(n_vehicles=n_vehicles, n_bs=n_bs,
                    bs_positions=np.asarray(bs_positions, dtype=float),
                    routes=routes, transitions=transitions, radio=radio,
                    tasks=tasks, weights=CostWeights(*weights),
                    time=TimeGrid(horizon, super_slot))


@pytest.fixture
def tiny_scenario():
    """1 vehicle, 1 BS, deterministic-ish world for fast checks."""
    return build_scenario(n_vehicles=1, n_bs=1, horizon=6, super_slot=3,
                          task_bits=2e8, n_waypoints=4)


@pytest.fixture
def two_vehicle_scenario():
    return build_scenario(n_vehicles=2, n_bs=2, horizon=10, super_slot=5,
                          task_bits=4e8, n_waypoints=5)
