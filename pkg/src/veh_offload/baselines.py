"""Baseline policies and the exact quantized dynamic-programming oracle.

DA executes the opening plan untouched; PAO re-plans every super slot but
never improves within it; PAS3 is the proposed policy with a single super
slot spanning the whole period; PP plans against the realized trajectory
and lower-bounds everything that cannot see the future. The DP oracle
does exact backward induction on a quantized buffer/action grid and is
the optimality-gap yardstick for small scenarios.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import radio as radio_mod
from .dynamics import Action, initial_state, phi_table, step_queue
from .online import (PolicyTrace, run_policy_loop, run_proposed_policy,
                     sample_full_trajectories)
from .preallocate import (DEFAULT_SETTINGS, ReferenceSchedule, SolverSettings,
                          solve_preallocation)
from .scenario import Scenario


@dataclass(frozen=True)
class Quantizer:
    """Even buffer grid: ``levels`` points from 0 to ``max_bits``."""

    levels: int = 21
    max_bits: float = 0.0

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("quantizer needs at least 2 levels")

    @property
    def step(self) -> float:
        return self.max_bits / (self.levels - 1)

    def round_up(self, bits) -> np.ndarray:
        bits = np.asarray(bits, dtype=float)
        if self.step == 0:
            return np.zeros_like(bits)
        idx = np.ceil(bits / self.step - 1e-9)
        return np.clip(idx, 0, self.levels - 1) * self.step


def quantized_scenario(scenario: Scenario, quantizer: Quantizer) -> Scenario:
    """Task sizes rounded up onto the grid so queues stay on-grid."""
    sizes = quantizer.round_up([t.size_bits for t in scenario.tasks])
    return scenario.with_task_sizes(sizes)


def _schedule_source(schedule_holder):
    def source(state, t):
        schedule: ReferenceSchedule = schedule_holder["schedule"]
        k = schedule.index_of(t)
        return Action(schedule.association[k], schedule.time_shares[k],
                      schedule.rates[k]), {}
    return source


def run_da(scenario: Scenario, rng=None, trajectories=None,
           settings: SolverSettings = DEFAULT_SETTINGS,
           quantize_step: float | None = None) -> PolicyTrace:
    """Deterministic Allocation: execute the opening plan for the whole period."""
    holder: dict = {}

    def source(state, t):
        if t == 1:
            holder["schedule"] = solve_preallocation(scenario, state, 1, settings)
        return _schedule_source(holder)(state, t)

    return run_policy_loop(scenario, source, rng=rng, trajectories=trajectories,
                           quantize_step=quantize_step)


def run_pao(scenario: Scenario, rng=None, trajectories=None,
            settings: SolverSettings = DEFAULT_SETTINGS,
            quantize_step: float | None = None) -> PolicyTrace:
    """Pre-Allocation Only: re-plan each super slot, execute it open-loop."""
    gamma = scenario.time.super_slot_len
    holder: dict = {}

    def source(state, t):
        if (t - 1) % gamma == 0:
            iota = (t - 1) // gamma + 1
            holder["schedule"] = solve_preallocation(scenario, state, iota, settings)
        return _schedule_source(holder)(state, t)

    return run_policy_loop(scenario, source, rng=rng, trajectories=trajectories,
                           quantize_step=quantize_step)


def run_pas3(scenario: Scenario, rng=None, trajectories=None,
             settings: SolverSettings = DEFAULT_SETTINGS,
             quantize_step: float | None = None) -> PolicyTrace:
    """Proposed policy with the super slot spanning the whole period."""
    wide = scenario.with_super_slot(scenario.time.horizon_slots)
    return run_proposed_policy(wide, rng=rng, trajectories=trajectories,
                               settings=settings, quantize_step=quantize_step)


def run_pp(scenario: Scenario, rng=None, trajectories=None,
           settings: SolverSettings = DEFAULT_SETTINGS,
           quantize_step: float | None = None) -> PolicyTrace:
    """Perfect Prediction: plan against the realized trajectory, then execute it."""
    from .preallocate import solve_deterministic_plan

    if trajectories is None:
        if rng is None:
            raise ValueError("need an rng or pre-sampled trajectories")
        trajectories = sample_full_trajectories(scenario, rng)
    # deterministic plan where the basis trajectory is the true one
    coords = np.stack([scenario.routes[n].waypoints[trajectories[:, n]]
                       for n in range(scenario.n_vehicles)], axis=1)
    dist = np.linalg.norm(coords[:, :, None, :]
                          - scenario.bs_positions[None, None, :, :], axis=3)
    dist = np.maximum(dist, radio_mod.DEFAULT_MIN_DISTANCE_M)
    scale = radio_mod.phi_scale(scenario.radio,
                                scenario.radio.noise_vector(scenario.n_bs))
    phis = np.asarray(scale) * dist ** scenario.radio.path_loss_exp
    holder: dict = {}

    def source(state, t):
        if t == 1:
            holder["schedule"] = solve_deterministic_plan(scenario, state, coords,
                                                          phis, settings)
        return _schedule_source(holder)(state, t)

    return run_policy_loop(scenario, source, rng=None, trajectories=trajectories,
                           quantize_step=quantize_step)


# ---------------------------------------------------------------------------
# exact DP oracle

class StateBudgetExceeded(RuntimeError):
    """The quantized state space is too large for exact induction."""


TAU_GRID = np.array([0.0, 0.25, 0.5, 0.75, 1.0])


def exact_dp(scenario: Scenario, quantizer: Quantizer,
             max_states: int = 2_000_000):
    """Backward induction over quantized buffers and exact mobility chains.

    Actions are enumerated on the grid: per-vehicle BS choice, tau from
    {0, 1/4, 1/2, 3/4, 1} under the per-BS budget, and rate deltas that
    land the buffer on a quantizer level (never exceeding the local
    peak-power cap). Returns (values, policy, optimal average cost) where
    ``values[t]`` maps flattened (levels, positions) states to costs-to-go.
    """
    N = scenario.n_vehicles
    M = scenario.n_bs
    T = scenario.time.horizon_slots
    L = quantizer.levels
    sizes_w = [r.n_waypoints for r in scenario.routes]
    n_states = int(np.prod([L * w for w in sizes_w])) * T
    if n_states > max_states:
        raise StateBudgetExceeded(
            f"quantized DP needs {n_states} states, budget is {max_states}")

    scen_q = quantized_scenario(scenario, quantizer)
    step = quantizer.step
    level_vals = np.arange(L) * step

    lev_shapes = [L] * N
    pos_shapes = sizes_w
    shape = tuple(lev_shapes + pos_shapes)
    values = {T + 1: np.zeros(shape)}
    policy: dict[int, dict] = {}

    tau_choices = _per_vehicle_tau_sets(N, M)

    for t in range(T, 0, -1):
        v_next = values[t + 1]
        v_t = np.full(shape, np.inf)
        pol_t: dict = {}
        for pos in itertools.product(*[range(w) for w in pos_shapes]):
            phis = phi_table(scen_q, np.array(pos, dtype=np.int64))
            trans = [scen_q.transitions[n].probs[pos[n]] for n in range(N)]
            for levels in itertools.product(*[range(L)] * N):
                best, best_act = np.inf, None
                contents = np.empty(N)
                in_buffer = []
                for n in range(N):
                    task = scen_q.tasks[n]
                    held = task.arrival_slot == 1 or t > task.arrival_slot
                    in_buffer.append(held)
                    if held:
                        contents[n] = level_vals[levels[n]]
                    elif t == task.arrival_slot:
                        contents[n] = task.size_bits
                    else:
                        contents[n] = 0.0
                for bs_combo in itertools.product(*[range(M)] * N):
                    for tau_combo in tau_choices[bs_combo]:
                        caps = np.array([
                            radio_mod.max_rate(tau_combo[n], phis[n, bs_combo[n]],
                                               scen_q.radio.p_max_w, scen_q.radio)
                            for n in range(N)])
                        rate_opts = []
                        for n in range(N):
                            top = min(contents[n], caps[n] * (1 + 1e-12))
                            k_max = int(math.floor(top / step + 1e-9))
                            opts = [k * step for k in range(0, k_max + 1)]
                            rate_opts.append(opts or [0.0])
                        for rates in itertools.product(*rate_opts):
                            cost = 0.0
                            nxt_idx = []
                            for n in range(N):
                                d_state = level_vals[levels[n]] if in_buffer[n] else 0.0
                                if d_state > 0:
                                    cost += 1.0
                                r = rates[n]
                                if r > 0:
                                    p = phis[n, bs_combo[n]] * 2.0 ** (
                                        r / (tau_combo[n] * scen_q.radio.bits_per_share))
                                    cost += scen_q.weights.energy_weight * p * tau_combo[n]
                                d_next = step_queue(d_state, r, scen_q.tasks[n], t)
                                if t == T:
                                    cost += scen_q.weights.residual_weight * d_next
                                lev_next = int(math.ceil(d_next / step - 1e-9))
                                nxt_idx.append(min(lev_next, L - 1))
                            ev = _expected_next(v_next, nxt_idx, trans, N)
                            total = cost + ev
                            if total < best - 1e-15:
                                best = total
                                best_act = (bs_combo, tau_combo, rates)
                idx = tuple(levels) + tuple(pos)
                v_t[idx] = best
                pol_t[idx] = best_act
        values[t] = v_t
        policy[t] = pol_t

    start = initial_state(scen_q)
    lev0 = [int(round(b / step)) if step > 0 else 0 for b in start.buffers]
    idx0 = tuple(lev0) + tuple(int(p) for p in start.positions)
    return values, policy, float(values[1][idx0])


def _per_vehicle_tau_sets(n_vehicles: int, n_bs: int):
    """tau-grid combinations per BS assignment satisfying the cell budgets."""
    combos: dict[tuple, list] = {}
    for bs_combo in itertools.product(*[range(n_bs)] * n_vehicles):
        valid = []
        for taus in itertools.product(TAU_GRID, repeat=n_vehicles):
            per_bs = np.zeros(n_bs)
            for n, m in enumerate(bs_combo):
                per_bs[m] += taus[n]
            if np.all(per_bs <= 1.0 + 1e-12):
                valid.append(taus)
        combos[bs_combo] = valid
    return combos


def _expected_next(v_next: np.ndarray, levels_next: list, trans: list, n: int) -> float:
    """Expectation of the next value over the product mobility chain."""
    block = v_next[tuple(levels_next)]
    for k in range(n):
        block = np.tensordot(trans[k], block, axes=(0, 0))
    return float(block)
