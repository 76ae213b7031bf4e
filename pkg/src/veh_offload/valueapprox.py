"""Analytical value approximation built on a reference schedule.

The achievable-cost evaluator prices a rate tail under the reference
association/time plan: slot charges until the buffer drains, energy terms
with position-uncertainty folded into expected distance moments, and the
residue penalty when the tail cannot finish the task. Expectations over
future positions enter only through the energy factors, which are linear
in the conditional distance moment, so optimizing a tail against the
expected factors is exactly the water-filling machinery again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mobility, radio as radio_mod
from .dynamics import SystemState, slot_content, step_queue, phi_table
from .preallocate import (ReferenceSchedule, ThroughputPlan, _window_objective,
                          optimize_vehicle_window)
from .scenario import Scenario


@dataclass
class RateTail:
    """Planned throughputs for the remaining slots of one vehicle."""

    rates: np.ndarray
    source: ReferenceSchedule | None = None

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)


def _tail_rates(tail) -> np.ndarray:
    if isinstance(tail, RateTail):
        return tail.rates
    return np.asarray(tail, dtype=float)


def expected_phi_profile(scenario: Scenario, reference: ReferenceSchedule,
                         vehicle: int, cond_slot: int, cond_position: int,
                         first_slot: int) -> np.ndarray:
    """Expected energy factors for slots first_slot..T of one vehicle.

    Conditions the position distribution on waypoint ``cond_position`` at
    slot ``cond_slot`` and evaluates the factor toward the BS the reference
    schedules for each slot. Returns an array of length T - first_slot + 1.
    """
    T = scenario.time.horizon_slots
    if first_slot > T:
        return np.zeros(0)
    k_max = T - cond_slot
    moments = mobility.distance_moment_profile(
        scenario.routes[vehicle], scenario.transitions[vehicle],
        cond_position, k_max, scenario.bs_positions,
        scenario.radio.path_loss_exp)                      # (k_max + 1, M)
    scale = radio_mod.phi_scale(scenario.radio,
                                scenario.radio.noise_vector(scenario.n_bs))
    phi_all = np.asarray(scale) * moments
    ks = np.arange(first_slot, T + 1) - cond_slot
    bs = reference.chosen_bs()[reference.index_of(first_slot):, vehicle]
    return phi_all[ks, bs]


def achievable_cost(scenario: Scenario, reference: ReferenceSchedule, vehicle: int,
                    t: int, d: float, position: int, tail) -> float:
    """Expected cost of slots t+1..T for one vehicle following a rate tail.

    ``d`` is the buffer at the beginning of slot t+1 and ``position`` the
    waypoint at slot t+1. Zero-rate slots spend nothing; the slot that
    drains the buffer transmits only the leftover bits; a tail too short
    for the buffer pays the weighted residue on top of charging every slot.
    """
    if d <= 0:
        return 0.0
    T = scenario.time.horizon_slots
    if t >= T:
        return 0.0
    rates = _tail_rates(tail)
    k1 = reference.index_of(t + 1)
    taus = reference.time_shares[k1:, vehicle]
    if rates.shape[0] != taus.shape[0]:
        raise ValueError(f"tail of length {rates.shape[0]} does not cover "
                         f"slots {t + 1}..{T}")
    phis = expected_phi_profile(scenario, reference, vehicle, t + 1, position, t + 1)
    c = scenario.radio.bits_per_share
    w = scenario.weights

    def energy(rate_slice, tau_slice, phi_slice):
        live = (rate_slice > 0) & (tau_slice > 0)
        expo = np.where(live, rate_slice / np.maximum(tau_slice, 1e-300) / c, 0.0)
        return float(np.sum(np.where(live, phi_slice * tau_slice * np.exp2(expo), 0.0)))

    cum = np.cumsum(rates)
    if d > cum[-1]:
        f1 = (T - t) + w.residual_weight * (d - cum[-1])
        f2 = energy(rates, taus, phis)
        return f1 + w.energy_weight * f2
    k = int(np.searchsorted(cum, d, side="left"))
    partial = d - (cum[k - 1] if k > 0 else 0.0)
    f1 = float(k + 1)
    f2 = energy(rates[:k], taus[:k], phis[:k])
    f2 += energy(np.array([partial]), taus[k:k + 1], phis[k:k + 1])
    return f1 + w.energy_weight * f2


def _tail_window(scenario: Scenario, vehicle: int, t: int, d_next: float):
    """Budget and window-relative arrival index for slots t+1..T."""
    task = scenario.tasks[vehicle]
    if task.arrival_slot == 1 or t + 1 > task.arrival_slot:
        return float(d_next), -1
    return float(task.size_bits), task.arrival_slot - (t + 1)


def optimize_tail(scenario: Scenario, reference: ReferenceSchedule, vehicle: int,
                  t: int, d_next: float, cond_slot: int,
                  cond_position: int) -> ThroughputPlan:
    """Tail minimizing the expected achievable cost for slots t+1..T.

    Position uncertainty is conditioned on ``cond_position`` at
    ``cond_slot``; by linearity of the energy factor this is water-filling
    on the expected factors.
    """
    T = scenario.time.horizon_slots
    if t >= T:
        return ThroughputPlan(np.zeros(0), 0.0, 0.0, 0.0, 0.0)
    budget, arrival_rel = _tail_window(scenario, vehicle, t, d_next)
    k1 = reference.index_of(t + 1)
    taus = reference.time_shares[k1:, vehicle]
    phis = expected_phi_profile(scenario, reference, vehicle, cond_slot,
                                cond_position, t + 1)
    return optimize_vehicle_window(budget, taus, phis, scenario.weights,
                                   scenario.radio, arrival_rel,
                                   power_capped=False)


def expected_value(state: SystemState, action, reference: ReferenceSchedule,
                   scenario: Scenario):
    """Expected-future-cost approximation of an action plus its best tails.

    Next buffers follow deterministically from the action; the expectation
    over next positions is folded into the energy factors; each vehicle's
    tail is then optimized independently. Returns (value, tails).
    """
    t = state.slot
    T = scenario.time.horizon_slots
    tails = []
    total = 0.0
    for n in range(scenario.n_vehicles):
        d_next = step_queue(float(state.buffers[n]), float(action.rates[n]),
                            scenario.tasks[n], t)
        plan = optimize_tail(scenario, reference, n, t, d_next,
                             cond_slot=t, cond_position=int(state.positions[n]))
        total += plan.objective
        tails.append(plan.rates)
    return total, tails


def evaluate_reference_cost(state: SystemState, reference: ReferenceSchedule,
                            scenario: Scenario) -> float:
    """Expected total cost of following the reference open-loop from here.

    The current slot is priced at the known positions (rates clipped to
    content and the local peak-power cap, exactly as execution would);
    later slots use the reference's own rate tail against expected factors.
    """
    t = state.slot
    T = scenario.time.horizon_slots
    k0 = reference.index_of(t)
    phis_now = phi_table(scenario, state.positions)
    bs_now = reference.chosen_bs()[k0]
    c = scenario.radio.bits_per_share
    w = scenario.weights
    total = 0.0
    for n in range(scenario.n_vehicles):
        d_n = float(state.buffers[n])
        tau = float(reference.time_shares[k0, n])
        phi = float(phis_now[n, bs_now[n]])
        cap = radio_mod.max_rate(tau, phi, scenario.radio.p_max_w, scenario.radio)
        content = slot_content(d_n, scenario.tasks[n], t)
        eff = min(float(reference.rates[k0, n]), content, cap)
        cur = 1.0 if d_n > 0 else 0.0
        if eff > 0 and tau > 0:
            cur += w.energy_weight * phi * tau * 2.0 ** (eff / (tau * c))
        d_next = step_queue(d_n, eff, scenario.tasks[n], t)
        if t == T:
            cur += w.residual_weight * d_next
            total += cur
            continue
        budget, arrival_rel = _tail_window(scenario, n, t, d_next)
        taus = reference.time_shares[k0 + 1:, n]
        phis_hat = expected_phi_profile(scenario, reference, n, t,
                                        int(state.positions[n]), t + 1)
        tail = reference.rates[k0 + 1:, n]
        obj, _, _, _ = _window_objective(tail[None, :], budget, taus, phis_hat,
                                         w, scenario.radio, arrival_rel)
        total += cur + float(obj[0])
    return total
