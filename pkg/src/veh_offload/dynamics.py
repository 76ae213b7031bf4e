"""System state, actions, queue evolution, per-slot cost, and execution.

Slot indices are 1-based throughout (slot t in [1, T]); ``state.slot`` is
the slot about to be executed, T + 1 after the horizon. Buffers follow the
transition-injection convention: the buffer reads zero at the beginning of
the arrival slot and the task size enters through that slot's queue update,
so the non-empty indicator first charges the slot after arrival.

The executor clips requested rates to the buffer content and to the local
peak-power rate cap, making every open-loop plan executable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import radio as radio_mod
from .radio import RadioParams
from .scenario import Scenario, TaskSpec

FEASIBILITY_TOL = 1e-9


class InfeasibleAction(ValueError):
    """An action violates one of the scheduling constraints."""


@dataclass
class SystemState:
    """Per-slot buffered bits and waypoint indices of all vehicles."""

    buffers: np.ndarray    # (N,) residual bits, non-negative
    positions: np.ndarray  # (N,) waypoint indices
    slot: int              # 1..T+1

    def __post_init__(self):
        self.buffers = np.asarray(self.buffers, dtype=float).copy()
        self.positions = np.asarray(self.positions, dtype=np.int64).copy()

    def copy(self) -> "SystemState":
        return SystemState(self.buffers.copy(), self.positions.copy(), self.slot)


@dataclass
class Action:
    """BS association matrix, time shares, and throughputs for one slot."""

    association: np.ndarray  # (N, M) one-hot rows
    time_shares: np.ndarray  # (N,) in [0, 1]
    rates: np.ndarray        # (N,) bits

    def __post_init__(self):
        self.association = np.asarray(self.association, dtype=float)
        self.time_shares = np.asarray(self.time_shares, dtype=float)
        self.rates = np.asarray(self.rates, dtype=float)

    @property
    def chosen_bs(self) -> np.ndarray:
        return np.argmax(self.association, axis=1)

    @staticmethod
    def zero(n_vehicles: int, n_bs: int) -> "Action":
        assoc = np.zeros((n_vehicles, n_bs))
        assoc[:, 0] = 1.0
        return Action(assoc, np.zeros(n_vehicles), np.zeros(n_vehicles))


def initial_state(scenario: Scenario) -> SystemState:
    """State at slot 1: vehicles at their route start.

    Tasks arriving at slot 1 sit in the initial buffer (and are charged
    from slot 1); later arrivals enter through the queue update of their
    arrival slot, so the buffer reads zero there.
    """
    starts = np.array([r.start_index for r in scenario.routes], dtype=np.int64)
    buffers = np.array([t.size_bits if t.arrival_slot == 1 else 0.0
                        for t in scenario.tasks])
    return SystemState(buffers, starts, 1)


def step_queue(d: float, r: float, spec: TaskSpec, t: int) -> float:
    """Uplink queue update for one vehicle at slot ``t``.

    Zero before arrival; at the arrival slot the task size is injected and
    the slot's throughput drawn from it; otherwise the positive part of
    the decrement. A slot-1 arrival sits in the initial buffer already,
    so it follows the plain decrement.
    """
    if spec.arrival_slot > 1:
        if t < spec.arrival_slot:
            return 0.0
        if t == spec.arrival_slot:
            return max(spec.size_bits - r, 0.0)
    return max(d - r, 0.0)


def slot_content(d: float, spec: TaskSpec, t: int) -> float:
    """Bits available for transmission during slot ``t`` (arrival included)."""
    if spec.arrival_slot > 1:
        if t < spec.arrival_slot:
            return 0.0
        if t == spec.arrival_slot:
            return spec.size_bits
    return d


def window_budget(scenario: Scenario, state: SystemState, n: int):
    """(bits to ship, window-relative arrival index) from the current slot.

    arrival index -1 means the bits already sit in the buffer and the
    non-empty charge applies from the window's first slot; otherwise the
    bits are injected during that window slot and charges start after it.
    """
    task = scenario.tasks[n]
    s0 = state.slot
    if task.arrival_slot == 1 or s0 > task.arrival_slot:
        return float(state.buffers[n]), -1
    return float(task.size_bits), task.arrival_slot - s0


def content_vector(state: SystemState, scenario: Scenario) -> np.ndarray:
    return np.array([slot_content(state.buffers[n], scenario.tasks[n], state.slot)
                     for n in range(scenario.n_vehicles)])


def phi_table(scenario: Scenario, positions: np.ndarray) -> np.ndarray:
    """Energy factors Phi for every (vehicle, BS) pair at waypoint ``positions``.

    Returns an (N, M) array.
    """
    coords = np.stack([scenario.routes[n].waypoints[positions[n]]
                       for n in range(scenario.n_vehicles)])
    dist = np.linalg.norm(coords[:, None, :] - scenario.bs_positions[None, :, :], axis=2)
    dist = np.maximum(dist, radio_mod.DEFAULT_MIN_DISTANCE_M)
    scale = radio_mod.phi_scale(scenario.radio,
                                scenario.radio.noise_vector(scenario.n_bs))
    return np.asarray(scale) * dist ** scenario.radio.path_loss_exp


def check_action(action: Action, phis: np.ndarray, radio: RadioParams,
                 tol: float = FEASIBILITY_TOL) -> list[str]:
    """Constraint violations of an action at the given Phi factors.

    Checks unique association rows, non-negative shares, per-BS time
    budgets, and the peak-power constraint implied by the rates.
    """
    v = []
    assoc = action.association
    if not np.all((np.abs(assoc) < tol) | (np.abs(assoc - 1.0) < tol)):
        v.append("association entries must be binary")
    row_sums = assoc.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=tol):
        v.append("each vehicle must associate with exactly one BS")
    if np.any(action.time_shares < -tol):
        v.append("time shares must be non-negative")
    if np.any(action.rates < -tol):
        v.append("rates must be non-negative")
    bs_time = action.time_shares @ assoc
    if np.any(bs_time > 1.0 + tol):
        m = int(np.argmax(bs_time))
        v.append(f"BS {m} time budget exceeded: {bs_time[m]:.12g}")
    phi_sel = phis[np.arange(phis.shape[0]), np.argmax(assoc, axis=1)]
    for n in range(phis.shape[0]):
        r, tau = action.rates[n], action.time_shares[n]
        if r > tol and tau <= 0:
            v.append(f"vehicle {n}: positive rate with zero time share")
        elif r > tol:
            p = radio_mod.power_for_rate(r, tau, phi_sel[n], radio)
            if p > radio.p_max_w * (1 + 1e-9) + tol:
                v.append(f"vehicle {n}: power {p:.6g} W exceeds peak {radio.p_max_w} W")
    return v


def slot_cost(state: SystemState, action: Action, scenario: Scenario,
              validate: bool = True):
    """Per-vehicle slot costs and their total for a feasible action.

    Cost is 1(d > 0) + omega_1 * P * tau, plus omega_2 * d_{T+1} at the
    last slot (the residue computed through the queue update). A vehicle
    with zero rate does not transmit and spends no energy.
    """
    phis = phi_table(scenario, state.positions)
    if validate:
        violations = check_action(action, phis, scenario.radio)
        if violations:
            raise InfeasibleAction("; ".join(violations))
    comp = _cost_components(state, action, phis, scenario)
    per_vehicle = comp.delay + scenario.weights.energy_weight * comp.energy \
        + scenario.weights.residual_weight * comp.residual
    return per_vehicle, float(np.sum(per_vehicle))


@dataclass
class CostComponents:
    """Decomposed slot cost: indicator counts, P*tau energy, residue bits."""

    delay: np.ndarray
    energy: np.ndarray
    residual: np.ndarray


def _cost_components(state: SystemState, action: Action, phis: np.ndarray,
                     scenario: Scenario, rates=None) -> CostComponents:
    n_veh = scenario.n_vehicles
    t = state.slot
    rates = action.rates if rates is None else rates
    delay = (state.buffers > 0).astype(float)
    energy = np.zeros(n_veh)
    residual = np.zeros(n_veh)
    phi_sel = phis[np.arange(n_veh), action.chosen_bs]
    for n in range(n_veh):
        r, tau = rates[n], action.time_shares[n]
        if r > 0 and tau > 0:
            p = radio_mod.power_for_rate(r, tau, phi_sel[n], scenario.radio)
            energy[n] = p * tau
    if t == scenario.time.horizon_slots:
        for n in range(n_veh):
            residual[n] = step_queue(state.buffers[n], rates[n], scenario.tasks[n], t)
    return CostComponents(delay, energy, residual)


@dataclass
class SlotOutcome:
    """What actually happened in one executed slot."""

    next_state: SystemState
    cost_per_vehicle: np.ndarray
    components: CostComponents
    effective_rates: np.ndarray
    delivered_bits: np.ndarray
    power_w: np.ndarray
    energy_j: float


def execute_slot(state: SystemState, action: Action, scenario: Scenario,
                 rng: np.random.Generator | None = None,
                 next_positions: np.ndarray | None = None) -> SlotOutcome:
    """Execute one slot at the actual positions and advance the state.

    Rates are clipped to the buffer content and the local peak-power cap;
    unsent bits stay buffered. Next positions are sampled from the mobility
    chains unless ``next_positions`` provides a pre-drawn path (used for
    paired-seed experiments).
    """
    n_veh = scenario.n_vehicles
    t = state.slot
    radio = scenario.radio
    phis = phi_table(scenario, state.positions)
    phi_sel = phis[np.arange(n_veh), action.chosen_bs]
    caps = radio_mod.max_rate(action.time_shares, phi_sel, radio.p_max_w, radio)
    content = content_vector(state, scenario)
    eff = np.minimum(action.rates, np.minimum(caps, content))
    eff = np.maximum(eff, 0.0)

    comp = _cost_components(state, action, phis, scenario, rates=eff)
    cost = comp.delay + scenario.weights.energy_weight * comp.energy \
        + scenario.weights.residual_weight * comp.residual

    power = np.zeros(n_veh)
    for n in range(n_veh):
        if eff[n] > 0:
            power[n] = radio_mod.power_for_rate(eff[n], action.time_shares[n],
                                                phi_sel[n], radio)
    energy_j = float(np.sum(power * action.time_shares) * radio.slot_seconds)

    next_buffers = np.array([step_queue(state.buffers[n], eff[n], scenario.tasks[n], t)
                             for n in range(n_veh)])
    delivered = content - next_buffers

    if t >= scenario.time.horizon_slots:
        next_pos = state.positions.copy()
    elif next_positions is not None:
        next_pos = np.asarray(next_positions, dtype=np.int64).copy()
    else:
        if rng is None:
            raise ValueError("execute_slot needs an rng or explicit next_positions")
        next_pos = np.empty(n_veh, dtype=np.int64)
        for n in range(n_veh):
            probs = scenario.transitions[n].probs[state.positions[n]]
            next_pos[n] = rng.choice(probs.size, p=probs)

    nxt = SystemState(next_buffers, next_pos, t + 1)
    return SlotOutcome(nxt, cost, comp, eff, delivered, power, energy_j)
