"""Per-slot online improvement and the two-time-scale policy runner.

Each slot's action starts from the reference action and alternates a
relaxed-and-rounded association/time step at the actual positions with a
joint current-rate/future-tail water-filling step; candidates that fail
to improve the approximate slot value are discarded, so the chosen value
never exceeds the reference-action value (the per-slot bound asserted by
the acceptance suite). Super slots re-anchor the reference plan on the
realized state, compare it with the revised carry-over, and keep the
cheaper of the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import radio as radio_mod
from .dynamics import (Action, SystemState, execute_slot, initial_state,
                       phi_table, slot_content, window_budget)
from .metrics import MetricsAccumulator, TrialMetrics
from .mobility import sample_trajectory
from .preallocate import (DEFAULT_SETTINGS, InfeasibleAllocation,
                          ReferenceSchedule, SolverSettings, _window_objective,
                          optimize_vehicle_window, round_association,
                          solve_bs_time_relaxed, solve_preallocation,
                          solve_time_given_association)
from .scenario import Scenario
from .valueapprox import expected_phi_profile, expected_value

BOUND_TOL = 1e-8


@dataclass
class PolicyTrace:
    """Everything one trial produced: actions, states, and realized totals."""

    actions: list[Action]
    buffers: np.ndarray            # (T + 1, N) state buffers, slots 1..T+1
    positions: np.ndarray          # (T, N) waypoint indices
    effective_rates: np.ndarray    # (T, N)
    delivered_bits: np.ndarray     # (T, N)
    delay_flags: np.ndarray        # (T, N) the 1(d > 0) charges
    energy_terms: np.ndarray       # (T, N) P * tau per slot
    residual_terms: np.ndarray     # (T, N) residue charged at the last slot
    power_w: np.ndarray            # (T, N)
    reference_choices: list[str]
    slot_values: list[tuple[float, float]]
    metrics: TrialMetrics


def sample_full_trajectories(scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    """Draw every vehicle's waypoint path for the whole period; (T, N) ints."""
    T = scenario.time.horizon_slots
    out = np.empty((T, scenario.n_vehicles), dtype=np.int64)
    for n in range(scenario.n_vehicles):
        out[:, n] = sample_trajectory(scenario.routes[n], scenario.transitions[n],
                                      scenario.routes[n].start_index, T, rng)
    return out


_window_budget = window_budget


class _SlotProblem:
    """Shared context for evaluating candidate actions at one slot."""

    def __init__(self, state: SystemState, reference: ReferenceSchedule,
                 scenario: Scenario):
        self.scenario = scenario
        self.state = state
        self.t = state.slot
        self.k0 = reference.index_of(self.t)
        self.reference = reference
        self.phis_now = phi_table(scenario, state.positions)
        n_veh = scenario.n_vehicles
        self.content = np.array([slot_content(state.buffers[n], scenario.tasks[n],
                                              self.t) for n in range(n_veh)])
        self.budgets = []
        self.arrivals = []
        for n in range(n_veh):
            b, a = _window_budget(scenario, state, n)
            self.budgets.append(b)
            self.arrivals.append(a)
        self.future_taus = reference.time_shares[self.k0 + 1:]
        self.phis_hat = [expected_phi_profile(scenario, reference, n, self.t,
                                              int(state.positions[n]), self.t + 1)
                         for n in range(n_veh)]

    def clip_current(self, assoc: np.ndarray, taus: np.ndarray,
                     rates: np.ndarray) -> np.ndarray:
        phi_sel = self.phis_now[np.arange(len(rates)), np.argmax(assoc, axis=1)]
        caps = radio_mod.max_rate(taus, phi_sel, self.scenario.radio.p_max_w,
                                  self.scenario.radio)
        return np.minimum(np.maximum(rates, 0.0), np.minimum(caps, self.content))

    def value(self, assoc: np.ndarray, taus: np.ndarray, rates: np.ndarray,
              tails: list[np.ndarray]) -> float:
        """Approximate cost-to-go of an action with given tails."""
        eff = self.clip_current(assoc, taus, rates)
        phi_sel = self.phis_now[np.arange(len(rates)), np.argmax(assoc, axis=1)]
        plans = np.column_stack([eff, np.stack(tails)]) if tails[0].size \
            else eff[:, None]
        taus_w = np.column_stack([taus, self.future_taus.T])
        phis_w = np.column_stack([phi_sel, np.stack(self.phis_hat)])
        obj, _, _, _ = _window_objective(plans, np.array(self.budgets), taus_w,
                                         phis_w, self.scenario.weights,
                                         self.scenario.radio,
                                         np.array(self.arrivals))
        return float(obj.sum())

    def best_rates_and_tails(self, assoc: np.ndarray, taus: np.ndarray):
        """Joint current-rate / tail optimization per vehicle.

        The current slot obeys the peak-power cap at the actual position;
        the tail is only budget-bounded (ample peak power assumed).
        """
        n_veh = self.scenario.n_vehicles
        radio = self.scenario.radio
        rates = np.zeros(n_veh)
        tails = []
        phi_sel = self.phis_now[np.arange(n_veh), np.argmax(assoc, axis=1)]
        for n in range(n_veh):
            taus_w = np.concatenate([[taus[n]], self.future_taus[:, n]])
            phis_w = np.concatenate([[phi_sel[n]], self.phis_hat[n]])
            budget = self.budgets[n]
            caps = np.where(taus_w > 0, max(budget, 0.0), 0.0)
            caps[0] = min(caps[0], radio_mod.max_rate(taus[n], phi_sel[n],
                                                      radio.p_max_w, radio))
            plan = optimize_vehicle_window(budget, taus_w, phis_w,
                                           self.scenario.weights, radio,
                                           self.arrivals[n], caps=caps)
            rates[n] = plan.rates[0]
            tails.append(plan.rates[1:])
        return rates, tails


def solve_online_slot(state: SystemState, reference: ReferenceSchedule,
                      scenario: Scenario,
                      settings: SolverSettings = DEFAULT_SETTINGS):
    """Improve the reference action at the realized state.

    Returns (action, tails, (chosen_value, reference_value)). The chosen
    value never exceeds the reference-action value: every candidate is
    benchmarked by the same evaluator and rejected unless it improves,
    starting from the reference action itself.
    """
    prob = _SlotProblem(state, reference, scenario)
    k0 = prob.k0
    if not any(b > 0 for b in prob.budgets):
        n_slots_left = reference.n_slots - k0 - 1
        action = Action.zero(scenario.n_vehicles, scenario.n_bs)
        tails = [np.zeros(n_slots_left) for _ in range(scenario.n_vehicles)]
        return action, tails, (0.0, 0.0)
    assoc = reference.association[k0].copy()
    taus = reference.time_shares[k0].copy()
    rates = prob.clip_current(assoc, taus, reference.rates[k0])
    tails = [reference.rates[k0 + 1:, n] for n in range(scenario.n_vehicles)]
    v_ref = prob.value(assoc, taus, rates, tails)
    v_cur = v_ref

    warm = None
    for _ in range(settings.max_alternations):
        try:
            frac, tau_frac = solve_bs_time_relaxed(rates[None, :], prob.phis_now[None],
                                                   scenario.radio, settings, init=warm)
            warm = (frac, tau_frac)
            assoc_new = round_association(frac)[0]
            taus_new = solve_time_given_association(
                assoc_new[None], rates[None, :], prob.phis_now[None],
                scenario.radio)[0]
            v_new = prob.value(assoc_new, taus_new, rates, tails)
            if v_new <= v_cur:
                assoc, taus, v_cur = assoc_new, taus_new, v_new
        except InfeasibleAllocation:
            pass
        rates_new, tails_new = prob.best_rates_and_tails(assoc, taus)
        v_new = prob.value(assoc, taus, rates_new, tails_new)
        if v_new <= v_cur:
            gain = v_cur - v_new
            rates, tails, v_cur = rates_new, tails_new, v_new
            if gain <= settings.alternation_tolerance * max(abs(v_cur), 1.0):
                break
        else:
            break

    assert v_cur <= v_ref + BOUND_TOL, "online step must not exceed the reference value"
    action = Action(assoc, taus, prob.clip_current(assoc, taus, rates))
    return action, tails, (v_cur, v_ref)


def update_reference(pre: ReferenceSchedule, post: ReferenceSchedule | None,
                     state: SystemState, scenario: Scenario):
    """Pick the cheaper of the fresh plan and the revised carry-over.

    The first super slot (no carry-over) uses the fresh plan; ties keep
    the carry-over for continuity. Returns (schedule, "pre" | "post").
    """
    from .valueapprox import evaluate_reference_cost

    if post is None:
        return pre, "pre"
    cost_pre = evaluate_reference_cost(state, pre, scenario)
    cost_post = evaluate_reference_cost(state, post, scenario)
    if cost_pre < cost_post:
        return pre, "pre"
    return post, "post"


def revise_reference_post(reference: ReferenceSchedule, state: SystemState,
                          last_action: Action, scenario: Scenario) -> ReferenceSchedule:
    """End-of-super-slot revision: keep the plan, re-derive the rate tail.

    The tails minimize the expected achievable cost from the realized
    end-of-super-slot state under the executed last action.
    """
    t = state.slot
    _, tails = expected_value(state, last_action, reference, scenario)
    k1 = reference.index_of(t) + 1
    return ReferenceSchedule(
        start_slot=t + 1,
        association=reference.association[k1:],
        time_shares=reference.time_shares[k1:],
        rates=np.stack(tails, axis=1) if tails and tails[0].size else
        reference.rates[k1:],
        basis_positions=reference.basis_positions[k1:],
    )


def quantize_action(action: Action, content: np.ndarray, phis: np.ndarray,
                    scenario: Scenario, step: float, tau_levels: int = 5) -> Action:
    """Snap an action onto the discrete grid used by the DP oracle.

    Shares snap up to the next tau grid point while the per-BS budget
    allows (a larger share only lowers the power needed), otherwise down;
    rates round down to whole quantizer steps after clipping to the
    snapped cap and the (on-grid) content, so the quantized queue never
    leaves the grid and residues are never under-counted.
    """
    tau_step = 1.0 / (tau_levels - 1)
    up = np.ceil(action.time_shares / tau_step - 1e-9) * tau_step
    up = np.minimum(up, 1.0)
    taus = up.copy()
    assoc = action.association
    budget = (taus * (action.rates > 0)) @ assoc
    for m in np.nonzero(budget > 1.0 + 1e-12)[0]:
        members = np.nonzero(assoc[:, m] > 0.5)[0]
        # largest shares drop to their floor first until the cell fits
        for n in sorted(members, key=lambda i: -taus[i]):
            taus[n] = np.floor(action.time_shares[n] / tau_step + 1e-9) * tau_step
            if (taus[members] * (action.rates[members] > 0)).sum() <= 1.0 + 1e-12:
                break
    phi_sel = phis[np.arange(len(taus)), action.chosen_bs]
    caps = radio_mod.max_rate(taus, phi_sel, scenario.radio.p_max_w, scenario.radio)
    rates = np.minimum(action.rates, np.minimum(caps, content))
    rates = np.floor(rates / step + 1e-9) * step
    taus = np.where(rates > 0, taus, 0.0)
    return Action(action.association, taus, np.maximum(rates, 0.0))


def _trace_arrays(scenario: Scenario):
    T, N = scenario.time.horizon_slots, scenario.n_vehicles
    return {
        "buffers": np.zeros((T + 1, N)),
        "positions": np.zeros((T, N), dtype=np.int64),
        "effective_rates": np.zeros((T, N)),
        "delivered_bits": np.zeros((T, N)),
        "delay_flags": np.zeros((T, N)),
        "energy_terms": np.zeros((T, N)),
        "residual_terms": np.zeros((T, N)),
        "power_w": np.zeros((T, N)),
    }


def run_policy_loop(scenario: Scenario, action_source, rng=None, trajectories=None,
                    quantize_step: float | None = None) -> PolicyTrace:
    """Drive one trial: query actions, execute slots, record everything.

    ``action_source(state, slot_index)`` yields (action, diagnostics) where
    diagnostics may carry reference choices and slot values. Trajectories
    are pre-drawn when not supplied so paired-seed comparisons see the
    same mobility across policies.
    """
    T = scenario.time.horizon_slots
    if trajectories is None:
        if rng is None:
            raise ValueError("need an rng or pre-sampled trajectories")
        trajectories = sample_full_trajectories(scenario, rng)
    state = initial_state(scenario)
    state.positions = trajectories[0].copy()
    arrays = _trace_arrays(scenario)
    acc = MetricsAccumulator(scenario)
    actions: list[Action] = []
    choices: list[str] = []
    slot_values: list[tuple[float, float]] = []
    for t in range(1, T + 1):
        arrays["buffers"][t - 1] = state.buffers
        arrays["positions"][t - 1] = state.positions
        action, diag = action_source(state, t)
        if quantize_step is not None:
            phis = phi_table(scenario, state.positions)
            content = np.array([slot_content(state.buffers[n], scenario.tasks[n], t)
                                for n in range(scenario.n_vehicles)])
            action = quantize_action(action, content, phis, scenario, quantize_step)
        if diag:
            if "choice" in diag:
                choices.append(diag["choice"])
            if "values" in diag:
                slot_values.append(diag["values"])
            if "post_hook" in diag:
                diag["post_hook"](state, action)
        nxt = trajectories[t] if t < T else None
        outcome = execute_slot(state, action, scenario, next_positions=nxt)
        actions.append(action)
        arrays["effective_rates"][t - 1] = outcome.effective_rates
        arrays["delivered_bits"][t - 1] = outcome.delivered_bits
        arrays["delay_flags"][t - 1] = outcome.components.delay
        arrays["energy_terms"][t - 1] = outcome.components.energy
        arrays["residual_terms"][t - 1] = outcome.components.residual
        arrays["power_w"][t - 1] = outcome.power_w
        acc.add(outcome)
        state = outcome.next_state
    arrays["buffers"][T] = state.buffers
    return PolicyTrace(actions=actions, metrics=acc.finalize(),
                       reference_choices=choices, slot_values=slot_values,
                       **arrays)


def run_proposed_policy(scenario: Scenario, rng=None, trajectories=None,
                        settings: SolverSettings = DEFAULT_SETTINGS,
                        quantize_step: float | None = None) -> PolicyTrace:
    """The two-time-scale policy: pre-allocate, compare, improve per slot."""
    T = scenario.time.horizon_slots
    gamma = scenario.time.super_slot_len
    n_super = scenario.time.n_super_slots
    carried: dict = {"post": None, "reference": None}

    def source(state: SystemState, t: int):
        diag: dict = {}
        if (t - 1) % gamma == 0:
            iota = (t - 1) // gamma + 1
            pre = solve_preallocation(scenario, state, iota, settings)
            ref, choice = update_reference(pre, carried["post"], state, scenario)
            carried["reference"] = ref
            diag["choice"] = choice
        ref = carried["reference"]
        action, tails, values = solve_online_slot(state, ref, scenario, settings)
        diag["values"] = values
        if t % gamma == 0 and t < T:
            # revision conditions on the pre-execution state and the action
            # actually applied (post-quantization when the grid is active)
            def post_hook(st, act, _ref=ref):
                carried["post"] = revise_reference_post(_ref, st, act, scenario)
            diag["post_hook"] = post_hook
        return action, diag

    return run_policy_loop(scenario, source, rng=rng, trajectories=trajectories,
                           quantize_step=quantize_step)
