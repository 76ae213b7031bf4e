"""Per-trial metric accounting shared by every policy runner.

``total_cost`` is defined through the decomposition
``delay_slots + omega_1 * energy_cost + omega_2 * residual_bits`` so the
identity against the per-slot cost components is exact by construction;
sums are accumulated in slot order with math.fsum for determinism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import SlotOutcome
from .scenario import Scenario


@dataclass
class TrialMetrics:
    """Realized totals of one trial."""

    total_cost: float
    delay_slots: float               # count of (vehicle, slot) with d > 0
    transmission_slots: np.ndarray   # per-vehicle count of slots with r > 0
    energy_cost: float               # sum of P * tau (the omega_1 multiplicand)
    energy_j: float                  # sum of P * tau * T_s
    residual_bits: float
    residual_per_vehicle: np.ndarray

    @property
    def mean_transmission_slots(self) -> float:
        return float(np.mean(self.transmission_slots))


class MetricsAccumulator:
    """Builds TrialMetrics from executed slot outcomes."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        n = scenario.n_vehicles
        self.delay = 0
        self.tx = np.zeros(n, dtype=np.int64)
        self._energy_terms: list[float] = []
        self._energy_j_terms: list[float] = []
        self.residual_per_vehicle = np.zeros(n)

    def add(self, outcome: SlotOutcome) -> None:
        self.delay += int(outcome.components.delay.sum())
        self.tx += outcome.effective_rates > 0
        self._energy_terms.append(float(outcome.components.energy.sum()))
        self._energy_j_terms.append(outcome.energy_j)
        self.residual_per_vehicle += outcome.components.residual

    def finalize(self) -> TrialMetrics:
        w = self.scenario.weights
        energy_cost = math.fsum(self._energy_terms)
        residual = float(np.sum(self.residual_per_vehicle))
        total = self.delay + w.energy_weight * energy_cost + w.residual_weight * residual
        return TrialMetrics(
            total_cost=total,
            delay_slots=float(self.delay),
            transmission_slots=self.tx.copy(),
            energy_cost=energy_cost,
            energy_j=math.fsum(self._energy_j_terms),
            residual_bits=residual,
            residual_per_vehicle=self.residual_per_vehicle.copy(),
        )
