"""Super-slot deterministic pre-allocation.

Alternating optimization of (association, time) and throughput along
average trajectories. Association/time is handled by relaxing the binary
association to data fractions (projected-gradient on the convex
relaxation, then argmax rounding and an exact per-cell time re-solve);
throughput is water-filling across slots via bisection on the shared
KKT multiplier, with a closed-form fallback for abandoned-task slots.

All windows are arrays over the remaining slots; slot indices inside this
module are window-relative unless a variable is named ``*_slot``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mobility, radio as radio_mod
from .dynamics import SystemState
from .radio import LN2, RadioParams
from .scenario import CostWeights, Scenario

_EXP_CLAMP = 700.0          # exp() overflow guard in line searches
_BISECT_ITERS = 48          # water-filling multiplier search
_THETA_ITERS = 38           # per-cell time-budget multiplier search
_NEWTON_ITERS = 8
_POWER_PENALTY = 100.0      # steers the relaxation away from over-peak pairs


class InfeasibleAllocation(ValueError):
    """Requested throughputs cannot be carried; message names the binding cell."""


class InfeasibleCompletion(ValueError):
    """A completion-slot candidate cannot absorb the task bits."""


@dataclass(frozen=True)
class SolverSettings:
    max_alternations: int = 4
    gradient_tolerance: float = 1e-7
    bisection_tolerance: float = 1e-10
    max_gradient_iters: int = 120
    # relative objective gain below which the outer alternation stops
    alternation_tolerance: float = 1e-4


DEFAULT_SETTINGS = SolverSettings()


@dataclass
class ReferenceSchedule:
    """Deterministic open-loop plan covering slots start_slot..T.

    ``association`` is one-hot per (slot, vehicle); ``basis_positions``
    are the average-trajectory coordinates the plan was optimized for.
    """

    start_slot: int
    association: np.ndarray     # (K, N, M)
    time_shares: np.ndarray     # (K, N)
    rates: np.ndarray           # (K, N)
    basis_positions: np.ndarray  # (K, N, 2)

    @property
    def n_slots(self) -> int:
        return self.rates.shape[0]

    @property
    def last_slot(self) -> int:
        return self.start_slot + self.n_slots - 1

    def index_of(self, slot: int) -> int:
        k = slot - self.start_slot
        if not 0 <= k < self.n_slots:
            raise IndexError(f"slot {slot} outside schedule "
                             f"[{self.start_slot}, {self.last_slot}]")
        return k

    def chosen_bs(self) -> np.ndarray:
        return np.argmax(self.association, axis=2)

    def with_rates_from(self, slot: int, new_rates: np.ndarray) -> "ReferenceSchedule":
        """Copy with the rate rows for slots >= ``slot`` replaced."""
        k = self.index_of(slot)
        rates = self.rates.copy()
        rates[k:] = new_rates
        return ReferenceSchedule(self.start_slot, self.association,
                                 self.time_shares, rates, self.basis_positions)


# ---------------------------------------------------------------------------
# projections

def project_rows_to_simplex(x: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto {v >= 0, sum v = 1}."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    u = np.sort(x, axis=-1)[..., ::-1]
    cssv = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - cssv / ind > 0
    rho = cond.sum(axis=-1)
    theta = np.take_along_axis(cssv, rho[..., None] - 1, axis=-1) / rho[..., None]
    return np.maximum(x - theta, 0.0)


def project_rows_to_capped_simplex(x: np.ndarray, budget: float = 1.0) -> np.ndarray:
    """Projection of each row onto {v >= 0, sum v <= budget}."""
    x = np.asarray(x, dtype=float)
    clipped = np.maximum(x, 0.0)
    over = clipped.sum(axis=-1) > budget
    if not np.any(over):
        return clipped
    out = clipped.copy()
    sub = np.asarray(x)[over]
    n = sub.shape[-1]
    u = np.sort(sub, axis=-1)[..., ::-1]
    cssv = np.cumsum(u, axis=-1) - budget
    ind = np.arange(1, n + 1)
    cond = u - cssv / ind > 0
    rho = cond.sum(axis=-1)
    theta = np.take_along_axis(cssv, rho[..., None] - 1, axis=-1) / rho[..., None]
    out[over] = np.maximum(sub - theta, 0.0)
    return out


# ---------------------------------------------------------------------------
# per-cell optimal time allocation

def _lambert_w(w: np.ndarray) -> np.ndarray:
    """Principal Lambert W on w >= 0 (vectorized Newton from above)."""
    w = np.asarray(w, dtype=float)
    lw = np.log(np.maximum(w, 1e-300))
    # asymptotic start for large w, series-flavored start elsewhere
    v = np.where(w > math.e, lw - np.log(np.maximum(lw, 1.0)) + 1e-12, np.log1p(w))
    v = np.maximum(v, 0.0)
    for _ in range(_NEWTON_ITERS):
        ev = np.exp(v)
        v = v - (v * ev - w) / (ev * (v + 1.0))
        v = np.maximum(v, 0.0)
    return v


def _lambert_w_scalar(w: float) -> float:
    if w <= 0.0:
        return 0.0
    v = math.log(w) - math.log(max(math.log(w), 1.0)) if w > math.e else math.log1p(w)
    v = max(v, 0.0)
    for _ in range(_NEWTON_ITERS):
        ev = math.exp(v)
        v = max(v - (v * ev - w) / (ev * (v + 1.0)), 0.0)
    return v


def _cell_times_scalar(betas, phis, floors, active, budget: float):
    """Per-cell optimum in plain python; fast for the few-vehicle cells."""
    n = len(betas)
    taus = [max(betas[i], floors[i]) if active[i] else 0.0 for i in range(n)]
    if sum(taus) <= budget + 1e-12:
        return taus
    u_hi = [max(betas[i] / floors[i], 1.0) if active[i] and floors[i] > 0 else 1.0
            for i in range(n)]
    theta_hi = max((phis[i] * math.exp(u_hi[i]) * (u_hi[i] - 1.0)
                    for i in range(n) if active[i]), default=0.0) + 1.0
    t_lo, t_hi = 0.0, theta_hi
    for _ in range(_THETA_ITERS):
        theta = 0.5 * (t_lo + t_hi)
        s = 0.0
        for i in range(n):
            if not active[i]:
                continue
            u = min(1.0 + _lambert_w_scalar(theta / (phis[i] * math.e)), u_hi[i])
            s += max(betas[i] / u, floors[i])
        if s > budget:
            t_lo = theta
        else:
            t_hi = theta
    out = [0.0] * n
    total = 0.0
    for i in range(n):
        if active[i]:
            u = min(1.0 + _lambert_w_scalar(t_hi / (phis[i] * math.e)), u_hi[i])
            out[i] = max(betas[i] / u, floors[i])
            total += out[i]
    if total > budget:
        scale = budget / total
        out = [max(v * scale, floors[i] if active[i] else 0.0)
               for i, v in enumerate(out)]
    return out


def optimal_cell_times(loads: np.ndarray, phis: np.ndarray, radio: RadioParams,
                       budget: float = 1.0):
    """Energy-optimal TDMA shares for every (slot, BS) cell.

    ``loads`` and ``phis`` have shape (K, N, M); cell (k, m) allocates
    shares to the N vehicles for their ``loads[k, :, m]`` bits, minimizing
    sum Phi * tau * 2**(load / (tau T_s B)) subject to the unit cell budget
    and the per-pair peak-power floor. Returns (tau (K, N, M), infeasible
    (K, M) bool); infeasible cells get their floors so callers can report.
    """
    c = radio.bits_per_share
    loads = np.asarray(loads, dtype=float)
    phis = np.asarray(phis, dtype=float)
    beta = loads * (LN2 / c)
    active = beta > 0.0
    ln_ratio = np.log(np.maximum(radio.p_max_w / phis, 1e-300))
    bad_pair = active & (ln_ratio <= 0.0)       # cannot carry data at any power
    floor = np.where(active & ~bad_pair, beta / np.maximum(ln_ratio, 1e-300), 0.0)
    floor = np.where(bad_pair, np.inf, floor)

    tau = np.where(active, np.maximum(beta, floor), 0.0)
    cell_sum = np.where(np.isfinite(tau), tau, np.inf).sum(axis=1)   # (K, M)
    infeasible = (floor.sum(axis=1, where=np.isfinite(floor)) > budget + 1e-12) \
        | np.any(bad_pair, axis=1)
    over = (cell_sum > budget + 1e-12) & ~infeasible
    if np.any(over):
        ks, ms = np.nonzero(over)
        if len(ks) * beta.shape[1] <= 48:
            for k, m in zip(ks, ms):
                tau[k, :, m] = _cell_times_scalar(
                    beta[k, :, m].tolist(), phis[k, :, m].tolist(),
                    floor[k, :, m].tolist(), active[k, :, m].tolist(), budget)
        else:
            b = beta[ks, :, ms]                 # (Q, N)
            p = phis[ks, :, ms]
            lo_f = floor[ks, :, ms]
            act = active[ks, :, ms]
            # Responsive vehicles move along u(theta) between the energy
            # optimum (u = 1) and the power floor; pinned ones sit at it.
            u_hi = np.where(act, np.maximum(b / np.maximum(lo_f, 1e-300), 1.0), 1.0)
            theta_hi = np.max(np.where(act, p * np.exp(u_hi) * (u_hi - 1.0), 0.0),
                              axis=1) + 1.0
            t_lo = np.zeros(len(ks))
            t_hi = theta_hi
            for _ in range(_THETA_ITERS):
                theta = 0.5 * (t_lo + t_hi)
                u = 1.0 + _lambert_w(theta[:, None] / (p * math.e))
                u = np.minimum(u, u_hi)
                tau_q = np.where(act, np.maximum(b / u, lo_f), 0.0)
                s = tau_q.sum(axis=1)
                too_big = s > budget
                t_lo = np.where(too_big, theta, t_lo)
                t_hi = np.where(too_big, t_hi, theta)
            theta = t_hi
            u = np.minimum(1.0 + _lambert_w(theta[:, None] / (p * math.e)), u_hi)
            tau_q = np.where(act, np.maximum(b / u, lo_f), 0.0)
            # rescale any hairline overshoot of the budget onto responsive slots
            s = tau_q.sum(axis=1)
            scale = np.where(s > budget, budget / np.maximum(s, 1e-300), 1.0)
            tau_q = np.maximum(tau_q * scale[:, None], np.where(act, lo_f, 0.0))
            tau[ks, :, ms] = tau_q
    tau = np.where(np.isfinite(tau), tau, 0.0)
    return tau, infeasible


def cell_energy(loads: np.ndarray, tau: np.ndarray, phis: np.ndarray,
                radio: RadioParams) -> np.ndarray:
    """Summed P*tau energy of every cell given shares; shapes as above."""
    c = radio.bits_per_share
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        expo = np.where(tau > 0, loads / np.maximum(tau, 1e-300) / c, 0.0)
        term = np.where(loads > 0,
                        phis * tau * np.exp2(np.minimum(expo, _EXP_CLAMP / LN2)),
                        0.0)
    return term.sum(axis=1)


# ---------------------------------------------------------------------------
# relaxed association/time solve

def _relaxed_objective(e, tau_hat, q, phis, cap_exp):
    """omega_1-free relaxed energy with a linear charge on peak-power overshoot.

    +inf when data rides a zero share. ``cap_exp`` is log2(P_max / Phi);
    the overshoot charge keeps iterates away from pairs they cannot use
    (the returned allocation is re-projected exactly afterwards).
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        load = q * e
        broken = (load > 0) & (tau_hat <= 0)
        expo = np.where(tau_hat > 0, load / np.maximum(tau_hat, 1e-300), 0.0)
        expo = np.minimum(expo, _EXP_CLAMP / LN2)
        term = np.where(load > 0, phis * tau_hat * np.exp2(expo), 0.0)
        viol = np.maximum(load - tau_hat * cap_exp, 0.0)
    if np.any(broken):
        return np.inf
    return float(term.sum() + _POWER_PENALTY * viol.sum())


def solve_bs_time_relaxed(rates: np.ndarray, phis: np.ndarray, radio: RadioParams,
                          settings: SolverSettings = DEFAULT_SETTINGS,
                          init=None):
    """Convex relaxation of the joint association/time problem.

    ``rates`` is (K, N); ``phis`` is (K, N, M). Association entries are
    relaxed to data fractions with per-vehicle rows on the simplex, and
    the per-pair time matrix obeys the per-BS unit budget. Projected
    gradient iterations handle the simplex geometry; a final exact
    per-cell pass pins the time matrix to the optimum for the returned
    fractions and enforces the peak-power floors. ``init`` warm-starts
    the iterates with a previous (fractions, tau_hat) pair.

    Returns (fractions (K, N, M), tau_hat (K, N, M)).
    """
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    K, N = rates.shape
    M = phis.shape[2]
    q = (rates / radio.bits_per_share)[:, :, None]        # exponent loads
    e = np.full((K, N, M), 1.0 / M)
    if not np.any(rates > 0):
        # degenerate instance: nothing to carry, zero shares by convention
        return e, np.zeros((K, N, M))
    if M == 1 or (rates > 0).sum() == 1:
        # forced or contention-free association: cheapest usable BS exactly
        e = _sanitize_fractions(round_association(1.0 / np.maximum(phis, 1e-300)),
                                q, phis, radio)
        tau_exact, infeasible = optimal_cell_times(e * rates[:, :, None], phis, radio)
        if not np.any(infeasible):
            return e, tau_exact
    cap_exp = np.log2(np.maximum(radio.p_max_w / phis, 1e-300))
    tau_hat = np.full((K, N, M), 1.0 / N)
    if init is not None:
        e = np.array(init[0], dtype=float, copy=True)
        tau_hat = np.maximum(np.array(init[1], dtype=float, copy=True), 1e-9)

    def objective(ee, tt):
        return _relaxed_objective(ee, tt, q, phis, cap_exp)

    f_cur = objective(e, tau_hat)
    step = 1.0
    stall = 0
    argmax_stable = 0
    # tiny (single-slot) instances settle their rounding pattern quickly
    stable_needed = 3 if K * N * M <= 16 else 5
    last_argmax = np.argmax(e, axis=2)
    for _ in range(settings.max_gradient_iters):
        with np.errstate(over="ignore"):
            u = np.where(tau_hat > 0, q * e / np.maximum(tau_hat, 1e-300), 0.0)
            u = np.minimum(u, _EXP_CLAMP / LN2)
            grow = np.exp2(u)
            violating = (q * e - tau_hat * cap_exp) > 0
            g_e = phis * q * LN2 * grow + _POWER_PENALTY * q * violating
            g_t = phis * grow * (1.0 - u * LN2) \
                - _POWER_PENALTY * cap_exp * violating
        accepted = False
        for _ in range(40):
            e_new = project_rows_to_simplex(e - step * g_e)
            t_candidate = tau_hat - step * g_t
            t_new = np.swapaxes(project_rows_to_capped_simplex(
                np.swapaxes(t_candidate, 1, 2)), 1, 2)
            f_new = objective(e_new, t_new)
            if f_new <= f_cur:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        moved = max(np.max(np.abs(e_new - e)), np.max(np.abs(t_new - tau_hat)))
        gain = f_cur - f_new
        e, tau_hat, f_cur = e_new, t_new, f_new
        step = min(step * 2.0, 1e6)
        if gain <= settings.gradient_tolerance * max(abs(f_cur), 1.0) and moved < 1e-12:
            stall += 1
            if stall >= 3:
                break
        else:
            stall = 0
        # the fractional point only feeds the argmax rounding downstream;
        # once that pattern settles and progress is marginal, stop early
        cur_argmax = np.argmax(e, axis=2)
        if np.array_equal(cur_argmax, last_argmax) \
                and gain <= 100.0 * settings.gradient_tolerance * max(abs(f_cur), 1.0):
            argmax_stable += 1
            if argmax_stable >= stable_needed:
                break
        else:
            argmax_stable = 0
            last_argmax = cur_argmax

    e = _sanitize_fractions(e, q, phis, radio)
    loads = e * rates[:, :, None]
    tau_exact, infeasible = optimal_cell_times(loads, phis, radio)
    if np.any(infeasible):
        # fall back to each vehicle's cheapest BS before declaring defeat
        e = _sanitize_fractions(round_association(1.0 / np.maximum(phis, 1e-300)),
                                q, phis, radio)
        tau_exact, infeasible = optimal_cell_times(e * rates[:, :, None], phis, radio)
        if np.any(infeasible):
            k, m = np.argwhere(infeasible)[0]
            raise InfeasibleAllocation(
                f"rates exceed aggregate capacity at BS {int(m)}, window slot {int(k)}")
    return e, tau_exact


def _sanitize_fractions(e: np.ndarray, q: np.ndarray, phis: np.ndarray,
                        radio: RadioParams) -> np.ndarray:
    """Zero unusable (over-peak-power) pairs and renormalize loaded rows."""
    usable = phis < radio.p_max_w
    loaded = np.broadcast_to(q > 0, e.shape)
    e = np.where(loaded & ~usable, 0.0, e)
    e = np.where(np.abs(e) < 1e-12, 0.0, e)
    sums = e.sum(axis=2, keepdims=True)
    dead = sums <= 0
    if np.any(dead):
        e = np.where(np.broadcast_to(dead, e.shape), 1.0 / e.shape[2], e)
        sums = e.sum(axis=2, keepdims=True)
    return e / sums


def round_association(fractional: np.ndarray) -> np.ndarray:
    """One-hot rows at the per-row argmax; ties go to the lowest BS index."""
    fractional = np.asarray(fractional, dtype=float)
    idx = np.argmax(fractional, axis=-1)
    out = np.zeros_like(fractional)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def solve_time_given_association(assoc: np.ndarray, rates: np.ndarray,
                                 phis: np.ndarray, radio: RadioParams) -> np.ndarray:
    """Per-BS convex time allocation for a binary association.

    ``assoc`` is (K, N, M) one-hot, ``rates`` (K, N), ``phis`` (K, N, M).
    Vehicles with zero rate get zero share. Raises InfeasibleAllocation
    naming the cell when some (BS, slot) cannot carry its assigned rates.
    """
    assoc = np.asarray(assoc, dtype=float)
    loads = assoc * np.asarray(rates, dtype=float)[:, :, None]
    tau, infeasible = optimal_cell_times(loads, phis, radio)
    if np.any(infeasible):
        k, m = np.argwhere(infeasible)[0]
        raise InfeasibleAllocation(
            f"BS {int(m)} cannot carry its assigned rates in window slot {int(k)}")
    return tau.sum(axis=2)


# ---------------------------------------------------------------------------
# per-vehicle throughput optimization

def _window_objective(rates: np.ndarray, budget, taus: np.ndarray,
                      phis: np.ndarray, weights: CostWeights, radio: RadioParams,
                      arrival_rel):
    """Deterministic rollout cost of candidate rate plans.

    ``rates``: (C, K); ``taus``/``phis`` broadcast against it; ``budget``
    and ``arrival_rel`` may be scalars or per-row vectors. arrival_rel < 0
    means the budget already sits in the buffer at window slot 0;
    otherwise it is injected during that window slot. Returns
    (objective, delay, energy, residual), each shaped (C,). Energy is in
    P*tau units (T_s absorbed).
    """
    rates = np.atleast_2d(rates)
    C, K = rates.shape
    c = radio.bits_per_share
    budget = np.broadcast_to(np.asarray(budget, dtype=float), (C,))
    arrival_rel = np.broadcast_to(np.asarray(arrival_rel, dtype=np.int64), (C,))
    cum = np.cumsum(rates, axis=1)
    prior = np.concatenate([np.zeros((C, 1)), cum[:, :-1]], axis=1)
    remaining = np.maximum(budget[:, None] - prior, 0.0)
    eff = np.minimum(rates, remaining)
    charge_from = np.maximum(arrival_rel + 1, 0)
    tol = 1e-12 * np.maximum(budget, 1.0)
    positive = (remaining > tol[:, None]) \
        & (np.arange(K)[None, :] >= charge_from[:, None])
    delay = positive.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        expo = np.where(taus > 0, eff / np.maximum(taus, 1e-300) / c, 0.0)
        term = np.where((eff > 0) & (taus > 0),
                        phis * taus * np.exp2(np.minimum(expo, _EXP_CLAMP / LN2)),
                        0.0)
    energy = term.sum(axis=1)
    residual = np.maximum(budget - cum[:, -1], 0.0)
    obj = delay + weights.energy_weight * energy + weights.residual_weight * residual
    return obj, delay, energy, residual


def rate_caps(taus: np.ndarray, phis: np.ndarray, radio: RadioParams) -> np.ndarray:
    """Peak-power rate caps per slot; zero where tau is zero."""
    return radio_mod.max_rate(np.asarray(taus, dtype=float),
                              np.asarray(phis, dtype=float), radio.p_max_w, radio)


def _waterfill_batched(budget: float, taus, phis, caps, masks, omega1p, c):
    """Equal-marginal water-filling for each usable-slot mask.

    ``masks`` is (C, K) bool; returns (rates (C, K), feasible (C,)).
    Bisection runs on the shared KKT multiplier in log2 space; the
    leftover balance (below the bisection tolerance) lands on the
    cheapest interior slot so the totals match the budget exactly.
    """
    masks = np.atleast_2d(masks)
    C, K = masks.shape
    coef = taus * c                                     # bits per unit log2-level
    la = np.where(coef > 0, np.log2(np.maximum(omega1p * phis * LN2, 1e-300)), 0.0)
    lb = np.where((coef > 0) & (caps > 0), la + caps / np.maximum(coef, 1e-300), -np.inf)
    usable = masks & (coef > 0) & (caps > 0)
    cap_sum = np.where(usable, caps, 0.0).sum(axis=1)
    feasible = cap_sum >= budget * (1.0 - 1e-12)
    if budget <= 0:
        return np.zeros((C, K)), np.ones(C, dtype=bool)

    lx_lo = np.where(usable, la, np.inf).min(axis=1)
    lx_hi = np.where(usable, lb, -np.inf).max(axis=1)
    lx_lo = np.where(np.isfinite(lx_lo), lx_lo, 0.0)
    lx_hi = np.where(np.isfinite(lx_hi) & (lx_hi > lx_lo), lx_hi, lx_lo + 1.0)
    lo, hi = lx_lo.copy(), lx_hi.copy()
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        r = np.clip(coef * (mid[:, None] - la), 0.0, caps)
        tot = np.where(usable, r, 0.0).sum(axis=1)
        under = tot < budget
        lo = np.where(under, mid, lo)
        hi = np.where(under, hi, mid)
    mid = 0.5 * (lo + hi)
    rates = np.where(usable, np.clip(coef * (mid[:, None] - la), 0.0, caps), 0.0)
    # exact balance: push the residue onto the cheapest slots with headroom
    for i in range(C):
        if not feasible[i]:
            continue
        delta = budget - rates[i].sum()
        if delta == 0.0:
            continue
        idx = np.nonzero(usable[i])[0]
        order = idx[np.argsort(phis[idx], kind="stable")]
        interior = [j for j in order if 0.0 < rates[i, j] < caps[j]]
        scan = interior + [j for j in order if j not in interior]
        for j in scan:
            new = min(max(rates[i, j] + delta, 0.0), caps[j])
            delta -= new - rates[i, j]
            rates[i, j] = new
            if delta == 0.0:
                break
    return rates, feasible


def solve_throughput_case1(d: float, taus, phis, t_f: int, weights: CostWeights,
                           radio: RadioParams, caps=None) -> np.ndarray:
    """Water-filling rates completing ``d`` bits by window slot ``t_f``.

    Slots after ``t_f`` and slots without time share get zero; raises
    InfeasibleCompletion when the usable caps cannot absorb ``d``.
    """
    taus = np.asarray(taus, dtype=float)
    phis = np.asarray(phis, dtype=float)
    if caps is None:
        caps = rate_caps(taus, phis, radio)
    mask = np.zeros(taus.shape[0], dtype=bool)
    mask[:t_f + 1] = True
    omega1p = weights.energy_weight / radio.bits_per_share
    rates, feasible = _waterfill_batched(d, taus, phis, caps, mask[None, :],
                                         omega1p, radio.bits_per_share)
    if not feasible[0]:
        raise InfeasibleCompletion(
            f"caps through window slot {t_f} cannot absorb {d} bits")
    return rates[0]


def solve_throughput_case2(d: float, taus, phis, weights: CostWeights,
                           radio: RadioParams, caps=None,
                           usable=None) -> np.ndarray:
    """Closed-form partial-delivery rates trading energy against the residue.

    Per slot independently: zero when the zero-rate marginal already
    exceeds the residual weight, the cap when even the cap marginal is
    below it, otherwise the interior log ratio; then trimmed from the
    most expensive slots so the total never exceeds ``d``.
    """
    taus = np.asarray(taus, dtype=float)
    phis = np.asarray(phis, dtype=float)
    if caps is None:
        caps = rate_caps(taus, phis, radio)
    if usable is None:
        usable = np.ones(taus.shape[0], dtype=bool)
    c = radio.bits_per_share
    omega1p = weights.energy_weight / c
    w2 = weights.residual_weight
    a = omega1p * phis * LN2
    cap_expo = np.where(taus > 0, caps / np.maximum(taus * c, 1e-300), 0.0)
    b = a * np.exp2(np.minimum(cap_expo, _EXP_CLAMP / LN2))
    rates = np.zeros(taus.shape[0])
    live = usable & (taus > 0) & (caps > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = taus * c * np.log2(np.maximum(w2 / np.maximum(a, 1e-300), 1e-300))
    rates[live] = np.where(a[live] >= w2, 0.0,
                           np.where(b[live] <= w2, caps[live],
                                    np.clip(interior[live], 0.0, caps[live])))
    excess = rates.sum() - d
    if excess > 0:
        order = np.argsort(-phis, kind="stable")
        for j in order:
            if excess <= 0:
                break
            cut = min(rates[j], excess)
            rates[j] -= cut
            excess -= cut
    return rates


@dataclass
class ThroughputPlan:
    rates: np.ndarray
    objective: float
    delay: float
    energy: float
    residual: float


def optimize_vehicle_window(budget: float, taus, phis, weights: CostWeights,
                            radio: RadioParams, arrival_rel: int = -1,
                            caps=None, power_capped: bool = True) -> ThroughputPlan:
    """Best per-slot rates for one vehicle over a window.

    Enumerates completion slots for the exact-delivery case, solves the
    abandoned-delivery closed form once, and returns the plan whose
    deterministic rollout cost (slot charges + weighted energy + weighted
    residue) is smallest. ``arrival_rel`` as in _window_objective. With
    ``power_capped`` false the peak-power caps are dropped (used for
    future rate tails, which assume ample peak power); the budget itself
    still bounds every slot.
    """
    taus = np.asarray(taus, dtype=float)
    phis = np.asarray(phis, dtype=float)
    K = taus.shape[0]
    if caps is None:
        if power_capped:
            caps = rate_caps(taus, phis, radio)
        else:
            caps = np.where(taus > 0, max(budget, 0.0), 0.0)
    first = max(arrival_rel, 0)
    usable = np.zeros(K, dtype=bool)
    usable[first:] = True
    usable &= (taus > 0) & (caps > 0)
    if budget <= 0:
        return ThroughputPlan(np.zeros(K), 0.0, 0.0, 0.0, 0.0)

    omega1p = weights.energy_weight / radio.bits_per_share
    candidates = np.nonzero(usable & (np.cumsum(np.where(usable, caps, 0.0))
                                      >= budget * (1 - 1e-12)))[0]
    plans = []
    if candidates.size:
        masks = usable[None, :] & (np.arange(K)[None, :] <= candidates[:, None])
        rates, feasible = _waterfill_batched(budget, taus, phis, caps, masks,
                                             omega1p, radio.bits_per_share)
        rates = rates[feasible]
        if rates.size:
            obj, delay, energy, residual = _window_objective(
                rates, budget, taus, phis, weights, radio, arrival_rel)
            best = int(np.argmin(obj))
            plans.append(ThroughputPlan(rates[best], float(obj[best]),
                                        float(delay[best]), float(energy[best]),
                                        float(residual[best])))
    r2 = solve_throughput_case2(budget, taus, phis, weights, radio,
                                caps=caps, usable=usable)
    obj, delay, energy, residual = _window_objective(
        r2[None, :], budget, taus, phis, weights, radio, arrival_rel)
    plans.append(ThroughputPlan(r2, float(obj[0]), float(delay[0]),
                                float(energy[0]), float(residual[0])))
    return min(plans, key=lambda p: p.objective)


def solve_vehicle_throughput(d: float, taus, phis, weights: CostWeights,
                             radio: RadioParams) -> np.ndarray:
    """Spec surface: best rates for a task of ``d`` bits already buffered."""
    return optimize_vehicle_window(d, taus, phis, weights, radio).rates


# ---------------------------------------------------------------------------
# the pre-allocation problem

def average_position_phis(scenario: Scenario, state: SystemState) -> tuple:
    """Average trajectories and their Phi tables for slots state.slot..T.

    Returns (positions (K, N, 2), phis (K, N, M)).
    """
    T = scenario.time.horizon_slots
    s0 = state.slot
    K = T - s0 + 1
    pos = np.empty((K, scenario.n_vehicles, 2))
    for n in range(scenario.n_vehicles):
        pos[:, n, :] = mobility.average_trajectory(
            scenario.routes[n], scenario.transitions[n],
            int(state.positions[n]), s0, T)
    dist = np.linalg.norm(pos[:, :, None, :] - scenario.bs_positions[None, None, :, :],
                          axis=3)
    dist = np.maximum(dist, radio_mod.DEFAULT_MIN_DISTANCE_M)
    scale = radio_mod.phi_scale(scenario.radio,
                                scenario.radio.noise_vector(scenario.n_bs))
    phis = np.asarray(scale) * dist ** scenario.radio.path_loss_exp
    return pos, phis


def vehicle_budget(scenario: Scenario, state: SystemState, n: int):
    """(budget bits, window-relative arrival index) for the remaining window."""
    from .dynamics import window_budget

    return window_budget(scenario, state, n)


def _plan_objective(scenario, state, phis_sel, taus, rates) -> float:
    budgets, arrivals = zip(*[vehicle_budget(scenario, state, n)
                              for n in range(scenario.n_vehicles)])
    obj, _, _, _ = _window_objective(rates.T, np.array(budgets), taus.T,
                                     phis_sel.T, scenario.weights,
                                     scenario.radio, np.array(arrivals))
    return float(obj.sum())


def _select_phis(phis: np.ndarray, assoc: np.ndarray) -> np.ndarray:
    return np.take_along_axis(phis, np.argmax(assoc, axis=2)[:, :, None],
                              axis=2)[:, :, 0]


def _initial_rates(scenario, state, phis) -> np.ndarray:
    """Cap-weighted split of each budget over its usable slots.

    Caps assume an even 1/N share so the opening point can always be
    carried no matter how the vehicles end up sharing cells.
    """
    K, N, _ = phis.shape
    rates = np.zeros((K, N))
    for n in range(N):
        budget, arrival_rel = vehicle_budget(scenario, state, n)
        if budget <= 0:
            continue
        best_phi = phis[:, n, :].min(axis=1)
        caps = rate_caps(np.full(K, 1.0 / N), best_phi, scenario.radio)
        caps[:max(arrival_rel, 0)] = 0.0
        total = caps.sum()
        if total <= 0:
            continue
        rates[:, n] = np.minimum(caps * (budget / total), caps)
    return rates


def solve_preallocation(scenario: Scenario, state: SystemState, super_slot: int,
                        settings: SolverSettings = DEFAULT_SETTINGS) -> ReferenceSchedule:
    """Deterministic plan for all remaining slots along average trajectories.

    Alternates the relaxed-and-rounded association/time step with the
    per-vehicle water-filling throughput step. A candidate that fails to
    improve the rollout objective is discarded, so the objective is
    monotone non-increasing across alternations.
    """
    expected_slot = (super_slot - 1) * scenario.time.super_slot_len + 1
    if state.slot != expected_slot:
        raise ValueError(f"state.slot {state.slot} does not open super slot "
                         f"{super_slot} (expected {expected_slot})")
    basis_pos, phis = average_position_phis(scenario, state)
    return solve_deterministic_plan(scenario, state, basis_pos, phis, settings)


def solve_deterministic_plan(scenario: Scenario, state: SystemState,
                             basis_pos: np.ndarray, phis: np.ndarray,
                             settings: SolverSettings = DEFAULT_SETTINGS
                             ) -> ReferenceSchedule:
    """Alternating solve of the deterministic problem at given positions."""
    K, N, M = phis.shape

    rates = _initial_rates(scenario, state, phis)
    assoc = round_association(np.full((K, N, M), 1.0 / M))
    taus = np.zeros((K, N))
    if not np.any(rates > 0):
        return ReferenceSchedule(state.slot, assoc, taus, rates, basis_pos)
    obj = math.inf
    warm = None
    for _ in range(settings.max_alternations):
        # (a) association and time, at fixed throughput
        assoc_stable = False
        try:
            frac, tau_frac = solve_bs_time_relaxed(rates, phis, scenario.radio,
                                                   settings, init=warm)
            warm = (frac, tau_frac)
            assoc_new = round_association(frac)
            assoc_stable = math.isfinite(obj) and np.array_equal(assoc_new, assoc)
            taus_new = solve_time_given_association(assoc_new, rates, phis,
                                                    scenario.radio)
            cand = _plan_objective(scenario, state, _select_phis(phis, assoc_new),
                                   taus_new, rates)
            if cand <= obj or not math.isfinite(obj):
                assoc, taus, obj = assoc_new, taus_new, cand
        except InfeasibleAllocation:
            if not math.isfinite(obj):
                # cheapest-BS association always carries the opening rates
                assoc_new = round_association(1.0 / np.maximum(phis, 1e-300))
                taus_new = solve_time_given_association(assoc_new, rates, phis,
                                                        scenario.radio)
                assoc, taus = assoc_new, taus_new
                obj = _plan_objective(scenario, state,
                                      _select_phis(phis, assoc), taus, rates)
        # (b) throughput, at fixed association and time
        phis_sel = _select_phis(phis, assoc)
        rates_new = rates.copy()
        for n in range(N):
            budget, arrival_rel = vehicle_budget(scenario, state, n)
            plan = optimize_vehicle_window(budget, taus[:, n], phis_sel[:, n],
                                           scenario.weights, scenario.radio,
                                           arrival_rel)
            rates_new[:, n] = plan.rates
        new_obj = _plan_objective(scenario, state, phis_sel, taus, rates_new)
        if new_obj <= obj:
            rates = rates_new
            gain = obj - new_obj
            obj = new_obj
            if gain <= settings.alternation_tolerance * max(abs(obj), 1.0) \
                    and assoc_stable:
                break
        else:
            break
    return ReferenceSchedule(state.slot, assoc, taus, rates, basis_pos)


def schedule_to_csv(schedule: ReferenceSchedule, path) -> None:
    """Dump a reference schedule as ``slot,vehicle,bs,tau,rate_bits`` rows."""
    import csv

    bs = schedule.chosen_bs()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "vehicle", "bs", "tau", "rate_bits"])
        for k in range(schedule.n_slots):
            for n in range(schedule.rates.shape[1]):
                writer.writerow([schedule.start_slot + k, n, int(bs[k, n]),
                                 repr(float(schedule.time_shares[k, n])),
                                 repr(float(schedule.rates[k, n]))])
