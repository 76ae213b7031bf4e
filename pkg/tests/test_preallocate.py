import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from veh_offload.dynamics import initial_state
from veh_offload.mobility import Route, TransitionMatrix
from veh_offload.preallocate import (InfeasibleAllocation, InfeasibleCompletion,
                                     SolverSettings, _window_objective,
                                     optimal_cell_times, optimize_vehicle_window,
                                     project_rows_to_capped_simplex,
                                     project_rows_to_simplex, rate_caps,
                                     round_association, schedule_to_csv,
                                     solve_bs_time_relaxed, solve_preallocation,
                                     solve_throughput_case1,
                                     solve_throughput_case2,
                                     solve_time_given_association,
                                     solve_vehicle_throughput)
from veh_offload.radio import LN2, RadioParams
from veh_offload.scenario import CostWeights

import oracles
from conftest import build_scenario

RADIO = RadioParams(bandwidth_hz=2e7, path_loss_const=1e6, path_loss_exp=4.0,
                    noise_plus_interference_w=1e-3, fading_mean_power=6.0,
                    p_max_w=5.0, slot_seconds=1.0)
WEIGHTS = CostWeights(2.0, 5.0)
C = RADIO.bits_per_share
PRECISE = SolverSettings(max_gradient_iters=20000, gradient_tolerance=1e-13,
                         alternation_tolerance=1e-10, max_alternations=12)


class TestProjections:
    @hyp_settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 99999), n=st.integers(1, 7))
    def test_simplex_rows(self, seed, n):
        x = np.random.default_rng(seed).normal(0, 3, (4, n))
        p = project_rows_to_simplex(x)
        assert np.all(p >= 0)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        # projection is idempotent
        assert np.allclose(project_rows_to_simplex(p), p, atol=1e-9)

    def test_simplex_matches_qp_oracle(self):
        import cvxpy as cp

        rng = np.random.default_rng(7)
        for _ in range(5):
            v = rng.normal(0, 2, 5)
            x = cp.Variable(5, nonneg=True)
            prob = cp.Problem(cp.Minimize(cp.sum_squares(x - v)),
                              [cp.sum(x) == 1])
            prob.solve(solver=cp.CLARABEL)
            assert np.allclose(project_rows_to_simplex(v[None, :])[0], x.value,
                               atol=1e-6)

    @hyp_settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 99999), n=st.integers(1, 7))
    def test_capped_simplex_rows(self, seed, n):
        x = np.random.default_rng(seed).normal(0.2, 1.5, (4, n))
        p = project_rows_to_capped_simplex(x)
        assert np.all(p >= 0)
        assert np.all(p.sum(axis=1) <= 1.0 + 1e-9)
        inside = x[np.all(x >= 0, axis=1) & (x.sum(axis=1) <= 1)]
        if inside.size:
            assert np.allclose(project_rows_to_capped_simplex(inside), inside)


class TestRoundAssociation:
    def test_majority(self):
        assert round_association(np.array([[0.7, 0.3]])).tolist() == [[1.0, 0.0]]

    def test_tie_lowest_index(self):
        assert round_association(np.array([[0.5, 0.5]])).tolist() == [[1.0, 0.0]]

    def test_binary_unchanged(self):
        e = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert np.array_equal(round_association(e), e)


class TestTimeGivenAssociation:
    def _solve_pair(self, r1, r2, phi1, phi2):
        assoc = np.ones((1, 2, 1))
        rates = np.array([[r1, r2]])
        phis = np.array([[[phi1], [phi2]]])
        return solve_time_given_association(assoc, rates, phis, RADIO)[0]

    def test_full_slot_for_heavy_single_vehicle(self):
        # rate above T_s B / ln 2 puts the per-slot optimum at the boundary
        rates = np.array([[3.2e7]])
        taus = solve_time_given_association(np.ones((1, 1, 1)), rates,
                                            np.array([[[0.1]]]), RADIO)
        assert taus[0, 0] == pytest.approx(1.0)

    def test_light_load_uses_interior_share(self):
        r = 0.5 * C                       # tau* = r ln2 / c = 0.347
        taus = solve_time_given_association(np.ones((1, 1, 1)),
                                            np.array([[r]]),
                                            np.array([[[0.1]]]), RADIO)
        assert taus[0, 0] == pytest.approx(r * LN2 / C, rel=1e-9)

    def test_symmetric_pair_splits_evenly(self):
        taus = self._solve_pair(3.2e7, 3.2e7, 0.1, 0.1)
        assert taus[0] == pytest.approx(0.5, rel=1e-9)
        assert taus[1] == pytest.approx(0.5, rel=1e-9)

    def test_zero_rate_gets_zero_share(self):
        taus = self._solve_pair(3.2e7, 0.0, 0.1, 0.1)
        assert taus[1] == 0.0

    def test_asymmetric_pair_matches_ternary_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(8):
            r1, r2 = rng.uniform(1.5e7, 3.5e7, 2)
            phi1, phi2 = rng.uniform(0.02, 0.8, 2)
            taus = self._solve_pair(r1, r2, phi1, phi2)
            (t1, t2), val = oracles.ternary_two_vehicle_cell(
                r1, r2, phi1, phi2, RADIO.p_max_w, C)
            mine = (phi1 * taus[0] * 2 ** (r1 / (taus[0] * C))
                    + phi2 * taus[1] * 2 ** (r2 / (taus[1] * C)))
            assert mine == pytest.approx(val, rel=1e-6)

    def test_infeasible_cell_is_named(self):
        # two heavy vehicles whose power floors cannot share one slot
        with pytest.raises(InfeasibleAllocation, match="BS 0 .* slot 0"):
            self._solve_pair(3e8, 3e8, 1.0, 1.0)


class TestOptimalCellTimes:
    def test_respects_power_floors(self):
        rng = np.random.default_rng(11)
        loads = rng.uniform(0, 1.2e7, (3, 4, 2))
        phis = rng.uniform(0.01, 0.5, (3, 4, 2))
        tau, infeasible = optimal_cell_times(loads, phis, RADIO)
        assert not np.any(infeasible)
        cap_exp = np.log2(RADIO.p_max_w / phis)
        need = loads / (C * cap_exp)
        assert np.all(tau >= np.where(loads > 0, need, 0.0) - 1e-9)
        assert np.all(tau.sum(axis=1) <= 1.0 + 1e-9)

    def test_overloaded_cell_flagged(self):
        loads = np.full((1, 4, 1), 4e7)
        phis = np.full((1, 4, 1), 1.0)
        _, infeasible = optimal_cell_times(loads, phis, RADIO)
        assert bool(infeasible[0, 0])


class TestRelaxedBsTime:
    def test_single_vehicle_single_bs(self):
        frac, tau = solve_bs_time_relaxed(np.array([[2.5e7]]),
                                          np.array([[[0.05]]]), RADIO)
        assert frac[0, 0, 0] == 1.0
        assert tau[0, 0, 0] > 0

    def test_degenerate_zero_rates(self):
        frac, tau = solve_bs_time_relaxed(np.zeros((2, 3)),
                                          np.full((2, 3, 2), 0.1), RADIO)
        assert np.allclose(frac, 1.0 / 2)
        assert np.all(tau == 0.0)

    def test_matches_cvxpy_oracle(self):
        rng = np.random.default_rng(5)
        rates = rng.uniform(1.5e7, 3.0e7, (1, 2))
        phis = rng.uniform(0.02, 0.4, (1, 2, 2))
        frac, tau = solve_bs_time_relaxed(rates, phis, RADIO, PRECISE)
        mine = float(np.sum(oracles.energy_terms(
            frac[0] * rates[0][:, None], tau[0], phis[0], C)))
        want = oracles.relaxed_bs_time_cvxpy(rates, phis, RADIO.p_max_w, C)
        assert mine == pytest.approx(want, rel=1e-4)

    def test_constraints_hold(self):
        rng = np.random.default_rng(9)
        rates = rng.uniform(0.0, 3e7, (4, 3))
        phis = rng.uniform(0.01, 0.6, (4, 3, 2))
        frac, tau = solve_bs_time_relaxed(rates, phis, RADIO)
        assert np.allclose(frac.sum(axis=2), 1.0, atol=1e-9)
        assert np.all(frac >= -1e-12)
        assert np.all(tau.sum(axis=1) <= 1.0 + 1e-9)
        # per-pair peak power on loaded pairs
        loads = frac * rates[:, :, None]
        live = loads > 0
        power = phis * 2.0 ** (loads / np.maximum(tau, 1e-300) / C)
        assert np.all(power[live] <= RADIO.p_max_w * (1 + 1e-9))


class TestCase1:
    def test_equal_conditions_split_evenly(self):
        k, d = 4, 8e7
        taus = np.full(k, 0.9)
        phis = np.full(k, 0.05)
        rates = solve_throughput_case1(d, taus, phis, k - 1, WEIGHTS, RADIO)
        assert np.allclose(rates, d / k, rtol=1e-9)

    def test_single_slot_takes_everything(self):
        rates = solve_throughput_case1(5e7, np.array([1.0]), np.array([0.05]),
                                       0, WEIGHTS, RADIO)
        assert rates[0] == pytest.approx(5e7)

    def test_balance_is_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            k = rng.integers(2, 7)
            taus = rng.uniform(0.2, 1.0, k)
            phis = rng.uniform(0.01, 0.5, k)
            caps = rate_caps(taus, phis, RADIO)
            d = 0.7 * caps.sum()
            rates = solve_throughput_case1(d, taus, phis, k - 1, WEIGHTS, RADIO)
            assert math.fsum(rates) == pytest.approx(d, abs=1e-6)
            assert np.all(rates >= 0) and np.all(rates <= caps + 1e-9)

    def test_kkt_equal_marginals(self):
        rng = np.random.default_rng(4)
        omega1p = WEIGHTS.energy_weight / C
        for _ in range(20):
            k = int(rng.integers(3, 7))
            taus = rng.uniform(0.2, 1.0, k)
            phis = rng.uniform(0.01, 0.5, k)
            caps = rate_caps(taus, phis, RADIO)
            d = 0.6 * caps.sum()
            rates = solve_throughput_case1(d, taus, phis, k - 1, WEIGHTS, RADIO)
            interior = (rates > 1e-6 * d) & (rates < caps * (1 - 1e-9))
            if interior.sum() >= 2:
                marg = omega1p * phis * LN2 * 2.0 ** (rates / (taus * C))
                m = marg[interior]
                assert m.max() / m.min() - 1.0 < 1e-6

    def test_matches_grid_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            k = int(rng.integers(2, 6))
            taus = rng.uniform(0.3, 1.0, k)
            phis = rng.uniform(0.02, 0.4, k)
            caps = rate_caps(taus, phis, RADIO)
            d = 0.55 * caps.sum()
            rates = solve_throughput_case1(d, taus, phis, k - 1, WEIGHTS, RADIO)
            mine = WEIGHTS.energy_weight * float(
                np.sum(oracles.smooth_energy(rates, taus, phis, C)))
            want = oracles.case1_grid_oracle(d, taus, phis, caps,
                                             WEIGHTS.energy_weight, C, units=72)
            assert mine <= want * (1 + 1e-9)
            assert mine == pytest.approx(want, rel=1e-3)

    def test_infeasible_completion_raises(self):
        with pytest.raises(InfeasibleCompletion):
            solve_throughput_case1(1e12, np.array([0.5, 0.5]),
                                   np.array([0.1, 0.1]), 1, WEIGHTS, RADIO)


class TestCase2:
    def test_expensive_slot_abandons(self):
        # omega_1' Phi ln2 >= omega_2 -> no transmission
        w = CostWeights(2.0, 2.0 / C * 0.9 * LN2)
        rates = solve_throughput_case2(1e8, np.array([1.0]), np.array([1.0]),
                                       w, RADIO)
        assert rates[0] == 0.0

    def test_cheap_slot_hits_cap(self):
        # marginal at the cap stays below omega_2 -> transmit at the cap
        taus = np.array([1.0])
        phis = np.array([0.05])
        caps = rate_caps(taus, phis, RADIO)
        omega1p = WEIGHTS.energy_weight / C
        w2 = omega1p * 2.0 ** (caps[0] / C) * phis[0] * LN2 * 2.0
        rates = solve_throughput_case2(2 * caps[0], taus, phis,
                                       CostWeights(2.0, w2), RADIO)
        assert rates[0] == pytest.approx(caps[0])

    def test_interior_log_ratio(self):
        taus = np.array([1.0])
        phis = np.array([0.05])
        omega1p = WEIGHTS.energy_weight / C
        w2 = 16.0 * omega1p * phis[0] * LN2       # interior by construction
        rates = solve_throughput_case2(1e9, taus, phis, CostWeights(2.0, w2),
                                       RADIO)
        expected = C * math.log2(w2 / (omega1p * phis[0] * LN2))
        assert rates[0] == pytest.approx(expected, rel=1e-12)

    def test_total_trimmed_to_budget(self):
        taus = np.full(3, 1.0)
        phis = np.full(3, 0.01)
        rates = solve_throughput_case2(4e7, taus, phis, WEIGHTS, RADIO)
        assert rates.sum() <= 4e7 * (1 + 1e-12)


class TestVehicleThroughput:
    def test_zero_budget(self):
        rates = solve_vehicle_throughput(0.0, np.full(4, 0.8), np.full(4, 0.1),
                                         WEIGHTS, RADIO)
        assert np.all(rates == 0.0)

    def test_huge_penalty_completes(self):
        taus = np.full(4, 0.9)
        phis = np.full(4, 0.05)
        caps = rate_caps(taus, phis, RADIO)
        d = 0.5 * caps.sum()
        rates = solve_vehicle_throughput(d, taus, phis,
                                         CostWeights(2.0, 1.0), RADIO)
        assert math.fsum(rates) == pytest.approx(d, rel=1e-9)

    def test_tiny_penalty_abandons(self):
        # expensive channels: transmitting anything costs more than the residue
        rates = solve_vehicle_throughput(1e8, np.full(4, 0.9), np.full(4, 3.0),
                                         CostWeights(2.0, 1e-12), RADIO)
        assert np.all(rates == 0.0)


def static_scenario(d_bits, n_slots, phi_target=0.05, n_vehicles=1, n_bs=1):
    """Motionless world: a single waypoint pinned at a chosen Phi."""
    from veh_offload.radio import phi_scale

    scale = phi_scale(RADIO)
    dist = (phi_target / scale) ** 0.25
    routes = [Route(np.array([[dist, 30.0 * n]]), 0) for n in range(n_vehicles)]
    trans = [TransitionMatrix(np.eye(1)) for _ in range(n_vehicles)]
    bs = np.stack([np.linspace(0, 10 * (n_bs - 1), n_bs), np.zeros(n_bs)], axis=1)
    return build_scenario(n_vehicles=n_vehicles, n_bs=n_bs, horizon=n_slots,
                          super_slot=n_slots, task_bits=d_bits, routes=routes,
                          transitions=trans, bs_positions=bs)


class TestSolvePreallocation:
    def test_zero_buffers_zero_plan(self):
        s = build_scenario(n_vehicles=2, n_bs=2, horizon=6, super_slot=6,
                           task_bits=0.0)
        sched = solve_preallocation(s, initial_state(s), 1)
        assert np.all(sched.rates == 0.0)
        assert np.all(sched.time_shares == 0.0)

    def test_static_symmetric_splits_evenly(self):
        # task big enough that the energy convexity beats the slot saving
        d = 1.2e8
        s = static_scenario(d, 2)
        sched = solve_preallocation(s, initial_state(s), 1)
        assert sched.rates[0, 0] == pytest.approx(d / 2, rel=1e-6)
        assert sched.rates[1, 0] == pytest.approx(d / 2, rel=1e-6)

    def test_monotone_vs_single_alternation(self):
        s = build_scenario(n_vehicles=2, n_bs=2, horizon=6, super_slot=6,
                           task_bits=5e8, seed=3)
        from veh_offload.preallocate import _plan_objective, _select_phis, \
            average_position_phis

        st = initial_state(s)
        _, phis = average_position_phis(s, st)

        def objective(sched):
            return _plan_objective(s, st, _select_phis(phis, sched.association),
                                   sched.time_shares, sched.rates)

        one = solve_preallocation(s, st, 1, SolverSettings(max_alternations=1))
        full = solve_preallocation(s, st, 1)
        assert objective(full) <= objective(one) * (1 + 1e-12)

    def test_one_vehicle_grid_oracle(self):
        # independent brute force: rate compositions x per-slot tau/BS grid
        s = build_scenario(n_vehicles=1, n_bs=2, horizon=5, super_slot=5,
                           task_bits=2.2e8, n_waypoints=5, seed=12)
        st = initial_state(s)
        sched = solve_preallocation(s, st, 1, PRECISE)
        from veh_offload.preallocate import (_plan_objective, _select_phis,
                                             average_position_phis)

        _, phis = average_position_phis(s, st)
        mine = _plan_objective(s, st, _select_phis(phis, sched.association),
                               sched.time_shares, sched.rates)

        d = s.tasks[0].size_bits
        units = 36
        grid = oracles.compositions(units, 5) * (d / units)
        tau_grid = np.linspace(0, 1, 41)[1:]
        # per (slot, bs, tau) energy for one unit pattern is separable
        best_energy = np.full(grid.shape[0], 0.0)
        for k in range(5):
            r_k = grid[:, k]
            e = np.full((grid.shape[0],), np.inf)
            for m in range(2):
                phi = phis[k, 0, m]
                cap_exp = math.log2(RADIO.p_max_w / phi)
                for tau in tau_grid:
                    cap = tau * C * cap_exp
                    term = phi * tau * 2.0 ** (r_k / (tau * C))
                    term = np.where(r_k <= cap + 1e-9, term, np.inf)
                    e = np.minimum(e, term)
            e = np.where(r_k > 0, e, 0.0)
            best_energy += e
        cum = np.cumsum(grid, axis=1)
        prior = np.concatenate([np.zeros((grid.shape[0], 1)), cum[:, :-1]], axis=1)
        delay = ((d - prior) > 1e-9 * d).sum(axis=1)
        totals = delay + s.weights.energy_weight * best_energy
        oracle_best = float(np.min(totals[np.isfinite(totals)]))
        assert mine <= oracle_best * (1 + 1e-2)

    def test_two_vehicle_grid_oracle(self):
        # 2 slots, 2 vehicles, 2 BSs: full joint enumeration
        s = build_scenario(n_vehicles=2, n_bs=2, horizon=2, super_slot=2,
                           task_bits=5e7, n_waypoints=3, seed=21)
        st = initial_state(s)
        sched = solve_preallocation(s, st, 1, PRECISE)
        from veh_offload.preallocate import (_plan_objective, _select_phis,
                                             average_position_phis)

        _, phis = average_position_phis(s, st)
        mine = _plan_objective(s, st, _select_phis(phis, sched.association),
                               sched.time_shares, sched.rates)

        d = s.tasks[0].size_bits
        r_grid = np.linspace(0, d, 33)
        tau_grid = np.array([0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0])
        best = math.inf
        for assoc in itertools.product(range(2), repeat=4):   # (n, k) -> bs
            for taus in itertools.product(tau_grid, repeat=4):
                tau_arr = np.array(taus).reshape(2, 2)        # (n, k)
                bs_arr = np.array(assoc).reshape(2, 2)
                ok = True
                for k in range(2):
                    for m in range(2):
                        tot = sum(tau_arr[n, k] for n in range(2)
                                  if bs_arr[n, k] == m)
                        if tot > 1 + 1e-12:
                            ok = False
                if not ok:
                    continue
                total = 0.0
                for n in range(2):
                    phis_sel = np.array([phis[k, n, bs_arr[n, k]]
                                         for k in range(2)])
                    caps = rate_caps(tau_arr[n], phis_sel, RADIO)
                    r0 = r_grid[r_grid <= caps[0] + 1e-9]
                    best_n = math.inf
                    for r_first in r0:
                        r_second = np.minimum(d - r_first, caps[1])
                        rates = np.array([[r_first, max(r_second, 0.0)]])
                        obj, _, _, _ = _window_objective(
                            rates, d, tau_arr[n], phis_sel, s.weights,
                            s.radio, -1)
                        best_n = min(best_n, float(obj[0]))
                    total += best_n
                best = min(best, total)
        assert mine <= best * (1 + 1e-2)

    def test_schedule_csv(self, tmp_path):
        s = build_scenario(n_vehicles=2, n_bs=2, horizon=4, super_slot=4,
                           task_bits=2e8)
        sched = solve_preallocation(s, initial_state(s), 1)
        out = tmp_path / "sched.csv"
        schedule_to_csv(sched, out)
        lines = out.read_text().splitlines()
        assert lines[0] == "slot,vehicle,bs,tau,rate_bits"
        assert len(lines) == 1 + 4 * 2
