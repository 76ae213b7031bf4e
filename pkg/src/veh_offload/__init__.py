"""Two-time-scale task-offloading scheduler for vehicular networks."""

from .baselines import (Quantizer, StateBudgetExceeded, exact_dp, quantized_scenario,
                        run_da, run_pao, run_pas3, run_pp)
from .dynamics import (Action, InfeasibleAction, SystemState, execute_slot,
                       initial_state, phi_table, slot_cost, step_queue)
from .harness import (ExperimentConfig, ResultRow, apply_sweep, emit_results,
                      read_results, run_experiment, run_single_trial, run_trials,
                      sweep_super_slot, trial_rng)
from .metrics import TrialMetrics
from .mobility import (Route, TransitionMatrix, average_trajectory,
                       conditional_distance_moment, k_step_distribution,
                       sample_trajectory)
from .online import (PolicyTrace, revise_reference_post, run_proposed_policy,
                     sample_full_trajectories, solve_online_slot, update_reference)
from .preallocate import (InfeasibleAllocation, InfeasibleCompletion,
                          ReferenceSchedule, SolverSettings, round_association,
                          solve_bs_time_relaxed, solve_preallocation,
                          solve_throughput_case1, solve_throughput_case2,
                          solve_time_given_association, solve_vehicle_throughput)
from .radio import (RadioParams, fading_log_moment, max_rate, path_loss,
                    phi_factor, power_for_rate)
from .scenario import (CostWeights, Scenario, ScenarioError, TaskSpec, TimeGrid,
                       estimate_transition_matrix, load_scenario, save_scenario,
                       validate_scenario)
from .valueapprox import (RateTail, achievable_cost, evaluate_reference_cost,
                          expected_value)

__version__ = "0.1.0"
