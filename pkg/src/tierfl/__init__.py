"""Deterministic simulator and analysis toolkit for multi-tier federated
learning with tier-aware differential privacy."""

from .bounds import (BoundReport, bound_report, convergence_bound, layer_noise_terms,
                     max_step_scale, noise_gap, secure_prefix_bound, step_size)
from .control import (ControlDecision, ControlSettings, CostModel, ObjectiveWeights,
                      brute_force_control, delay_objective, energy_objective,
                      gap_objective, solve_control, tune_gamma)
from .data import (FederatedDataset, Minibatch, generate_synthetic, partition_csv,
                   sample_minibatch)
from .engine import (HFL_DP_LDP, HFL_NO_DP, M2FDP, PEDPFL_STAR, RunSpec,
                     TrainingSchedule, TrainingTrace, build_schedule, local_sgd_step,
                     run_baseline, run_training, sample_participants)
from .losses import (LossSpec, analytic_beta_bound, estimate_beta, global_gradient,
                     global_loss, intermediate_loss, local_loss, stochastic_gradient)
from .privacy import (DPConfig, NoiseLedger, composed_variance, default_alphas,
                      draw_noise, expected_propagated_variance, noise_sigma,
                      sensitivity_bound, simulate_root_noise, verify_node_protection)
from .topology import (TierTopology, TrustStats, ancestor_of, build_topology,
                       derive_trust_stats, trust_from_layer_ratios)

__version__ = "0.1.0"
