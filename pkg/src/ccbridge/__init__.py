"""Neural conditioned-diffusion bridges via self-consistent control targets."""

from .sde import (EllipticityError, SdeProblem, SimulationDiverged, TimeGrid,
                  TrajectoryBatch, check_problem, load_trajectories,
                  replay_controlled, save_trajectories, simulate_controlled,
                  simulate_uncontrolled)
from .sensitivity import (AuxiliaryDriftMode, StepJacobian, step_jacobian,
                          step_jacobian_batch, transpose_apply)
from .targets import (AlphaSchedule, ScheduleDegenerateError, TargetBatch,
                      backward_targets, direct_targets_oracle, final_control)
from .control import (ControlEvaluator, ControlNet, NonFiniteLossError,
                      OptimizerState, adam_update, eval_control, eval_drift,
                      input_gradient, load_checkpoint, loss_and_gradient,
                      save_checkpoint)
from .trainer import (OracleSuite, TrainingConfig, TrainingLog, train,
                      training_step, write_log_csv)
from .oracles import (DensityTable1D, GroundTruthControl, cir_bridge_control,
                      cir_ground_truth, cir_transition_density, kl_to_base,
                      kl_to_truth, load_density_table, max_energy,
                      ou_bridge_control, ou_ground_truth, ou_transition_logpdf,
                      save_density_table, solve_backward_kolmogorov_1d)
from .bench import (ExperimentPreset, ResultsBundle, load_config, preset,
                    resolve_config, run_experiment, serialize_config)

__version__ = "0.1.0"

__all__ = [
    "AlphaSchedule", "AuxiliaryDriftMode", "ControlEvaluator", "ControlNet",
    "DensityTable1D", "EllipticityError", "ExperimentPreset",
    "GroundTruthControl", "NonFiniteLossError", "OptimizerState",
    "OracleSuite", "ResultsBundle", "ScheduleDegenerateError", "SdeProblem",
    "SimulationDiverged", "StepJacobian", "TargetBatch", "TimeGrid",
    "TrainingConfig", "TrainingLog", "TrajectoryBatch", "adam_update",
    "backward_targets", "check_problem", "cir_bridge_control",
    "cir_ground_truth", "cir_transition_density", "direct_targets_oracle",
    "eval_control", "eval_drift", "final_control", "input_gradient",
    "kl_to_base", "kl_to_truth", "load_checkpoint", "load_config",
    "load_density_table", "load_trajectories", "loss_and_gradient",
    "max_energy", "ou_bridge_control", "ou_ground_truth",
    "ou_transition_logpdf", "preset", "replay_controlled", "resolve_config",
    "run_experiment", "save_checkpoint", "save_density_table",
    "save_trajectories", "serialize_config", "simulate_controlled",
    "simulate_uncontrolled", "solve_backward_kolmogorov_1d", "step_jacobian",
    "step_jacobian_batch", "train", "training_step", "transpose_apply",
    "write_log_csv",
]
