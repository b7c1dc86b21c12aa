"""Multi-environment representation learning with tree-structured sparsity.

A shared nonlinear encoder maps inputs to latent features; per-environment
linear heads read the target off the latents. Environments are related by a
known rooted tree, and head weights are parameterized as a root head plus
per-arc mutation rows penalized toward sparsity. The package provides the
synthetic generative process, from-scratch training, disentanglement /
prediction / causal-effect metrics, the sparsity-pattern theory as
executable checks, and reproducible experiment recipes.
"""

from .env_tree import (
    EnvTree,
    TreeStructureError,
    build_balanced_binary,
    from_edge_list,
    parse_edge_list_text,
)
from .experiments import ExperimentSpec, run_recipe
from .fileio import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .identifiability import (
    AssumptionReport,
    MixingVerdict,
    SparsityPattern,
    check_assumptions,
    find_nonzero_permutation,
    fit_linear_map,
    is_perm_scaling,
    l0_norm,
    mixing_verdict,
)
from .metrics import (
    EvalReport,
    MccResult,
    ate_recovery_error,
    estimate_ate,
    mcc,
    mse,
)
from .model import (
    BaselineParams,
    LossBreakdown,
    TbrParams,
    baseline_loss_and_grads,
    env_weights,
    predict,
    tbr_loss_and_grads,
)
from .numerics import (
    AdamState,
    EncoderParams,
    adam_step,
    encoder_backward,
    encoder_forward,
    init_encoder,
    ols_solve,
)
from .simulator import (
    GroundTruth,
    MultiEnvDataset,
    SimConfig,
    compose_weights,
    generate_dataset,
    sample_deltas,
    sample_ground_truth,
    spawn_unseen_env,
)
from .trainer import TrainConfig, TrainReport, TrainingDiverged, split_dataset, sweep, train
from .verification import run_property_battery

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AssumptionReport",
    "BaselineParams",
    "EncoderParams",
    "EnvTree",
    "EvalReport",
    "ExperimentSpec",
    "GroundTruth",
    "LossBreakdown",
    "MccResult",
    "MixingVerdict",
    "MultiEnvDataset",
    "SimConfig",
    "SparsityPattern",
    "TbrParams",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "TreeStructureError",
    "adam_step",
    "ate_recovery_error",
    "baseline_loss_and_grads",
    "build_balanced_binary",
    "check_assumptions",
    "compose_weights",
    "encoder_backward",
    "encoder_forward",
    "env_weights",
    "estimate_ate",
    "find_nonzero_permutation",
    "fit_linear_map",
    "from_edge_list",
    "generate_dataset",
    "init_encoder",
    "is_perm_scaling",
    "l0_norm",
    "load_checkpoint",
    "load_dataset",
    "mcc",
    "mixing_verdict",
    "mse",
    "ols_solve",
    "parse_edge_list_text",
    "predict",
    "run_property_battery",
    "run_recipe",
    "sample_deltas",
    "sample_ground_truth",
    "save_checkpoint",
    "save_dataset",
    "spawn_unseen_env",
    "split_dataset",
    "sweep",
    "tbr_loss_and_grads",
    "train",
]
