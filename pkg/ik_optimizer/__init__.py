__version__ = "0.1.0"

from .chain_model import KinematicChain, Pose, Quaternion, load_chain, parse_chain, serialize_chain
from .config import DatasetConfig, GaConfig, TrainConfig, Workspace, WORKSPACE_PRESETS
from .kinematics import fk, fk_batch, fk_jacobian, pose_error
from .dataset import Dataset, WorkspaceBounds, generate, split, estimate_volume, read_dataset, write_dataset
from .neural import DenseNet, IKModel, ModelKind, Normalizer, load_model, save_model, mlp_preset, gan_preset
from .training import GoalSet, TrainReport, cycle_loss, variance_loss, train_mlp, train_gan, epoch_sweep
from .IKSolver import IKSolver
from .solvers import SolutionBatch, Pipeline, HybridSolver, LookupSolver, ga_solve, refine, hybrid_solve, weighted_cost, \
    neural_solutions
from .evalbench import EvalReport, evaluate_single, evaluate_multi, bench_runtime
from .utils import IKUtils

__author__ = "huziqi"

__all__ = [
    "KinematicChain",
    "Pose",
    "Quaternion",
    "load_chain",
    "parse_chain",
    "serialize_chain",
    "DatasetConfig",
    "GaConfig",
    "TrainConfig",
    "Workspace",
    "WORKSPACE_PRESETS",
    "fk",
    "fk_batch",
    "fk_jacobian",
    "pose_error",
    "Dataset",
    "WorkspaceBounds",
    "generate",
    "split",
    "estimate_volume",
    "read_dataset",
    "write_dataset",
    "DenseNet",
    "IKModel",
    "ModelKind",
    "Normalizer",
    "load_model",
    "save_model",
    "mlp_preset",
    "gan_preset",
    "GoalSet",
    "TrainReport",
    "cycle_loss",
    "variance_loss",
    "train_mlp",
    "train_gan",
    "epoch_sweep",
    "IKSolver",
    "SolutionBatch",
    "Pipeline",
    "HybridSolver",
    "LookupSolver",
    "ga_solve",
    "refine",
    "hybrid_solve",
    "weighted_cost",
    "neural_solutions",
    "EvalReport",
    "evaluate_single",
    "evaluate_multi",
    "bench_runtime",
    "IKUtils",
]
