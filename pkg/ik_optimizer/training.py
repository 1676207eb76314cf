"""Cycle-loss training of the single-solution (MLP) and multi-solution (GAN) models.

Predicted joint angles are mapped back through forward kinematics and the
reached pose is compared with the input pose; gradients flow through the
pose Jacobian into the network.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple
import json
import logging
import os
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .chain_model import KinematicChain
from .config import TrainConfig, with_overrides
from .dataset import Dataset
from .kinematics import fk_batch, fk_jacobian_batch, pose_errors_batch, resolve_quaternion_sign
from .neural import AdamOptimizer, DenseNet, Gradients, ModelKind, Normalizer, backward, forward

logger = logging.getLogger(__name__)

VALIDATION_NOISE_SEED = 7


class DivergenceError(ArithmeticError):
    """Raised when the loss or the gradient norm leaves the finite range"""
    pass


class TrainingError(RuntimeError):
    """Raised when every restart of a training run diverged"""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


class GoalKind(str, Enum):
    POSITION_MAE = "POSITION_MAE"
    ROTATION_MAE = "ROTATION_MAE"
    ZERO_CONTROLLER = "ZERO_CONTROLLER"


@dataclass(frozen=True)
class CartesianGoal:
    kind: GoalKind
    weight: float


@dataclass(frozen=True)
class JointGoal:
    joint_indices: Tuple[int, ...]
    weight: float
    kind: GoalKind = GoalKind.ZERO_CONTROLLER


@dataclass
class GoalSet:
    """Weighted Cartesian and joint-space goals of the partial cost function"""

    cartesian_goals: List[CartesianGoal] = field(default_factory=list)
    joint_goals: List[JointGoal] = field(default_factory=list)

    def __post_init__(self):
        self.cartesian_goals = [CartesianGoal(GoalKind(g.kind), float(g.weight)) for g in self.cartesian_goals]
        self.joint_goals = [JointGoal(tuple(int(i) for i in g.joint_indices), float(g.weight), GoalKind(g.kind))
                            for g in self.joint_goals]
        for g in self.cartesian_goals:
            if g.kind not in (GoalKind.POSITION_MAE, GoalKind.ROTATION_MAE):
                raise ValueError(f"{g.kind.value} is not a Cartesian goal")
            if not g.weight > 0:
                raise ValueError(f"Goal weight must be positive, got {g.weight} for {g.kind.value}")
        for g in self.joint_goals:
            if g.kind != GoalKind.ZERO_CONTROLLER:
                raise ValueError(f"{g.kind.value} is not a joint goal")
            if not g.weight > 0:
                raise ValueError(f"Goal weight must be positive, got {g.weight} for {g.kind.value}")
            if not g.joint_indices:
                raise ValueError("Joint goal needs at least one joint index")

    @classmethod
    def default(cls, chain: KinematicChain, position_weight: float = 1.0, rotation_weight: float = 0.5,
                zero_controller_weight: float = 0.05) -> "GoalSet":
        """Position and rotation goals plus a zero controller on the redundant (dof - 6 trailing) joints

        Goals whose weight is zero are left out.
        """
        cartesian = []
        if position_weight > 0:
            cartesian.append(CartesianGoal(GoalKind.POSITION_MAE, position_weight))
        if rotation_weight > 0:
            cartesian.append(CartesianGoal(GoalKind.ROTATION_MAE, rotation_weight))
        joint = []
        if chain.dof > 6 and zero_controller_weight > 0:
            joint.append(JointGoal(tuple(range(6, chain.dof)), zero_controller_weight))
        return cls(cartesian, joint).validate(chain)

    @classmethod
    def from_config(cls, chain: KinematicChain, cfg: TrainConfig) -> "GoalSet":
        return cls.default(chain, cfg.position_weight, cfg.rotation_weight, cfg.zero_controller_weight)

    def validate(self, chain: KinematicChain) -> "GoalSet":
        for g in self.joint_goals:
            bad = [i for i in g.joint_indices if not 0 <= i < chain.dof]
            if bad:
                raise ValueError(f"Joint goal indices {bad} out of range for dof={chain.dof}")
        return self

    def scaled(self, factor: float) -> "GoalSet":
        return GoalSet([CartesianGoal(g.kind, g.weight * factor) for g in self.cartesian_goals],
                       [JointGoal(g.joint_indices, g.weight * factor) for g in self.joint_goals])

    def to_dict(self) -> dict:
        return {
            "cartesian_goals": [{"kind": g.kind.value, "weight": g.weight} for g in self.cartesian_goals],
            "joint_goals": [{"kind": g.kind.value, "joint_indices": list(g.joint_indices), "weight": g.weight}
                            for g in self.joint_goals],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GoalSet":
        return cls([CartesianGoal(GoalKind(g["kind"]), g["weight"]) for g in doc.get("cartesian_goals", [])],
                   [JointGoal(tuple(g["joint_indices"]), g["weight"], GoalKind(g.get("kind", "ZERO_CONTROLLER")))
                    for g in doc.get("joint_goals", [])])


# ------------------------------------------------------------------ #
# Losses
# ------------------------------------------------------------------ #
def goal_costs(chain: KinematicChain, configs: np.ndarray, targets: np.ndarray, goals: GoalSet,
               with_grad: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Per-sample weighted goal cost and, optionally, its gradient w.r.t. the joints

    Position and rotation costs are mean absolute errors over the reached pose
    vector (meters, quaternion components with the sign closest to the target);
    the zero controller is the mean squared joint angle (radians).

    Args:
        chain: Kinematic chain
        configs: (N, dof) joint configurations
        targets: (N, 7) target poses
        goals: Weighted goals

    Returns:
        Tuple of (cost (N,), gradient (N, dof) or None)
    """
    configs = np.atleast_2d(np.asarray(configs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if with_grad:
        reached, jac = fk_jacobian_batch(chain, configs)
    else:
        reached, jac = fk_batch(chain, configs), None
    n = configs.shape[0]
    cost = np.zeros(n)
    grad = np.zeros_like(configs) if with_grad else None

    sign = resolve_quaternion_sign(reached[:, 3:], targets[:, 3:])
    for goal in goals.cartesian_goals:
        if goal.kind == GoalKind.POSITION_MAE:
            diff = reached[:, :3] - targets[:, :3]
            cost += goal.weight * np.abs(diff).mean(axis=1)
            if with_grad:
                grad += goal.weight / 3.0 * np.einsum("nk,nkd->nd", np.sign(diff), jac[:, :3, :])
        else:
            diff = sign[:, None] * reached[:, 3:] - targets[:, 3:]
            cost += goal.weight * np.abs(diff).mean(axis=1)
            if with_grad:
                grad += goal.weight / 4.0 * np.einsum("nk,nkd->nd", np.sign(diff) * sign[:, None], jac[:, 3:, :])
    for goal in goals.joint_goals:
        idx = list(goal.joint_indices)
        cost += goal.weight * np.mean(configs[:, idx] ** 2, axis=1)
        if with_grad:
            grad[:, idx] += goal.weight * 2.0 * configs[:, idx] / len(idx)
    return cost, grad


def _network_inputs(normalizer: Normalizer, poses: np.ndarray, noise: Optional[np.ndarray]) -> np.ndarray:
    x = normalizer.normalize_pose(poses)
    return x if noise is None else np.hstack([x, noise])


def cycle_loss(chain: KinematicChain, net: DenseNet, normalizer: Normalizer, poses: np.ndarray,
               goals: GoalSet, noise: Optional[np.ndarray] = None) -> Tuple[float, Gradients]:
    """Batch-mean goal cost of the network's answers to poses, with parameter gradients

    Args:
        chain: Kinematic chain
        net: Network mapping normalized poses (plus noise) to normalized joints
        normalizer: Pose and joint normalization
        poses: (N, 7) target poses in physical units, normalized here
        goals: Weighted goals
        noise: Optional (N, noise_dim) noise inputs

    Returns:
        Tuple of (loss, gradients)

    Raises:
        DivergenceError: The loss is not finite
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    if poses.shape[0] == 0:
        raise ValueError("cycle_loss needs a non-empty batch")
    out, tape = forward(net, _network_inputs(normalizer, poses, noise))
    configs = normalizer.denormalize_joints(out)
    cost, d_configs = goal_costs(chain, configs, poses, goals, with_grad=True)
    loss = float(np.mean(cost))
    if not np.isfinite(loss):
        raise DivergenceError(f"Non-finite cycle loss {loss}")
    d_out = d_configs * normalizer.joint_half_range / poses.shape[0]
    return loss, backward(net, tape, d_out)


def variance_loss(solutions: np.ndarray, noise: np.ndarray) -> float:
    """(mean per-dimension variance of solutions - mean per-dimension variance of noise)²

    Solutions are normalized joint values of one repeated pose; variances are
    population variances over the batch rows.
    """
    solutions = np.atleast_2d(solutions)
    noise = np.atleast_2d(noise)
    if solutions.shape[0] < 2 or noise.shape[0] != solutions.shape[0]:
        raise ValueError("Variance loss needs at least 2 rows and matching solution and noise batches")
    diff = np.mean(np.var(solutions, axis=0)) - np.mean(np.var(noise, axis=0))
    return float(diff ** 2)


def variance_loss_grad(solutions: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Gradient of variance_loss w.r.t. the solutions"""
    solutions = np.atleast_2d(solutions)
    b, d = solutions.shape
    diff = np.mean(np.var(solutions, axis=0)) - np.mean(np.var(noise, axis=0))
    return 2.0 * diff / d * 2.0 * (solutions - solutions.mean(axis=0)) / b


# ------------------------------------------------------------------ #
# Report
# ------------------------------------------------------------------ #
@dataclass
class EpochMetrics:
    attempt: int
    epoch: int
    lr: float
    train_loss: float
    val_pos_mm: float
    val_rot_deg: float


@dataclass
class TrainReport:
    """Per-epoch validation errors and restart bookkeeping of a training run"""

    kind: str
    epochs: List[EpochMetrics] = field(default_factory=list)
    diverged: bool = False
    restarts: int = 0
    failed: bool = False
    best_epoch: int = -1
    best_val_pos_mm: float = float("inf")
    best_val_rot_deg: float = float("inf")
    wall_time_s: float = field(default=0.0, compare=False)

    def to_frame(self) -> pd.DataFrame:
        columns = [f for f in EpochMetrics.__dataclass_fields__]
        return pd.DataFrame([asdict(m) for m in self.epochs], columns=columns)

    def summary(self) -> dict:
        """Report fields without per-epoch rows and wall time"""
        return {
            "kind": self.kind,
            "diverged": self.diverged,
            "restarts": self.restarts,
            "failed": self.failed,
            "best_epoch": self.best_epoch,
            "best_val_pos_mm": self.best_val_pos_mm,
            "best_val_rot_deg": self.best_val_rot_deg,
            "epochs_run": len(self.epochs),
        }

    def write(self, path: str):
        """Per-epoch CSV at path and the summary JSON next to it"""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        with open(os.path.splitext(path)[0] + ".json", "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)


# ------------------------------------------------------------------ #
# Training loops
# ------------------------------------------------------------------ #
def learning_rate(lr0: float, epoch: int, epochs: int) -> float:
    """Linear decay, lr0 at epoch 0"""
    return lr0 * (1.0 - epoch / epochs)


def _validation_errors(chain: KinematicChain, net: DenseNet, normalizer: Normalizer, poses: np.ndarray,
                       noise_dim: int) -> Tuple[float, float]:
    noise = None
    if noise_dim:
        rng = np.random.default_rng(VALIDATION_NOISE_SEED)
        noise = rng.uniform(-1.0, 1.0, size=(poses.shape[0], noise_dim))
    out, _ = forward(net, _network_inputs(normalizer, poses, noise))
    reached = fk_batch(chain, normalizer.denormalize_joints(out))
    pos_mm, rot_deg = pose_errors_batch(poses, reached)
    return float(np.mean(pos_mm)), float(np.mean(rot_deg))


def _check_gradients(grads: Gradients, cfg: TrainConfig) -> float:
    norm = grads.global_norm()
    if not np.isfinite(norm) or norm > cfg.divergence_grad_norm:
        raise DivergenceError(f"Gradient norm {norm:.3g} exceeds {cfg.divergence_grad_norm:g}")
    return norm


def _mlp_step(chain, net, normalizer, poses, goals, cfg, rng) -> Tuple[float, Gradients]:
    loss, grads = cycle_loss(chain, net, normalizer, poses, goals)
    _check_gradients(grads, cfg)
    return loss, grads.clipped(cfg.grad_clip)


def _gan_step(chain, net, normalizer, poses, goals, cfg, rng) -> Tuple[float, Gradients]:
    noise = rng.uniform(-1.0, 1.0, size=(poses.shape[0], cfg.noise_dim))
    loss, grads = cycle_loss(chain, net, normalizer, poses, goals, noise)
    _check_gradients(grads, cfg)
    grads = grads.clipped(cfg.grad_clip)
    if cfg.variance_weight > 0 and poses.shape[0] >= 2:
        # One pose of the batch, repeated, with fresh noise per row
        pick = poses[rng.integers(poses.shape[0])]
        tiled = np.repeat(pick[None, :], poses.shape[0], axis=0)
        var_noise = rng.uniform(-1.0, 1.0, size=(poses.shape[0], cfg.noise_dim))
        out, tape = forward(net, _network_inputs(normalizer, tiled, var_noise))
        var_loss = variance_loss(out, var_noise)
        var_grads = backward(net, tape, cfg.variance_weight * variance_loss_grad(out, var_noise))
        loss += cfg.variance_weight * var_loss
        if not np.isfinite(loss):
            raise DivergenceError(f"Non-finite loss {loss}")
        grads = grads + var_grads
        _check_gradients(grads, cfg)
    return loss, grads


def _train(kind: ModelKind, chain: KinematicChain, dataset: Dataset, net: DenseNet, normalizer: Normalizer,
           cfg: TrainConfig, goals: Optional[GoalSet], validation: Optional[Dataset]) -> Tuple[DenseNet, TrainReport]:
    if len(dataset) == 0:
        raise ValueError("Training set is empty")
    if dataset.dof != chain.dof or net.output_size != chain.dof:
        raise ValueError(f"Dataset dof {dataset.dof} and network output {net.output_size} must equal chain dof {chain.dof}")
    noise_dim = cfg.noise_dim if kind == ModelKind.GAN else 0
    if net.input_size != 7 + noise_dim:
        raise ValueError(f"Network input size {net.input_size} does not match 7 + noise_dim {noise_dim}")
    if kind == ModelKind.GAN and noise_dim == 0:
        raise ValueError("Multi-solution training needs noise_dim > 0")
    goals = (goals or GoalSet.from_config(chain, cfg)).validate(chain)
    step = _gan_step if kind == ModelKind.GAN else _mlp_step
    val_poses = (validation if validation is not None else dataset).poses[:cfg.val_subset]

    report = TrainReport(kind=kind.value)
    start = time.perf_counter()
    initial = net.flat_parameters()
    for attempt in range(cfg.restarts + 1):
        work = net.copy()
        if attempt == 0:
            work.set_flat_parameters(initial)
        else:
            work.initialize(cfg.rng_seed + attempt)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed, spawn_key=(attempt,)))
        optimizer = AdamOptimizer(work, cfg.lr0)
        best_params, best_pos, best_rot, best_epoch = None, float("inf"), float("inf"), -1
        try:
            epochs = tqdm(range(cfg.epochs), desc=f"{kind.value} attempt {attempt}", disable=not cfg.progress)
            for epoch in epochs:
                optimizer.lr = learning_rate(cfg.lr0, epoch, cfg.epochs)
                order = rng.permutation(len(dataset))
                losses = []
                for s in range(0, len(order), cfg.batch_size):
                    batch = dataset.poses[order[s:s + cfg.batch_size]]
                    loss, grads = step(chain, work, normalizer, batch, goals, cfg, rng)
                    optimizer.step(grads)
                    losses.append(loss)
                if not work.all_finite():
                    raise DivergenceError("Non-finite network parameters")
                pos_mm, rot_deg = _validation_errors(chain, work, normalizer, val_poses, noise_dim)
                if not np.isfinite(pos_mm):
                    raise DivergenceError("Non-finite validation error")
                report.epochs.append(EpochMetrics(attempt, epoch, optimizer.lr, float(np.mean(losses)), pos_mm, rot_deg))
                logger.debug("%s attempt %d epoch %d: loss %.6g, val %.3f mm / %.3f deg",
                             kind.value, attempt, epoch, np.mean(losses), pos_mm, rot_deg)
                if pos_mm < best_pos:
                    best_params, best_pos, best_rot, best_epoch = work.flat_parameters(), pos_mm, rot_deg, epoch
        except DivergenceError as e:
            report.diverged = True
            logger.warning("%s training attempt %d diverged: %s", kind.value, attempt, e)
            if attempt < cfg.restarts:
                report.restarts += 1
            continue

        work.set_flat_parameters(best_params)
        report.best_epoch, report.best_val_pos_mm, report.best_val_rot_deg = best_epoch, best_pos, best_rot
        report.wall_time_s = time.perf_counter() - start
        logger.info("%s training finished: best epoch %d, validation %.3f mm / %.3f deg, %d restarts",
                    kind.value, best_epoch, best_pos, best_rot, report.restarts)
        return work, report

    report.failed = True
    report.wall_time_s = time.perf_counter() - start
    raise TrainingError(f"All {cfg.restarts + 1} {kind.value} training attempts diverged", report)


def train_mlp(chain: KinematicChain, dataset: Dataset, net: DenseNet, normalizer: Normalizer, cfg: TrainConfig,
              goals: Optional[GoalSet] = None, validation: Optional[Dataset] = None) -> Tuple[DenseNet, TrainReport]:
    """Train the single-solution network on the cycle loss

    Mini-batch adaptive descent with linear learning-rate decay and optional
    gradient clipping. A diverged attempt is retried from fresh parameters up
    to cfg.restarts times. The input net is not modified.

    Returns:
        Tuple of (trained copy holding the best-validation parameters, report)

    Raises:
        TrainingError: All attempts diverged
    """
    return _train(ModelKind.MLP, chain, dataset, net, normalizer, cfg, goals, validation)


def train_gan(chain: KinematicChain, dataset: Dataset, net: DenseNet, normalizer: Normalizer, cfg: TrainConfig,
              goals: Optional[GoalSet] = None, validation: Optional[Dataset] = None) -> Tuple[DenseNet, TrainReport]:
    """Train the noise-conditioned network on the cycle loss plus the variance loss

    Each step adds variance_weight times the variance loss of one batch pose
    repeated with fresh noise. Clipping applies to the cycle gradients only.
    """
    return _train(ModelKind.GAN, chain, dataset, net, normalizer, cfg, goals, validation)


def _sweep_one(kind, chain, dataset, net_builder, normalizer, cfg, goals, validation, epochs):
    run_cfg = with_overrides(cfg, epochs=epochs, progress=False)
    trainer = train_gan if kind == ModelKind.GAN else train_mlp
    try:
        _, report = trainer(chain, dataset, net_builder(cfg.rng_seed), normalizer, run_cfg, goals, validation)
    except TrainingError as e:
        report = e.report
    return {"epochs": epochs, "val_pos_mm": report.best_val_pos_mm, "val_rot_deg": report.best_val_rot_deg,
            "restarts": report.restarts, "failed": report.failed}


def epoch_sweep(chain: KinematicChain, dataset: Dataset, net_builder: Callable[[int], DenseNet],
                normalizer: Normalizer, budgets: Sequence[int], cfg: TrainConfig, kind: str = "mlp",
                goals: Optional[GoalSet] = None, validation: Optional[Dataset] = None) -> pd.DataFrame:
    """Independent trainings for several epoch budgets

    Args:
        net_builder: Returns a freshly initialized network for a seed
        budgets: Epoch counts to train for

    Returns:
        DataFrame with one row per budget, failed budgets flagged
    """
    kind = ModelKind(kind)
    args = (kind, chain, dataset, net_builder, normalizer, cfg, goals, validation)
    if cfg.workers > 1:
        rows = Parallel(n_jobs=cfg.workers)(delayed(_sweep_one)(*args, int(b)) for b in budgets)
    else:
        rows = [_sweep_one(*args, int(b)) for b in budgets]
    return pd.DataFrame(rows, columns=["epochs", "val_pos_mm", "val_rot_deg", "restarts", "failed"])
