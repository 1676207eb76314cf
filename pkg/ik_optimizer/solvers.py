"""Genetic search, damped least-squares refinement and the hybrid neuro-genetic pipeline."""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple, Union
import logging
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .IKSolver import IKSolver
from .chain_model import KinematicChain, Pose
from .config import GaConfig
from .dataset import Dataset
from .kinematics import fk_jacobian_batch, pose_errors_batch, fk_batch, resolve_quaternion_sign
from .neural import IKModel, ModelKind
from .training import GoalKind, GoalSet, goal_costs

logger = logging.getLogger(__name__)

REFINE_DAMPING = 1e-4
REFINE_POSITION_TOL = 1e-6     # meters
REFINE_ROTATION_TOL = 1e-4     # radians
REFINE_MAX_HALVINGS = 30
DEFAULT_SAMPLES = 500


class SolverError(ValueError):
    """Raised when a model does not fit the chain it is asked to solve for"""
    pass


@dataclass
class SolutionBatch:
    """Candidate configurations with their pose errors and weighted costs"""

    configs: np.ndarray
    pos_err_mm: np.ndarray
    rot_err_deg: np.ndarray
    cost: np.ndarray
    evaluations: int = 0
    elapsed_ms: float = 0.0
    best_cost_history: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.configs.shape[0]

    @property
    def dof(self) -> int:
        return self.configs.shape[1]

    def take(self, indices) -> "SolutionBatch":
        indices = np.asarray(indices, dtype=int)
        return SolutionBatch(self.configs[indices], self.pos_err_mm[indices], self.rot_err_deg[indices],
                             self.cost[indices], self.evaluations, self.elapsed_ms, list(self.best_cost_history))

    def sorted(self) -> "SolutionBatch":
        """Rows ordered by cost, ties kept in insertion order"""
        return self.take(np.argsort(self.cost, kind="stable"))

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.cost))

    def best(self) -> "SolutionBatch":
        return self.take([self.best_index])

    def to_frame(self, joint_names: Optional[List[str]] = None) -> pd.DataFrame:
        names = joint_names or [f"j{i}" for i in range(self.dof)]
        frame = pd.DataFrame(self.configs, columns=names)
        frame["pos_err_mm"] = self.pos_err_mm
        frame["rot_err_deg"] = self.rot_err_deg
        frame["cost"] = self.cost
        return frame


def batch_costs(chain: KinematicChain, configs: np.ndarray, target: Union[Pose, np.ndarray], goals: GoalSet,
                workers: int = 1) -> np.ndarray:
    """Weighted cost of every row against one target"""
    configs = np.atleast_2d(configs)
    targets = np.repeat(_target_array(target)[None, :], configs.shape[0], axis=0)
    if workers > 1 and configs.shape[0] >= 2 * workers:
        parts = Parallel(n_jobs=workers)(
            delayed(goal_costs)(chain, c, t, goals)
            for c, t in zip(np.array_split(configs, workers), np.array_split(targets, workers)))
        return np.concatenate([cost for cost, _ in parts])
    return goal_costs(chain, configs, targets, goals)[0]


def weighted_cost(chain: KinematicChain, config: np.ndarray, target: Union[Pose, np.ndarray], goals: GoalSet) -> float:
    """Weighted partial cost of one configuration; the same per-sample term the cycle loss averages"""
    return float(batch_costs(chain, np.asarray(config, dtype=float)[None, :], target, goals)[0])


def _target_array(target: Union[Pose, np.ndarray]) -> np.ndarray:
    return target.as_array() if isinstance(target, Pose) else np.asarray(target, dtype=float)


def evaluate_solutions(chain: KinematicChain, configs: np.ndarray, target: Union[Pose, np.ndarray],
                       goals: GoalSet) -> SolutionBatch:
    configs = chain.clamp(np.atleast_2d(np.asarray(configs, dtype=float)))
    t = _target_array(target)
    targets = np.repeat(t[None, :], configs.shape[0], axis=0)
    reached = fk_batch(chain, configs)
    pos_mm, rot_deg = pose_errors_batch(targets, reached)
    cost = goal_costs(chain, configs, targets, goals)[0]
    return SolutionBatch(configs, pos_mm, rot_deg, cost, evaluations=configs.shape[0])


# ------------------------------------------------------------------ #
# Genetic algorithm
# ------------------------------------------------------------------ #
def ga_solve(chain: KinematicChain, target: Union[Pose, np.ndarray], goals: GoalSet, cfg: GaConfig,
             seeds: Optional[Union[SolutionBatch, np.ndarray]] = None) -> SolutionBatch:
    """Genetic search over joint space, optionally seeded

    The initial population is the seeds (clamped to the joint limits) followed
    by uniform random configurations. Each generation carries the elite over,
    then fills the population with children from tournament selection, uniform
    crossover and Gaussian mutation. Mutation scales are drawn per child
    between sigma·range and sigma·range·10^-decades.

    Args:
        chain: Kinematic chain
        target: Target pose
        goals: Weighted goals
        cfg: GA configuration; timeout_ms is checked once per generation
        seeds: At most cfg.seed_slots configurations

    Returns:
        Final population sorted by cost, with the best cost per generation
    """
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.rng_seed)
    seed_configs = np.empty((0, chain.dof))
    if seeds is not None:
        seed_configs = seeds.configs if isinstance(seeds, SolutionBatch) else np.atleast_2d(seeds)
        if seed_configs.shape[1] != chain.dof:
            raise SolverError(f"Seeds have {seed_configs.shape[1]} joints, chain has dof={chain.dof}")
        if seed_configs.shape[0] > cfg.seed_slots:
            raise ValueError(f"{seed_configs.shape[0]} seeds exceed the {cfg.seed_slots} seed slots")
        seed_configs = chain.clamp(seed_configs)

    span = chain.upper - chain.lower
    random_part = rng.uniform(chain.lower, chain.upper, size=(cfg.population - seed_configs.shape[0], chain.dof))
    population = np.vstack([seed_configs, random_part])
    cost = batch_costs(chain, population, target, goals, cfg.workers)
    evaluations = population.shape[0]
    history = [float(cost.min())]
    n_children = cfg.population - cfg.elitism

    for generation in range(cfg.generations):
        if cfg.timeout_ms is not None and (time.perf_counter() - start) * 1000.0 >= cfg.timeout_ms:
            logger.debug("GA timeout after %d generations", generation)
            break
        order = np.argsort(cost, kind="stable")
        rank = np.empty(cfg.population, dtype=int)
        rank[order] = np.arange(cfg.population)

        # Tournament: lowest rank wins, so ties go to the lower index
        contenders = rng.integers(cfg.population, size=(n_children, 2, cfg.tournament_k))
        winners = np.take_along_axis(contenders, np.argmin(rank[contenders], axis=2)[..., None], axis=2)[..., 0]
        mother, father = population[winners[:, 0]], population[winners[:, 1]]

        swap = (rng.random((n_children, chain.dof)) < 0.5) & (rng.random(n_children) < cfg.crossover_rate)[:, None]
        children = np.where(swap, father, mother)
        scale = cfg.mutation_sigma * 10.0 ** (-rng.uniform(0.0, cfg.mutation_decades, size=(n_children, 1)))
        children = chain.clamp(children + rng.standard_normal((n_children, chain.dof)) * scale * span)

        child_cost = batch_costs(chain, children, target, goals, cfg.workers)
        evaluations += n_children
        elite = order[:cfg.elitism]
        population = np.vstack([population[elite], children])
        cost = np.concatenate([cost[elite], child_cost])
        history.append(float(cost.min()))

    result = evaluate_solutions(chain, population, target, goals)
    result.cost = cost
    result.evaluations = evaluations
    result.best_cost_history = history
    result.elapsed_ms = (time.perf_counter() - start) * 1000.0
    return result.sorted()


# ------------------------------------------------------------------ #
# Local refinement
# ------------------------------------------------------------------ #
def _residual_weights(goals: Optional[GoalSet]) -> np.ndarray:
    if goals is None:
        return np.ones(7)
    weights = np.zeros(7)
    for g in goals.cartesian_goals:
        if g.kind == GoalKind.POSITION_MAE:
            weights[:3] = np.sqrt(g.weight)
        elif g.kind == GoalKind.ROTATION_MAE:
            weights[3:] = np.sqrt(g.weight)
    return weights


def _pose_residual(chain: KinematicChain, config: np.ndarray, target: np.ndarray):
    reached, jac = fk_jacobian_batch(chain, config[None, :])
    reached, jac = reached[0], jac[0].copy()
    sign = resolve_quaternion_sign(reached[None, 3:], target[None, 3:])[0]
    residual = np.concatenate([reached[:3] - target[:3], sign * reached[3:] - target[3:]])
    jac[3:] *= sign
    return residual, jac, reached


def _converged(reached: np.ndarray, target: np.ndarray) -> bool:
    pos_mm, rot_deg = pose_errors_batch(target[None, :], reached[None, :])
    return pos_mm[0] / 1000.0 <= REFINE_POSITION_TOL and np.radians(rot_deg[0]) <= REFINE_ROTATION_TOL


def refine(chain: KinematicChain, config: np.ndarray, target: Union[Pose, np.ndarray],
           goals: Optional[GoalSet] = None, max_iters: int = 50,
           return_trace: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, List[float]]]:
    """Damped least-squares descent on the 7-D pose residual

    Position and quaternion rows are weighted by the square roots of the
    Cartesian goal weights. A step that does not lower the residual is halved
    until it does; iterates are clamped to the joint limits.

    Args:
        chain: Kinematic chain
        config: Start configuration within the limits
        target: Target pose
        goals: Goal weights for the residual rows, None weighs all rows equally
        max_iters: Maximum accepted steps
        return_trace: Also return the residual norm of every accepted iterate

    Returns:
        The first iterate within 1e-6 m / 1e-4 rad, else the last accepted one
    """
    t = _target_array(target)
    theta = np.array(config, dtype=float)
    weights = _residual_weights(goals)
    residual, jac, reached = _pose_residual(chain, theta, t)
    norm = float(np.linalg.norm(weights * residual))
    trace = [norm]
    damping = REFINE_DAMPING * np.eye(chain.dof)

    for _ in range(max_iters):
        if _converged(reached, t):
            break
        wj = weights[:, None] * jac
        step = -np.linalg.solve(wj.T @ wj + damping, wj.T @ (weights * residual))
        alpha, accepted = 1.0, False
        for _ in range(REFINE_MAX_HALVINGS):
            candidate = chain.clamp(theta + alpha * step)
            c_residual, c_jac, c_reached = _pose_residual(chain, candidate, t)
            c_norm = float(np.linalg.norm(weights * c_residual))
            if c_norm < norm:
                theta, residual, jac, reached, norm = candidate, c_residual, c_jac, c_reached, c_norm
                trace.append(norm)
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break

    return (theta, trace) if return_trace else theta


# ------------------------------------------------------------------ #
# Hybrid pipeline
# ------------------------------------------------------------------ #
class Pipeline(str, Enum):
    NEURAL_ONLY = "neural-only"
    NEURAL_GA = "neural-ga"
    NEURAL_GA_REFINE = "neural-ga-refine"
    NEURAL_REFINE = "neural-refine"
    GA_ONLY = "ga-only"

    @property
    def uses_model(self) -> bool:
        return self != Pipeline.GA_ONLY


def check_model(chain: KinematicChain, model: IKModel):
    if model.dof != chain.dof:
        raise SolverError(f"Model outputs {model.dof} joints, chain {chain.name!r} has dof={chain.dof}")
    if model.chain_hash and model.chain_hash != chain.digest():
        raise SolverError(f"Model was trained for another chain (hash {model.chain_hash[:12]}…)")


def neural_solutions(chain: KinematicChain, model: IKModel, target: Union[Pose, np.ndarray], goals: GoalSet,
                     samples: int = DEFAULT_SAMPLES, rng_seed: int = 0) -> SolutionBatch:
    """One solution from a single-solution model, samples noise draws from a multi-solution one"""
    t = _target_array(target)
    if model.kind == ModelKind.GAN:
        configs = model.sample(t, samples, np.random.default_rng(rng_seed))
    else:
        configs = model.predict(t[None, :])
    return evaluate_solutions(chain, configs, t, goals)


def _with_refined_best(chain, batch: SolutionBatch, target, goals, refine_iters) -> SolutionBatch:
    best = batch.best_index
    refined = evaluate_solutions(chain, refine(chain, batch.configs[best], target, goals, refine_iters), target, goals)
    if refined.cost[0] < batch.cost[best]:
        batch = batch.take(np.arange(len(batch)))
        batch.configs[best] = refined.configs[0]
        batch.pos_err_mm[best] = refined.pos_err_mm[0]
        batch.rot_err_deg[best] = refined.rot_err_deg[0]
        batch.cost[best] = refined.cost[0]
    return batch.sorted()


def hybrid_solve(chain: KinematicChain, target: Union[Pose, np.ndarray], goals: GoalSet, model: Optional[IKModel],
                 pipeline: Union[Pipeline, str], cfg: GaConfig, samples: int = DEFAULT_SAMPLES,
                 refine_iters: int = 50) -> SolutionBatch:
    """Run a solving pipeline on one target

    NEURAL_ONLY returns the model output(s); NEURAL_GA seeds the genetic search
    with the lowest-cost neural solutions (at most cfg.seed_slots);
    NEURAL_GA_REFINE and NEURAL_REFINE refine the best solution of the GA or of
    the network; GA_ONLY runs the unseeded genetic search.

    Raises:
        SolverError: No model for a neural pipeline, or model and chain do not fit
    """
    start = time.perf_counter()
    pipeline = Pipeline(pipeline)
    t = _target_array(target)
    if pipeline.uses_model:
        if model is None:
            raise SolverError(f"Pipeline {pipeline.value} needs a model")
        check_model(chain, model)

    if pipeline == Pipeline.GA_ONLY:
        result = ga_solve(chain, t, goals, cfg)
    else:
        result = neural_solutions(chain, model, t, goals, samples, cfg.rng_seed)
        neural_evaluations = len(result)
        if pipeline == Pipeline.NEURAL_REFINE:
            result = _with_refined_best(chain, result, t, goals, refine_iters)
        elif pipeline in (Pipeline.NEURAL_GA, Pipeline.NEURAL_GA_REFINE):
            seeds = result.sorted().take(np.arange(min(len(result), cfg.seed_slots)))
            result = ga_solve(chain, t, goals, cfg, seeds=seeds)
            result.evaluations += neural_evaluations
            if pipeline == Pipeline.NEURAL_GA_REFINE:
                result = _with_refined_best(chain, result, t, goals, refine_iters)
    result.elapsed_ms = (time.perf_counter() - start) * 1000.0
    return result


class HybridSolver(IKSolver):
    """Solver running one pipeline per target with fixed budgets and seeds"""

    def __init__(self, chain: KinematicChain, model: Optional[IKModel] = None,
                 pipeline: Union[Pipeline, str] = Pipeline.NEURAL_ONLY, goals: Optional[GoalSet] = None,
                 ga_config: Optional[GaConfig] = None, samples: int = DEFAULT_SAMPLES, refine_iters: int = 50):
        super().__init__(chain, goals)
        self.model = model
        self.pipeline = Pipeline(pipeline)
        self.ga_config = ga_config or GaConfig()
        self.samples = samples
        self.refine_iters = refine_iters
        if self.pipeline.uses_model:
            if model is None:
                raise SolverError(f"Pipeline {self.pipeline.value} needs a model")
            check_model(chain, model)

    @property
    def name(self) -> str:
        return self.pipeline.value

    def solve(self, target: Pose) -> SolutionBatch:
        return hybrid_solve(self.chain, target, self.goals, self.model, self.pipeline, self.ga_config,
                            self.samples, self.refine_iters)


class LookupSolver(IKSolver):
    """Answers with the stored configuration of the nearest known pose

    Exact on poses taken from its table; used as a reference solver.
    """

    def __init__(self, chain: KinematicChain, table: Dataset, goals: Optional[GoalSet] = None):
        super().__init__(chain, goals)
        if table.dof != chain.dof:
            raise SolverError(f"Lookup table has {table.dof} joints, chain has dof={chain.dof}")
        self.table = table

    def solve(self, target: Pose) -> SolutionBatch:
        start = time.perf_counter()
        t = _target_array(target)
        q = self.table.poses[:, 3:]
        distance = np.linalg.norm(self.table.positions - t[:3], axis=1) + np.minimum(
            np.linalg.norm(q - t[3:], axis=1), np.linalg.norm(q + t[3:], axis=1))
        result = evaluate_solutions(self.chain, self.table.configs[int(np.argmin(distance))], t, self.goals)
        result.elapsed_ms = (time.perf_counter() - start) * 1000.0
        return result
