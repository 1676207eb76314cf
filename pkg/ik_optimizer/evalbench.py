"""Evaluation protocol: per-pose errors, test-set aggregates, success rate and runtime statistics."""

from dataclasses import dataclass
from typing import Optional
import json
import logging
import os
import time

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .IKSolver import IKSolver
from .chain_model import KinematicChain, Pose
from .dataset import Dataset
from .neural import IKModel
from .solvers import check_model, evaluate_solutions
from .training import GoalSet

logger = logging.getLogger(__name__)

SUCCESS_POS_MM = 10.0
SUCCESS_ROT_DEG = 20.0
TIMING_COLUMNS = ["solve_ms"]


class EvaluationError(ValueError):
    """Raised for empty test sets, solvers without answers and bad benchmark settings"""
    pass


@dataclass
class EvalReport:
    """Test-set aggregates and the per-pose rows they were computed from

    For multi-solution evaluation the avg/min/max columns are taken over the
    per-pose batch means, avg_min_* over the per-pose best solutions.
    """
    solver: str
    mode: str
    rows: pd.DataFrame
    avg_pos_mm: float
    min_pos_mm: float
    max_pos_mm: float
    avg_rot_deg: float
    min_rot_deg: float
    max_rot_deg: float
    success_rate: float
    mean_solve_time_ms: float
    avg_min_pos_mm: Optional[float] = None
    avg_min_rot_deg: Optional[float] = None
    pos_threshold_mm: float = SUCCESS_POS_MM
    rot_threshold_deg: float = SUCCESS_ROT_DEG

    @property
    def pose_count(self) -> int:
        return len(self.rows)

    def summary(self, include_timing: bool = False) -> dict:
        doc = {
            "solver": self.solver,
            "mode": self.mode,
            "poses": self.pose_count,
            "avg_pos_mm": self.avg_pos_mm,
            "min_pos_mm": self.min_pos_mm,
            "max_pos_mm": self.max_pos_mm,
            "avg_rot_deg": self.avg_rot_deg,
            "min_rot_deg": self.min_rot_deg,
            "max_rot_deg": self.max_rot_deg,
            "success_rate": self.success_rate,
            "pos_threshold_mm": self.pos_threshold_mm,
            "rot_threshold_deg": self.rot_threshold_deg,
        }
        if self.avg_min_pos_mm is not None:
            doc["avg_min_pos_mm"] = self.avg_min_pos_mm
            doc["avg_min_rot_deg"] = self.avg_min_rot_deg
        if include_timing:
            doc["mean_solve_time_ms"] = self.mean_solve_time_ms
        return doc

    def write(self, path: str, include_timing: bool = False):
        """Per-pose CSV at path and the summary JSON next to it

        Timing is left out unless requested so reruns produce identical files.
        """
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        rows = self.rows if include_timing else self.rows.drop(columns=TIMING_COLUMNS)
        rows.to_csv(path, index=False, float_format="%.17g")
        with open(os.path.splitext(path)[0] + ".json", "w", encoding="utf-8") as f:
            json.dump(self.summary(include_timing), f, indent=2, sort_keys=True)
        logger.info("Wrote evaluation of %d poses to %s", self.pose_count, path)


def success_mask(pos_mm: np.ndarray, rot_deg: np.ndarray, pos_threshold_mm: float = SUCCESS_POS_MM,
                 rot_threshold_deg: float = SUCCESS_ROT_DEG) -> np.ndarray:
    """Boundary values count as successes"""
    return (np.asarray(pos_mm) <= pos_threshold_mm) & (np.asarray(rot_deg) <= rot_threshold_deg)


def _aggregate(solver: str, mode: str, rows: pd.DataFrame, pos_threshold_mm: float, rot_threshold_deg: float,
               avg_min: Optional[tuple] = None) -> EvalReport:
    return EvalReport(
        solver=solver,
        mode=mode,
        rows=rows,
        avg_pos_mm=float(rows["pos_err_mm"].mean()),
        min_pos_mm=float(rows["pos_err_mm"].min()),
        max_pos_mm=float(rows["pos_err_mm"].max()),
        avg_rot_deg=float(rows["rot_err_deg"].mean()),
        min_rot_deg=float(rows["rot_err_deg"].min()),
        max_rot_deg=float(rows["rot_err_deg"].max()),
        success_rate=100.0 * float(rows["success"].mean()),
        mean_solve_time_ms=float(rows["solve_ms"].mean()),
        avg_min_pos_mm=None if avg_min is None else avg_min[0],
        avg_min_rot_deg=None if avg_min is None else avg_min[1],
        pos_threshold_mm=pos_threshold_mm,
        rot_threshold_deg=rot_threshold_deg,
    )


def _check_test_set(test_set: Dataset, chain: KinematicChain):
    if len(test_set) == 0:
        raise EvaluationError("Test set is empty")
    if test_set.dof != chain.dof:
        raise EvaluationError(f"Test set has {test_set.dof} joints, chain has dof={chain.dof}")


def _solve_one(solver: IKSolver, index: int, pose: np.ndarray) -> dict:
    start = time.perf_counter()
    batch = solver.solve(Pose.from_array(pose))
    solve_ms = (time.perf_counter() - start) * 1000.0
    if len(batch) == 0:
        raise EvaluationError(f"Solver {solver.name} returned no solution for pose {index}")
    best = batch.best_index
    return {"pose": index, "pos_err_mm": float(batch.pos_err_mm[best]), "rot_err_deg": float(batch.rot_err_deg[best]),
            "cost": float(batch.cost[best]), "solutions": len(batch), "solve_ms": solve_ms}


def evaluate_single(chain: KinematicChain, solver: IKSolver, test_set: Dataset,
                    pos_threshold_mm: float = SUCCESS_POS_MM, rot_threshold_deg: float = SUCCESS_ROT_DEG,
                    workers: int = 1) -> EvalReport:
    """Solve every test pose and score the best solution by weighted cost

    Args:
        chain: Kinematic chain
        solver: Solver returning at least one solution per pose
        test_set: Poses to solve (configurations are ignored)
        pos_threshold_mm: Success threshold on the position error
        rot_threshold_deg: Success threshold on the rotation error
        workers: Parallel workers over poses

    Returns:
        EvalReport with one row per pose
    """
    _check_test_set(test_set, chain)
    if workers > 1:
        records = Parallel(n_jobs=workers)(delayed(_solve_one)(solver, i, p) for i, p in enumerate(test_set.poses))
    else:
        records = [_solve_one(solver, i, p) for i, p in enumerate(test_set.poses)]
    rows = pd.DataFrame(records)
    rows["success"] = success_mask(rows["pos_err_mm"], rows["rot_err_deg"], pos_threshold_mm, rot_threshold_deg)
    rows = rows[["pose", "pos_err_mm", "rot_err_deg", "cost", "solutions", "success", "solve_ms"]]
    report = _aggregate(solver.name, "single", rows, pos_threshold_mm, rot_threshold_deg)
    logger.info("%s: %.3f mm / %.3f deg average, %.2f%% success over %d poses",
                solver.name, report.avg_pos_mm, report.avg_rot_deg, report.success_rate, report.pose_count)
    return report


def _sample_one(chain: KinematicChain, model: IKModel, goals: GoalSet, index: int, pose: np.ndarray,
                samples: int, rng_seed: int) -> dict:
    start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(index,)))
    batch = evaluate_solutions(chain, model.sample(pose, samples, rng), pose, goals)
    solve_ms = (time.perf_counter() - start) * 1000.0
    best = batch.best_index
    return {"pose": index, "pos_err_mm": float(np.mean(batch.pos_err_mm)),
            "rot_err_deg": float(np.mean(batch.rot_err_deg)),
            "best_pos_err_mm": float(batch.pos_err_mm[best]), "best_rot_err_deg": float(batch.rot_err_deg[best]),
            "solutions": len(batch), "solve_ms": solve_ms}


def evaluate_multi(chain: KinematicChain, model: IKModel, test_set: Dataset, samples_per_pose: int = 500,
                   goals: Optional[GoalSet] = None, rng_seed: int = 0, success_on: str = "mean",
                   pos_threshold_mm: float = SUCCESS_POS_MM, rot_threshold_deg: float = SUCCESS_ROT_DEG,
                   workers: int = 1) -> EvalReport:
    """Sample a solution batch per test pose; average within batches, then over poses

    Args:
        samples_per_pose: Noise draws per pose, at least 2
        success_on: 'mean' judges success on the per-pose batch mean, 'best'
            on the per-pose best solution by weighted cost
        rng_seed: Base seed; each pose draws from its own stream

    Returns:
        EvalReport whose avg columns are batch means and avg_min_* the mean of per-pose bests
    """
    if samples_per_pose < 2:
        raise EvaluationError("Multi-solution evaluation needs at least 2 samples per pose")
    if success_on not in ("mean", "best"):
        raise EvaluationError(f"success_on must be 'mean' or 'best', got {success_on!r}")
    _check_test_set(test_set, chain)
    check_model(chain, model)
    goals = (goals or GoalSet.default(chain)).validate(chain)
    args = (chain, model, goals)
    if workers > 1:
        records = Parallel(n_jobs=workers)(
            delayed(_sample_one)(*args, i, p, samples_per_pose, rng_seed) for i, p in enumerate(test_set.poses))
    else:
        records = [_sample_one(*args, i, p, samples_per_pose, rng_seed) for i, p in enumerate(test_set.poses)]
    rows = pd.DataFrame(records)
    prefix = "" if success_on == "mean" else "best_"
    rows["success"] = success_mask(rows[prefix + "pos_err_mm"], rows[prefix + "rot_err_deg"],
                                   pos_threshold_mm, rot_threshold_deg)
    rows = rows[["pose", "pos_err_mm", "rot_err_deg", "best_pos_err_mm", "best_rot_err_deg",
                 "solutions", "success", "solve_ms"]]
    avg_min = (float(rows["best_pos_err_mm"].mean()), float(rows["best_rot_err_deg"].mean()))
    report = _aggregate(f"{model.kind.value}-samples", "multi", rows, pos_threshold_mm, rot_threshold_deg, avg_min)
    logger.info("%s: batch mean %.3f mm / %.3f deg, best %.3f mm / %.3f deg, %.2f%% success",
                report.solver, report.avg_pos_mm, report.avg_rot_deg, avg_min[0], avg_min[1], report.success_rate)
    return report


@dataclass(frozen=True)
class RuntimeStats:
    median_ms: float
    p95_ms: float
    mean_ms: float
    solves: int

    def to_dict(self) -> dict:
        return {"median_ms": self.median_ms, "p95_ms": self.p95_ms, "mean_ms": self.mean_ms, "solves": self.solves}


def bench_runtime(solver: IKSolver, poses: np.ndarray, repetitions: int = 5) -> RuntimeStats:
    """Wall time per solve over repetitions of all poses, after one untimed warm-up solve"""
    if repetitions < 3:
        raise EvaluationError("Runtime benchmarks need at least 3 repetitions")
    poses = np.atleast_2d(poses)
    if poses.shape[0] == 0:
        raise EvaluationError("No poses to benchmark")
    targets = [Pose.from_array(p) for p in poses]
    solver.solve(targets[0])
    timings = []
    for _ in range(repetitions):
        for target in targets:
            start = time.perf_counter()
            solver.solve(target)
            timings.append((time.perf_counter() - start) * 1000.0)
    timings = np.array(timings)
    stats = RuntimeStats(float(np.median(timings)), float(np.percentile(timings, 95)), float(np.mean(timings)),
                         len(timings))
    logger.info("%s: median %.3f ms, p95 %.3f ms over %d solves", solver.name, stats.median_ms, stats.p95_ms,
                stats.solves)
    return stats
