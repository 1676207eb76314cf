#!/usr/bin/env python3
"""
Desk-scale experiments on the bundled chains:

  mlp      single-solution model per chain, success rate and mean error on the test split
  gan      multi-solution model on spatial4, spread of 500 samples for one pose
  seeding  GA seeded by the network vs unseeded GA, cost evaluations to the same cost

Results are printed and written as CSV under --out.
"""

import argparse
import logging
import os
import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pandas as pd
from tqdm import tqdm

from ik_optimizer import (
    GaConfig,
    IKModel,
    ModelKind,
    Normalizer,
    Pipeline,
    TrainConfig,
    WorkspaceBounds,
    ga_solve,
    gan_preset,
    generate,
    hybrid_solve,
    load_chain,
    mlp_preset,
    neural_solutions,
    split,
    train_gan,
    train_mlp,
)
from ik_optimizer.config import DESK_WIDTH_FACTOR
from ik_optimizer.evalbench import evaluate_single
from ik_optimizer.solvers import HybridSolver
from ik_optimizer.training import GoalSet

logger = logging.getLogger("desk_experiments")

# Boxes enclosing the reachable positions of the bundled chains
CHAIN_BOUNDS = {
    "planar2": WorkspaceBounds((-1.1, -1.1, -0.1), (1.1, 1.1, 0.1)),
    "spatial4": WorkspaceBounds((-0.9, -0.9, -0.8), (0.9, 0.9, 1.2)),
}


def make_splits(chain, count, seed, workers):
    bounds = CHAIN_BOUNDS[chain.name]
    n_test, n_val = count // 10, count // 100
    records = generate(chain, bounds, count + n_test + n_val, seed, workers=workers)
    return bounds, split(records, rng_seed=seed, test_count=n_test, val_count=n_val)


def train_desk_mlp(chain, count, seed, workers, **overrides):
    bounds, (train, test, val) = make_splits(chain, count, seed, workers)
    cfg = TrainConfig.preset("mlp", "desk", rng_seed=seed, progress=True, **overrides)
    normalizer = Normalizer.from_chain(chain, bounds)
    net = mlp_preset("small", chain.dof, DESK_WIDTH_FACTOR["mlp"], rng_seed=seed)
    net, report = train_mlp(chain, train, net, normalizer, cfg, validation=val)
    return IKModel(net, normalizer, ModelKind.MLP, 0, chain.digest(), seed), report, test


def run_mlp_experiment(args):
    """Single-solution accuracy: success >= 95% and mean position error < 5 mm expected"""
    rows = []
    models = {}
    for name in ("planar2", "spatial4"):
        chain = load_chain(name)
        model, report, test = train_desk_mlp(chain, args.count, args.seed, args.workers)
        models[name] = (model, test)
        evaluation = evaluate_single(chain, HybridSolver(chain, model, Pipeline.NEURAL_ONLY), test,
                                     workers=args.workers)
        rows.append({
            "chain": name,
            "best_epoch": report.best_epoch,
            "restarts": report.restarts,
            "avg_pos_mm": evaluation.avg_pos_mm,
            "avg_rot_deg": evaluation.avg_rot_deg,
            "success_rate": evaluation.success_rate,
            "passed": evaluation.success_rate >= 95.0 and evaluation.avg_pos_mm < 5.0,
        })
    return pd.DataFrame(rows), models


def run_gan_experiment(args):
    """Nullspace spread: mean position error < 10 mm and a joint variance > 1e-3 expected

    Only the position goal is trained, leaving spatial4 one redundant degree of freedom.
    """
    chain = load_chain("spatial4")
    bounds, (train, test, val) = make_splits(chain, args.count, args.seed, args.workers)
    net, noise_dim = gan_preset("small", chain.dof, DESK_WIDTH_FACTOR["gan"], rng_seed=args.seed)
    cfg = TrainConfig.preset("gan", "desk", rng_seed=args.seed, noise_dim=noise_dim, rotation_weight=0.0,
                             progress=True)
    normalizer = Normalizer.from_chain(chain, bounds)
    net, report = train_gan(chain, train, net, normalizer, cfg, validation=val)
    model = IKModel(net, normalizer, ModelKind.GAN, noise_dim, chain.digest(), args.seed)

    goals = GoalSet.default(chain, rotation_weight=0.0)
    rows = []
    for index in range(min(5, len(test))):
        batch = neural_solutions(chain, model, test.poses[index], goals, samples=500, rng_seed=args.seed + index)
        variance = np.var(normalizer.normalize_joints(batch.configs), axis=0)
        rows.append({
            "pose": index,
            "mean_pos_mm": float(np.mean(batch.pos_err_mm)),
            "best_pos_mm": float(np.min(batch.pos_err_mm)),
            "max_joint_variance": float(variance.max()),
            "passed": float(np.mean(batch.pos_err_mm)) < 10.0 and float(variance.max()) > 1e-3,
        })
    logger.info("GAN best epoch %d after %d restarts", report.best_epoch, report.restarts)
    return pd.DataFrame(rows)


def evaluations_to_reach(history, target_cost, population, elitism):
    """Cost evaluations a GA run spent until its best cost first reached target_cost, None if never"""
    for generation, cost in enumerate(history):
        if cost <= target_cost:
            return population + generation * (population - elitism)
    return None


def run_seeding_experiment(args, models=None):
    """Seeded GA needs >= 90% fewer evaluations; hybrid error <= 0.5x neural on >= 70% of poses expected"""
    chain = load_chain("spatial4")
    if models and "spatial4" in models:
        model, test = models["spatial4"]
    else:
        model, _, test = train_desk_mlp(chain, args.count, args.seed, args.workers)
    goals = GoalSet.default(chain)
    cfg = GaConfig(generations=args.generations, timeout_ms=None, rng_seed=args.seed, workers=1)

    rows = []
    for index in tqdm(range(min(args.poses, len(test))), desc="seeding"):
        target = test.poses[index]
        unseeded = ga_solve(chain, target, goals, cfg)
        neural = hybrid_solve(chain, target, goals, model, Pipeline.NEURAL_ONLY, cfg)
        seeded = ga_solve(chain, target, goals, cfg, seeds=neural)
        needed = evaluations_to_reach(seeded.best_cost_history, unseeded.cost[0], cfg.population, cfg.elitism)
        rows.append({
            "pose": index,
            "unseeded_cost": float(unseeded.cost[0]),
            "unseeded_evaluations": unseeded.evaluations,
            "seeded_evaluations": np.nan if needed is None else needed + 1,
            "neural_pos_mm": float(neural.pos_err_mm[0]),
            "hybrid_pos_mm": float(seeded.pos_err_mm[0]),
        })
    frame = pd.DataFrame(rows)
    frame["saving"] = 1.0 - frame["seeded_evaluations"] / frame["unseeded_evaluations"]
    frame["hybrid_halves_error"] = frame["hybrid_pos_mm"] <= 0.5 * frame["neural_pos_mm"]
    logger.info("Median evaluation saving %.1f%%, hybrid halves the neural error on %.1f%% of poses",
                100.0 * frame["saving"].median(), 100.0 * frame["hybrid_halves_error"].mean())
    return frame


def main():
    parser = argparse.ArgumentParser(description="Desk-scale experiments")
    parser.add_argument("experiments", nargs="*", default=["mlp", "gan", "seeding"],
                        choices=["mlp", "gan", "seeding"])
    parser.add_argument("--count", type=int, default=50000, help="Training samples per chain")
    parser.add_argument("--poses", type=int, default=200, help="Test poses for the seeding experiment")
    parser.add_argument("--generations", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="results/desk")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    os.makedirs(args.out, exist_ok=True)

    models = None
    if "mlp" in args.experiments:
        frame, models = run_mlp_experiment(args)
        frame.to_csv(os.path.join(args.out, "mlp.csv"), index=False)
        print(frame.to_string(index=False))
    if "gan" in args.experiments:
        frame = run_gan_experiment(args)
        frame.to_csv(os.path.join(args.out, "gan.csv"), index=False)
        print(frame.to_string(index=False))
    if "seeding" in args.experiments:
        frame = run_seeding_experiment(args, models)
        frame.to_csv(os.path.join(args.out, "seeding.csv"), index=False)
        print(frame.describe().to_string())


if __name__ == "__main__":
    main()
