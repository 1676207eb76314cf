"""Command-line entry point: gen-data, train-mlp, train-gan, solve, eval, bench.

Every option can also come from a JSON file given with --config whose keys
are the option names (dashes or underscores); options given on the command
line win over the file.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional
import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .chain_model import KinematicChain, load_chain
from .config import (
    DESK_WIDTH_FACTOR,
    WORKSPACE_PRESETS,
    DatasetConfig,
    GaConfig,
    TrainConfig,
    Workspace,
)
from .dataset import WorkspaceBounds, generate, make_meta, read_dataset, split, write_dataset
from .evalbench import bench_runtime, evaluate_multi, evaluate_single
from .neural import (
    IKModel,
    ModelKind,
    Normalizer,
    build_net,
    gan_layout,
    load_model,
    mlp_layout,
    param_digest,
    save_model,
)
from .solvers import HybridSolver, LookupSolver, Pipeline, hybrid_solve
from .training import GoalSet, TrainingError, train_gan, train_mlp
from .utils import IKUtils

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOOKUP = "lookup"


@dataclass
class RunManifest:
    """Provenance of one artifact-producing command"""
    command: str
    argv: List[str]
    config_digest: str
    chain_hash: str
    rng_seeds: Dict[str, int]
    tool_version: str = __version__
    workers: int = 1
    outputs: List[str] = field(default_factory=list)
    extra: Dict[str, object] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def write(self, path: str):
        IKUtils.write_json(asdict(self), path)


def _none_or_float(text: str) -> Optional[float]:
    return None if text.lower() == "none" else float(text)


# ------------------------------------------------------------------ #
# Parser
# ------------------------------------------------------------------ #
def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with option values; command-line options win")
    p.add_argument("--chain", help="Chain file or bundled chain name (planar2, spatial4, arm8)")
    p.add_argument("--seed", type=int, help="Random seed (default 0)")
    p.add_argument("--workers", type=int, help="Parallel workers (default 1)")
    p.add_argument("--verbose", action="store_true", default=None, help="Debug logging")


def _add_goal_weights(p: argparse.ArgumentParser):
    p.add_argument("--position-weight", type=float, help="Weight of the position goal (default 1.0)")
    p.add_argument("--rotation-weight", type=float, help="Weight of the rotation goal (default 0.5)")
    p.add_argument("--zero-controller-weight", type=float,
                   help="Weight of the zero controller on the redundant joints (default 0.05)")


def _add_solver_options(p: argparse.ArgumentParser, pipelines: List[str]):
    p.add_argument("--model", help="Model file written by train-mlp or train-gan")
    p.add_argument("--pipeline", choices=pipelines, help="Solving pipeline (default neural-only)")
    p.add_argument("--samples", type=int, help="Noise draws per pose for multi-solution models (default 500)")
    p.add_argument("--population", type=int, help="GA population (default 256)")
    p.add_argument("--generations", type=int, help="GA generations (default 100)")
    p.add_argument("--seed-fraction", type=float, help="Share of the GA population seeded (default 0.5)")
    p.add_argument("--timeout-ms", type=str, help="GA timeout per solve in ms, 'none' disables (default 50)")
    p.add_argument("--refine-iters", type=int, help="Refinement iterations (default 50)")
    _add_goal_weights(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ik-optimizer", description="Neuro-genetic inverse kinematics toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Sample a dataset and split it into train/test/val files")
    _add_common(p)
    p.add_argument("--workspace", choices=[w.value for w in Workspace], help="Bounds preset (default small)")
    p.add_argument("--bounds-min", help="x,y,z lower bounds in meters (overrides the preset)")
    p.add_argument("--bounds-max", help="x,y,z upper bounds in meters (overrides the preset)")
    p.add_argument("--count", type=int, help="Training samples; test and validation sets come on top (default 50000)")
    p.add_argument("--test-frac", type=float, help="Test set size relative to the training set (default 0.10)")
    p.add_argument("--val-frac", type=float, help="Validation set size relative to the training set (default 0.01)")
    p.add_argument("--margin-x-back", type=float, help="Safety margin removed from the low x bound (m)")
    p.add_argument("--margin-y-right", type=float, help="Safety margin removed from the low y bound (m)")
    p.add_argument("--out", help="Output directory")

    for kind in ("mlp", "gan"):
        p = sub.add_parser(f"train-{kind}", help=f"Train the {'single' if kind == 'mlp' else 'multi'}-solution model")
        _add_common(p)
        p.add_argument("--train", help="Training set CSV")
        p.add_argument("--val", help="Validation set CSV (default: the training set)")
        p.add_argument("--out", help="Model file to write")
        p.add_argument("--report", help="Per-epoch report CSV (default: <out>.report.csv)")
        p.add_argument("--preset", choices=["small", "full", "desk"], help="Training parameter preset (default desk)")
        p.add_argument("--workspace", choices=[w.value for w in Workspace], help="Network layout (default small)")
        p.add_argument("--width-factor", type=float, help="Hidden width scale (default 0.05 mlp / 0.1 gan with the desk preset, else 0.1)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float, help="Initial learning rate")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--restarts", type=int)
        p.add_argument("--grad-clip", type=str, help="Gradient-norm clip, 'none' disables")
        if kind == "gan":
            p.add_argument("--variance-weight", type=float, help="Weight of the variance loss (default 0.5)")
        p.add_argument("--progress", action="store_true", default=None, help="Show a progress bar")
        _add_goal_weights(p)

    pipelines = [pl.value for pl in Pipeline]
    p = sub.add_parser("solve", help="Solve one target pose")
    _add_common(p)
    p.add_argument("--pose", help="px,py,pz,qx,qy,qz,qw")
    _add_solver_options(p, pipelines)
    p.add_argument("--out", help="Solution document (JSON); printed when omitted")

    p = sub.add_parser("eval", help="Evaluate a model or pipeline on a test set")
    _add_common(p)
    p.add_argument("--test", help="Test set CSV")
    _add_solver_options(p, pipelines + [LOOKUP])
    p.add_argument("--single", action="store_true", default=None,
                   help="Score multi-solution models by their best sample only, like single-solution ones")
    p.add_argument("--success-on", choices=["mean", "best"], help="Multi-solution success basis (default mean)")
    p.add_argument("--limit", type=int, help="Evaluate the first N test poses only")
    p.add_argument("--timing", action="store_true", default=None, help="Include solve times in the outputs")
    p.add_argument("--out", help="Per-pose report CSV; the summary is written next to it")

    p = sub.add_parser("bench", help="Measure solve times")
    _add_common(p)
    p.add_argument("--poses", help="CSV whose poses are solved")
    p.add_argument("--count", type=int, help="Number of poses (default 100)")
    p.add_argument("--repetitions", type=int, help="Timed passes over the poses (default 5)")
    _add_solver_options(p, pipelines)
    p.add_argument("--out", help="Timing JSON; printed when omitted")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill options not given on the command line from the --config file"""
    if not args.config:
        return args
    with open(args.config, encoding="utf-8") as f:
        doc = json.load(f)
    known = {a.dest for a in _subparser(parser, args.command)._actions} - {"help", "config"}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ValueError(f"Unknown option {key!r} in {args.config} for {args.command}")
        if getattr(args, dest, None) is None:
            setattr(args, dest, value)
    return args


def _value(args, name, default):
    value = getattr(args, name, None)
    return default if value is None else value


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise ValueError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _goals(chain: KinematicChain, args) -> GoalSet:
    return GoalSet.default(chain, _value(args, "position_weight", 1.0), _value(args, "rotation_weight", 0.5),
                           _value(args, "zero_controller_weight", 0.05))


def _manifest_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".manifest.json"


# ------------------------------------------------------------------ #
# Commands
# ------------------------------------------------------------------ #
def cmd_gen_data(args, argv: List[str]) -> int:
    _require(args, "chain", "out")
    start = time.perf_counter()
    chain = load_chain(args.chain)
    preset_min, preset_max = WORKSPACE_PRESETS[Workspace(_value(args, "workspace", "small"))]
    bounds_min = IKUtils.parse_floats(args.bounds_min, 3, "bounds-min") if args.bounds_min else preset_min
    bounds_max = IKUtils.parse_floats(args.bounds_max, 3, "bounds-max") if args.bounds_max else preset_max
    cfg = DatasetConfig(
        bounds_min=tuple(bounds_min), bounds_max=tuple(bounds_max),
        count=_value(args, "count", 50000), rng_seed=_value(args, "seed", 0),
        test_frac=_value(args, "test_frac", 0.10), val_frac=_value(args, "val_frac", 0.01),
        margin_x_back=_value(args, "margin_x_back", 0.0), margin_y_right=_value(args, "margin_y_right", 0.0),
        workers=_value(args, "workers", 1),
    )
    bounds = WorkspaceBounds(*cfg.effective_bounds)
    n_test = int(np.floor(cfg.count * cfg.test_frac))
    n_val = int(np.floor(cfg.count * cfg.val_frac))

    records = generate(chain, bounds, cfg.count + n_test + n_val, cfg.rng_seed, workers=cfg.workers)
    parts = split(records, cfg.test_frac, cfg.val_frac, cfg.rng_seed, test_count=n_test, val_count=n_val)
    outputs = []
    for name, part in zip(("train", "test", "val"), parts):
        path = os.path.join(args.out, f"{name}.csv")
        write_dataset(part, make_meta(chain, part, bounds, cfg.rng_seed, name), path)
        outputs.append(path)

    RunManifest("gen-data", argv, IKUtils.digest_config(asdict(cfg)), chain.digest(), {"sampling": cfg.rng_seed},
                workers=cfg.workers, outputs=outputs,
                wall_time_s=time.perf_counter() - start).write(os.path.join(args.out, "manifest.json"))
    return 0


def cmd_train(args, argv: List[str], kind: ModelKind) -> int:
    _require(args, "chain", "train", "out")
    start = time.perf_counter()
    chain = load_chain(args.chain)
    train_set, meta = read_dataset(args.train, chain)
    val_set = read_dataset(args.val, chain)[0] if args.val else None

    workspace = Workspace(_value(args, "workspace", "small"))
    preset = _value(args, "preset", "desk")
    width_factor = _value(args, "width_factor", DESK_WIDTH_FACTOR[kind.value] if preset == "desk" else 0.1)
    noise_dim = 0
    if kind == ModelKind.GAN:
        sizes, tanh_layers, noise_dim = gan_layout(workspace, chain.dof, width_factor)
    else:
        sizes, tanh_layers = mlp_layout(workspace, chain.dof, width_factor)
    overrides = {
        "epochs": args.epochs, "lr0": args.lr, "batch_size": args.batch_size, "restarts": args.restarts,
        "rng_seed": args.seed, "workers": args.workers, "progress": args.progress,
        "variance_weight": getattr(args, "variance_weight", None),
        "position_weight": args.position_weight, "rotation_weight": args.rotation_weight,
        "zero_controller_weight": args.zero_controller_weight,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.grad_clip is not None:
        overrides["grad_clip"] = _none_or_float(str(args.grad_clip))
    overrides["noise_dim"] = noise_dim
    cfg = TrainConfig.preset(kind.value, preset, **overrides)

    net = build_net(sizes, tanh_layers, cfg.rng_seed)
    init_digest = param_digest(net)
    normalizer = Normalizer.from_chain(chain, meta.bounds)
    goals = GoalSet.from_config(chain, cfg)
    report_path = args.report or os.path.splitext(args.out)[0] + ".report.csv"
    manifest = RunManifest(f"train-{kind.value}", argv, IKUtils.digest_config(asdict(cfg)), chain.digest(),
                           {"training": cfg.rng_seed, "dataset": meta.rng_seed}, workers=cfg.workers,
                           extra={"init_param_digest": init_digest, "layer_sizes": sizes,
                                  "dataset_digest": IKUtils.digest_file(args.train)})

    trainer = train_gan if kind == ModelKind.GAN else train_mlp
    try:
        trained, report = trainer(chain, train_set, net, normalizer, cfg, goals, val_set)
    except TrainingError as e:
        e.report.write(report_path)
        manifest.outputs = [report_path]
        manifest.wall_time_s = time.perf_counter() - start
        manifest.write(_manifest_path(args.out))
        raise

    IKUtils.ensure_parent(args.out)
    save_model(IKModel(trained, normalizer, kind, noise_dim, chain.digest(), cfg.rng_seed), args.out)
    report.write(report_path)
    manifest.outputs = [args.out, report_path]
    manifest.extra["final_param_digest"] = param_digest(trained)
    manifest.wall_time_s = time.perf_counter() - start
    manifest.write(_manifest_path(args.out))
    return 0


def _ga_config(args) -> GaConfig:
    timeout = GaConfig().timeout_ms if args.timeout_ms is None else _none_or_float(str(args.timeout_ms))
    return GaConfig(population=_value(args, "population", 256), generations=_value(args, "generations", 100),
                    seed_fraction=_value(args, "seed_fraction", 0.5), timeout_ms=timeout,
                    rng_seed=_value(args, "seed", 0), workers=_value(args, "workers", 1))


def _load_model(args, pipeline: str) -> Optional[IKModel]:
    if pipeline in (Pipeline.GA_ONLY.value, LOOKUP):
        return load_model(args.model) if args.model else None
    _require(args, "model")
    return load_model(args.model)


def cmd_solve(args, argv: List[str]) -> int:
    _require(args, "chain", "pose")
    start = time.perf_counter()
    chain = load_chain(args.chain)
    target = IKUtils.parse_pose(args.pose)
    pipeline = _value(args, "pipeline", Pipeline.NEURAL_ONLY.value)
    model = _load_model(args, pipeline)
    goals = _goals(chain, args)
    ga = _ga_config(args)
    batch = hybrid_solve(chain, target, goals, model, pipeline, ga, _value(args, "samples", 500),
                         _value(args, "refine_iters", 50))
    if pipeline != Pipeline.NEURAL_ONLY.value:
        batch = batch.sorted()

    doc = {
        "target": target.as_array().tolist(),
        "pipeline": pipeline,
        "goals": goals.to_dict(),
        "joint_names": chain.joint_names,
        "solutions": [{"joints": c.tolist(), "pos_err_mm": float(p), "rot_err_deg": float(r), "cost": float(k)}
                      for c, p, r, k in zip(batch.configs, batch.pos_err_mm, batch.rot_err_deg, batch.cost)],
        "evaluations": batch.evaluations,
        "elapsed_ms": batch.elapsed_ms,
    }
    if args.out:
        IKUtils.write_json(doc, args.out)
        RunManifest("solve", argv, IKUtils.digest_config(asdict(ga)), chain.digest(), {"solver": ga.rng_seed},
                    workers=ga.workers, outputs=[args.out],
                    wall_time_s=time.perf_counter() - start).write(_manifest_path(args.out))
    else:
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0


def _build_solver(args, chain: KinematicChain, pipeline: str, model: Optional[IKModel], table=None):
    goals = _goals(chain, args)
    if pipeline == LOOKUP:
        return LookupSolver(chain, table, goals)
    return HybridSolver(chain, model, pipeline, goals, _ga_config(args), _value(args, "samples", 500),
                        _value(args, "refine_iters", 50))


def cmd_eval(args, argv: List[str]) -> int:
    _require(args, "chain", "test", "out")
    start = time.perf_counter()
    chain = load_chain(args.chain)
    test_set, meta = read_dataset(args.test, chain)
    if args.limit is not None:
        test_set = test_set.subset(np.arange(min(args.limit, len(test_set))))
    pipeline = _value(args, "pipeline", Pipeline.NEURAL_ONLY.value)
    model = _load_model(args, pipeline)
    workers = _value(args, "workers", 1)
    seed = _value(args, "seed", 0)

    multi = (pipeline == Pipeline.NEURAL_ONLY.value and model is not None and model.kind == ModelKind.GAN
             and not args.single)
    if multi:
        report = evaluate_multi(chain, model, test_set, _value(args, "samples", 500), _goals(chain, args), seed,
                                _value(args, "success_on", "mean"), workers=workers)
    else:
        solver = _build_solver(args, chain, pipeline, model, table=test_set)
        report = evaluate_single(chain, solver, test_set, workers=workers)
    report.write(args.out, include_timing=bool(args.timing))

    summary_path = os.path.splitext(args.out)[0] + ".json"
    RunManifest("eval", argv, IKUtils.digest_config({"pipeline": pipeline, "multi": multi}), chain.digest(),
                {"solver": seed, "dataset": meta.rng_seed}, workers=workers, outputs=[args.out, summary_path],
                extra={"model_digest": IKUtils.digest_file(args.model) if args.model else None},
                wall_time_s=time.perf_counter() - start).write(_manifest_path(args.out))
    return 0


def cmd_bench(args, argv: List[str]) -> int:
    _require(args, "chain", "poses")
    start = time.perf_counter()
    chain = load_chain(args.chain)
    poses, meta = read_dataset(args.poses, chain)
    poses = poses.poses[:_value(args, "count", 100)]
    pipeline = _value(args, "pipeline", Pipeline.NEURAL_ONLY.value)
    # Timings run on one worker
    args.workers = 1
    solver = _build_solver(args, chain, pipeline, _load_model(args, pipeline))
    stats = bench_runtime(solver, poses, _value(args, "repetitions", 5))
    doc = {"pipeline": pipeline, "poses": int(poses.shape[0]), **stats.to_dict()}
    if args.out:
        IKUtils.write_json(doc, args.out)
        ga = _ga_config(args)
        RunManifest("bench", argv, IKUtils.digest_config({"pipeline": pipeline, "ga": asdict(ga)}), chain.digest(),
                    {"solver": ga.rng_seed, "dataset": meta.rng_seed}, workers=1, outputs=[args.out],
                    extra={"model_digest": IKUtils.digest_file(args.model) if args.model else None},
                    wall_time_s=time.perf_counter() - start).write(_manifest_path(args.out))
    else:
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        args = apply_config_file(parser, args)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        if args.command == "gen-data":
            return cmd_gen_data(args, argv)
        if args.command == "train-mlp":
            return cmd_train(args, argv, ModelKind.MLP)
        if args.command == "train-gan":
            return cmd_train(args, argv, ModelKind.GAN)
        if args.command == "solve":
            return cmd_solve(args, argv)
        if args.command == "eval":
            return cmd_eval(args, argv)
        return cmd_bench(args, argv)
    except (ValueError, RuntimeError, OSError, json.JSONDecodeError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
