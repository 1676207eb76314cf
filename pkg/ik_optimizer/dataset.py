"""Dataset generation by uniform joint sampling, splitting, hull volume and file IO."""

from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple
import json
import logging
import os

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial import ConvexHull, QhullError
from sklearn.model_selection import train_test_split

from .chain_model import KinematicChain, Pose
from .kinematics import fk_batch

logger = logging.getLogger(__name__)

POSE_COLUMNS = ["px", "py", "pz", "qx", "qy", "qz", "qw"]
CHUNK_SIZE = 4096              # Accepted samples per RNG stream
CANDIDATES_PER_DRAW = 8192
ACCEPTANCE_WINDOW = 1_000_000
MIN_ACCEPTANCE_RATE = 1e-3
COPLANAR_TOLERANCE = 1e-9      # meters
VERIFY_TOLERANCE = 1e-10


class DatasetError(ValueError):
    """Raised for unreachable bounds, bad splits, degenerate hulls and malformed files"""
    pass


@dataclass(frozen=True)
class WorkspaceBounds:
    """Axis-aligned box (meters) the sampled tip positions must lie in"""
    min: Tuple[float, float, float]
    max: Tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3:
            raise DatasetError("Workspace bounds need 3 components for min and max")
        for axis, a, b in zip("xyz", lo, hi):
            if not a < b:
                raise DatasetError(f"Workspace bounds invalid on axis {axis}: min {a} must be below max {b}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, positions: np.ndarray) -> np.ndarray:
        positions = np.atleast_2d(positions)
        return np.all((positions >= self.min) & (positions <= self.max), axis=1)

    def shrink(self, margin_min=(0.0, 0.0, 0.0), margin_max=(0.0, 0.0, 0.0)) -> "WorkspaceBounds":
        """Bounds with safety margins removed from the low and high sides"""
        return WorkspaceBounds(tuple(np.add(self.min, margin_min)), tuple(np.subtract(self.max, margin_max)))

    @property
    def box_volume_cm3(self) -> float:
        return float(np.prod(np.subtract(self.max, self.min))) * 1e6


@dataclass(frozen=True)
class SampleRecord:
    """A joint configuration and the tip pose it reaches"""
    config: np.ndarray
    pose: Pose


class Dataset:
    """Column store of sampled configurations (N, dof) and poses (N, 7).

    Behaves as a sequence of SampleRecord.
    """

    def __init__(self, configs: np.ndarray, poses: np.ndarray):
        configs = np.asarray(configs, dtype=float)
        poses = np.asarray(poses, dtype=float)
        if configs.ndim != 2 or poses.ndim != 2 or poses.shape[1] != 7:
            raise DatasetError("Dataset needs configs (N, dof) and poses (N, 7)")
        if configs.shape[0] != poses.shape[0]:
            raise DatasetError("Dataset configs and poses differ in length")
        self.configs = configs
        self.poses = poses

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord]) -> "Dataset":
        return cls(np.array([r.config for r in records]), np.array([r.pose.as_array() for r in records]))

    @property
    def dof(self) -> int:
        return self.configs.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3]

    def __len__(self) -> int:
        return self.configs.shape[0]

    def __getitem__(self, index: int) -> SampleRecord:
        return SampleRecord(self.configs[index].copy(), Pose.from_array(self.poses[index]))

    def __iter__(self) -> Iterator[SampleRecord]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.configs[indices], self.poses[indices])

    def to_frame(self) -> pd.DataFrame:
        columns = [f"j{i}" for i in range(self.dof)] + POSE_COLUMNS
        return pd.DataFrame(np.hstack([self.configs, self.poses]), columns=columns)


@dataclass
class DatasetMeta:
    """Sidecar metadata of a dataset file"""
    chain_hash: str
    bounds: WorkspaceBounds
    count: int
    rng_seed: int
    volume_cm3: Optional[float] = None
    density: Optional[float] = None     # Samples per cm³
    split: str = "all"

    def __post_init__(self):
        if isinstance(self.bounds, dict):
            self.bounds = WorkspaceBounds(tuple(self.bounds["min"]), tuple(self.bounds["max"]))
        if self.volume_cm3 is not None and self.density is None and self.volume_cm3 > 0:
            self.density = self.count / self.volume_cm3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = {"min": list(self.bounds.min), "max": list(self.bounds.max)}
        return d


def joint_limits_validity(chain: KinematicChain) -> Callable[[np.ndarray], bool]:
    """Default validity predicate: the configuration respects the joint limits"""
    def valid(config: np.ndarray) -> bool:
        return bool(chain.within_limits(config)[0])
    return valid


def _sample_chunk(chain: KinematicChain, bounds: WorkspaceBounds, quota: int, rng_seed: int,
                  chunk_index: int, validity: Optional[Callable[[np.ndarray], bool]]):
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(chunk_index,)))
    configs, poses = [], []
    accepted = attempts = 0
    while accepted < quota:
        candidates = rng.uniform(chain.lower, chain.upper, size=(CANDIDATES_PER_DRAW, chain.dof))
        reached = fk_batch(chain, candidates)
        keep = bounds.contains(reached[:, :3])
        if validity is not None:
            idx = np.flatnonzero(keep)
            keep[idx] = [validity(candidates[i]) for i in idx]
        attempts += CANDIDATES_PER_DRAW
        take = np.flatnonzero(keep)[:quota - accepted]
        configs.append(candidates[take])
        poses.append(reached[take])
        accepted += len(take)
        if attempts >= ACCEPTANCE_WINDOW and accepted / attempts < MIN_ACCEPTANCE_RATE:
            raise DatasetError(
                f"Acceptance rate {accepted / attempts:.2e} over {attempts} attempts is below "
                f"{MIN_ACCEPTANCE_RATE:g}; bounds {bounds.min}..{bounds.max} look unreachable for chain {chain.name!r}")
    return np.vstack(configs), np.vstack(poses)


def generate(chain: KinematicChain, bounds: WorkspaceBounds, count: int, rng_seed: int,
             validity: Optional[Callable[[np.ndarray], bool]] = None, workers: int = 1) -> Dataset:
    """Rejection-sample count configurations whose tip lies inside bounds

    Joints are drawn uniformly within their limits. The sample index space is
    cut into fixed chunks, each with its own RNG stream derived from rng_seed,
    so the result does not depend on the number of workers.

    Args:
        chain: Kinematic chain
        bounds: Workspace the tip position must lie in
        count: Number of samples
        rng_seed: Seed of the sampling streams
        validity: Extra predicate over a configuration, None keeps joint limits only
        workers: Parallel workers

    Returns:
        Dataset with exactly count samples
    """
    if count <= 0:
        raise DatasetError("Sample count must be positive")
    quotas = [min(CHUNK_SIZE, count - start) for start in range(0, count, CHUNK_SIZE)]
    logger.info("Sampling %d configurations for chain %s in %d chunks", count, chain.name, len(quotas))
    if workers > 1 and len(quotas) > 1:
        chunks = Parallel(n_jobs=workers)(
            delayed(_sample_chunk)(chain, bounds, quota, rng_seed, k, validity) for k, quota in enumerate(quotas))
    else:
        chunks = [_sample_chunk(chain, bounds, quota, rng_seed, k, validity) for k, quota in enumerate(quotas)]
    return Dataset(np.vstack([c for c, _ in chunks]), np.vstack([p for _, p in chunks]))


def split_sizes(n: int, test_frac: float, val_frac: float) -> Tuple[int, int, int]:
    if not (0 < test_frac < 1 and 0 < val_frac < 1) or test_frac + val_frac >= 1:
        raise DatasetError(f"Split fractions ({test_frac}, {val_frac}) must lie in (0, 1) and sum below 1")
    n_test = int(np.floor(n * test_frac))
    n_val = int(np.floor(n * val_frac))
    return n - n_test - n_val, n_test, n_val


def split(records: Dataset, test_frac: float = 0.10, val_frac: float = 0.01, rng_seed: int = 0,
          test_count: Optional[int] = None, val_count: Optional[int] = None) -> Tuple[Dataset, Dataset, Dataset]:
    """Shuffle and partition into train, test and validation sets

    Sizes are floor(n·frac); test_count/val_count override them with exact sizes.
    """
    n = len(records)
    n_train, n_test, n_val = split_sizes(n, test_frac, val_frac)
    if test_count is not None:
        n_test = test_count
    if val_count is not None:
        n_val = val_count
    n_train = n - n_test - n_val
    if min(n_train, n_test, n_val) < 1:
        raise DatasetError(f"{n} records are too few for non-empty splits ({n_train}/{n_test}/{n_val})")
    indices = np.arange(n)
    rest, test = train_test_split(indices, test_size=n_test, random_state=rng_seed, shuffle=True)
    train, val = train_test_split(rest, test_size=n_val, random_state=rng_seed + 1, shuffle=True)
    logger.debug("Split %d records into %d/%d/%d", n, len(train), len(test), len(val))
    return records.subset(train), records.subset(test), records.subset(val)


def estimate_volume(records) -> float:
    """Convex-hull volume of the sample positions in cm³

    Args:
        records: Dataset or (N, 3) array of positions in meters
    """
    points = records.positions if isinstance(records, Dataset) else np.asarray(records, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 4:
        raise DatasetError("Volume estimation needs at least 4 positions in 3-D")
    centered = points - points.mean(axis=0)
    normal = np.linalg.svd(centered, full_matrices=False)[2][-1]
    if np.max(np.abs(centered @ normal)) <= COPLANAR_TOLERANCE:
        raise DatasetError("Degenerate point set: positions are coplanar")
    try:
        hull = ConvexHull(points)
    except QhullError as e:
        raise DatasetError(f"Convex hull failed: {e}")
    return float(hull.volume) * 1e6


def _meta_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def write_dataset(records: Dataset, meta: DatasetMeta, path: str):
    """Write the CSV file and its JSON sidecar"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    records.to_frame().to_csv(path, index=False, float_format="%.17g")
    with open(_meta_path(path), "w", encoding="utf-8") as f:
        json.dump(meta.to_dict(), f, indent=2, sort_keys=True)
    logger.info("Wrote %d samples to %s", len(records), path)


def read_dataset(path: str, chain: Optional[KinematicChain] = None,
                 verify: bool = False) -> Tuple[Dataset, DatasetMeta]:
    """Read a dataset file and its sidecar

    Args:
        path: CSV file path
        chain: When given, the sidecar chain hash must match it
        verify: Recompute every pose with fk (requires chain)

    Returns:
        Tuple of (Dataset, DatasetMeta)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found: {path}")
    meta_path = _meta_path(path)
    if not os.path.exists(meta_path):
        raise DatasetError(f"Dataset metadata not found: {meta_path}")
    with open(meta_path, encoding="utf-8") as f:
        try:
            meta = DatasetMeta(**json.load(f))
        except (TypeError, KeyError, json.JSONDecodeError) as e:
            raise DatasetError(f"Malformed dataset metadata {meta_path}: {e}")

    if chain is not None and meta.chain_hash != chain.digest():
        raise DatasetError(f"Chain hash mismatch for {path}: file {meta.chain_hash[:12]}…, chain {chain.digest()[:12]}…")

    frame = pd.read_csv(path, float_precision="round_trip")
    joint_columns = [c for c in frame.columns if c.startswith("j")]
    expected = [f"j{i}" for i in range(len(joint_columns))] + POSE_COLUMNS
    if list(frame.columns) != expected:
        raise DatasetError(f"Malformed header in {path}: {list(frame.columns)}")
    if chain is not None and len(joint_columns) != chain.dof:
        raise DatasetError(f"Malformed rows in {path}: {len(joint_columns)} joint columns for a {chain.dof}-DoF chain")
    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise DatasetError(f"Malformed rows in {path}: {e}")
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"Malformed rows in {path}: missing or non-finite values")

    records = Dataset(values[:, :len(joint_columns)], values[:, len(joint_columns):])
    if verify:
        if chain is None:
            raise DatasetError("Verification needs the chain")
        reached = fk_batch(chain, records.configs)
        if np.max(np.abs(reached[:, :3] - records.positions)) > VERIFY_TOLERANCE:
            raise DatasetError(f"Stored positions in {path} do not match forward kinematics")
        q_err = np.minimum(np.abs(reached[:, 3:] - records.poses[:, 3:]).max(axis=1),
                           np.abs(reached[:, 3:] + records.poses[:, 3:]).max(axis=1))
        if np.max(q_err) > VERIFY_TOLERANCE:
            raise DatasetError(f"Stored orientations in {path} do not match forward kinematics")
    return records, meta


def make_meta(chain: KinematicChain, records: Dataset, bounds: WorkspaceBounds, rng_seed: int,
              split_name: str = "all") -> DatasetMeta:
    """Metadata with hull volume and density; degenerate (planar) sets get no volume"""
    try:
        volume = estimate_volume(records)
    except DatasetError as e:
        logger.warning("No volume for %s split: %s", split_name, e)
        volume = None
    return DatasetMeta(chain_hash=chain.digest(), bounds=bounds, count=len(records), rng_seed=rng_seed,
                       volume_cm3=volume, split=split_name)
