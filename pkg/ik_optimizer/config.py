from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, Optional, Tuple
import json


class Workspace(str, Enum):
    """Workspace presets the network layouts and training parameters were tuned for"""
    SMALL = "small"
    FULL = "full"


# Workspace bounds [x, y, z] in meters, (min, max)
WORKSPACE_PRESETS: Dict[Workspace, Tuple[Tuple[float, float, float], Tuple[float, float, float]]] = {
    Workspace.SMALL: ((0.2, -0.9, 0.8), (0.85, 0.0, 1.4)),
    Workspace.FULL: ((0.2, -0.9, 0.8), (0.85, 0.48, 1.4)),
}

# Layer width factor per model kind for the desk training preset
DESK_WIDTH_FACTOR: Dict[str, float] = {"mlp": 0.05, "gan": 0.1}


@dataclass
class TrainConfig:
    """Training configuration for the single-solution and multi-solution models"""

    batch_size: int = 128
    lr0: float = 1e-3              # Initial learning rate, decayed linearly per epoch
    epochs: int = 30
    grad_clip: Optional[float] = 1.0   # Global gradient-norm clip, None disables
    restarts: int = 2              # Retries after divergence
    rng_seed: int = 0

    # Loss weights
    position_weight: float = 1.0
    rotation_weight: float = 0.5
    zero_controller_weight: float = 0.05
    variance_weight: float = 0.5   # Multi-solution model only

    noise_dim: int = 0             # Multi-solution model only
    divergence_grad_norm: float = 1e6
    val_subset: int = 2048         # Validation poses evaluated per epoch
    workers: int = 1
    progress: bool = False         # Show a tqdm bar over epochs

    def __post_init__(self):
        """Validate configuration parameters"""
        if self.batch_size < 1:
            raise ValueError("Batch size must be at least 1")
        if self.lr0 < 0:
            raise ValueError("Learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("Number of epochs must be at least 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("Gradient clip must be positive or None")
        if self.restarts < 0:
            raise ValueError("Restarts must be non-negative")
        if self.noise_dim < 0:
            raise ValueError("Noise dimension must be non-negative")
        for name in ("position_weight", "rotation_weight", "zero_controller_weight", "variance_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.divergence_grad_norm <= 0:
            raise ValueError("Divergence gradient norm must be positive")
        if self.workers < 1:
            raise ValueError("Workers must be at least 1")

    @classmethod
    def preset(cls, kind: str, workspace: str = "desk", **overrides) -> "TrainConfig":
        """Training parameters per model kind and workspace

        Args:
            kind: 'mlp' or 'gan'
            workspace: 'small', 'full' or 'desk' (reduced budget for CPU runs)
            overrides: Field values replacing the preset ones

        Returns:
            TrainConfig with the preset values applied
        """
        presets = {
            ("mlp", "small"): dict(batch_size=150, lr0=1.6e-4, epochs=300, restarts=2),
            ("mlp", "full"): dict(batch_size=300, lr0=1e-4, epochs=100, restarts=2),
            ("gan", "small"): dict(batch_size=350, lr0=2.1e-4, epochs=50, restarts=9,
                                   noise_dim=8, grad_clip=None),
            ("gan", "full"): dict(batch_size=300, lr0=1.9e-4, epochs=50, restarts=9,
                                  noise_dim=10, grad_clip=None),
            ("mlp", "desk"): dict(batch_size=64, lr0=1e-3, epochs=40, restarts=2),
            ("gan", "desk"): dict(batch_size=128, lr0=1e-3, epochs=40, restarts=9,
                                  noise_dim=8, grad_clip=None, variance_weight=0.1),
        }
        key = (kind.lower(), str(getattr(workspace, "value", workspace)).lower())
        if key not in presets:
            raise ValueError(f"No training preset for kind={kind!r}, workspace={workspace!r}")
        values = dict(presets[key])
        values.update(overrides)
        return cls(**values)


@dataclass
class GaConfig:
    """Genetic algorithm configuration"""

    population: int = 256
    generations: int = 100
    seed_fraction: float = 0.5     # Share of the initial population taken from seeds
    elitism: int = 2
    tournament_k: int = 3
    crossover_rate: float = 0.7
    mutation_sigma: float = 0.05   # Fraction of the joint range
    mutation_decades: float = 4.0  # Child mutation scales spread log-uniformly over this many decades below sigma
    timeout_ms: Optional[float] = 50.0
    rng_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        """Validate configuration parameters"""
        if self.population < 2:
            raise ValueError("Population must be at least 2")
        if self.generations < 0:
            raise ValueError("Generations must be non-negative")
        if not 0 <= self.seed_fraction <= 1:
            raise ValueError("Seed fraction must be between 0 and 1")
        if not 0 <= self.elitism < self.population:
            raise ValueError("Elitism must be non-negative and smaller than the population")
        if self.tournament_k < 1:
            raise ValueError("Tournament size must be at least 1")
        if not 0 <= self.crossover_rate <= 1:
            raise ValueError("Crossover rate must be between 0 and 1")
        if self.mutation_sigma < 0:
            raise ValueError("Mutation sigma must be non-negative")
        if self.mutation_decades < 0:
            raise ValueError("Mutation decades must be non-negative")
        if self.timeout_ms is not None and self.timeout_ms <= 0:
            raise ValueError("Timeout must be positive or None")

    @property
    def seed_slots(self) -> int:
        """Number of initial individuals that may come from seeds"""
        return int(self.seed_fraction * self.population)


@dataclass
class DatasetConfig:
    """Dataset generation configuration"""

    bounds_min: Tuple[float, float, float] = WORKSPACE_PRESETS[Workspace.SMALL][0]
    bounds_max: Tuple[float, float, float] = WORKSPACE_PRESETS[Workspace.SMALL][1]
    count: int = 50000             # Training samples; test and validation sets are added on top
    rng_seed: int = 0
    test_frac: float = 0.10
    val_frac: float = 0.01
    margin_x_back: float = 0.0     # Safety margin (m) removed from the low x bound
    margin_y_right: float = 0.0    # Safety margin (m) removed from the low y bound
    workers: int = 1

    def __post_init__(self):
        """Validate configuration parameters"""
        if self.count <= 0:
            raise ValueError("Sample count must be positive")
        if not (0 < self.test_frac < 1 and 0 < self.val_frac < 1):
            raise ValueError("Split fractions must lie in (0, 1)")
        if self.test_frac + self.val_frac >= 1:
            raise ValueError("Split fractions must sum to less than 1")
        if self.margin_x_back < 0 or self.margin_y_right < 0:
            raise ValueError("Safety margins must be non-negative")
        if self.workers < 1:
            raise ValueError("Workers must be at least 1")

    @property
    def effective_bounds(self) -> Tuple[Tuple[float, float, float], Tuple[float, float, float]]:
        """Bounds after the safety margins were applied"""
        lo = list(self.bounds_min)
        lo[0] += self.margin_x_back
        lo[1] += self.margin_y_right
        return tuple(lo), tuple(self.bounds_max)


def load_config(path: Optional[str], cls, **overrides):
    """Load a configuration dataclass from a JSON document

    Args:
        path: JSON file path, None uses the dataclass defaults
        cls: Configuration dataclass to build
        overrides: Values that win over the file (None values are ignored)

    Returns:
        Instance of cls
    """
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            values = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"Unknown {cls.__name__} keys in {path}: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def with_overrides(config, **overrides):
    """Return a copy of a config with the non-None overrides applied"""
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
