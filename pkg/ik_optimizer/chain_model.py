"""Kinematic chain data model, quaternion algebra and the chain file format.

Quaternions are stored scalar-last as (x, y, z, w) and follow the Hamilton
convention. Array helpers operate on trailing axes of shape (..., 4) so the
kinematics module can run them over whole batches.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Tuple
import hashlib
import json
import logging
import math
import os

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-9
CHAINS_DIR = os.path.join(os.path.dirname(__file__), "data", "chains")


class ChainFormatError(ValueError):
    """Raised for malformed or invalid chain definitions"""
    pass


# ------------------------------------------------------------------ #
# Array quaternion algebra
# ------------------------------------------------------------------ #
def quat_mul_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b over the trailing axis, no renormalization."""
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], axis=-1)


def quat_conjugate_array(q: np.ndarray) -> np.ndarray:
    out = -np.asarray(q, dtype=float)
    out[..., 3] = -out[..., 3]
    return out


def quat_rotate_array(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate 3-vectors v by unit quaternions q (broadcasting over leading axes)."""
    u = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix_array(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) of unit quaternions (..., 4)."""
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], axis=-1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], axis=-1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def axis_angle_quat_array(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Quaternions rotating by angles (N,) about a fixed unit axis (3,)."""
    half = 0.5 * np.asarray(angles, dtype=float)
    s = np.sin(half)[..., None]
    return np.concatenate([s * axis, np.cos(half)[..., None]], axis=-1)


def quat_angle_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Geodesic angle in radians between unit quaternions, sign-invariant.

    Equal to 2·acos(|⟨a, b⟩|) but evaluated through atan2 of the relative
    rotation, which stays accurate near zero and returns exactly 0 for q vs ±q.
    """
    rel = quat_mul_array(quat_conjugate_array(a), b)
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., :3], axis=-1), np.abs(rel[..., 3]))


# ------------------------------------------------------------------ #
# Domain types
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion stored as (x, y, z, w)"""
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    w: float = 1.0

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Quaternion":
        x, y, z, w = (float(v) for v in values)
        return cls(x, y, z, w)

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float) -> "Quaternion":
        """Quaternion of intrinsic roll-pitch-yaw, R = Rx(roll)·Ry(pitch)·Rz(yaw)"""
        return cls.from_array(Rotation.from_euler("XYZ", [roll, pitch, yaw]).as_quat())

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> "Quaternion":
        return cls.from_array(axis_angle_quat_array(np.asarray(axis, dtype=float), np.asarray(angle)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w], dtype=float)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("Cannot normalize a zero or non-finite quaternion")
        return Quaternion.from_array(self.as_array() / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(-self.x, -self.y, -self.z, self.w)

    def canonical(self) -> "Quaternion":
        """Same rotation with w >= 0"""
        return Quaternion(-self.x, -self.y, -self.z, -self.w) if self.w < 0 else self

    def to_rpy(self) -> Tuple[float, float, float]:
        roll, pitch, yaw = Rotation.from_quat(self.as_array()).as_euler("XYZ")
        return float(roll), float(pitch), float(yaw)

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix_array(self.as_array())


def quat_mul(a: Quaternion, b: Quaternion) -> Quaternion:
    """Hamilton product a ⊗ b, renormalized"""
    q = quat_mul_array(a.as_array(), b.as_array())
    return Quaternion.from_array(q / np.linalg.norm(q))


def quat_conjugate(q: Quaternion) -> Quaternion:
    return q.conjugate()


def quat_angle_deg(a: Quaternion, b: Quaternion) -> float:
    """Rotation angle between two orientations in degrees, range [0, 180]"""
    return float(np.degrees(quat_angle_array(a.as_array(), b.as_array())))


@dataclass(frozen=True)
class Transform:
    """Rigid transform: rotation followed by translation (meters)"""
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3:
            raise ValueError("Translation must have 3 components")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    @classmethod
    def from_xyz_rpy(cls, xyz: Sequence[float], rpy: Sequence[float]) -> "Transform":
        return cls(tuple(xyz), Quaternion.from_rpy(*rpy))

    def compose(self, other: "Transform") -> "Transform":
        """self · other"""
        q = self.rotation.as_array()
        t = np.asarray(self.translation) + quat_rotate_array(q, np.asarray(other.translation))
        r = quat_mul_array(q, other.rotation.as_array())
        return Transform(tuple(t), Quaternion.from_array(r))

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.to_matrix()
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class JointSpec:
    """Revolute joint: fixed origin from the parent frame, then rotation about axis"""
    name: str
    axis: Tuple[float, float, float]
    origin: Transform
    lower: float
    upper: float

    def __post_init__(self):
        axis = tuple(float(v) for v in self.axis)
        if len(axis) != 3:
            raise ChainFormatError(f"joint {self.name!r}: axis must have 3 components")
        if abs(math.sqrt(sum(a * a for a in axis)) - 1.0) > UNIT_TOLERANCE:
            raise ChainFormatError(f"joint {self.name!r}: non-unit axis {list(axis)}")
        if not float(self.lower) < float(self.upper):
            raise ChainFormatError(
                f"joint {self.name!r}: limits lower={self.lower} must be below upper={self.upper}")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))


@dataclass(frozen=True)
class KinematicChain:
    """Serial chain of revolute joints with an end-effector offset"""
    joints: Tuple[JointSpec, ...]
    tip: Transform = field(default_factory=Transform.identity)
    name: str = "chain"

    def __post_init__(self):
        joints = tuple(self.joints)
        if not joints:
            raise ChainFormatError("chain must have at least one joint")
        seen = set()
        for joint in joints:
            if joint.name in seen:
                raise ChainFormatError(f"joint {joint.name!r}: duplicate joint name")
            seen.add(joint.name)
        object.__setattr__(self, "joints", joints)

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> List[str]:
        return [j.name for j in self.joints]

    @cached_property
    def lower(self) -> np.ndarray:
        return np.array([j.lower for j in self.joints])

    @cached_property
    def upper(self) -> np.ndarray:
        return np.array([j.upper for j in self.joints])

    @cached_property
    def axes(self) -> np.ndarray:
        return np.array([j.axis for j in self.joints])

    @cached_property
    def origin_translations(self) -> np.ndarray:
        return np.array([j.origin.translation for j in self.joints])

    @cached_property
    def origin_rotations(self) -> np.ndarray:
        return np.array([j.origin.rotation.as_array() for j in self.joints])

    def clamp(self, configs: np.ndarray) -> np.ndarray:
        """Clip joint configurations into the joint limits"""
        return np.clip(configs, self.lower, self.upper)

    def within_limits(self, configs: np.ndarray) -> np.ndarray:
        configs = np.atleast_2d(configs)
        return np.all((configs >= self.lower) & (configs <= self.upper), axis=-1)

    def digest(self) -> str:
        """SHA-256 of the canonical serialized chain"""
        return hashlib.sha256(serialize_chain(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Pose:
    """End-effector pose: position (meters) and unit orientation"""
    position: Tuple[float, float, float]
    orientation: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self):
        p = tuple(float(v) for v in self.position)
        if len(p) != 3:
            raise ValueError("Position must have 3 components")
        object.__setattr__(self, "position", p)
        if not abs(self.orientation.norm() - 1.0) <= UNIT_TOLERANCE:
            raise ValueError(f"Pose orientation is not unit-norm (norm={self.orientation.norm():.12g})")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Pose":
        """Pose from the 7-vector [px, py, pz, qx, qy, qz, qw]"""
        values = np.asarray(values, dtype=float)
        if values.shape != (7,):
            raise ValueError(f"Pose vector must have 7 entries, got shape {values.shape}")
        q = values[3:]
        n = np.linalg.norm(q)
        if n == 0.0 or not np.isfinite(n):
            raise ValueError(f"Pose orientation {q.tolist()} cannot be normalized")
        if abs(n - 1.0) > UNIT_TOLERANCE:
            q = q / n
        return cls(tuple(values[:3]), Quaternion.from_array(q))

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.position, dtype=float), self.orientation.as_array()])


# ------------------------------------------------------------------ #
# Chain file format
# ------------------------------------------------------------------ #
def _vector(entry: dict, key: str, where: str, size: int = 3) -> Tuple[float, ...]:
    if key not in entry:
        raise ChainFormatError(f"{where}: missing field {key!r}")
    try:
        values = tuple(float(v) for v in entry[key])
    except (TypeError, ValueError):
        raise ChainFormatError(f"{where}: field {key!r} must be a list of numbers")
    if len(values) != size:
        raise ChainFormatError(f"{where}: field {key!r} must have {size} entries")
    return values


def _parse_frame(entry, where: str) -> Transform:
    if not isinstance(entry, dict):
        raise ChainFormatError(f"{where}: expected an object with xyz and rpy")
    xyz = _vector(entry, "xyz", where)
    if "quat" in entry:
        q = np.array(_vector(entry, "quat", where, 4))
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ChainFormatError(f"{where}: field 'quat' is zero")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        rotation = Quaternion.from_array(q)
    else:
        rotation = Quaternion.from_rpy(*_vector(entry, "rpy", where))
    return Transform(xyz, rotation.canonical())


def parse_chain(text: str) -> KinematicChain:
    """Parse a chain-definition JSON document

    Args:
        text: Document with keys name, joints and tip

    Returns:
        Validated KinematicChain
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ChainFormatError(f"chain document is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ChainFormatError("chain document must be a JSON object")
    entries = doc.get("joints")
    if not isinstance(entries, list) or not entries:
        raise ChainFormatError("chain document must contain a non-empty 'joints' list")

    joints = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ChainFormatError(f"joint #{i}: expected an object")
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise ChainFormatError(f"joint #{i}: missing field 'name'")
        where = f"joint {name!r}"
        limits = entry.get("limits")
        if not isinstance(limits, dict) or "lower" not in limits or "upper" not in limits:
            raise ChainFormatError(f"{where}: field 'limits' needs lower and upper")
        joints.append(JointSpec(
            name=name,
            axis=_vector(entry, "axis", where),
            origin=_parse_frame(entry.get("origin", {"xyz": [0, 0, 0], "rpy": [0, 0, 0]}), where),
            lower=float(limits["lower"]),
            upper=float(limits["upper"]),
        ))
    tip = _parse_frame(doc.get("tip", {"xyz": [0, 0, 0], "rpy": [0, 0, 0]}), "tip")
    return KinematicChain(tuple(joints), tip, str(doc.get("name", "chain")))


def _frame_doc(t: Transform) -> dict:
    q = t.rotation.canonical()
    return {"xyz": list(t.translation), "rpy": list(q.to_rpy()),
            "quat": [q.x, q.y, q.z, q.w]}


def serialize_chain(chain: KinematicChain) -> str:
    """Serialize a chain to its JSON document.

    Frames carry both rpy and the exact quaternion; the quaternion wins on
    load so parse_chain(serialize_chain(c)) reproduces c exactly.
    """
    doc = {
        "name": chain.name,
        "joints": [
            {
                "name": j.name,
                "axis": list(j.axis),
                "origin": _frame_doc(j.origin),
                "limits": {"lower": j.lower, "upper": j.upper},
            }
            for j in chain.joints
        ],
        "tip": _frame_doc(chain.tip),
    }
    return json.dumps(doc, indent=2)


def load_chain(path: str) -> KinematicChain:
    """Load a chain file; bare names resolve to the bundled chains"""
    if not os.path.exists(path):
        bundled = bundled_chain_path(path)
        if os.path.exists(bundled):
            path = bundled
        else:
            raise FileNotFoundError(f"Chain file not found: {path}")
    with open(path, encoding="utf-8") as f:
        chain = parse_chain(f.read())
    logger.debug("Loaded chain %s with %d joints from %s", chain.name, chain.dof, path)
    return chain


def save_chain(chain: KinematicChain, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_chain(chain))


def bundled_chain_path(name: str) -> str:
    """Path of a bundled example chain ('planar2', 'spatial4', 'arm8')"""
    base = os.path.basename(name)
    if not base.endswith(".json"):
        base += ".json"
    return os.path.join(CHAINS_DIR, base)


def bundled_chains() -> Iterable[str]:
    return sorted(f[:-5] for f in os.listdir(CHAINS_DIR) if f.endswith(".json"))
