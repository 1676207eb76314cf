"""Forward kinematics, analytic pose Jacobian and Cartesian error metrics.

Poses in batch form are (N, 7) arrays laid out [px, py, pz, qx, qy, qz, qw].
"""

from dataclasses import dataclass
from typing import Tuple, Union
import logging

import numpy as np
from scipy.spatial.transform import Rotation

from .chain_model import (
    KinematicChain,
    Pose,
    axis_angle_quat_array,
    quat_angle_array,
    quat_conjugate_array,
    quat_mul_array,
    quat_rotate_array,
)

logger = logging.getLogger(__name__)


def _as_configs(chain: KinematicChain, configs) -> np.ndarray:
    configs = np.asarray(configs, dtype=float)
    if configs.ndim == 1:
        configs = configs[None, :]
    if configs.ndim != 2 or configs.shape[1] != chain.dof:
        raise ValueError(
            f"Joint configuration has {configs.shape[-1]} entries, chain {chain.name!r} has dof={chain.dof}")
    return configs


def _forward_frames(chain: KinematicChain, configs: np.ndarray, keep_joint_frames: bool):
    """Propagate position and orientation along the chain.

    Returns tip positions (N,3), tip quaternions (N,4) and, when requested,
    the world position (N,dof,3) and world axis (N,dof,3) of every joint.
    """
    n = configs.shape[0]
    p = np.zeros((n, 3))
    q = np.zeros((n, 4))
    q[:, 3] = 1.0
    joint_pos = np.empty((n, chain.dof, 3)) if keep_joint_frames else None
    joint_axis = np.empty((n, chain.dof, 3)) if keep_joint_frames else None

    for i in range(chain.dof):
        p = p + quat_rotate_array(q, chain.origin_translations[i])
        q = quat_mul_array(q, chain.origin_rotations[i])
        if keep_joint_frames:
            joint_pos[:, i] = p
            joint_axis[:, i] = quat_rotate_array(q, chain.axes[i])
        q = quat_mul_array(q, axis_angle_quat_array(chain.axes[i], configs[:, i]))

    tip_t = np.asarray(chain.tip.translation)
    p = p + quat_rotate_array(q, tip_t)
    q = quat_mul_array(q, chain.tip.rotation.as_array())
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return p, q, joint_pos, joint_axis


def fk_batch(chain: KinematicChain, configs) -> np.ndarray:
    """Tip poses (N, 7) for joint configurations (N, dof)"""
    configs = _as_configs(chain, configs)
    p, q, _, _ = _forward_frames(chain, configs, keep_joint_frames=False)
    return np.concatenate([p, q], axis=1)


def fk(chain: KinematicChain, config) -> Pose:
    """Pose of the tip frame in the base frame"""
    config = np.asarray(config, dtype=float)
    if config.ndim != 1:
        raise ValueError("fk expects a single joint configuration, use fk_batch for batches")
    return Pose.from_array(fk_batch(chain, config)[0])


def fk_jacobian_batch(chain: KinematicChain, configs) -> Tuple[np.ndarray, np.ndarray]:
    """Tip poses (N, 7) and pose Jacobians (N, 7, dof).

    Position rows use the geometric Jacobian (world axis × lever arm), the
    quaternion rows the product rule dq/dθ_i = 0.5·(a_i, 0) ⊗ q.
    """
    configs = _as_configs(chain, configs)
    p, q, joint_pos, joint_axis = _forward_frames(chain, configs, keep_joint_frames=True)
    n, dof = configs.shape

    jac = np.empty((n, 7, dof))
    lever = p[:, None, :] - joint_pos
    jac[:, :3, :] = np.cross(joint_axis, lever).transpose(0, 2, 1)
    axis_quat = np.concatenate([joint_axis, np.zeros((n, dof, 1))], axis=-1)
    jac[:, 3:, :] = (0.5 * quat_mul_array(axis_quat, q[:, None, :])).transpose(0, 2, 1)
    return np.concatenate([p, q], axis=1), jac


def fk_jacobian(chain: KinematicChain, config) -> np.ndarray:
    """Analytic 7 × dof Jacobian of the pose vector"""
    config = np.asarray(config, dtype=float)
    if config.ndim != 1:
        raise ValueError("fk_jacobian expects a single joint configuration")
    return fk_jacobian_batch(chain, config)[1][0]


# ------------------------------------------------------------------ #
# Errors
# ------------------------------------------------------------------ #
@dataclass(frozen=True)
class PoseErrorAxes:
    """Per-axis breakdown of a pose error: absolute position differences (mm)
    and absolute roll/pitch/yaw of the relative rotation (degrees)"""
    position_mm: Tuple[float, float, float]
    rpy_deg: Tuple[float, float, float]

    def axis_averaged(self) -> Tuple[float, float]:
        """Mean over the three position axes and over the three rotation axes"""
        return float(np.mean(self.position_mm)), float(np.mean(self.rpy_deg))


def _pose_array(pose: Union[Pose, np.ndarray]) -> np.ndarray:
    return pose.as_array() if isinstance(pose, Pose) else np.asarray(pose, dtype=float)


def pose_errors_batch(targets: np.ndarray, reached: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Euclidean position error (mm) and geodesic rotation error (deg) per row"""
    targets = np.atleast_2d(targets)
    reached = np.atleast_2d(reached)
    pos_mm = np.linalg.norm(reached[:, :3] - targets[:, :3], axis=1) * 1000.0
    rot_deg = np.degrees(quat_angle_array(targets[:, 3:], reached[:, 3:]))
    return pos_mm, rot_deg


def pose_error(target: Union[Pose, np.ndarray], reached: Union[Pose, np.ndarray]) -> Tuple[float, float]:
    """(pos_err_mm, rot_err_deg) between two poses"""
    pos_mm, rot_deg = pose_errors_batch(_pose_array(target), _pose_array(reached))
    return float(pos_mm[0]), float(rot_deg[0])


def pose_error_axes(target: Union[Pose, np.ndarray], reached: Union[Pose, np.ndarray]) -> PoseErrorAxes:
    """Per-axis error, used for axis-averaged reporting"""
    t = _pose_array(target)
    r = _pose_array(reached)
    dpos = np.abs(r[:3] - t[:3]) * 1000.0
    rel = quat_mul_array(quat_conjugate_array(t[3:]), r[3:])
    rpy = np.abs(np.degrees(Rotation.from_quat(rel).as_euler("XYZ")))
    return PoseErrorAxes(tuple(float(v) for v in dpos), tuple(float(v) for v in rpy))


def resolve_quaternion_sign(reached_q: np.ndarray, target_q: np.ndarray) -> np.ndarray:
    """Per-row sign s in {+1, -1} minimizing the L1 distance |s·q̂ - q|"""
    plus = np.abs(reached_q - target_q).sum(axis=-1)
    minus = np.abs(reached_q + target_q).sum(axis=-1)
    return np.where(minus < plus, -1.0, 1.0)
