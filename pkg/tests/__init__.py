import os

import numpy as np

from ik_optimizer.chain_model import CHAINS_DIR, JointSpec, KinematicChain, Quaternion, Transform

TEST_DATA_DIR = CHAINS_DIR


def get_test_data_path(filename: str) -> str:
    return os.path.join(TEST_DATA_DIR, filename)


def make_planar_chain(dof: int = 2, link: float = 0.5, limit: float = 3.1) -> KinematicChain:
    """Planar chain of z-axis joints with equal links along x"""
    joints = []
    for i in range(dof):
        origin = Transform((link if i > 0 else 0.0, 0.0, 0.0), Quaternion.identity())
        joints.append(JointSpec(f"j{i}", (0.0, 0.0, 1.0), origin, -limit, limit))
    return KinematicChain(tuple(joints), Transform((link, 0.0, 0.0), Quaternion.identity()), f"planar{dof}")


def make_random_chain(dof: int, seed: int = 0) -> KinematicChain:
    """Spatial chain with random unit axes, link offsets and origin rotations"""
    rng = np.random.default_rng(seed)
    joints = []
    for i in range(dof):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rotation = Quaternion.from_rpy(*rng.uniform(-np.pi, np.pi, size=3))
        origin = Transform(tuple(rng.uniform(-0.2, 0.2, size=3)), rotation)
        joints.append(JointSpec(f"j{i}", tuple(axis), origin, -2.5, 2.5))
    tip = Transform(tuple(rng.uniform(-0.1, 0.1, size=3)), Quaternion.from_rpy(0.1, -0.2, 0.3))
    return KinematicChain(tuple(joints), tip, f"random{dof}")
