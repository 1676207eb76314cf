import unittest

import numpy as np
from scipy.spatial.transform import Rotation

from ik_optimizer.chain_model import JointSpec, KinematicChain, Pose, Quaternion, Transform, load_chain
from ik_optimizer.kinematics import (
    fk,
    fk_batch,
    fk_jacobian,
    fk_jacobian_batch,
    pose_error,
    pose_error_axes,
    pose_errors_batch,
    resolve_quaternion_sign,
)
from tests import make_planar_chain, make_random_chain


def matrix_chain_fk(chain, config):
    """Homogeneous-matrix product of the chain, independent of the quaternion propagation"""
    t = np.eye(4)
    for joint, angle in zip(chain.joints, config):
        rot = np.eye(4)
        rot[:3, :3] = Rotation.from_rotvec(np.asarray(joint.axis) * angle).as_matrix()
        t = t @ joint.origin.to_matrix() @ rot
    return t @ chain.tip.to_matrix()


class TestForwardKinematics(unittest.TestCase):
    def test_matches_matrix_oracle(self):
        chains = [make_planar_chain(2), make_random_chain(4, seed=1), make_random_chain(6, seed=2),
                  load_chain("arm8")]
        rng = np.random.default_rng(0)
        for chain in chains:
            configs = rng.uniform(chain.lower, chain.upper, size=(250, chain.dof))
            poses = fk_batch(chain, configs)
            for config, pose in zip(configs, poses):
                expected = matrix_chain_fk(chain, config)
                np.testing.assert_allclose(pose[:3], expected[:3, 3], atol=1e-10)
                np.testing.assert_allclose(Quaternion.from_array(pose[3:]).to_matrix(), expected[:3, :3], atol=1e-10)

    def test_planar_closed_form(self):
        chain = make_planar_chain(2, link=0.5)
        pose = fk(chain, np.array([np.pi / 2, -np.pi / 2]))
        np.testing.assert_allclose(pose.position, (0.5, 0.5, 0.0), atol=1e-12)
        self.assertAlmostEqual(abs(pose.orientation.w), 1.0, places=12)

    def test_zero_configuration(self):
        pose = fk(make_planar_chain(2, link=0.5), np.zeros(2))
        np.testing.assert_allclose(pose.position, (1.0, 0.0, 0.0), atol=1e-15)

    def test_unit_quaternions(self):
        chain = make_random_chain(6, seed=4)
        configs = np.random.default_rng(1).uniform(chain.lower, chain.upper, size=(100, 6))
        np.testing.assert_allclose(np.linalg.norm(fk_batch(chain, configs)[:, 3:], axis=1), 1.0, atol=1e-12)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            fk_batch(make_planar_chain(2), np.zeros((3, 3)))
        with self.assertRaises(ValueError):
            fk(make_planar_chain(2), np.zeros((2, 2)))


class TestJacobian(unittest.TestCase):
    def test_matches_finite_differences(self):
        step = 1e-6
        chains = [make_random_chain(2, seed=0), make_random_chain(4, seed=1), make_random_chain(7, seed=2),
                  load_chain("planar2"), load_chain("spatial4"), load_chain("arm8")]
        for seed, chain in enumerate(chains):
            configs = np.random.default_rng(seed).uniform(chain.lower, chain.upper, size=(100, chain.dof))
            _, jac = fk_jacobian_batch(chain, configs)
            self.assertEqual(jac.shape, (100, 7, chain.dof))
            for i in range(chain.dof):
                delta = np.zeros(chain.dof)
                delta[i] = step
                numeric = (fk_batch(chain, configs + delta) - fk_batch(chain, configs - delta)) / (2 * step)
                np.testing.assert_allclose(jac[:, :, i], numeric, atol=1e-7, err_msg=f"{chain.name} joint {i}")

    def test_single_joint_lever(self):
        chain = make_planar_chain(1, link=1.0)
        jac = fk_jacobian(chain, np.zeros(1))
        np.testing.assert_allclose(jac[:3, 0], (0.0, 1.0, 0.0), atol=1e-15)
        np.testing.assert_allclose(jac[3:, 0], (0.0, 0.0, 0.5, 0.0), atol=1e-15)

    def test_axis_through_tip(self):
        joint = JointSpec("spin", (0.0, 0.0, 1.0), Transform.identity(), -3.0, 3.0)
        chain = KinematicChain((joint,), Transform((0.0, 0.0, 0.3), Quaternion.identity()), "spin")
        for angle in (0.0, 0.7, -2.1):
            jac = fk_jacobian(chain, np.array([angle]))
            np.testing.assert_allclose(jac[:3, 0], 0.0, atol=1e-15)
            self.assertGreater(np.linalg.norm(jac[3:, 0]), 0.49)

    def test_batch_poses_match_fk(self):
        chain = load_chain("arm8")
        configs = np.random.default_rng(5).uniform(chain.lower, chain.upper, size=(10, 8))
        poses, jac = fk_jacobian_batch(chain, configs)
        np.testing.assert_allclose(poses, fk_batch(chain, configs), atol=1e-14)
        self.assertEqual(jac.shape, (10, 7, 8))


class TestPoseErrors(unittest.TestCase):
    def setUp(self):
        self.pose = Pose((0.3, -0.2, 1.0), Quaternion.from_rpy(0.1, 0.2, 0.3))

    def test_identical(self):
        self.assertEqual(pose_error(self.pose, self.pose), (0.0, 0.0))

    def test_translation(self):
        moved = Pose((0.31, -0.2, 1.0), self.pose.orientation)
        pos_mm, rot_deg = pose_error(self.pose, moved)
        self.assertAlmostEqual(pos_mm, 10.0, places=9)
        self.assertEqual(rot_deg, 0.0)

    def test_rotation(self):
        a = Pose((0.0, 0.0, 0.0), Quaternion.identity())
        b = Pose((0.0, 0.0, 0.0), Quaternion.from_axis_angle((0.0, 0.0, 1.0), np.pi / 2))
        self.assertAlmostEqual(pose_error(a, b)[1], 90.0, places=9)

    def test_double_cover(self):
        target = self.pose.as_array()
        flipped = target.copy()
        flipped[3:] *= -1
        pos_mm, rot_deg = pose_errors_batch(target[None, :], flipped[None, :])
        self.assertEqual(rot_deg[0], 0.0)
        self.assertEqual(resolve_quaternion_sign(flipped[None, 3:], target[None, 3:])[0], -1.0)
        self.assertEqual(resolve_quaternion_sign(target[None, 3:], target[None, 3:])[0], 1.0)

    def test_axis_breakdown(self):
        moved = Pose((0.301, -0.198, 1.0), self.pose.orientation)
        axes = pose_error_axes(self.pose, moved)
        np.testing.assert_allclose(axes.position_mm, (1.0, 2.0, 0.0), atol=1e-9)
        np.testing.assert_allclose(axes.rpy_deg, (0.0, 0.0, 0.0), atol=1e-9)
        pos, rot = axes.axis_averaged()
        self.assertAlmostEqual(pos, 1.0, places=9)
        self.assertAlmostEqual(rot, 0.0, places=9)


if __name__ == "__main__":
    unittest.main()
