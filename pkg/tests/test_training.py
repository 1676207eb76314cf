import json
import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from ik_optimizer import training
from ik_optimizer.chain_model import load_chain
from ik_optimizer.config import TrainConfig
from ik_optimizer.dataset import WorkspaceBounds, generate
from ik_optimizer.kinematics import fk_batch, pose_errors_batch
from ik_optimizer.neural import Normalizer, build_net, forward
from ik_optimizer.training import (
    CartesianGoal,
    DivergenceError,
    GoalKind,
    GoalSet,
    JointGoal,
    TrainingError,
    TrainReport,
    cycle_loss,
    epoch_sweep,
    goal_costs,
    learning_rate,
    train_gan,
    train_mlp,
    variance_loss,
    variance_loss_grad,
)
from tests import make_planar_chain

ENCLOSING = WorkspaceBounds((-1.1, -1.1, -0.1), (1.1, 1.1, 0.1))


def flat_gradients(grads):
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


class TestGoalSet(unittest.TestCase):
    def test_default_goals(self):
        goals = GoalSet.default(load_chain("arm8"))
        self.assertEqual([g.kind for g in goals.cartesian_goals], [GoalKind.POSITION_MAE, GoalKind.ROTATION_MAE])
        self.assertEqual(goals.joint_goals, [JointGoal((6, 7), 0.05)])
        self.assertEqual(GoalSet.default(make_planar_chain(2)).joint_goals, [])
        self.assertEqual(len(GoalSet.default(make_planar_chain(2), rotation_weight=0.0).cartesian_goals), 1)

    def test_weights_must_be_positive(self):
        with self.assertRaises(ValueError):
            GoalSet([CartesianGoal(GoalKind.POSITION_MAE, 0.0)])
        with self.assertRaises(ValueError):
            GoalSet([], [JointGoal((0,), -1.0)])
        with self.assertRaises(ValueError):
            GoalSet([CartesianGoal(GoalKind.ZERO_CONTROLLER, 1.0)])

    def test_joint_indices_checked(self):
        with self.assertRaises(ValueError):
            GoalSet([], [JointGoal((2,), 1.0)]).validate(make_planar_chain(2))

    def test_dict_round_trip(self):
        goals = GoalSet.default(load_chain("arm8"), 1.0, 0.25, 0.1)
        self.assertEqual(GoalSet.from_dict(json.loads(json.dumps(goals.to_dict()))), goals)
        self.assertEqual(goals.scaled(2.0).cartesian_goals[1].weight, 0.5)


class TestGoalCosts(unittest.TestCase):
    def setUp(self):
        self.chain = make_planar_chain(2, link=0.5)

    def test_position_mae(self):
        goals = GoalSet([CartesianGoal(GoalKind.POSITION_MAE, 1.0)])
        target = np.array([[1.3, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]])
        cost, _ = goal_costs(self.chain, np.zeros((1, 2)), target, goals)
        self.assertAlmostEqual(cost[0], 0.1, places=12)

    def test_rotation_ignores_quaternion_sign(self):
        goals = GoalSet([CartesianGoal(GoalKind.ROTATION_MAE, 1.0)])
        target = np.array([[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0]])
        cost, _ = goal_costs(self.chain, np.zeros((1, 2)), target, goals)
        self.assertAlmostEqual(cost[0], 0.0, places=12)

    def test_zero_controller(self):
        goals = GoalSet([], [JointGoal((0, 1), 1.0)])
        configs = np.array([[0.5, -0.5]])
        cost, grad = goal_costs(self.chain, configs, np.zeros((1, 7)), goals, with_grad=True)
        self.assertAlmostEqual(cost[0], 0.25)
        np.testing.assert_allclose(grad, configs)

    def test_gradient_matches_finite_differences(self):
        chain = load_chain("arm8")
        goals = GoalSet.default(chain)
        rng = np.random.default_rng(0)
        targets = fk_batch(chain, rng.uniform(chain.lower, chain.upper, size=(5, 8)))
        configs = rng.uniform(chain.lower, chain.upper, size=(5, 8))
        _, grad = goal_costs(chain, configs, targets, goals, with_grad=True)
        step = 1e-7
        numeric = np.zeros_like(configs)
        for j in range(8):
            delta = np.zeros(8)
            delta[j] = step
            up, _ = goal_costs(chain, configs + delta, targets, goals)
            down, _ = goal_costs(chain, configs - delta, targets, goals)
            numeric[:, j] = (up - down) / (2 * step)
        np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


class TestCycleLoss(unittest.TestCase):
    def setUp(self):
        self.chain = make_planar_chain(2)
        self.normalizer = Normalizer.from_chain(self.chain, ENCLOSING)
        rng = np.random.default_rng(1)
        self.poses = fk_batch(self.chain, rng.uniform(self.chain.lower, self.chain.upper, size=(8, 2)))

    def test_gradient_matches_finite_differences(self):
        net = build_net([7, 16, 16, 2], 2, rng_seed=0)
        goals = GoalSet.default(self.chain)
        loss, grads = cycle_loss(self.chain, net, self.normalizer, self.poses, goals)
        analytic = flat_gradients(grads)
        params = net.flat_parameters()
        step = 1e-6
        numeric = np.zeros_like(params)
        for i in range(params.size):
            shifted = params.copy()
            shifted[i] += step
            net.set_flat_parameters(shifted)
            up, _ = cycle_loss(self.chain, net, self.normalizer, self.poses, goals)
            shifted[i] -= 2 * step
            net.set_flat_parameters(shifted)
            down, _ = cycle_loss(self.chain, net, self.normalizer, self.poses, goals)
            numeric[i] = (up - down) / (2 * step)
        net.set_flat_parameters(params)
        self.assertGreater(loss, 0.0)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-7)

    def test_non_finite_loss(self):
        net = build_net([7, 8, 2], 1, rng_seed=0)
        poses = self.poses.copy()
        poses[0, 0] = np.nan
        with self.assertRaises(DivergenceError):
            cycle_loss(self.chain, net, self.normalizer, poses, GoalSet.default(self.chain))


class TestVarianceLoss(unittest.TestCase):
    def test_collapsed_solutions(self):
        noise = np.array([[1.0], [-1.0], [1.0], [-1.0]])
        self.assertAlmostEqual(variance_loss(np.zeros((4, 1)), noise), 1.0)

    def test_population_variance(self):
        solutions = np.array([[1.0], [-1.0]])
        x = np.sqrt(2.0 / 3.0)
        noise = np.array([[x], [-x]])
        self.assertAlmostEqual(variance_loss(solutions, noise), (1.0 / 3.0) ** 2)

    def test_matching_spread(self):
        noise = np.random.default_rng(0).uniform(-1, 1, size=(16, 3))
        self.assertEqual(variance_loss(noise.copy(), noise), 0.0)

    def test_needs_two_rows(self):
        with self.assertRaises(ValueError):
            variance_loss(np.zeros((1, 2)), np.zeros((1, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        solutions = rng.uniform(-1, 1, size=(6, 3))
        noise = rng.uniform(-1, 1, size=(6, 4))
        grad = variance_loss_grad(solutions, noise)
        step = 1e-6
        for idx in np.ndindex(solutions.shape):
            shifted = solutions.copy()
            shifted[idx] += step
            up = variance_loss(shifted, noise)
            shifted[idx] -= 2 * step
            down = variance_loss(shifted, noise)
            self.assertAlmostEqual(grad[idx], (up - down) / (2 * step), places=7)


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.chain = make_planar_chain(2)
        self.dataset = generate(self.chain, ENCLOSING, 512, rng_seed=0)
        self.validation = generate(self.chain, ENCLOSING, 64, rng_seed=1)
        self.normalizer = Normalizer.from_chain(self.chain, ENCLOSING)

    def net(self, seed=0):
        return build_net([7, 16, 16, 2], 2, rng_seed=seed)

    def test_learning_rate(self):
        self.assertEqual(learning_rate(1e-3, 0, 10), 1e-3)
        self.assertAlmostEqual(learning_rate(1e-3, 5, 10), 5e-4)

    def test_zero_learning_rate_keeps_parameters(self):
        net = self.net()
        cfg = TrainConfig(epochs=1, lr0=0.0, batch_size=64)
        trained, report = train_mlp(self.chain, self.dataset, net, self.normalizer, cfg)
        np.testing.assert_array_equal(trained.flat_parameters(), net.flat_parameters())
        self.assertEqual(len(report.epochs), 1)
        self.assertEqual(report.best_epoch, 0)

    def test_input_net_not_modified(self):
        net = self.net()
        before = net.flat_parameters()
        train_mlp(self.chain, self.dataset, net, self.normalizer, TrainConfig(epochs=2, batch_size=64))
        np.testing.assert_array_equal(net.flat_parameters(), before)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=3, batch_size=64, rng_seed=4)
        a, report_a = train_mlp(self.chain, self.dataset, self.net(), self.normalizer, cfg, validation=self.validation)
        b, report_b = train_mlp(self.chain, self.dataset, self.net(), self.normalizer, cfg, validation=self.validation)
        np.testing.assert_array_equal(a.flat_parameters(), b.flat_parameters())
        self.assertEqual(report_a, report_b)

    def test_training_reduces_error(self):
        dataset = generate(self.chain, ENCLOSING, 2000, rng_seed=2)
        net = build_net([7, 64, 64, 2], 2, rng_seed=0)
        poses = self.validation.poses

        def mean_error_mm(n):
            out, _ = forward(n, self.normalizer.normalize_pose(poses))
            return float(np.mean(pose_errors_batch(poses, fk_batch(self.chain, self.normalizer.denormalize_joints(out)))[0]))

        cfg = TrainConfig(epochs=20, batch_size=64, lr0=3e-3)
        trained, report = train_mlp(self.chain, dataset, net, self.normalizer, cfg, validation=self.validation)
        self.assertLess(mean_error_mm(trained), 0.5 * mean_error_mm(net))
        self.assertAlmostEqual(report.best_val_pos_mm, mean_error_mm(trained), places=9)
        self.assertFalse(report.diverged)

    def test_all_attempts_diverge(self):
        cfg = TrainConfig(epochs=2, batch_size=64, restarts=2, divergence_grad_norm=1e-12)
        with self.assertRaises(TrainingError) as ctx:
            train_mlp(self.chain, self.dataset, self.net(), self.normalizer, cfg)
        report = ctx.exception.report
        self.assertTrue(report.failed)
        self.assertTrue(report.diverged)
        self.assertEqual(report.restarts, 2)

    def test_restart_after_divergence(self):
        real = training.cycle_loss
        calls = []

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 1:
                raise DivergenceError("injected")
            return real(*args, **kwargs)

        cfg = TrainConfig(epochs=2, batch_size=64, restarts=2)
        with mock.patch.object(training, "cycle_loss", side_effect=flaky):
            _, report = train_mlp(self.chain, self.dataset, self.net(), self.normalizer, cfg)
        self.assertTrue(report.diverged)
        self.assertFalse(report.failed)
        self.assertEqual(report.restarts, 1)
        self.assertEqual({m.attempt for m in report.epochs}, {1})

    def test_gan_training(self):
        cfg = TrainConfig(epochs=2, batch_size=64, noise_dim=3, grad_clip=None)
        net = build_net([10, 16, 16, 2], 2, rng_seed=0)
        trained, report = train_gan(self.chain, self.dataset, net, self.normalizer, cfg, validation=self.validation)
        self.assertEqual(trained.input_size, 10)
        self.assertEqual(report.kind, "gan")
        self.assertEqual(len(report.epochs), 2)
        with self.assertRaises(ValueError):
            train_gan(self.chain, self.dataset, self.net(), self.normalizer, cfg)

    def test_epoch_sweep(self):
        cfg = TrainConfig(batch_size=64)
        frame = epoch_sweep(self.chain, self.dataset, self.net, self.normalizer, [1, 2], cfg,
                            validation=self.validation)
        self.assertEqual(list(frame.columns), ["epochs", "val_pos_mm", "val_rot_deg", "restarts", "failed"])
        self.assertEqual(frame["epochs"].tolist(), [1, 2])
        self.assertFalse(frame["failed"].any())


class TestVarianceSpread(unittest.TestCase):
    """Position-only training of spatial4 leaves one redundant joint for the noise to spread over"""

    def setUp(self):
        self.chain = load_chain("spatial4")
        bounds = WorkspaceBounds((-0.9, -0.9, -0.8), (0.9, 0.9, 1.2))
        self.dataset = generate(self.chain, bounds, 1500, rng_seed=2)
        self.normalizer = Normalizer.from_chain(self.chain, bounds)

    def spread(self, variance_weight):
        cfg = TrainConfig(epochs=4, batch_size=64, lr0=3e-3, noise_dim=4, grad_clip=None, restarts=0,
                          rotation_weight=0.0, variance_weight=variance_weight)
        net = build_net([11, 32, 32, 4], 1, rng_seed=5)
        trained, _ = train_gan(self.chain, self.dataset, net, self.normalizer, cfg)
        rng = np.random.default_rng(0)
        pose = np.repeat(self.dataset.poses[:1], 300, axis=0)
        inputs = np.hstack([self.normalizer.normalize_pose(pose), rng.uniform(-1.0, 1.0, size=(300, 4))])
        out, _ = forward(trained, inputs)
        return float(np.mean(np.var(out, axis=0)))

    def test_variance_term_spreads_solutions(self):
        with_term = self.spread(2.0)
        without_term = self.spread(0.0)
        self.assertGreater(with_term, 2.0 * without_term)
        self.assertGreater(with_term, 1e-3)


class TestTrainReport(unittest.TestCase):
    def test_write(self):
        report = TrainReport(kind="mlp", epochs=[training.EpochMetrics(0, 0, 1e-3, 0.5, 12.0, 3.0)],
                             best_epoch=0, best_val_pos_mm=12.0, best_val_rot_deg=3.0, wall_time_s=4.2)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "run", "report.csv")
            report.write(path)
            with open(path) as f:
                self.assertEqual(f.readline().strip(), "attempt,epoch,lr,train_loss,val_pos_mm,val_rot_deg")
            with open(os.path.join(tmp, "run", "report.json")) as f:
                summary = json.load(f)
        self.assertNotIn("wall_time_s", summary)
        self.assertEqual(summary["epochs_run"], 1)


if __name__ == "__main__":
    unittest.main()
