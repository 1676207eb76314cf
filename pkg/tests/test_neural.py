import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from ik_optimizer import neural
from ik_optimizer.chain_model import load_chain
from ik_optimizer.config import Workspace
from ik_optimizer.dataset import WorkspaceBounds
from ik_optimizer.neural import (
    Activation,
    AdamOptimizer,
    DenseNet,
    IKModel,
    ModelFormatError,
    ModelKind,
    Normalizer,
    TapeError,
    backward,
    build_net,
    forward,
    gan_layout,
    gan_preset,
    gelu,
    gelu_grad,
    load_model,
    mlp_layout,
    mlp_preset,
    param_digest,
    save_model,
)


def oracle_forward(net, x):
    """Plain matrix arithmetic with the activations written out"""
    for w, b, tag in zip(net.weights, net.biases, net.activation_tags):
        z = x.dot(w) + b
        if tag == Activation.TANH:
            x = np.tanh(z)
        else:
            x = 0.5 * z * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (z + 0.044715 * z ** 3)))
    return x


class TestActivations(unittest.TestCase):
    def test_gelu_values(self):
        self.assertEqual(gelu(np.array(0.0)), 0.0)
        self.assertAlmostEqual(float(gelu(np.array(10.0))), 10.0, places=9)
        self.assertAlmostEqual(float(gelu(np.array(-10.0))), 0.0, places=9)

    def test_gelu_grad_matches_finite_differences(self):
        x = np.linspace(-5.0, 5.0, 100)
        h = 1e-5
        numeric = (gelu(x + h) - gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(gelu_grad(x), numeric, rtol=1e-6, atol=1e-9)


class TestDenseNet(unittest.TestCase):
    def test_layout_rules(self):
        with self.assertRaises(ModelFormatError):
            DenseNet([7, 8, 2], [Activation.TANH, Activation.GELU])
        with self.assertRaises(ModelFormatError):
            DenseNet([7, 8, 8, 8, 8, 2], [Activation.TANH] * 5)
        with self.assertRaises(ModelFormatError):
            DenseNet([7, 8, 8, 2], [Activation.TANH, Activation.GELU, Activation.TANH])
        with self.assertRaises(ModelFormatError):
            DenseNet([7, 8, 2], [Activation.TANH])
        net = DenseNet([7, 8, 8, 2], ["GELU", "TANH", "TANH"])
        self.assertEqual(net.num_parameters, 7 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2)

    def test_zero_net_outputs_zero(self):
        net = DenseNet([7, 16, 16, 3], [Activation.GELU, Activation.TANH, Activation.TANH])
        out, _ = forward(net, np.random.default_rng(0).normal(size=(5, 7)))
        np.testing.assert_array_equal(out, np.zeros((5, 3)))

    def test_single_gelu_unit(self):
        net = DenseNet([1, 1], [Activation.GELU], [np.ones((1, 1))], [np.zeros(1)], check_layout=False)
        out, _ = forward(net, np.zeros((1, 1)))
        self.assertEqual(out[0, 0], 0.0)

    def test_matches_matrix_oracle(self):
        net = build_net([7, 20, 30, 10, 4], tanh_layers=2, rng_seed=3)
        x = np.random.default_rng(1).normal(size=(64, 7))
        out, _ = forward(net, x)
        np.testing.assert_allclose(out, oracle_forward(net, x), atol=1e-12)
        self.assertTrue(np.all(np.abs(out) < 1.0))

    def test_width_mismatch(self):
        net = build_net([7, 8, 2], 1, rng_seed=0)
        with self.assertRaises(ModelFormatError):
            forward(net, np.zeros((3, 6)))

    def test_batch_order_equivariant(self):
        net = build_net([7, 12, 12, 3], 2, rng_seed=2)
        x = np.random.default_rng(4).normal(size=(30, 7))
        perm = np.random.default_rng(5).permutation(30)
        out, _ = forward(net, x)
        out_perm, _ = forward(net, x[perm])
        np.testing.assert_array_equal(out_perm, out[perm])

    def test_initialize(self):
        net = build_net([7, 50, 3], 1, rng_seed=0)
        limit = np.sqrt(6.0 / 57.0)
        self.assertTrue(np.all(np.abs(net.weights[0]) <= limit))
        self.assertTrue(np.all(net.biases[0] == 0.0))
        self.assertEqual(param_digest(net), param_digest(build_net([7, 50, 3], 1, rng_seed=0)))
        self.assertNotEqual(param_digest(net), param_digest(build_net([7, 50, 3], 1, rng_seed=1)))

    def test_flat_parameters_round_trip(self):
        net = build_net([7, 9, 4, 2], 2, rng_seed=0)
        other = build_net([7, 9, 4, 2], 2)
        other.set_flat_parameters(net.flat_parameters())
        np.testing.assert_array_equal(other.flat_parameters(), net.flat_parameters())
        with self.assertRaises(ModelFormatError):
            other.set_flat_parameters(np.zeros(3))


class TestBackward(unittest.TestCase):
    def test_matches_finite_differences(self):
        step = 1e-6
        for seed in range(10):
            rng = np.random.default_rng(seed)
            net = build_net([3, 5, 2], 1, rng_seed=seed)
            x = rng.normal(size=(4, 3))
            g = rng.normal(size=(4, 2))
            out, tape = forward(net, x)
            grads = backward(net, tape, g)

            def loss():
                return float(np.sum(forward(net, x)[0] * g))

            for params, analytic in ((net.weights, grads.weights), (net.biases, grads.biases)):
                for layer, array in enumerate(params):
                    numeric = np.zeros_like(array)
                    for idx in np.ndindex(array.shape):
                        original = array[idx]
                        array[idx] = original + step
                        up = loss()
                        array[idx] = original - step
                        down = loss()
                        array[idx] = original
                        numeric[idx] = (up - down) / (2 * step)
                    np.testing.assert_allclose(analytic[layer], numeric, rtol=1e-4, atol=1e-8)

            numeric_x = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                dx = np.zeros_like(x)
                dx[idx] = step
                numeric_x[idx] = (np.sum(forward(net, x + dx)[0] * g) - np.sum(forward(net, x - dx)[0] * g)) / (2 * step)
            np.testing.assert_allclose(grads.inputs, numeric_x, rtol=1e-4, atol=1e-8)

    def test_zero_output_grad(self):
        net = build_net([7, 8, 8, 2], 2, rng_seed=0)
        out, tape = forward(net, np.ones((3, 7)))
        grads = backward(net, tape, np.zeros_like(out))
        self.assertEqual(grads.global_norm(), 0.0)
        np.testing.assert_array_equal(grads.inputs, np.zeros((3, 7)))

    def test_linear_layer_outer_product(self):
        identity = (lambda z: z, lambda z: np.ones_like(z))
        with mock.patch.dict(neural.ACTIVATIONS, {Activation.TANH: identity}):
            net = build_net([3, 2], 1, rng_seed=0)
            x = np.array([[1.0, -2.0, 0.5]])
            g = np.array([[0.3, -1.0]])
            out, tape = forward(net, x)
            np.testing.assert_allclose(out, x @ net.weights[0])
            grads = backward(net, tape, g)
        np.testing.assert_allclose(grads.weights[0], np.outer(x[0], g[0]))
        np.testing.assert_allclose(grads.biases[0], g[0])
        np.testing.assert_allclose(grads.inputs, g @ net.weights[0].T)

    def test_tape_consumed_once(self):
        net = build_net([7, 8, 2], 1, rng_seed=0)
        out, tape = forward(net, np.ones((2, 7)))
        backward(net, tape, np.ones_like(out))
        with self.assertRaises(TapeError):
            backward(net, tape, np.ones_like(out))

    def test_clipping(self):
        net = build_net([7, 8, 2], 1, rng_seed=0)
        out, tape = forward(net, np.ones((2, 7)) * 3.0)
        grads = backward(net, tape, np.ones_like(out) * 100.0)
        self.assertGreater(grads.global_norm(), 1.0)
        self.assertAlmostEqual(grads.clipped(1.0).global_norm(), 1.0, places=12)
        self.assertIs(grads.clipped(None), grads)


class TestAdam(unittest.TestCase):
    def test_zero_learning_rate_keeps_parameters(self):
        net = build_net([7, 8, 2], 1, rng_seed=0)
        before = net.flat_parameters()
        optimizer = AdamOptimizer(net, lr=0.0)
        out, tape = forward(net, np.ones((2, 7)))
        optimizer.step(backward(net, tape, np.ones_like(out)))
        np.testing.assert_array_equal(net.flat_parameters(), before)

    def test_first_step_moves_against_gradient(self):
        net = build_net([7, 8, 2], 1, rng_seed=0)
        before = [w.copy() for w in net.weights]
        out, tape = forward(net, np.random.default_rng(0).normal(size=(4, 7)))
        grads = backward(net, tape, np.ones_like(out))
        AdamOptimizer(net, lr=1e-3).step(grads)
        for w0, w1, g in zip(before, net.weights, grads.weights):
            moved = np.abs(g) > 1e-4
            np.testing.assert_allclose((w1 - w0)[moved], -1e-3 * np.sign(g[moved]), rtol=1e-3)


class TestNormalizer(unittest.TestCase):
    def setUp(self):
        self.chain = load_chain("spatial4")
        self.bounds = WorkspaceBounds((0.1, -0.3, 0.2), (0.5, 0.3, 0.7))
        self.normalizer = Normalizer.from_chain(self.chain, self.bounds)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        configs = rng.uniform(self.chain.lower, self.chain.upper, size=(100, 4))
        back = self.normalizer.denormalize_joints(self.normalizer.normalize_joints(configs))
        np.testing.assert_allclose(back, configs, atol=1e-12)
        poses = np.hstack([rng.uniform(self.bounds.min, self.bounds.max, size=(100, 3)),
                           rng.uniform(-1, 1, size=(100, 4))])
        np.testing.assert_allclose(self.normalizer.denormalize_pose(self.normalizer.normalize_pose(poses)), poses,
                                   atol=1e-12)

    def test_bounds_map_to_unit_interval(self):
        lo = np.array(list(self.bounds.min) + [-1.0] * 4)
        hi = np.array(list(self.bounds.max) + [1.0] * 4)
        np.testing.assert_allclose(self.normalizer.normalize_pose(lo), -np.ones(7), atol=1e-15)
        np.testing.assert_allclose(self.normalizer.normalize_pose(hi), np.ones(7), atol=1e-15)

    def test_denormalized_outputs_within_limits(self):
        pre_activations = np.random.default_rng(1).uniform(-1e6, 1e6, size=(100000, 4))
        configs = self.normalizer.denormalize_joints(np.tanh(pre_activations))
        self.assertTrue(np.all(self.chain.within_limits(configs)))
        net = build_net([7, 8, 4], 1, rng_seed=0)
        net.weights = [w * 1e6 for w in net.weights]
        out, _ = forward(net, np.random.default_rng(2).uniform(-1e6, 1e6, size=(1000, 7)))
        self.assertTrue(np.all(self.chain.within_limits(self.normalizer.denormalize_joints(out))))


class TestPresets(unittest.TestCase):
    def test_mlp_full_scale(self):
        sizes, tanh = mlp_layout(Workspace.SMALL, 8, width_factor=1.0)
        self.assertEqual(sizes, [7, 3380, 2250, 3240, 2270, 1840, 30, 60, 220, 8])
        self.assertEqual(tanh, 3)
        sizes, _ = mlp_layout("full", 8, width_factor=1.0)
        self.assertEqual(sizes[1:-1], [2200, 2400, 2400, 1900, 250, 220, 30, 380])

    def test_mlp_desk_scale(self):
        sizes, _ = mlp_layout("small", 8)
        self.assertEqual(sizes[1:-1], [338, 225, 324, 227, 184, 8, 8, 22])
        net = mlp_preset("small", 4, width_factor=0.05)
        self.assertEqual(net.input_size, 7)
        self.assertEqual(net.output_size, 4)
        self.assertEqual(net.activation_tags[-3:], [Activation.TANH] * 3)
        self.assertEqual(net.activation_tags[-4], Activation.GELU)

    def test_gan_full_scale(self):
        sizes, tanh, noise = gan_layout("small", 8, width_factor=1.0)
        self.assertEqual(sizes[1:-1], [790, 990, 3120, 1630, 300, 1660, 730, 540])
        self.assertEqual((sizes[0], tanh, noise), (15, 3, 8))
        sizes, tanh, noise = gan_layout("full", 8, width_factor=1.0)
        self.assertEqual(sizes[1:-1], [1180, 1170, 2500, 1290, 700, 970, 440, 770])
        self.assertEqual((sizes[0], tanh, noise), (17, 2, 10))

    def test_gan_preset(self):
        net, noise = gan_preset("full", 4, width_factor=0.02, rng_seed=1)
        self.assertEqual(noise, 10)
        self.assertEqual(net.input_size, 17)
        self.assertEqual(net.activation_tags[-2:], [Activation.TANH] * 2)
        self.assertEqual(net.activation_tags[-3], Activation.GELU)


class TestModelFile(unittest.TestCase):
    def setUp(self):
        chain = load_chain("spatial4")
        normalizer = Normalizer.from_chain(chain, WorkspaceBounds((0.1, -0.3, 0.2), (0.5, 0.3, 0.7)))
        net, noise = gan_preset("small", 4, width_factor=0.02, rng_seed=4)
        self.model = IKModel(net, normalizer, ModelKind.GAN, noise, chain.digest(), 4)
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.ikm")
        self.poses = np.hstack([np.full((10, 3), 0.3), np.tile([0.0, 0.0, 0.0, 1.0], (10, 1))])

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_bit_identical(self):
        save_model(self.model, self.path)
        loaded = load_model(self.path)
        noise = np.random.default_rng(0).uniform(-1, 1, size=(10, 8))
        np.testing.assert_array_equal(loaded.predict(self.poses, noise), self.model.predict(self.poses, noise))
        self.assertEqual(loaded.chain_hash, self.model.chain_hash)
        self.assertEqual(loaded.kind, ModelKind.GAN)
        np.testing.assert_array_equal(loaded.normalizer.pose_bounds, self.model.normalizer.pose_bounds)

    def test_file_size(self):
        save_model(self.model, self.path)
        with open(self.path, "rb") as f:
            header = f.readline()
        self.assertEqual(os.path.getsize(self.path), len(header) + 8 * self.model.net.num_parameters)

    def test_wrong_version(self):
        save_model(self.model, self.path)
        with open(self.path, "rb") as f:
            data = f.read()
        with open(self.path, "wb") as f:
            f.write(data.replace(b'"version":1', b'"version":99', 1))
        with self.assertRaises(ModelFormatError):
            load_model(self.path)

    def test_truncated(self):
        save_model(self.model, self.path)
        with open(self.path, "rb") as f:
            data = f.read()
        with open(self.path, "wb") as f:
            f.write(data[:-8])
        with self.assertRaises(ModelFormatError):
            load_model(self.path)

    def test_zero_noise_is_deterministic(self):
        a = self.model.predict(self.poses)
        b = self.model.predict(self.poses)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, np.repeat(a[:1], 10, axis=0))

    def test_sample_draws_distinct_solutions(self):
        samples = self.model.sample(self.poses[0], 50, np.random.default_rng(0))
        self.assertEqual(samples.shape, (50, 4))
        self.assertGreater(np.var(samples, axis=0).sum(), 0.0)

    def test_model_shape_checks(self):
        with self.assertRaises(ModelFormatError):
            IKModel(self.model.net, self.model.normalizer, ModelKind.MLP, 0)


if __name__ == "__main__":
    unittest.main()
