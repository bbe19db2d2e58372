import os
import tempfile
import unittest

import numpy as np

from fbsdej import tape as ops
from fbsdej.exceptions import DivergenceError
from fbsdej.net import (AdamState, MLPShape, NetworkConfig, ParamSet, adam_step, grad, gradcheck, init_params,
                        load_params, mlp_forward, mlp_forward_marks, save_params)


def numeric_gradient(func, x, step=1e-6):
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        shift = np.zeros_like(x)
        shift[i] = step
        out[i] = (func(x + shift) - func(x - shift)) / (2.0 * step)
    return out


class TestTape(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_square_sum_gradient(self):
        tape = ops.Tape()
        x = self.rng.normal(size=(3, 2))
        leaf = tape.watch(x, 0)
        loss = ops.sum(leaf * leaf)
        np.testing.assert_allclose(grad(loss, tape), 2.0 * x.ravel())

    def test_broadcast_gradients_are_summed(self):
        """d/db sum(x + b) with b broadcast over rows = row count."""
        tape = ops.Tape()
        x = tape.watch(self.rng.normal(size=(4, 3)), 0)
        b = tape.watch(self.rng.normal(size=(3,)), 12)
        flat = grad(ops.sum(x + b), tape)
        np.testing.assert_allclose(flat[12:], np.full(3, 4.0))
        np.testing.assert_allclose(flat[:12], np.ones(12))

    def test_matmul_and_elementwise_chain(self):
        a0 = self.rng.normal(size=(3, 4))
        w = self.rng.normal(size=(4, 2))

        def value(a):
            return float(np.sum(np.tanh(a @ w) * np.exp(0.1 * (a @ w)) + np.sin(a @ w) / (2.0 + np.cos(a @ w))))

        tape = ops.Tape()
        a = tape.watch(a0, 0)
        h = ops.matmul(a, w)
        loss = ops.sum(ops.tanh(h) * ops.exp(0.1 * h) + ops.sin(h) / (2.0 + ops.cos(h)))
        np.testing.assert_allclose(grad(loss, tape).reshape(3, 4), numeric_gradient(value, a0), rtol=1e-6, atol=1e-8)

    def test_getitem_accumulates_repeated_indices(self):
        tape = ops.Tape()
        x = tape.watch(np.array([1.0, 2.0, 3.0]), 0)
        picked = ops.getitem(x, np.array([0, 0, 2]))
        np.testing.assert_allclose(grad(ops.sum(picked), tape), [2.0, 0.0, 1.0])

    def test_plain_arrays_pass_through(self):
        """Without tensors every operation returns the numpy result."""
        x = np.array([0.5, 1.5])
        np.testing.assert_allclose(ops.exp(x), np.exp(x))
        np.testing.assert_allclose(ops.mean(ops.square(x)), 1.25)

    def test_tensors_from_different_tapes(self):
        a = ops.Tape().variable(np.ones(2))
        b = ops.Tape().variable(np.ones(2))
        with self.assertRaises(ValueError):
            ops.add(a, b)

    def test_non_finite_adjoint(self):
        tape = ops.Tape()
        x = tape.variable(np.array([0.0, 1.0]))
        loss = ops.sum(ops.log(x * 1.0))
        with self.assertRaises(DivergenceError) as ctx:
            tape.backward(loss)
        self.assertEqual(ctx.exception.node_kind, "mul")

    def test_backward_needs_own_tensor(self):
        with self.assertRaises(ValueError):
            ops.Tape().backward(ops.Tape().variable(1.0))


class TestNetworks(unittest.TestCase):

    def test_gradcheck_random_smooth_nets(self):
        """Tape gradients match central differences on random tanh networks."""
        rng = np.random.default_rng(3)
        for k in range(20):
            hidden = tuple(int(w) for w in rng.integers(2, 7, size=rng.integers(1, 3)))
            shape = MLPShape(int(rng.integers(1, 5)), hidden, int(rng.integers(1, 4)), "tanh")
            self.assertLess(gradcheck(shape, seed=k), 1e-5)

    def test_parameter_count(self):
        """d = 2, N = 3, hidden (12, 12): z-net 3->12->12->2, u-net 4->12->12->1."""
        params = init_params(NetworkConfig(), d=2, N=3, seed=0)
        z_count = 3 * 12 + 12 + 12 * 12 + 12 + 12 * 2 + 2
        u_count = 4 * 12 + 12 + 12 * 12 + 12 + 12 * 1 + 1
        self.assertEqual(params.size, 1 + 3 * (z_count + u_count))
        self.assertEqual(params.net_count, 3)

    def test_shared_mode_has_one_pair(self):
        params = init_params(NetworkConfig(network_mode="shared"), d=2, N=5, seed=0)
        self.assertEqual(params.net_count, 1)
        self.assertEqual(params.z_shape.input_dim, 4)
        self.assertEqual(params.block("z", 0), params.block("z", 4))

    def test_initialisation_is_seeded(self):
        first = init_params(NetworkConfig(), d=1, N=2, seed=7, y0=1.5)
        second = init_params(NetworkConfig(), d=1, N=2, seed=7, y0=1.5)
        np.testing.assert_array_equal(first.theta, second.theta)
        self.assertEqual(first.y0, 1.5)
        # biases start at zero
        self.assertTrue(np.all(first.view("z.0.0.b") == 0.0))

    def test_output_layer_starts_small(self):
        params = init_params(NetworkConfig(), d=1, N=20, seed=0)
        for kind in ("z", "u"):
            for n in (0, 19):
                hidden = params.view(f"{kind}.{n}.1.W")
                output = params.view(f"{kind}.{n}.2.W")
                self.assertLess(np.abs(output).max(), 0.25)
                self.assertLess(output.std(), 0.3 * hidden.std())
                self.assertTrue(np.all(output != 0.0))

    def test_last_layer_is_linear(self):
        params = init_params(NetworkConfig(), d=2, N=1, seed=6)
        x = np.random.default_rng(7).normal(size=(9, 3))
        *hidden, (w, b) = params.z_layers(0)
        base = mlp_forward(hidden + [(w, np.zeros_like(b))], x)
        doubled = mlp_forward(hidden + [(2.0 * w, np.zeros_like(b))], x)
        np.testing.assert_allclose(doubled, 2.0 * base, rtol=1e-14)
        # with a bias the output stays affine in the last weights
        half = mlp_forward(hidden + [(0.5 * w, b + 1.0)], x)
        full = mlp_forward(hidden + [(w, b + 1.0)], x)
        np.testing.assert_allclose(full - half, 0.5 * base, atol=1e-12)

    def test_forward_rejects_wrong_width(self):
        params = init_params(NetworkConfig(), d=2, N=1, seed=0)
        with self.assertRaises(ValueError):
            mlp_forward(params.z_layers(0), np.zeros((4, 2)))

    def test_forward_matches_straight_line_evaluation(self):
        params = init_params(NetworkConfig(hidden_dims=(5,), activation="tanh"), d=2, N=1, seed=4)
        x = np.random.default_rng(5).normal(size=(6, 3))
        (w1, b1), (w2, b2) = params.z_layers(0)
        expected = np.tanh(x @ w1 + b1) @ w2 + b2
        np.testing.assert_allclose(mlp_forward(params.z_layers(0), x, "tanh"), expected)

    def test_forward_marks_matches_concatenated_inputs(self):
        params = init_params(NetworkConfig(), d=2, N=1, seed=1)
        rng = np.random.default_rng(2)
        features, marks = rng.normal(size=(5, 3)), rng.uniform(-1, 1, size=(5, 4))
        result = mlp_forward_marks(params.u_layers(0), features, marks)
        self.assertEqual(result.shape, (5, 4))
        for j in range(4):
            column = mlp_forward(params.u_layers(0), np.concatenate([features, marks[:, j:j + 1]], axis=1))
            np.testing.assert_allclose(result[:, j], column[:, 0], atol=1e-12)

    def test_unused_blocks_get_zero_gradient(self):
        params = init_params(NetworkConfig(), d=1, N=2, seed=0, y0=3.0)
        tape = ops.Tape()
        bound = params.bind(tape)
        loss = ops.square(bound.y0 - 2.0)
        gradient = grad(loss, tape)
        self.assertAlmostEqual(gradient[0], 2.0)
        self.assertTrue(np.all(gradient[1:] == 0.0))


class TestOptimiser(unittest.TestCase):

    def test_first_adam_step_moves_by_learning_rate(self):
        """After one step m_hat / sqrt(v_hat) = sign(g)."""
        theta = np.array([1.0, -1.0, 0.5])
        gradient = np.array([1.0, -2.0, 0.5])
        updated, state = adam_step(theta, gradient, AdamState.zeros(3), lr=0.01)
        np.testing.assert_allclose(updated, theta - 0.01 * np.sign(gradient), atol=1e-8)
        self.assertEqual(state.t, 1)

    def test_sgd_step(self):
        theta = np.array([1.0, 2.0])
        updated, _ = adam_step(theta, np.array([0.5, -1.0]), AdamState.zeros(2), lr=0.1, sgd=True)
        np.testing.assert_allclose(updated, [0.95, 2.1])

    def test_step_keeps_param_type(self):
        params = init_params(NetworkConfig(), d=1, N=1, seed=0)
        updated, _ = adam_step(params, np.ones(params.size), AdamState.zeros(params.size))
        self.assertIsInstance(updated, ParamSet)
        self.assertTrue(np.all(updated.theta < params.theta))

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            adam_step(np.zeros(3), np.zeros(2), AdamState.zeros(3))

    def test_adam_minimises_quadratic(self):
        theta, state = np.array([3.0, -2.0]), AdamState.zeros(2)
        for _ in range(2000):
            theta, state = adam_step(theta, 2.0 * theta, state, lr=0.01)
        self.assertLess(np.max(np.abs(theta)), 0.05)


class TestCheckpoints(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmpdir.name, "params.ckpt")

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_save_and_load(self):
        params = init_params(NetworkConfig(hidden_dims=(4, 3), network_mode="shared"), d=2, N=6, seed=9)
        save_params(params, self.path)
        loaded = load_params(self.path)
        np.testing.assert_array_equal(loaded.theta, params.theta)
        self.assertEqual((loaded.steps, loaded.dim, loaded.network_mode, loaded.seed), (6, 2, "shared", 9))

    def test_truncated_file_rejected(self):
        params = init_params(NetworkConfig(), d=1, N=2, seed=0)
        save_params(params, self.path)
        with open(self.path, "rb") as fh:
            data = fh.read()
        with open(self.path, "wb") as fh:
            fh.write(data[:-8])
        with self.assertRaises(ValueError):
            load_params(self.path)


if __name__ == '__main__':
    unittest.main()
