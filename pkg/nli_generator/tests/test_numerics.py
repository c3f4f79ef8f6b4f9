import numpy as np
from django.test import SimpleTestCase

from nli_generator.exceptions import GradientCheckError, NumericalError, ShapeError
from nli_generator.numerics import (
    AdamConfig,
    ParamStore,
    adam_step,
    clip_gradients,
    dense_backward,
    dense_forward,
    finite_diff_grad,
    log_softmax,
    softmax,
)

from .helpers import GradientCheckMixin


class DenseTests(SimpleTestCase, GradientCheckMixin):
    def test_identity_weights(self):
        out = dense_forward(np.array([1.0, 2.0]), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(out, [1.0, 2.0])

    def test_zero_weights_return_bias(self):
        out = dense_forward(np.array([7.0, -3.0]), np.zeros((2, 2)), np.array([3.0, 4.0]))
        np.testing.assert_array_equal(out, [3.0, 4.0])

    def test_hand_multiplication(self):
        out = dense_forward(np.array([2.0, 3.0]), np.array([[1.0, 1.0], [1.0, -1.0]]), np.zeros(2))
        np.testing.assert_array_equal(out, [5.0, -1.0])

    def test_non_finite_output_raises(self):
        with self.assertRaises(NumericalError):
            dense_forward(np.array([np.nan, 1.0]), np.eye(2), np.zeros(2))
        with self.assertRaises(NumericalError):
            dense_forward(np.array([1e200, 1.0]), np.array([[1e200, 0.0]]), np.zeros(1))

    def test_mismatch_reports_both_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            dense_forward(np.ones(3), np.ones((2, 2)), np.zeros(2))
        self.assertIn('(3,)', str(ctx.exception))
        self.assertIn('(2, 2)', str(ctx.exception))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        store.add('x', rng.normal(size=(2, 4)))
        store.add('W', rng.normal(size=(3, 4)))
        store.add('b', rng.normal(size=3))
        R = rng.normal(size=(2, 3))

        def loss():
            return float(np.sum(R * np.tanh(dense_forward(store.param('x'), store.param('W'), store.param('b')))))

        out = dense_forward(store.param('x'), store.param('W'), store.param('b'))
        d_out = R * (1.0 - np.tanh(out) ** 2)
        d_x, d_W, d_b = dense_backward(d_out, store.param('x'), store.param('W'))
        self.assertGradientsMatch(loss, store, {'x': d_x, 'W': d_W, 'b': d_b})


class SoftmaxTests(SimpleTestCase):
    def test_uniform_on_equal_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1.0 / 3.0), atol=1e-15)

    def test_shift_invariance(self):
        for c in (-50.0, 0.0, 13.5, 90.0):
            np.testing.assert_allclose(softmax(np.array([c, c + 2.0])), softmax(np.array([0.0, 2.0])), atol=1e-15)

    def test_direct_formula(self):
        logits = np.array([1.0, 2.0, 3.0])
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(softmax(logits), expected, rtol=1e-14)

    def test_sums_to_one_for_large_logits(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            probs = softmax(rng.uniform(-100, 100, size=rng.integers(1, 30)))
            self.assertTrue(np.all(probs > 0) or probs.size == 1)
            self.assertAlmostEqual(float(probs.sum()), 1.0, delta=1e-12)

    def test_log_softmax_agrees(self):
        logits = np.array([0.5, -1.0, 4.0])
        np.testing.assert_allclose(np.exp(log_softmax(logits)), softmax(logits), rtol=1e-13)

    def test_empty_input_fails(self):
        with self.assertRaises(ShapeError):
            softmax(np.zeros(0))

    def test_nan_logits_raise_at_the_op(self):
        for op in (softmax, log_softmax):
            with self.assertRaises(NumericalError):
                op(np.array([0.0, np.nan]))
            with self.assertRaises(NumericalError):
                op(np.array([np.inf, 1.0]))

    def test_empty_batch_is_allowed(self):
        self.assertEqual(log_softmax(np.zeros((0, 3))).shape, (0, 3))


class AdamTests(SimpleTestCase):
    def test_zero_gradient_leaves_parameters(self):
        store = ParamStore()
        store.add('w', np.array([1.0, -2.0]))
        adam_step(store, AdamConfig())
        np.testing.assert_array_equal(store.param('w'), [1.0, -2.0])
        np.testing.assert_array_equal(store.entries['w'].adam_m, [0.0, 0.0])
        np.testing.assert_array_equal(store.entries['w'].adam_v, [0.0, 0.0])
        self.assertEqual(store.step_count, 1)

    def test_first_step_moves_by_learning_rate(self):
        cfg = AdamConfig(learning_rate=0.01)
        for g in (3.0, -0.2):
            store = ParamStore()
            store.add('w', np.array([0.5]))
            store.grad('w')[...] = g
            adam_step(store, cfg)
            self.assertAlmostEqual(float(store.param('w')[0]), 0.5 - 0.01 * np.sign(g), delta=0.01 * 1e-6)

    def test_two_steps_follow_recurrence(self):
        cfg = AdamConfig(learning_rate=0.1)
        store = ParamStore()
        store.add('w', np.array([1.0]))
        g, w, m, v = 0.7, 1.0, 0.0, 0.0
        for t in (1, 2):
            store.grad('w')[...] = g
            adam_step(store, cfg)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            w -= cfg.learning_rate * (m / (1 - cfg.beta1 ** t)) / (np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.epsilon)
        self.assertAlmostEqual(float(store.param('w')[0]), w, places=14)

    def test_gradients_zeroed_after_step(self):
        store = ParamStore()
        store.add('w', np.ones(3))
        store.grad('w')[...] = 1.0
        adam_step(store, AdamConfig())
        np.testing.assert_array_equal(store.grad('w'), np.zeros(3))

    def test_non_finite_gradient_names_parameter(self):
        store = ParamStore()
        store.add('good', np.ones(2))
        store.add('bad', np.ones(2))
        store.grad('bad')[0] = np.nan
        with self.assertRaises(NumericalError) as ctx:
            adam_step(store, AdamConfig())
        self.assertEqual(ctx.exception.param_name, 'bad')
        np.testing.assert_array_equal(store.param('good'), np.ones(2))

    def test_sparse_rows_only_touched_rows_move(self):
        store = ParamStore()
        store.add('Z', np.ones((4, 2)), sparse_rows=True)
        store.grad('Z')[2] = [0.5, -0.5]
        store.mark_rows('Z', [2])
        adam_step(store, AdamConfig(learning_rate=0.1))
        Z = store.param('Z')
        np.testing.assert_array_equal(Z[[0, 1, 3]], np.ones((3, 2)))
        np.testing.assert_allclose(Z[2], [0.9, 1.1], atol=1e-6)
        self.assertEqual(list(store.entries['Z'].row_steps), [0, 0, 1, 0])

    def test_identical_inputs_are_bit_identical(self):
        results = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            store = ParamStore()
            store.add('w', rng.normal(size=(3, 3)))
            for _ in range(5):
                store.grad('w')[...] = rng.normal(size=(3, 3))
                adam_step(store, AdamConfig())
            results.append(store.param('w').tobytes())
        self.assertEqual(results[0], results[1])

    def test_beta_outside_unit_interval_rejected(self):
        with self.assertRaises(ValueError):
            AdamConfig(beta1=1.0)


class ClipTests(SimpleTestCase):
    def test_scales_to_max_norm(self):
        store = ParamStore()
        store.add('a', np.zeros(2))
        store.add('b', np.zeros(1))
        store.grad('a')[...] = [3.0, 0.0]
        store.grad('b')[...] = [4.0]
        norm = clip_gradients(store, 1.0)
        self.assertAlmostEqual(norm, 5.0)
        np.testing.assert_allclose(store.grad('a'), [0.6, 0.0])
        np.testing.assert_allclose(store.grad('b'), [0.8])

    def test_small_gradients_untouched(self):
        store = ParamStore()
        store.add('a', np.zeros(2))
        store.grad('a')[...] = [0.1, 0.1]
        clip_gradients(store, 5.0)
        np.testing.assert_array_equal(store.grad('a'), [0.1, 0.1])


class FiniteDiffTests(SimpleTestCase):
    def setUp(self):
        self.store = ParamStore()
        self.store.add('x', np.array([0.3, -1.2, 2.0]))

    def test_quadratic(self):
        grad = finite_diff_grad(lambda: 0.5 * float(np.sum(self.store.param('x') ** 2)), self.store, 'x')
        np.testing.assert_allclose(grad, self.store.param('x'), atol=1e-6)

    def test_sine(self):
        grad = finite_diff_grad(lambda: float(np.sum(np.sin(self.store.param('x')))), self.store, 'x', h=1e-4)
        np.testing.assert_allclose(grad, np.cos(self.store.param('x')), atol=1e-5)

    def test_parameters_restored(self):
        before = self.store.param('x').copy()
        finite_diff_grad(lambda: float(np.sum(self.store.param('x') ** 3)), self.store, 'x')
        np.testing.assert_array_equal(self.store.param('x'), before)

    def test_zero_step_rejected(self):
        with self.assertRaises(GradientCheckError):
            finite_diff_grad(lambda: 0.0, self.store, 'x', h=0.0)

    def test_non_deterministic_loss_rejected(self):
        rng = np.random.default_rng()
        with self.assertRaises(GradientCheckError):
            finite_diff_grad(lambda: float(rng.normal()), self.store, 'x')


class ParamStoreTests(SimpleTestCase):
    def test_duplicate_name_rejected(self):
        store = ParamStore()
        store.add('w', np.zeros(2))
        with self.assertRaises(ValueError):
            store.add('w', np.zeros(2))

    def test_slots_match_parameter_shape(self):
        store = ParamStore()
        store.add('w', np.zeros((3, 2)))
        entry = store.entries['w']
        self.assertEqual(entry.grad.shape, (3, 2))
        self.assertEqual(entry.adam_m.shape, (3, 2))
        self.assertEqual(entry.adam_v.shape, (3, 2))

    def test_restore_rejects_wrong_shape(self):
        store = ParamStore()
        store.add('w', np.zeros(2))
        with self.assertRaises(ShapeError):
            store.restore({'w': np.zeros(3)})

    def test_snapshot_is_a_copy(self):
        store = ParamStore()
        store.add('w', np.zeros(2))
        snap = store.snapshot()
        store.param('w')[0] = 5.0
        self.assertEqual(snap['w'][0], 0.0)
        store.restore(snap)
        self.assertEqual(store.param('w')[0], 0.0)
