import numpy as np
from django.test import SimpleTestCase

from nli_generator.exceptions import ConfigError, ShapeError
from nli_generator.models import (
    ATT_EMBED,
    BASE_EMBED,
    ENCDEC,
    GENERATOR_KINDS,
    VAE_ENCDEC,
    ClassifierModel,
    DiscriminatorModel,
    GeneratorModel,
    classify,
    discriminator_loss,
    discriminator_score,
    encode_latent,
    generator_loss,
    kl_divergence,
    vae_latent,
)
from nli_generator.numerics import AdamConfig, adam_step, clip_gradients

from .helpers import GradientCheckMixin, model_kwargs, random_examples, small_embeddings, small_vocab

V = len(small_vocab())


def make_generator(kind, hidden_dim=3, latent_dim=2, n_examples=3, seed=1, embedding_dim=3):
    return GeneratorModel(kind, small_embeddings(V, embedding_dim), hidden_dim=hidden_dim, latent_dim=latent_dim,
                          n_examples=n_examples, seed=seed, **model_kwargs())


class ClassifierTests(SimpleTestCase, GradientCheckMixin):
    def setUp(self):
        self.model = ClassifierModel(small_embeddings(V, 3), hidden_dim=3, seed=2, **model_kwargs())
        self.examples = random_examples(2, V, seed=4)

    def test_probabilities_on_simplex(self):
        for example in random_examples(10, V, seed=5):
            probs = classify(self.model, example.premise, example.hypothesis)
            self.assertEqual(probs.shape, (3,))
            self.assertTrue(np.all(probs > 0))
            self.assertAlmostEqual(float(probs.sum()), 1.0, delta=1e-12)

    def test_unpadded_input_rejected(self):
        with self.assertRaises(ShapeError):
            classify(self.model, (2, 3), self.examples[0].hypothesis)

    def test_embeddings_override(self):
        example = self.examples[0]
        other = small_embeddings(V, 3, seed=9)
        default = classify(self.model, example.premise, example.hypothesis)
        swapped = classify(self.model, example.premise, example.hypothesis, other)
        self.assertFalse(np.allclose(default, swapped))
        self.assertIsNot(self.model.embeddings, other)

    def test_gradients(self):
        model = self.model
        model.zero_grad()
        model.batch_loss(self.examples)
        analytic = model.grads()
        self.assertGradientsMatch(lambda: model.batch_loss(self.examples, backward=False), model.store, analytic)

    def test_evaluate_returns_loss_and_accuracy(self):
        loss, accuracy = self.model.evaluate(random_examples(12, V, seed=6))
        self.assertGreater(loss, 0.0)
        self.assertTrue(0.0 <= accuracy <= 1.0)


class GeneratorGradientTests(SimpleTestCase, GradientCheckMixin):
    def setUp(self):
        self.examples = random_examples(2, V, seed=7)

    def _check(self, kind, **loss_kwargs):
        model = make_generator(kind)
        model.zero_grad()
        model.batch_loss(self.examples, **loss_kwargs)
        analytic = model.grads()
        self.assertGradientsMatch(lambda: model.batch_loss(self.examples, backward=False, **loss_kwargs).loss,
                                  model.store, analytic)

    def test_att_embed(self):
        self._check(ATT_EMBED, indices=[0, 2])

    def test_base_embed(self):
        self._check(BASE_EMBED, indices=[2, 1])

    def test_encdec(self):
        self._check(ENCDEC)

    def test_vae_encdec_with_kl(self):
        epsilon = np.random.default_rng(3).standard_normal((2, 2))
        self._check(VAE_ENCDEC, epsilon=epsilon)

    def test_single_example_loss_matches_batch(self):
        model = make_generator(ATT_EMBED)
        loss, grads = generator_loss(model, self.examples[0], example_index=1)
        result = model.batch_loss([self.examples[0]], [1], backward=False)
        self.assertAlmostEqual(loss, result.loss, places=12)
        self.assertEqual(set(grads), set(model.store.names()))


class GeneratorTests(SimpleTestCase):
    def test_unknown_kind_rejected(self):
        with self.assertRaises(ConfigError):
            make_generator('gpt')

    def test_zero_latent_dim_rejected(self):
        with self.assertRaises(ConfigError):
            make_generator(ATT_EMBED, latent_dim=0)

    def test_embed_kinds_need_table_size(self):
        with self.assertRaises(ConfigError):
            make_generator(ATT_EMBED, n_examples=0)

    def test_index_outside_latent_table(self):
        model = make_generator(ATT_EMBED, n_examples=3)
        example = random_examples(1, V)[0]
        with self.assertRaises(IndexError):
            generator_loss(model, example, example_index=3)
        with self.assertRaises(IndexError):
            generator_loss(model, example)

    def test_one_step_updates_one_latent_row(self):
        model = make_generator(ATT_EMBED, n_examples=4)
        before = model.latent_table().copy()
        model.batch_loss(random_examples(1, V, seed=2), [1])
        clip_gradients(model.store, 5.0)
        adam_step(model.store, AdamConfig())
        changed = np.any(model.latent_table() != before, axis=1)
        self.assertEqual(changed.tolist(), [False, True, False, False])

    def test_repeated_index_accumulates(self):
        model = make_generator(BASE_EMBED, n_examples=4)
        examples = random_examples(2, V, seed=3)
        model.batch_loss(examples, [2, 2])
        self.assertEqual(model.store.entries['latent.Z'].touched, {2})
        self.assertTrue(np.any(model.store.grad('latent.Z')[2]))

    def test_parameter_accounting(self):
        model = make_generator(ATT_EMBED, n_examples=50, latent_dim=4)
        self.assertEqual(model.total_parameters, model.store.size())
        self.assertLess(model.updated_parameters, model.total_parameters)
        latent = 50 * 4
        self.assertLessEqual(model.updated_parameters, model.total_parameters - latent + 4)
        encdec = make_generator(ENCDEC)
        self.assertLessEqual(encdec.updated_parameters, encdec.total_parameters)

    def test_incremental_decoding_matches_teacher_forcing(self):
        example = random_examples(1, V, seed=11)[0]
        for kind in (ATT_EMBED, BASE_EMBED):
            model = make_generator(kind, seed=5)
            Z = np.array([0.3, -0.7])
            nll, tokens = model.decoder_nll([example], Z[None])
            context, state = model.decoder_start(example.premise, example.label, Z)
            total, last = 0.0, 0
            for word in list(example.hypothesis_ids()) + [0]:
                log_probs, state = model.decoder_step(context, state, [last])
                total += float(log_probs[0, word])
                last = word
            self.assertAlmostEqual(-total, float(nll[0]), places=9, msg=kind)
            self.assertEqual(int(tokens[0]), len(example.hypothesis_ids()) + 1)

    def test_softmax_layout_built_once(self):
        model = make_generator(ENCDEC)
        self.assertIs(model.hsm.layout, model.hsm.layout)
        self.assertIs(model.hsm.layout, model.hsm_layout)
        self.assertEqual(model.hsm_layout.vocab_size, V)
        # bound views follow in-place parameter updates
        model.store.param('decoder.hsm.class_b')[...] += 1.0
        np.testing.assert_array_equal(model.hsm.class_b, model.store.param('decoder.hsm.class_b'))

    def test_step_distribution_normalised(self):
        model = make_generator(VAE_ENCDEC)
        example = random_examples(1, V)[0]
        context, state = model.decoder_start(example.premise, example.label, np.zeros(2))
        log_probs, _ = model.decoder_step(context, state.select(np.array([0, 0])), [0, 3])
        self.assertEqual(log_probs.shape, (2, V))
        np.testing.assert_allclose(np.exp(log_probs).sum(axis=1), np.ones(2), atol=1e-10)

    def test_latent_sigma_per_kind(self):
        examples = random_examples(3, V, seed=1)
        att = make_generator(ATT_EMBED)
        np.testing.assert_allclose(att.compute_latent_sigma(), att.latent_table().std(axis=0))
        vae = make_generator(VAE_ENCDEC)
        np.testing.assert_array_equal(vae.compute_latent_sigma(), np.ones(2))
        encdec = make_generator(ENCDEC)
        with self.assertRaises(ConfigError):
            encdec.compute_latent_sigma()
        self.assertEqual(encdec.compute_latent_sigma(examples).shape, (2,))

    def test_encoder_latent_shape(self):
        model = make_generator(ENCDEC)
        self.assertEqual(encode_latent(model, random_examples(1, V)[0]).shape, (2,))

    def test_vae_latent(self):
        model = make_generator(VAE_ENCDEC)
        example = random_examples(1, V)[0]
        mu, _ = model.vae_heads([example])
        Z, kl = vae_latent(model, example, np.zeros(2))
        np.testing.assert_allclose(Z, mu[0])
        self.assertGreaterEqual(kl, 0.0)
        with self.assertRaises(ConfigError):
            vae_latent(make_generator(ENCDEC), example, np.zeros(2))

    def test_kl_of_standard_normal_is_zero(self):
        self.assertAlmostEqual(kl_divergence(np.zeros(3), np.ones(3)), 0.0)
        self.assertAlmostEqual(kl_divergence(np.array([1.0]), np.array([1.0])), 0.5)

    def test_metadata_records_kind_and_sizes(self):
        for kind in GENERATOR_KINDS:
            meta = make_generator(kind).metadata()
            self.assertEqual(meta['kind'], kind)
            self.assertEqual(meta['z'], 2)
            self.assertEqual(meta['vocab_size'], V)
        self.assertEqual(make_generator(BASE_EMBED).decoder_dim, 2 + 3 + 3)


class DiscriminatorTests(SimpleTestCase, GradientCheckMixin):
    def setUp(self):
        self.model = DiscriminatorModel(small_embeddings(V, 3), hidden_dim=3, seed=4, **model_kwargs())
        self.examples = random_examples(4, V, seed=8)

    def test_score_in_unit_interval(self):
        for example in self.examples:
            score = discriminator_score(self.model, example.hypothesis)
            self.assertTrue(0.0 < score < 1.0)

    def test_unpadded_hypothesis_rejected(self):
        with self.assertRaises(ShapeError):
            discriminator_score(self.model, (2, 3))

    def test_gradients(self):
        originals = np.array([e.hypothesis for e in self.examples[:2]])
        generated = np.array([e.hypothesis for e in self.examples[2:]])
        model = self.model
        model.zero_grad()
        model.pair_loss(originals, generated)
        analytic = model.grads()
        self.assertGradientsMatch(lambda: model.pair_loss(originals, generated, backward=False),
                                  model.store, analytic)

    def test_pair_loss_function(self):
        loss, grads = discriminator_loss(self.model, self.examples[0].hypothesis, self.examples[1].hypothesis)
        self.assertGreater(loss, 0.0)
        self.assertTrue(any(np.any(g) for g in grads.values()))
        self.assertFalse(any(np.any(self.model.store.grad(name)) for name in self.model.store))
