import itertools

import numpy as np
from django.test import SimpleTestCase

from nli_generator.data import NULL_ID, NULL_TOKEN, OOV_ID, OOV_TOKEN, Vocab
from nli_generator.exceptions import ConfigError
from nli_generator.generation import (
    GenerationConfig,
    beam_generate,
    decode,
    generate_examples,
    generate_for_example,
    generation_config_for,
    greedy_decode,
    greedy_generate,
    sample_latent,
)
from nli_generator.models import ATT_EMBED, BASE_EMBED, VAE_ENCDEC, GeneratorModel

from .helpers import model_kwargs, random_examples, small_embeddings, small_vocab

V = len(small_vocab())


def tiny_generator(kind=ATT_EMBED, vocab_size=V, seed=0, hidden_dim=3, scale=1.0):
    vocab = Vocab([NULL_TOKEN, OOV_TOKEN] + [f"w{i}" for i in range(vocab_size - 2)])
    model = GeneratorModel(kind, small_embeddings(vocab_size, 3, seed=seed), hidden_dim=hidden_dim, latent_dim=2,
                           n_examples=2, seed=seed, **model_kwargs(vocab))
    # larger output weights make the decoding distributions peaked and varied
    for name in model.store:
        if name.startswith('decoder.hsm.'):
            model.store.param(name)[...] *= scale
    return model


def sequence_log_prob(model, premise, label, Z, tokens, max_len):
    context, state = model.decoder_start(premise, label, Z)
    total, last = 0.0, NULL_ID
    steps = list(tokens) if len(tokens) == max_len else list(tokens) + [NULL_ID]
    for word in steps:
        log_probs, state = model.decoder_step(context, state, [last])
        total += float(log_probs[0, word])
        last = word
    return total


class LatentSamplingTests(SimpleTestCase):
    def test_requires_sigma(self):
        with self.assertRaises(ConfigError):
            sample_latent(GenerationConfig(), np.random.default_rng(0))

    def test_scaled_by_sigma(self):
        cfg = GenerationConfig(latent_sigma=np.array([0.0, 2.0]))
        Z = sample_latent(cfg, np.random.default_rng(0))
        self.assertEqual(Z[0], 0.0)
        expected = np.random.default_rng(0).normal(0.0, 1.0, size=2)[1] * 2.0
        self.assertAlmostEqual(Z[1], expected)

    def test_scalar_sigma_uses_mean(self):
        cfg = GenerationConfig(latent_sigma=np.array([1.0, 3.0]), scalar_sigma=True)
        Z = sample_latent(cfg, np.random.default_rng(5))
        np.testing.assert_allclose(Z, np.random.default_rng(5).normal(0.0, 1.0, size=2) * 2.0)

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            GenerationConfig(beam_k=0)
        with self.assertRaises(ConfigError):
            GenerationConfig(latent_sigma=np.array([-1.0]))

    def test_config_needs_trained_spread(self):
        model = tiny_generator()
        with self.assertRaises(ConfigError):
            generation_config_for(model)
        model.compute_latent_sigma()
        cfg = generation_config_for(model, beam_k=3)
        self.assertEqual(cfg.beam_k, 3)
        self.assertEqual(cfg.max_len, model.hypothesis_len)


class DecodingTests(SimpleTestCase):
    def setUp(self):
        self.example = random_examples(1, V, seed=3)[0]

    def test_greedy_respects_max_len_and_blocks_oov(self):
        for seed in range(10):
            model = tiny_generator(seed=seed, scale=3.0)
            tokens = greedy_generate(model, self.example.premise, self.example.label, np.zeros(2),
                                     GenerationConfig(max_len=3))
            self.assertLessEqual(len(tokens), 3)
            self.assertNotIn(NULL_ID, tokens)
            self.assertNotIn(OOV_ID, tokens)

    def test_greedy_log_prob_matches_sequence_score(self):
        model = tiny_generator(kind=BASE_EMBED, seed=2, scale=3.0)
        cfg = GenerationConfig(max_len=4, block_oov=False)
        tokens, log_prob = greedy_decode(model, self.example.premise, 1, np.ones(2), cfg)
        expected = sequence_log_prob(model, self.example.premise, 1, np.ones(2), tokens, 4)
        self.assertAlmostEqual(log_prob, expected, places=10)

    def test_beam_of_one_is_greedy(self):
        rng = np.random.default_rng(0)
        premise = tuple(min(token, 5) for token in self.example.premise)
        for seed in range(100):
            kind = (ATT_EMBED, BASE_EMBED)[seed % 2]
            model = tiny_generator(kind=kind, vocab_size=6, seed=seed, scale=4.0)
            Z = rng.normal(size=2)
            label = int(rng.integers(3))
            cfg = GenerationConfig(beam_k=1, max_len=4)
            greedy = greedy_decode(model, premise, label, Z, cfg)
            beam = beam_generate(model, premise, label, Z, cfg)
            self.assertEqual(beam.best, greedy[0], f"seed {seed}")
            self.assertAlmostEqual(beam.finalists[0].log_prob, greedy[1], places=10)

    def test_wide_beam_matches_exhaustive_search(self):
        # <null>, <oov> and one word: with max_len 4 there are 31 hypotheses, fewer than k
        for seed in range(5):
            model = tiny_generator(vocab_size=3, seed=seed, scale=3.0)
            cfg = GenerationConfig(beam_k=81, max_len=4, block_oov=False)
            premise = tuple(min(token, 2) for token in self.example.premise)
            label, Z = seed % 3, np.full(2, 0.5)
            scored = []
            for length in range(5):
                for tokens in itertools.product((1, 2), repeat=length):
                    scored.append((sequence_log_prob(model, premise, label, Z, tokens, 4), list(tokens)))
            best_score, best_tokens = max(scored, key=lambda item: item[0])
            result = beam_generate(model, premise, label, Z, cfg)
            self.assertEqual(result.best, best_tokens)
            self.assertAlmostEqual(result.finalists[0].log_prob, best_score, places=10)

            for k in (1, 2, 4, 8):
                narrow = beam_generate(model, premise, label, Z, GenerationConfig(beam_k=k, max_len=4, block_oov=False))
                self.assertLessEqual(narrow.finalists[0].log_prob, best_score + 1e-12)

    def test_beam_finalists_sorted_and_bounded(self):
        model = tiny_generator(seed=4, scale=2.0)
        result = beam_generate(model, self.example.premise, 0, np.zeros(2), GenerationConfig(beam_k=4, max_len=3))
        self.assertLessEqual(len(result.finalists), 4)
        scores = [entry.log_prob for entry in result.finalists]
        self.assertEqual(scores, sorted(scores, reverse=True))
        self.assertTrue(all(entry.finished for entry in result.finalists))
        self.assertTrue(all(len(entry.tokens) <= 3 for entry in result.finalists))

    def test_decode_dispatches_on_beam_width(self):
        model = tiny_generator(seed=6, scale=2.0)
        greedy = decode(model, self.example.premise, 2, np.zeros(2), GenerationConfig(beam_k=1, max_len=3))
        self.assertEqual(greedy, greedy_decode(model, self.example.premise, 2, np.zeros(2),
                                               GenerationConfig(max_len=3)))


class GenerateExamplesTests(SimpleTestCase):
    def setUp(self):
        self.model = tiny_generator(kind=VAE_ENCDEC, seed=1, scale=2.0)
        self.model.compute_latent_sigma()
        self.cfg = generation_config_for(self.model, seed=13)
        self.sources = random_examples(5, V, seed=2)

    def test_keeps_premise_and_label(self):
        generated = generate_for_example(self.model, self.sources[0], self.cfg, np.random.default_rng(0),
                                         origin_index=0)
        self.assertEqual(generated.premise, self.sources[0].premise)
        self.assertEqual(generated.label, self.sources[0].label)
        self.assertEqual(len(generated.hypothesis), self.model.hypothesis_len)
        self.assertEqual(generated.origin_index, 0)
        self.assertLessEqual(generated.gen_logprob, 0.0)

    def test_passes_and_origins(self):
        generated = generate_examples(self.model, self.sources, self.cfg, passes=2)
        self.assertEqual(len(generated), 10)
        self.assertEqual([e.origin_index for e in generated], list(range(5)) * 2)

    def test_independent_of_worker_count(self):
        serial = generate_examples(self.model, self.sources, self.cfg, workers=1, passes=2)
        parallel = generate_examples(self.model, self.sources, self.cfg, workers=3, passes=2)
        self.assertEqual(serial, parallel)

    def test_seed_changes_output(self):
        a = generate_examples(self.model, self.sources, self.cfg, passes=3)
        b = generate_examples(self.model, self.sources, generation_config_for(self.model, seed=14), passes=3)
        self.assertNotEqual([e.gen_logprob for e in a], [e.gen_logprob for e in b])


class _Histories:
    def __init__(self, rows):
        self.rows = rows

    def select(self, indices):
        return _Histories([self.rows[int(i)] for i in indices])


class ScriptedDecoder:
    """Decoder stand-in whose next-word probabilities depend only on the words emitted so far."""

    def __init__(self, next_probs):
        self.next_probs = next_probs

    def decoder_start(self, premise, label, Z):
        return None, _Histories([()])

    def decoder_step(self, context, state, tokens):
        rows = [fed + (int(token),) for fed, token in zip(state.rows, tokens)]
        with np.errstate(divide='ignore'):
            log_probs = np.log(np.array([self.next_probs(fed[1:]) for fed in rows], dtype=np.float64))
        return log_probs, _Histories(rows)


A, B = 2, 3


def narrow_beam_trap(prefix):
    # k=2 keeps "b ?" prefixes that outscore "a a" at length two but end lower
    table = {
        (): [0.1, 0.0, 0.5, 0.4],
        (A,): [0.30, 0.0, 0.36, 0.34],
        (B,): [0.02, 0.0, 0.49, 0.49],
        (A, A): [1.0 - 2e-6, 0.0, 1e-6, 1e-6],
    }
    return table.get(prefix, [0.1, 0.0, 0.45, 0.45])


class ScriptedDecodingTests(SimpleTestCase):
    premise = (2, 3, 0)

    def test_always_null_gives_empty_hypothesis(self):
        model = ScriptedDecoder(lambda prefix: [0.9, 0.0, 0.05, 0.05])
        tokens, log_prob = greedy_decode(model, self.premise, 0, None, GenerationConfig(max_len=15))
        self.assertEqual(tokens, [])
        self.assertAlmostEqual(log_prob, np.log(0.9))
        result = beam_generate(model, self.premise, 0, None, GenerationConfig(beam_k=3, max_len=15))
        self.assertEqual(result.best, [])
        self.assertAlmostEqual(result.finalists[0].log_prob, np.log(0.9))

    def test_never_null_stops_at_max_len(self):
        model = ScriptedDecoder(lambda prefix: [0.0, 0.0, 0.6, 0.4])
        tokens = greedy_generate(model, self.premise, 1, None, GenerationConfig(max_len=15))
        self.assertEqual(tokens, [A] * 15)
        result = beam_generate(model, self.premise, 1, None, GenerationConfig(beam_k=3, max_len=15))
        self.assertEqual(result.best, [A] * 15)
        self.assertAlmostEqual(result.finalists[0].log_prob, 15 * np.log(0.6), places=10)
        self.assertEqual([len(entry.tokens) for entry in result.finalists], [15, 15, 15])
        self.assertTrue(all(entry.finished for entry in result.finalists))

    def test_wider_beam_can_score_lower(self):
        model = ScriptedDecoder(narrow_beam_trap)
        greedy_tokens, greedy_score = greedy_decode(model, self.premise, 2, None, GenerationConfig(max_len=3))
        self.assertEqual(greedy_tokens, [A, A])

        best = {}
        for k in (1, 2, 4, 8):
            result = beam_generate(model, self.premise, 2, None, GenerationConfig(beam_k=k, max_len=3))
            best[k] = (result.best, result.finalists[0].log_prob)

        self.assertEqual(best[1][0], [A, A])
        self.assertAlmostEqual(best[1][1], greedy_score, places=12)
        self.assertEqual(best[2][0], [B, A, A])
        self.assertAlmostEqual(best[2][1], np.log(0.4 * 0.49 * 0.45), places=12)
        self.assertLess(best[2][1], best[1][1])
        for k in (4, 8):
            self.assertEqual(best[k][0], [A, A])
            self.assertAlmostEqual(best[k][1], best[1][1], places=12)
