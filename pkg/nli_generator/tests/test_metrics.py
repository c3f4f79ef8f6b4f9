import math
from functools import lru_cache

import numpy as np
from django.test import SimpleTestCase

from nli_generator.data import Example, pad
from nli_generator.exceptions import InsufficientDataError, ShapeError
from nli_generator.metrics import (
    MetricReport,
    dataset_label_accuracy,
    dataset_overlap,
    dataset_report,
    discriminator_error_rate,
    jaccard_distance,
    mean_hypothesis_length,
    mean_token_nll,
    meteor_lite,
    render_table,
    rouge_l,
)
from nli_generator.models import ENCDEC, DiscriminatorModel, GeneratorModel

from .helpers import HYPOTHESIS_LEN, dataset_of, model_kwargs, random_examples, small_embeddings, small_vocab

V = len(small_vocab())


def oracle_lcs(a, b):
    @lru_cache(maxsize=None)
    def lcs(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + lcs(i + 1, j + 1)
        return max(lcs(i + 1, j), lcs(i, j + 1))
    return lcs(0, 0)


class FixedJudge:
    """Predicts the same label for every example."""

    def __init__(self, label):
        self.label = label

    def predict_proba(self, examples, batch_size=256):
        probs = np.full((len(examples), 3), 0.1)
        probs[:, self.label] = 0.8
        return probs


class OverlapMetricTests(SimpleTestCase):
    def test_rouge_matches_lcs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = [int(t) for t in rng.integers(1, 5, size=rng.integers(1, 7))]
            b = [int(t) for t in rng.integers(1, 5, size=rng.integers(1, 7))]
            lcs = oracle_lcs(tuple(a), tuple(b))
            expected = 0.0 if lcs == 0 else 2 * lcs / (len(a) + len(b))
            self.assertAlmostEqual(rouge_l(a, b), expected, places=12)

    def test_rouge_ignores_padding(self):
        self.assertEqual(rouge_l((3, 4, 0, 0), (3, 4)), 1.0)
        self.assertEqual(rouge_l([5], [6]), 0.0)

    def test_jaccard_set_math(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = [int(t) for t in rng.integers(1, 8, size=rng.integers(1, 6))]
            b = [int(t) for t in rng.integers(1, 8, size=rng.integers(1, 6))]
            expected = 1.0 - len(set(a) & set(b)) / len(set(a) | set(b))
            self.assertAlmostEqual(jaccard_distance(a, b), expected, places=12)

    def test_jaccard_on_words_is_case_insensitive(self):
        self.assertEqual(jaccard_distance(['A', 'man'], ['a', 'MAN']), 0.0)
        self.assertEqual(jaccard_distance(['dog'], ['cat']), 1.0)
        self.assertEqual(jaccard_distance([], []), 0.0)

    def test_meteor_identical(self):
        self.assertAlmostEqual(meteor_lite([1, 2, 3], [1, 2, 3]), 1.0 - 0.5 / 27, places=12)

    def test_meteor_swapped_pair(self):
        self.assertAlmostEqual(meteor_lite([1, 2], [2, 1]), 0.5, places=12)

    def test_meteor_no_overlap(self):
        self.assertEqual(meteor_lite([1, 2], [3, 4]), 0.0)

    def test_meteor_longer_candidate(self):
        expected = (0.5 / 0.55) * (1.0 - 0.0625)
        self.assertAlmostEqual(meteor_lite([1, 2, 3, 4], [1, 2]), expected, places=12)


class DatasetMetricTests(SimpleTestCase):
    def setUp(self):
        self.examples = random_examples(9, V, seed=4)

    def test_label_accuracy_against_fixed_judge(self):
        accuracy = dataset_label_accuracy(self.examples, FixedJudge(1))
        labels = [e.label for e in self.examples]
        self.assertAlmostEqual(accuracy.overall, labels.count(1) / len(labels))
        if labels.count(1):
            self.assertEqual(accuracy.per_label['contradiction'], 1.0)
        self.assertEqual(sum(accuracy.counts.values()), 9)

    def test_label_accuracy_of_empty_set(self):
        with self.assertRaises(InsufficientDataError):
            dataset_label_accuracy([], FixedJudge(0))

    def test_overlap_counts_exact_copies(self):
        copy = self.examples[0]
        changed = Example(premise=copy.premise, hypothesis=pad([2], HYPOTHESIS_LEN), label=(copy.label + 1) % 3)
        self.assertEqual(dataset_overlap([copy, changed], self.examples), 0.5)

    def test_mean_hypothesis_length(self):
        expected = np.mean([len(e.hypothesis_ids()) for e in self.examples])
        self.assertAlmostEqual(mean_hypothesis_length(self.examples), expected)

    def test_report_skips_missing_models(self):
        report = dataset_report('tiny', dataset_of(self.examples))
        self.assertEqual(report.size, 9)
        self.assertIsNotNone(report.jaccard)
        self.assertIsNone(report.accuracy)
        self.assertIsNone(report.nll)

    def test_report_with_references_and_judge(self):
        report = dataset_report('tiny', dataset_of(self.examples), judge=FixedJudge(0), references=self.examples)
        self.assertEqual(report.rouge_l, 1.0)
        self.assertEqual(report.overlap, 1.0)
        self.assertIn('"name": "tiny"', report.to_json())


class UniformNllTests(SimpleTestCase):
    def test_zero_output_layer_gives_log_vocab(self):
        vocab = small_vocab(['a', 'man', 'dog', 'is', 'sleeping', 'park', '.'])
        self.assertEqual(len(vocab), 9)
        model = GeneratorModel(ENCDEC, small_embeddings(9, 3), hidden_dim=3, latent_dim=2, seed=0,
                               **model_kwargs(vocab))
        for name in model.store:
            if name.startswith('decoder.hsm.'):
                model.store.param(name)[...] = 0.0
        nll = mean_token_nll(model, random_examples(6, 9, seed=2))
        self.assertAlmostEqual(nll, math.log(9), places=10)


class DiscriminatorErrorTests(SimpleTestCase):
    def setUp(self):
        self.disc = DiscriminatorModel(small_embeddings(V, 3), hidden_dim=3, seed=1, **model_kwargs())
        self.examples = random_examples(6, V, seed=5)

    def test_copied_set_is_all_errors(self):
        self.assertEqual(discriminator_error_rate(self.disc, self.examples, list(self.examples)), 1.0)

    def test_rate_is_a_fraction(self):
        rate = discriminator_error_rate(self.disc, self.examples, random_examples(6, V, seed=6))
        self.assertTrue(0.0 <= rate <= 1.0)
        self.assertAlmostEqual(rate * 6, round(rate * 6))

    def test_size_mismatch(self):
        with self.assertRaises(ShapeError):
            discriminator_error_rate(self.disc, self.examples, self.examples[:5])


class RenderTableTests(SimpleTestCase):
    def test_missing_values_render_as_dash(self):
        rows = [MetricReport(name='original', size=3, accuracy=0.5).to_dict(),
                MetricReport(name='generated', size=2).to_dict()]
        table = render_table(rows, ['name', 'size', 'accuracy'])
        lines = table.splitlines()
        self.assertEqual(len(lines), 3)
        self.assertIn('0.5000', lines[1])
        self.assertTrue(lines[2].rstrip().endswith('-'))

    def test_empty_rows(self):
        self.assertEqual(render_table([]), '')
