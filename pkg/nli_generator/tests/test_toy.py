import json
import tempfile
from collections import Counter
from pathlib import Path

from django.test import SimpleTestCase

from nli_generator.data import load_corpus, tokenize
from nli_generator.toy import SLOTS, build_toy_corpus, write_toy_splits


def slot_values(sentence):
    words = set(tokenize(sentence))
    return {slot: value for slot, values in SLOTS.items() for value in values if value in words}


class ToyCorpusTests(SimpleTestCase):
    def test_labels_follow_the_slot_rules(self):
        for record in build_toy_corpus(300, seed=1):
            premise = slot_values(record['sentence1'])
            hypothesis = slot_values(record['sentence2'])
            self.assertEqual(len(premise), 2)
            self.assertEqual(len(hypothesis), 1)
            (slot, value), = hypothesis.items()
            if record['gold_label'] == 'neutral':
                self.assertNotIn(slot, premise)
            elif record['gold_label'] == 'entailment':
                self.assertEqual(premise[slot], value)
            else:
                self.assertNotEqual(premise[slot], value)

    def test_all_labels_drawn(self):
        counts = Counter(record['gold_label'] for record in build_toy_corpus(600, seed=2))
        self.assertEqual(set(counts), {'entailment', 'contradiction', 'neutral'})
        self.assertTrue(all(count > 150 for count in counts.values()))

    def test_seeded(self):
        self.assertEqual(build_toy_corpus(20, seed=3), build_toy_corpus(20, seed=3))
        self.assertNotEqual(build_toy_corpus(20, seed=3), build_toy_corpus(20, seed=4))

    def test_splits_load_without_losses(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = write_toy_splits(tmp, seed=5, size=100)
            sizes = {split: len(Path(path).read_text().splitlines()) for split, path in paths.items()}
            self.assertEqual(sizes, {'train': 80, 'dev': 10, 'test': 10})
            loaded = load_corpus(paths['train'], premise_len=12, hypothesis_len=10)
            self.assertEqual(loaded.stats.kept, 80)
            self.assertEqual(loaded.stats.retention, 1.0)
            first = json.loads(Path(paths['dev']).read_text().splitlines()[0])
            self.assertEqual(set(first), {'gold_label', 'sentence1', 'sentence2'})
