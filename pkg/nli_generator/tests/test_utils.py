import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from nli_generator.utils import atomic_write_text, derive_rng, fnv1a_32, fnv1a_64, parallel_map


class HashTests(SimpleTestCase):
    def test_fnv_reference_values(self):
        self.assertEqual(fnv1a_64(b''), 'cbf29ce484222325')
        self.assertEqual(fnv1a_64(b'a'), 'af63dc4c8601ec8c')
        self.assertEqual(fnv1a_32(''), 0x811c9dc5)
        self.assertEqual(fnv1a_32('a'), 0xe40c292c)


class DeriveRngTests(SimpleTestCase):
    def test_same_name_same_stream(self):
        np.testing.assert_array_equal(derive_rng(7, 'shuffle', 2).random(4), derive_rng(7, 'shuffle', 2).random(4))

    def test_streams_are_independent(self):
        base = derive_rng(7, 'shuffle', 2).random(4)
        for other in (derive_rng(8, 'shuffle', 2), derive_rng(7, 'epsilon', 2), derive_rng(7, 'shuffle', 3)):
            self.assertFalse(np.array_equal(base, other.random(4)))


class ParallelMapTests(SimpleTestCase):
    def test_order_preserved(self):
        items = list(range(20))
        self.assertEqual(parallel_map(lambda x: x * x, items, workers=4), [x * x for x in items])
        self.assertEqual(parallel_map(lambda x: x + 1, items, workers=1), [x + 1 for x in items])


class AtomicWriteTests(SimpleTestCase):
    def test_creates_parents_and_leaves_no_temp_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'nested' / 'out.txt'
            atomic_write_text(path, 'one')
            atomic_write_text(path, 'two')
            self.assertEqual(path.read_text(), 'two')
            self.assertEqual(sorted(p.name for p in path.parent.iterdir()), ['out.txt'])
