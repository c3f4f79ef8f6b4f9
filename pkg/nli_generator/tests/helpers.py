"""
Shared fixtures: small random models, a tiny corpus and a gradient-check assertion.
"""
import json
from pathlib import Path
from typing import Callable, Iterable, List, Optional

import numpy as np

from nli_generator.data import NULL_ID, NULL_TOKEN, OOV_TOKEN, Dataset, EmbeddingMatrix, Example, Vocab, pad
from nli_generator.numerics import ParamStore, finite_diff_grad

PREMISE_LEN = 5
HYPOTHESIS_LEN = 4

WORDS = ['a', 'man', 'dog', 'is', 'sleeping', 'running', 'park', '.']


def small_vocab(words: Optional[List[str]] = None) -> Vocab:
    return Vocab([NULL_TOKEN, OOV_TOKEN] + list(words or WORDS))


def small_embeddings(vocab_size: int, dim: int = 4, seed: int = 0) -> EmbeddingMatrix:
    vectors = np.random.default_rng(seed).normal(0.0, 0.5, size=(vocab_size, dim))
    vectors[NULL_ID] = 0.0
    return EmbeddingMatrix(vectors=vectors)


def random_examples(count: int, vocab_size: int, seed: int = 0, premise_len: int = PREMISE_LEN,
                    hypothesis_len: int = HYPOTHESIS_LEN) -> List[Example]:
    """Examples with random lengths (at least one token) over word ids 2..V-1."""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(count):
        p = rng.integers(2, vocab_size, size=rng.integers(1, premise_len + 1))
        h = rng.integers(2, vocab_size, size=rng.integers(1, hypothesis_len + 1))
        examples.append(Example(premise=pad(p, premise_len), hypothesis=pad(h, hypothesis_len),
                                label=int(rng.integers(3))))
    return examples


def model_kwargs(vocab: Optional[Vocab] = None) -> dict:
    vocab = vocab or small_vocab()
    return {
        'premise_len': PREMISE_LEN,
        'hypothesis_len': HYPOTHESIS_LEN,
        'vocab_hash': vocab.hash,
        'vocab_tokens': vocab.tokens,
    }


def dataset_of(examples: Iterable[Example], vocab: Optional[Vocab] = None, name: str = 'tiny') -> Dataset:
    vocab = vocab or small_vocab()
    return Dataset(examples=list(examples), vocab_hash=vocab.hash, name=name)


TINY_CORPUS = [
    {'gold_label': 'entailment', 'sentence1': 'A man is sleeping in the park.', 'sentence2': 'A man is sleeping.'},
    {'gold_label': 'contradiction', 'sentence1': 'A dog is running.', 'sentence2': 'A dog is sleeping.'},
    {'gold_label': '-', 'sentence1': 'A man is running.', 'sentence2': 'Someone moves.'},
    {'gold_label': 'neutral', 'sentence1': 'A man is running.', 'sentence2': 'A man is running in the park.'},
    {'gold_label': 'entailment', 'sentence1': 'A dog is running in the park.', 'sentence2': 'A dog is running.'},
]


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.write_text(''.join(json.dumps(record) + '\n' for record in records), encoding='utf-8')
    return path


class GradientCheckMixin:
    """assertGradientsMatch compares analytic gradients with central differences."""

    grad_rtol = 1e-4
    grad_atol = 1e-7

    def assertGradientsMatch(self, loss_fn: Callable[[], float], store: ParamStore, analytic: dict,
                             names: Optional[Iterable[str]] = None, h: float = 1e-4):
        for name in (names if names is not None else store.names()):
            numeric = finite_diff_grad(loss_fn, store, name, h)
            got = analytic[name]
            tolerance = self.grad_rtol * np.maximum(np.abs(got), np.abs(numeric)) + self.grad_atol
            worst = float(np.max(np.abs(got - numeric) - tolerance))
            self.assertLessEqual(worst, 0.0, f"gradient of '{name}' differs from finite differences")
