"""
Corpus ingestion: tokenization, vocabulary, padding, SNLI-format JSONL and pretrained
embeddings.
"""
import json
import logging
import re
import traceback
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np

from .exceptions import CorpusFormatError, EmbeddingFormatError, ShapeError, VocabMismatchError
from .serializers import LABEL_CHOICES, UNLABELED, CorpusRecordSerializer
from .utils import atomic_write_text, derive_rng, fnv1a_64

logger = logging.getLogger(__name__)

LABELS: Tuple[str, ...] = LABEL_CHOICES
LABEL_INDEX: Dict[str, int] = {label: i for i, label in enumerate(LABELS)}

NULL_TOKEN = '<null>'
OOV_TOKEN = '<oov>'
NULL_ID = 0
OOV_ID = 1

PREMISE_LEN = 25
HYPOTHESIS_LEN = 15
EMBEDDING_DIM = 50

_PUNCTUATION = re.compile(r'([.,!?;:"()])')

PathLike = Union[str, Path]


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, and split off ``. , ! ? ; : " ( )`` as separate tokens."""
    return _PUNCTUATION.sub(r' \1 ', text.lower()).split()


def pad(ids: Sequence[int], length: int) -> Tuple[int, ...]:
    if len(ids) > length:
        raise ShapeError(f"Sequence of length {len(ids)} exceeds padded length {length}")
    return tuple(int(i) for i in ids) + (NULL_ID,) * (length - len(ids))


def strip_padding(ids: Sequence[int]) -> Tuple[int, ...]:
    ids = tuple(int(i) for i in ids)
    end = len(ids)
    while end > 0 and ids[end - 1] == NULL_ID:
        end -= 1
    return ids[:end]


@attrs.define(frozen=True)
class Example:
    premise: Tuple[int, ...]
    hypothesis: Tuple[int, ...]
    label: int
    origin_index: Optional[int] = None
    gen_logprob: Optional[float] = None
    judge_prob: Optional[float] = None

    @property
    def label_name(self) -> str:
        return LABELS[self.label]

    def premise_ids(self) -> Tuple[int, ...]:
        return strip_padding(self.premise)

    def hypothesis_ids(self) -> Tuple[int, ...]:
        return strip_padding(self.hypothesis)

    def key(self) -> Tuple[Tuple[int, ...], Tuple[int, ...], int]:
        return self.premise_ids(), self.hypothesis_ids(), self.label


@attrs.define
class RawExample:
    premise: List[str]
    hypothesis: List[str]
    label: int
    line_number: int
    extras: Dict = attrs.field(factory=dict)


class Vocab:
    """Token list where the index is the id; ids 0 and 1 are reserved for <null> and <oov>."""

    def __init__(self, tokens: Sequence[str], counts: Optional[Dict[str, int]] = None):
        tokens = list(tokens)
        if tokens[:2] != [NULL_TOKEN, OOV_TOKEN]:
            raise CorpusFormatError(f"Vocabulary must start with {NULL_TOKEN}, {OOV_TOKEN}")
        if len(set(tokens)) != len(tokens):
            raise CorpusFormatError("Vocabulary tokens must be unique")
        self.tokens: List[str] = tokens
        self.counts: Dict[str, int] = dict(counts or {})
        self.index: Dict[str, int] = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, OOV_ID)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.id_of(token) for token in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[int(i)] for i in strip_padding(ids)]

    def to_text(self) -> str:
        return '\n'.join(self.tokens) + '\n'

    @property
    def hash(self) -> str:
        return vocab_hash(self)


def vocab_hash(vocab: Vocab) -> str:
    """FNV-1a 64 over the bytes of the vocabulary file."""
    return fnv1a_64(vocab.to_text().encode('utf-8'))


def _sentences(item) -> Iterable[Sequence[str]]:
    if isinstance(item, RawExample):
        return (item.premise, item.hypothesis)
    return (item,)


def build_vocab(examples: Iterable, min_count: int = 1) -> Vocab:
    """
    Frequency-sorted vocabulary (ties broken lexicographically) with <null>, <oov> prepended.

    ``examples`` holds ``RawExample`` objects or plain token lists. Tokens seen fewer than
    ``min_count`` times are left out and map to <oov>.
    """
    counts: Counter = Counter()
    for item in examples:
        for sentence in _sentences(item):
            counts.update(sentence)
    for reserved in (NULL_TOKEN, OOV_TOKEN):
        counts.pop(reserved, None)
    kept = sorted((token for token, count in counts.items() if count >= min_count),
                  key=lambda token: (-counts[token], token))
    return Vocab([NULL_TOKEN, OOV_TOKEN] + kept, {token: counts[token] for token in kept})


def save_vocab(vocab: Vocab, path: PathLike) -> None:
    atomic_write_text(path, vocab.to_text())


def load_vocab(path: PathLike) -> Vocab:
    with open(path, encoding='utf-8') as handle:
        tokens = handle.read().split('\n')
    if tokens and tokens[-1] == '':
        tokens.pop()
    return Vocab(tokens)


@attrs.define
class Dataset:
    examples: List[Example]
    vocab_hash: str
    name: str = ''

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, index):
        return self.examples[index]

    def label_counts(self) -> Dict[str, int]:
        counts = Counter(example.label for example in self.examples)
        return {label: counts.get(i, 0) for i, label in enumerate(LABELS)}

    def with_examples(self, examples: List[Example], name: Optional[str] = None) -> 'Dataset':
        return attrs.evolve(self, examples=list(examples), name=self.name if name is None else name)


@attrs.define
class CorpusStats:
    total: int = 0
    unlabeled: int = 0
    too_long: int = 0
    kept: int = 0

    @property
    def retention(self) -> float:
        """Kept fraction of the examples that carry a gold label."""
        labeled = self.total - self.unlabeled
        return self.kept / labeled if labeled else 0.0


@attrs.define
class CorpusLoad:
    dataset: Dataset
    stats: CorpusStats
    vocab: Vocab


def read_corpus(path: PathLike) -> Tuple[List[RawExample], CorpusStats]:
    """
    Parse an SNLI-format JSONL file into tokenized examples, dropping '-' labels.

    Raises:
        CorpusFormatError: on malformed JSON or an unknown label (with the line number)
    """
    stats = CorpusStats()
    raw: List[RawExample] = []
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                logger.error(f"Malformed JSON in {path} at line {line_number}: {str(e)}")
                raise CorpusFormatError(f"malformed JSON: {str(e)}", line_number) from e
            serializer = CorpusRecordSerializer(data=record)
            if not serializer.is_valid():
                logger.error(f"Invalid record in {path} at line {line_number}: {serializer.errors}")
                raise CorpusFormatError(f"invalid record: {dict(serializer.errors)}", line_number)
            data = serializer.validated_data
            stats.total += 1
            if data['gold_label'] == UNLABELED:
                stats.unlabeled += 1
                continue
            extras = {key: data[key] for key in ('origin_index', 'gen_logprob', 'judge_prob') if key in data}
            raw.append(RawExample(
                premise=tokenize(data['sentence1']),
                hypothesis=tokenize(data['sentence2']),
                label=LABEL_INDEX[data['gold_label']],
                line_number=line_number,
                extras=extras,
            ))
    return raw, stats


def load_corpus(path: PathLike, vocab: Optional[Vocab] = None, premise_len: int = PREMISE_LEN,
                hypothesis_len: int = HYPOTHESIS_LEN, name: Optional[str] = None) -> CorpusLoad:
    """
    Load an SNLI-format JSONL corpus into padded examples.

    Examples labelled '-' and examples whose premise exceeds ``premise_len`` tokens or whose
    hypothesis exceeds ``hypothesis_len`` tokens are dropped; both sentences are padded with
    <null>. Without a ``vocab`` one is built from the retained examples.

    Returns:
        CorpusLoad: the dataset, retention statistics and the vocabulary used
    """
    try:
        raw, stats = read_corpus(path)
    except CorpusFormatError:
        raise
    except Exception as e:
        logger.error(f"Error reading corpus {path}: {str(e)}")
        logger.error(traceback.format_exc())
        raise CorpusFormatError(f"cannot read corpus {path}: {str(e)}") from e

    retained = [item for item in raw
                if len(item.premise) <= premise_len and len(item.hypothesis) <= hypothesis_len]
    stats.too_long = len(raw) - len(retained)
    stats.kept = len(retained)
    if vocab is None:
        vocab = build_vocab(retained)

    examples = [
        Example(
            premise=pad(vocab.encode(item.premise), premise_len),
            hypothesis=pad(vocab.encode(item.hypothesis), hypothesis_len),
            label=item.label,
            **item.extras,
        )
        for item in retained
    ]
    logger.info(
        f"Loaded {path}: {stats.total} lines, {stats.unlabeled} unlabeled, "
        f"{stats.too_long} too long, kept {stats.kept} ({stats.retention * 100:.2f}% of labeled)"
    )
    dataset = Dataset(examples=examples, vocab_hash=vocab.hash, name=name or Path(path).stem)
    return CorpusLoad(dataset=dataset, stats=stats, vocab=vocab)


def load_dataset(path: PathLike, vocab: Vocab, premise_len: int = PREMISE_LEN,
                 hypothesis_len: int = HYPOTHESIS_LEN) -> Dataset:
    return load_corpus(path, vocab, premise_len, hypothesis_len).dataset


def example_record(example: Example, vocab: Vocab) -> Dict:
    record = {
        'gold_label': example.label_name,
        'sentence1': ' '.join(vocab.decode(example.premise)),
        'sentence2': ' '.join(vocab.decode(example.hypothesis)),
    }
    if example.origin_index is not None:
        record['origin_index'] = example.origin_index
    if example.gen_logprob is not None:
        record['gen_logprob'] = example.gen_logprob
    if example.judge_prob is not None:
        record['judge_prob'] = example.judge_prob
    return record


def save_dataset(dataset: Dataset, vocab: Vocab, path: PathLike) -> None:
    """Write a dataset as SNLI-format JSONL (plus generation fields when present)."""
    if dataset.vocab_hash != vocab.hash:
        raise VocabMismatchError(dataset.vocab_hash, vocab.hash)
    lines = [json.dumps(example_record(example, vocab), ensure_ascii=False) for example in dataset]
    atomic_write_text(path, ''.join(line + '\n' for line in lines))
    logger.info(f"Wrote {len(dataset)} examples to {path}")


def batch_arrays(examples: Sequence[Example]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack examples into (premises (B, M), hypotheses (B, N), labels (B,)) integer arrays."""
    premises = np.array([example.premise for example in examples], dtype=np.int64)
    hypotheses = np.array([example.hypothesis for example in examples], dtype=np.int64)
    labels = np.array([example.label for example in examples], dtype=np.int64)
    return premises, hypotheses, labels


@attrs.define
class EmbeddingMatrix:
    vectors: np.ndarray
    frozen: bool = True

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        return self.vectors[np.asarray(ids, dtype=np.int64)]


def random_embeddings(vocab: Vocab, seed: int, dim: int = EMBEDDING_DIM,
                      std: float = 0.1) -> EmbeddingMatrix:
    """Every row drawn from N(0, std) with row 0 (<null>) set to zeros."""
    vectors = derive_rng(seed, 'embeddings').normal(0.0, std, size=(len(vocab), dim))
    vectors[NULL_ID] = 0.0
    return EmbeddingMatrix(vectors=vectors)


def load_embeddings(path: PathLike, vocab: Vocab, seed: int, dim: int = EMBEDDING_DIM,
                    std: float = 0.1) -> EmbeddingMatrix:
    """
    Pretrained vectors for the vocabulary from a GloVe-style text file ("word v1 ... v50").

    Words missing from the file get draws from N(0, std) under ``seed``; <null> is all zeros.

    Raises:
        EmbeddingFormatError: if a line carries a vector of the wrong length
    """
    matrix = random_embeddings(vocab, seed, dim, std)
    found = 0
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            parts = line.split()
            if not parts or not parts[0]:
                continue
            word = parts[0]
            if len(parts) - 1 != dim:
                raise EmbeddingFormatError(
                    f"Vector for '{word}' has {len(parts) - 1} values, expected {dim}", word=word)
            if word in vocab.index and vocab.index[word] != NULL_ID:
                matrix.vectors[vocab.index[word]] = np.array(parts[1:], dtype=np.float64)
                found += 1
    logger.info(f"Embeddings: {found} of {len(vocab) - 2} vocabulary words found in {path}")
    return matrix
