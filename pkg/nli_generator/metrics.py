"""
Dataset and generation quality measures, and their JSON / table rendering.

Sentence-pair metrics accept token strings or ids and ignore <null> padding.
"""
import json
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np
import pandas as pd

from .data import LABELS, NULL_ID, NULL_TOKEN, Dataset, Example
from .exceptions import InsufficientDataError, ShapeError
from .models import ENCDEC, VAE_ENCDEC, ClassifierModel, DiscriminatorModel, GeneratorModel
from .utils import derive_rng

logger = logging.getLogger(__name__)

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

Token = Union[int, str]


@attrs.define
class LabelAccuracy:
    overall: float
    per_label: Dict[str, float]
    counts: Dict[str, int]


@attrs.define
class MetricReport:
    """Quality measures of one dataset; fields left as None were not computed."""
    name: str
    size: int = 0
    accuracy: Optional[float] = None
    per_label_accuracy: Dict[str, float] = attrs.field(factory=dict)
    jaccard: Optional[float] = None
    rouge_l: Optional[float] = None
    meteor: Optional[float] = None
    nll: Optional[float] = None
    disc_error_rate: Optional[float] = None
    mean_hypothesis_length: Optional[float] = None
    overlap: Optional[float] = None
    extra: Dict = attrs.field(factory=dict)

    def to_dict(self) -> Dict:
        return attrs.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _strip(tokens: Sequence[Token]) -> List[Token]:
    return [token for token in tokens if token != NULL_ID and token != NULL_TOKEN]


def _as_list(tokens) -> List[Token]:
    return [int(t) if isinstance(t, (np.integer,)) else t for t in tokens]


def dataset_label_accuracy(dataset: Sequence[Example], judge: ClassifierModel,
                           batch_size: int = 256) -> LabelAccuracy:
    """
    Fraction of examples whose label equals the judge's argmax, overall and per label.

    Raises:
        InsufficientDataError: on an empty dataset
    """
    examples = list(dataset)
    if not examples:
        raise InsufficientDataError("Cannot measure label accuracy of an empty dataset")
    predicted = np.argmax(judge.predict_proba(examples, batch_size), axis=1)
    labels = np.array([example.label for example in examples])
    hits = predicted == labels
    per_label, counts = {}, {}
    for index, name in enumerate(LABELS):
        selected = labels == index
        counts[name] = int(selected.sum())
        if counts[name]:
            per_label[name] = float(hits[selected].mean())
    return LabelAccuracy(overall=float(hits.mean()), per_label=per_label, counts=counts)


def jaccard_distance(premise_tokens: Sequence[Token], hypothesis_tokens: Sequence[Token]) -> float:
    """``1 - |A & B| / |A | B|`` over token sets; 0 when both are empty."""
    a = {t.lower() if isinstance(t, str) else int(t) for t in _strip(premise_tokens)}
    b = {t.lower() if isinstance(t, str) else int(t) for t in _strip(hypothesis_tokens)}
    union = a | b
    if not union:
        return 0.0
    return 1.0 - len(a & b) / len(union)


def lcs_length(a: Sequence[Token], b: Sequence[Token]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b):
            current.append(previous[j] + 1 if x == y else max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Sequence[Token], reference: Sequence[Token]) -> float:
    """LCS F-measure with beta = 1."""
    candidate, reference = _as_list(_strip(candidate)), _as_list(_strip(reference))
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2 * precision * recall / (precision + recall)


def _exact_alignment(candidate: Sequence[Token], reference: Sequence[Token]) -> List[Tuple[int, int]]:
    used = set()
    pairs = []
    for i, token in enumerate(candidate):
        for j, ref_token in enumerate(reference):
            if j not in used and ref_token == token:
                used.add(j)
                pairs.append((i, j))
                break
    return pairs


def meteor_lite(candidate: Sequence[Token], reference: Sequence[Token]) -> float:
    """
    METEOR with exact unigram matching only.

    ``F_mean = P*R / (alpha*P + (1-alpha)*R)``, ``penalty = gamma * (chunks/matches)^beta``,
    score ``F_mean * (1 - penalty)``.
    """
    candidate, reference = _as_list(_strip(candidate)), _as_list(_strip(reference))
    pairs = _exact_alignment(candidate, reference)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = precision * recall / (METEOR_ALPHA * precision + (1.0 - METEOR_ALPHA) * recall)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_BETA
    return f_mean * (1.0 - penalty)


def _pair_mean(metric, pairs: Sequence[Tuple[Sequence[Token], Sequence[Token]]]) -> float:
    if not pairs:
        return 0.0
    return float(np.mean([metric(a, b) for a, b in pairs]))


def mean_jaccard(dataset: Sequence[Example]) -> float:
    return _pair_mean(jaccard_distance, [(e.premise, e.hypothesis) for e in dataset])


def mean_rouge_l(generated: Sequence[Example], references: Sequence[Example]) -> float:
    return _pair_mean(rouge_l, [(g.hypothesis, r.hypothesis) for g, r in zip(generated, references)])


def mean_meteor(generated: Sequence[Example], references: Sequence[Example]) -> float:
    return _pair_mean(meteor_lite, [(g.hypothesis, r.hypothesis) for g, r in zip(generated, references)])


def _latents_for(model: GeneratorModel, examples: Sequence[Example], seed: int, offset: int) -> np.ndarray:
    if model.kind == ENCDEC:
        return model.encode_batch(examples)
    if model.kind == VAE_ENCDEC:
        return model.vae_heads(examples)[0]
    if model.latent_sigma is None:
        model.compute_latent_sigma()
    return np.stack([
        derive_rng(seed, 'nll', offset + i).standard_normal(model.latent_dim) * model.latent_sigma
        for i in range(len(examples))
    ])


def mean_token_nll(model: GeneratorModel, dataset: Sequence[Example], seed: int = 7,
                   batch_size: int = 256) -> float:
    """
    Mean over examples of the per-token negative log-likelihood of the gold hypothesis
    (terminal <null> included).

    Embed kinds sample Z per example from N(0, sigma) under ``seed``; encdec uses its encoder
    output and vae-encdec the posterior mean.
    """
    examples = list(dataset)
    if not examples:
        return 0.0
    per_example = []
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        Z = _latents_for(model, batch, seed, start)
        nll, tokens = model.decoder_nll(batch, Z)
        per_example.extend(nll / tokens)
    return float(np.mean(per_example))


def _hypothesis_array(items) -> np.ndarray:
    return np.array([item.hypothesis if isinstance(item, Example) else tuple(item) for item in items],
                    dtype=np.int64)


def discriminator_error_rate(disc: DiscriminatorModel, original_set, generated_set, seed: int = 7) -> float:
    """
    Fraction of (original, generated) pairs with ``D(original) <= D(generated)``; ties are errors.

    Pair i joins the i-th original with the i-th generated hypothesis after a seeded shuffle
    applied to both sets.

    Raises:
        ShapeError: if the sets differ in size
    """
    if len(original_set) != len(generated_set):
        raise ShapeError(f"Paired sets differ in size: {len(original_set)} vs {len(generated_set)}")
    if len(original_set) == 0:
        raise InsufficientDataError("No pairs to score")
    order = derive_rng(seed, 'disc.pairs').permutation(len(original_set))
    originals = _hypothesis_array(original_set)[order]
    generated = _hypothesis_array(generated_set)[order]
    d_orig = disc.scores(originals)
    d_gen = disc.scores(generated)
    return float(np.mean(d_orig <= d_gen))


def dataset_overlap(generated: Sequence[Example], original: Sequence[Example]) -> float:
    """Fraction of generated examples identical (premise, hypothesis, label) to an original one."""
    if not generated:
        return 0.0
    keys = {example.key() for example in original}
    return float(np.mean([example.key() in keys for example in generated]))


def mean_hypothesis_length(dataset: Sequence[Example]) -> float:
    if not dataset:
        return 0.0
    return float(np.mean([len(example.hypothesis_ids()) for example in dataset]))


def dataset_report(name: str, dataset: Dataset, judge: Optional[ClassifierModel] = None,
                   references: Optional[Sequence[Example]] = None,
                   generator: Optional[GeneratorModel] = None, seed: int = 7) -> MetricReport:
    """
    Everything measurable about one dataset given the available models.

    ``references`` are the source examples aligned with ``dataset`` (for ROUGE-L, METEOR and
    overlap); ``generator`` enables the NLL column.
    """
    examples = list(dataset)
    report = MetricReport(name=name, size=len(examples))
    if not examples:
        return report
    report.jaccard = mean_jaccard(examples)
    report.mean_hypothesis_length = mean_hypothesis_length(examples)
    if judge is not None:
        accuracy = dataset_label_accuracy(examples, judge)
        report.accuracy = accuracy.overall
        report.per_label_accuracy = accuracy.per_label
    if references is not None:
        references = list(references)
        aligned = [references[e.origin_index if e.origin_index is not None else i % len(references)]
                   for i, e in enumerate(examples)]
        report.rouge_l = mean_rouge_l(examples, aligned)
        report.meteor = mean_meteor(examples, aligned)
        report.overlap = dataset_overlap(examples, references)
    if generator is not None:
        report.nll = mean_token_nll(generator, examples, seed)
    return report


def reports_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows))


def render_table(rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> str:
    """Aligned text table of report rows; missing values render as '-'."""
    frame = reports_frame(rows)
    if frame.empty:
        return ''
    if columns is not None:
        frame = frame[[column for column in columns if column in frame.columns]]
    return frame.to_string(index=False, na_rep='-', float_format=lambda value: f"{value:.4f}")
