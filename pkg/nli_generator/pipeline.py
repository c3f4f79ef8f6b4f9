"""
End-to-end experiment orchestration: train the judge classifier and a generator, regenerate
the training and development sets, filter them by judge probability, balance and trim, retrain
classifiers on the results and compare everything on the original test split.

A run lives in one directory::

    config.json          fully resolved configuration
    vocab.txt
    checkpoints/*.nlig
    datasets/*.jsonl
    reports/*.json       (plus reports/table.txt)
    log.txt

Stages reuse artifacts that already exist in the directory, so an interrupted run resumes
where it stopped and produces the same downstream numbers.
"""
import contextlib
import json
import logging
import math
import time
import traceback
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import attrs
import numpy as np
from django.conf import settings

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    LABELS,
    Dataset,
    EmbeddingMatrix,
    Example,
    Vocab,
    load_corpus,
    load_dataset,
    load_embeddings,
    load_vocab,
    random_embeddings,
    save_dataset,
    save_vocab,
)
from .exceptions import ConfigError, InsufficientDataError, NumericalError, PipelineStageError, VocabMismatchError
from .generation import generate_examples, generation_config_for
from .metrics import (
    dataset_label_accuracy,
    dataset_overlap,
    discriminator_error_rate,
    mean_hypothesis_length,
    mean_jaccard,
    mean_meteor,
    mean_rouge_l,
    mean_token_nll,
    render_table,
)
from .models import (
    ATT_EMBED,
    EMBED_KINDS,
    ClassifierModel,
    DiscriminatorModel,
    GeneratorModel,
    NetworkModel,
)
from .numerics import AdamConfig, adam_step, clip_gradients
from .serializers import RunConfigSerializer
from .utils import atomic_write_text, derive_rng, file_hash

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TABLE_COLUMNS = ('kind', 'z', 'threshold', 'train_size', 'acc_test', 'loss_test', 'acc_gen_dev',
                 'acc_data', 'nll', 'disc_er')


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@attrs.define
class TrainConfig:
    hidden_dim: int = 150
    latent_dim: int = 8
    embedding_dim: int = 50
    batch_size: int = 64
    generator_epochs: int = 20
    classifier_max_epochs: int = 100
    discriminator_epochs: int = 5
    patience: int = 3
    learning_rate: float = 0.001
    clip_norm: float = 5.0
    latent_init_std: float = 0.05
    seed: int = 7

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(learning_rate=self.learning_rate)


@attrs.define
class FilterConfig:
    thresholds: List[float] = attrs.Factory(lambda: [0.0, 0.3, 0.6, 0.9])
    merge_threshold: float = 0.6
    judge: Optional[str] = None
    strict_size: bool = True


@attrs.define
class GenerationSettings:
    beam_size: int = 1
    max_len: int = 15
    oversample: float = 3.0
    scalar_sigma: bool = False
    workers: int = 1
    seed: int = 7


@attrs.define
class RunConfig:
    kind: str = ATT_EMBED
    train: TrainConfig = attrs.Factory(TrainConfig)
    filter: FilterConfig = attrs.Factory(FilterConfig)
    generation: GenerationSettings = attrs.Factory(GenerationSettings)
    premise_len: int = 25
    hypothesis_len: int = 15
    unknown_embedding_std: float = 0.1
    embeddings: Optional[str] = None
    checkpoint_dtype: str = 'f64'
    latent_dims: List[int] = attrs.Factory(lambda: [2, 4, 8, 16, 32])

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> Dict:
        return attrs.asdict(self)


def _deep_merge(base: Dict, override: Dict) -> Dict:
    merged = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_run_config(file_values: Optional[Dict] = None, overrides: Optional[Dict] = None) -> RunConfig:
    """
    Settings defaults, then ``file_values`` (a ``--config`` file), then ``overrides`` (flags).

    ``None`` values in ``overrides`` mean "not given" and are skipped.

    Raises:
        ConfigError: with the serializer's field errors when a value is invalid
    """
    values = _deep_merge({'train': {}, 'filter': {}, 'generation': {}}, file_values or {})
    values = _deep_merge(values, overrides or {})
    serializer = RunConfigSerializer(data=values)
    if not serializer.is_valid():
        raise ConfigError("Invalid run configuration", errors=json.loads(json.dumps(serializer.errors)))
    data = dict(serializer.validated_data)
    return RunConfig(
        kind=data['kind'],
        train=TrainConfig(**dict(data['train'])),
        filter=FilterConfig(**dict(data['filter'])),
        generation=GenerationSettings(**dict(data['generation'])),
        premise_len=data['premise_len'],
        hypothesis_len=data['hypothesis_len'],
        unknown_embedding_std=data['unknown_embedding_std'],
        embeddings=data.get('embeddings') or None,
        checkpoint_dtype=data['checkpoint_dtype'],
        latent_dims=list(data['latent_dims']),
    )


def load_config_file(path: PathLike) -> Dict:
    try:
        with open(path, encoding='utf-8') as handle:
            values = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config file {path}: {str(e)}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return values


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@attrs.define
class TrainingHistory:
    epochs: List[Dict] = attrs.Factory(list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> Dict:
        return attrs.asdict(self)


@attrs.define
class EarlyStopping:
    """Tracks the best dev loss; ``update`` returns True once ``patience`` epochs pass without improvement."""
    patience: int
    best_loss: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


def _require(examples: Sequence, what: str) -> None:
    if len(examples) == 0:
        raise InsufficientDataError(f"{what} is empty")


def _check_loss(loss: float, what: str, epoch: int) -> None:
    if not np.isfinite(loss):
        raise NumericalError(f"{what} loss diverged ({loss}) in epoch {epoch}")


def _optimizer_step(model: NetworkModel, cfg: TrainConfig, epoch: int) -> None:
    clip_gradients(model.store, cfg.clip_norm)
    try:
        adam_step(model.store, cfg.adam)
    except NumericalError as e:
        raise NumericalError(f"epoch {epoch}: {str(e)}", e.param_name) from e


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _vocab_kwargs(vocab: Vocab, examples: Sequence[Example]) -> Dict:
    return {
        'premise_len': len(examples[0].premise),
        'hypothesis_len': len(examples[0].hypothesis),
        'vocab_hash': vocab.hash,
        'vocab_tokens': vocab.tokens,
    }


def train_classifier(train_set: Sequence[Example], dev_set: Sequence[Example], cfg: TrainConfig,
                     embeddings: EmbeddingMatrix, vocab: Vocab) -> Tuple[ClassifierModel, TrainingHistory]:
    """
    Train with early stopping on dev loss; the returned model is the best-dev-loss snapshot.

    Raises:
        InsufficientDataError: if either set is empty
        NumericalError: if the loss diverges (names the epoch)
    """
    _require(train_set, "classifier training set")
    _require(dev_set, "classifier development set")
    train_set, dev_set = list(train_set), list(dev_set)
    model = ClassifierModel(embeddings, cfg.hidden_dim, cfg.seed, **_vocab_kwargs(vocab, train_set))
    history = TrainingHistory()
    stopper = EarlyStopping(cfg.patience)
    best = model.store.snapshot()

    for epoch in range(1, cfg.classifier_max_epochs + 1):
        started = time.monotonic()
        losses = []
        for rows in _batches(len(train_set), cfg.batch_size, derive_rng(cfg.seed, 'shuffle.classifier', epoch)):
            loss = model.batch_loss([train_set[i] for i in rows])
            _check_loss(loss, "classifier", epoch)
            losses.append(loss * len(rows))
            _optimizer_step(model, cfg, epoch)
        train_loss = float(np.sum(losses) / len(train_set))
        dev_loss, dev_accuracy = model.evaluate(dev_set)
        _check_loss(dev_loss, "classifier dev", epoch)
        history.epochs.append({'epoch': epoch, 'train_loss': train_loss, 'dev_loss': dev_loss,
                               'dev_accuracy': dev_accuracy})
        stop = stopper.update(epoch, dev_loss)
        if stopper.improved_last:
            best = model.store.snapshot()
        logger.info(f"classifier epoch {epoch}: train loss {train_loss:.4f}, dev loss {dev_loss:.4f}, "
                    f"dev acc {dev_accuracy:.4f} ({time.monotonic() - started:.1f}s)")
        if stop:
            history.stopped_early = True
            logger.info(f"Early stopping after epoch {epoch}; best epoch {stopper.best_epoch}")
            break

    model.store.restore(best)
    model.epochs_trained = stopper.best_epoch
    history.best_epoch = stopper.best_epoch
    return model, history


def train_generator(train_set: Sequence[Example], cfg: TrainConfig, kind: str, embeddings: EmbeddingMatrix,
                    vocab: Vocab) -> Tuple[GeneratorModel, TrainingHistory]:
    """
    Teacher-forced training for a fixed number of epochs; the last epoch's parameters are kept.

    Example ``i`` of ``train_set`` owns row ``i`` of the latent table (embed kinds). After training
    the latent sampling spread is recorded on the model.

    Raises:
        ConfigError: on an unknown kind or ``latent_dim < 1``
        NumericalError: if the loss diverges
    """
    if cfg.latent_dim < 1:
        raise ConfigError(f"latent_dim must be at least 1, got {cfg.latent_dim}")
    _require(train_set, "generator training set")
    train_set = list(train_set)
    model = GeneratorModel(kind, embeddings, cfg.hidden_dim, cfg.latent_dim, n_examples=len(train_set),
                           seed=cfg.seed, latent_init_std=cfg.latent_init_std,
                           **_vocab_kwargs(vocab, train_set))
    history = TrainingHistory()
    for epoch in range(1, cfg.generator_epochs + 1):
        started = time.monotonic()
        epsilon_rng = derive_rng(cfg.seed, 'vae.epsilon', epoch)
        total_loss, total_nll, total_tokens = 0.0, 0.0, 0.0
        for rows in _batches(len(train_set), cfg.batch_size, derive_rng(cfg.seed, f"shuffle.{kind}", epoch)):
            batch = [train_set[i] for i in rows]
            indices = rows if kind in EMBED_KINDS else None
            result = model.batch_loss(batch, indices, rng=epsilon_rng)
            _check_loss(result.loss, kind, epoch)
            total_loss += result.loss * len(rows)
            total_nll += float(result.nll.sum())
            total_tokens += float(result.tokens.sum())
            _optimizer_step(model, cfg, epoch)
        row = {'epoch': epoch, 'train_loss': total_loss / len(train_set), 'train_nll': total_nll / total_tokens}
        history.epochs.append(row)
        logger.info(f"{kind} epoch {epoch}: loss {row['train_loss']:.4f}, token nll {row['train_nll']:.4f} "
                    f"({time.monotonic() - started:.1f}s)")
    model.epochs_trained = cfg.generator_epochs
    history.best_epoch = cfg.generator_epochs
    model.compute_latent_sigma(train_set)
    return model, history


def train_discriminator(original: Sequence[Example], generated: Sequence[Example], cfg: TrainConfig,
                        embeddings: EmbeddingMatrix, vocab: Vocab) -> Tuple[DiscriminatorModel, TrainingHistory]:
    """
    Train on shuffled (original, generated) hypothesis pairs, one of each per pair.

    The two sets are shuffled independently every epoch and paired up to the shorter length.
    """
    _require(original, "discriminator original set")
    _require(generated, "discriminator generated set")
    original, generated = list(original), list(generated)
    model = DiscriminatorModel(embeddings, cfg.hidden_dim, cfg.seed, **_vocab_kwargs(vocab, original))
    originals = np.array([e.hypothesis for e in original], dtype=np.int64)
    generations = np.array([e.hypothesis for e in generated], dtype=np.int64)
    pairs = min(len(originals), len(generations))
    history = TrainingHistory()
    for epoch in range(1, cfg.discriminator_epochs + 1):
        orig_order = derive_rng(cfg.seed, 'shuffle.disc.original', epoch).permutation(len(originals))[:pairs]
        gen_order = derive_rng(cfg.seed, 'shuffle.disc.generated', epoch).permutation(len(generations))[:pairs]
        total = 0.0
        for start in range(0, pairs, cfg.batch_size):
            stop = start + cfg.batch_size
            loss = model.pair_loss(originals[orig_order[start:stop]], generations[gen_order[start:stop]])
            _check_loss(loss, "discriminator", epoch)
            total += loss * len(orig_order[start:stop])
            _optimizer_step(model, cfg, epoch)
        history.epochs.append({'epoch': epoch, 'train_loss': total / pairs})
        logger.info(f"discriminator epoch {epoch}: loss {total / pairs:.4f}")
    model.epochs_trained = cfg.discriminator_epochs
    history.best_epoch = cfg.discriminator_epochs
    return model, history


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

def generate_dataset(generator: GeneratorModel, source_set: Dataset, settings_: GenerationSettings,
                     oversample: Optional[float] = None, name: str = 'generated') -> Dataset:
    """
    One generated hypothesis per source example per pass, ``ceil(oversample)`` passes, each pass
    in source order with fresh latents.
    """
    oversample = settings_.oversample if oversample is None else oversample
    if oversample < 1:
        raise ConfigError(f"oversample must be at least 1, got {oversample}")
    cfg = generation_config_for(generator, settings_.beam_size, min(settings_.max_len, generator.hypothesis_len),
                                settings_.seed, settings_.scalar_sigma)
    passes = math.ceil(oversample)
    logger.info(f"Generating {passes} x {len(source_set)} hypotheses with {generator.kind} "
                f"(beam {cfg.beam_k}, {settings_.workers} workers)")
    examples = generate_examples(generator, list(source_set), cfg, settings_.workers, passes)
    return source_set.with_examples(examples, name=name)


def judge_probabilities(dataset: Sequence[Example], judge: ClassifierModel) -> np.ndarray:
    """Judge probability of each example's own label."""
    examples = list(dataset)
    if not examples:
        return np.zeros(0)
    probs = judge.predict_proba(examples)
    return probs[np.arange(len(examples)), [e.label for e in examples]]


@attrs.define
class FilterResult:
    dataset: Dataset
    probabilities: np.ndarray


def filter_dataset(dataset: Dataset, judge: Optional[ClassifierModel], threshold: float,
                   probabilities: Optional[np.ndarray] = None) -> FilterResult:
    """
    Keep an example iff the judge gives its label probability strictly above ``threshold``.

    Kept examples carry ``judge_prob``. Pass precomputed ``probabilities`` to filter one set at
    several thresholds with a single judge pass.
    """
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside [0, 1)")
    if probabilities is None:
        if judge is None:
            raise ConfigError("filter_dataset needs a judge or precomputed probabilities")
        probabilities = judge_probabilities(dataset, judge)
    kept = [attrs.evolve(example, judge_prob=float(p))
            for example, p in zip(dataset, probabilities) if p > threshold]
    logger.info(f"Threshold {threshold}: kept {len(kept)}/{len(dataset)}")
    return FilterResult(dataset=dataset.with_examples(kept, name=f"{dataset.name}-t{threshold:.2f}"),
                        probabilities=np.asarray(probabilities))


def balance_and_trim(dataset: Dataset, target_size: int) -> Dataset:
    """
    Keep the first ``target_size // 3`` examples of each label, in original order.

    Raises:
        InsufficientDataError: if some label has fewer examples than that (with the counts)
    """
    per_label = target_size // len(LABELS)
    counts = dataset.label_counts()
    if any(count < per_label for count in counts.values()):
        raise InsufficientDataError(
            f"Cannot balance {dataset.name or 'dataset'} to {per_label} examples per label", counts)
    taken = {i: 0 for i in range(len(LABELS))}
    kept = []
    for example in dataset:
        if taken[example.label] < per_label:
            taken[example.label] += 1
            kept.append(example)
    return dataset.with_examples(kept)


def balanced_size(dataset: Dataset, target_size: int) -> int:
    """Largest multiple of three not above ``target_size`` the dataset can fill with every label."""
    return min(target_size // len(LABELS), min(dataset.label_counts().values())) * len(LABELS)


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    """
    ``a`` followed by ``b``.

    Raises:
        VocabMismatchError: if the datasets were encoded with different vocabularies
    """
    if len(a) and len(b) and a.vocab_hash != b.vocab_hash:
        raise VocabMismatchError(a.vocab_hash, b.vocab_hash)
    return Dataset(examples=list(a) + list(b), vocab_hash=a.vocab_hash or b.vocab_hash,
                   name=f"{a.name}+{b.name}")


# ---------------------------------------------------------------------------
# Run directory
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def run_log(run_dir: Path) -> Iterator[None]:
    """Mirror the library's log records into ``log.txt`` of the run directory."""
    handler = logging.FileHandler(run_dir / 'log.txt', encoding='utf-8')
    handler.setFormatter(logging.Formatter(
        settings.LOGGING['formatters']['verbose']['format'], style='{'))
    package_logger = logging.getLogger('nli_generator')
    package_logger.addHandler(handler)
    try:
        yield
    finally:
        package_logger.removeHandler(handler)
        handler.close()


def _json_text(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + '\n'


class PipelineRun:
    """One run directory and the artifacts of its stages."""

    def __init__(self, cfg: RunConfig, out_dir: PathLike, train_path: PathLike, dev_path: PathLike,
                 test_path: PathLike):
        self.cfg = cfg
        self.run_dir = Path(out_dir)
        self.paths = {'train': Path(train_path), 'dev': Path(dev_path), 'test': Path(test_path)}
        self.vocab: Optional[Vocab] = None
        self.embeddings: Optional[EmbeddingMatrix] = None
        self.splits: Dict[str, Dataset] = {}
        self.judge: Optional[ClassifierModel] = None
        self.judge_hash = ''

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def artifacts(self) -> List[str]:
        if not self.run_dir.exists():
            return []
        return sorted(str(p) for p in self.run_dir.rglob('*') if p.is_file())

    @contextlib.contextmanager
    def stage(self, name: str) -> Iterator[None]:
        logger.info(f"Stage '{name}' started")
        try:
            yield
        except PipelineStageError:
            raise
        except Exception as e:
            logger.error(f"Stage '{name}' failed: {str(e)}")
            logger.error(traceback.format_exc())
            raise PipelineStageError(name, e, self.artifacts()) from e
        logger.info(f"Stage '{name}' finished")

    # -- artifacts --------------------------------------------------------

    def _cached_model(self, name: str, build: Callable[[], Tuple[NetworkModel, TrainingHistory]]) -> NetworkModel:
        checkpoint = self.path('checkpoints', f"{name}.nlig")
        if checkpoint.exists():
            logger.info(f"Reusing {checkpoint}")
            return load_checkpoint(checkpoint, self.vocab)
        model, history = build()
        atomic_write_text(self.path('reports', f"{name}-history.json"), _json_text(history.to_dict()))
        save_checkpoint(model, checkpoint, self.cfg.checkpoint_dtype)
        return model

    def _cached_dataset(self, name: str, build: Callable[[], Dataset]) -> Dataset:
        path = self.path('datasets', f"{name}.jsonl")
        if path.exists():
            logger.info(f"Reusing {path}")
            dataset = load_dataset(path, self.vocab, self.cfg.premise_len, self.cfg.hypothesis_len)
            return attrs.evolve(dataset, name=name)
        dataset = build()
        save_dataset(dataset, self.vocab, path)
        return attrs.evolve(dataset, name=name)

    # -- stages -------------------------------------------------------------

    def prepare(self) -> None:
        with self.stage('load'):
            self.run_dir.mkdir(parents=True, exist_ok=True)
            for sub in ('checkpoints', 'datasets', 'reports'):
                self.path(sub).mkdir(exist_ok=True)
            atomic_write_text(self.path('config.json'), _json_text(self.cfg.to_dict()))
            cfg = self.cfg
            vocab_path = self.path('vocab.txt')
            vocab = load_vocab(vocab_path) if vocab_path.exists() else None
            loaded = load_corpus(self.paths['train'], vocab, cfg.premise_len, cfg.hypothesis_len, name='train')
            self.vocab = loaded.vocab
            if vocab is None:
                save_vocab(self.vocab, vocab_path)
            self.splits['train'] = loaded.dataset
            for split in ('dev', 'test'):
                self.splits[split] = load_corpus(self.paths[split], self.vocab, cfg.premise_len,
                                                 cfg.hypothesis_len, name=split).dataset
            for split, dataset in self.splits.items():
                _require(dataset, f"original {split} split")
            if cfg.embeddings:
                self.embeddings = load_embeddings(cfg.embeddings, self.vocab, cfg.seed, cfg.train.embedding_dim,
                                                  cfg.unknown_embedding_std)
            else:
                self.embeddings = random_embeddings(self.vocab, cfg.seed, cfg.train.embedding_dim,
                                                    cfg.unknown_embedding_std)

    def original_classifier(self) -> ClassifierModel:
        with self.stage('classifier'):
            self.judge = self._cached_model('orig-classifier', lambda: train_classifier(
                self.splits['train'], self.splits['dev'], self.cfg.train, self.embeddings, self.vocab))
            self.judge_hash = file_hash(self.path('checkpoints', 'orig-classifier.nlig'))
        return self.judge

    def generator(self, kind: str, latent_dim: int, tag: str) -> GeneratorModel:
        train_cfg = attrs.evolve(self.cfg.train, latent_dim=latent_dim)
        with self.stage(f"generator:{tag}"):
            return self._cached_model(f"generator-{tag}", lambda: train_generator(
                self.splits['train'], train_cfg, kind, self.embeddings, self.vocab))

    def generated(self, generator: GeneratorModel, split: str, tag: str) -> Dataset:
        with self.stage(f"generate:{tag}:{split}"):
            return self._cached_dataset(f"generated-{tag}-{split}", lambda: generate_dataset(
                generator, self.splits[split], self.cfg.generation, name=f"generated-{tag}-{split}"))

    def filtered(self, generated: Dataset, threshold: float, target_size: int, tag: str,
                 probabilities: np.ndarray) -> Dataset:
        def build():
            kept = filter_dataset(generated, None, threshold, probabilities).dataset
            target = target_size
            if not self.cfg.filter.strict_size:
                target = balanced_size(kept, target_size)
                if target < target_size:
                    logger.warning(f"{kept.name} fills only {target} of {target_size} balanced examples")
            return balance_and_trim(kept, target)

        with self.stage(f"filter:{tag}:t{threshold:.2f}"):
            return self._cached_dataset(f"{generated.name}-t{threshold:.2f}", build)

    def classifier_on(self, train: Dataset, dev: Dataset, tag: str) -> ClassifierModel:
        with self.stage(f"retrain:{tag}"):
            return self._cached_model(f"classifier-{tag}", lambda: train_classifier(
                train, dev, self.cfg.train, self.embeddings, self.vocab))

    def discriminator(self, generated_train: Dataset, tag: str) -> DiscriminatorModel:
        with self.stage(f"discriminator:{tag}"):
            first_pass = list(generated_train)[:len(self.splits['train'])]
            return self._cached_model(f"discriminator-{tag}", lambda: train_discriminator(
                self.splits['train'], first_pass, self.cfg.train, self.embeddings, self.vocab))

    # -- evaluation -----------------------------------------------------------

    def evaluate_generator(self, kind: str, latent_dim: int, tag: str) -> Dict:
        """Train, generate, filter and retrain for one generator; returns its report section."""
        judge = self.judge
        cfg = self.cfg
        generator = self.generator(kind, latent_dim, tag)
        gen_train = self.generated(generator, 'train', tag)
        gen_dev = self.generated(generator, 'dev', tag)
        dev_first = gen_dev.with_examples(list(gen_dev)[:len(self.splits['dev'])])
        disc = self.discriminator(gen_train, tag)

        with self.stage(f"metrics:{tag}"):
            data_accuracy = dataset_label_accuracy(dev_first, judge)
            summary = {
                'kind': kind,
                'z': latent_dim,
                'total_parameters': generator.total_parameters,
                'updated_parameters': generator.updated_parameters,
                'acc_data': data_accuracy.overall,
                'acc_data_per_label': data_accuracy.per_label,
                'nll': mean_token_nll(generator, self.splits['dev'], cfg.seed),
                'disc_er': discriminator_error_rate(disc, self.splits['dev'], dev_first, cfg.seed),
                'jaccard': mean_jaccard(dev_first),
                'jaccard_original': mean_jaccard(self.splits['dev']),
                'rouge_l': mean_rouge_l(dev_first, self.splits['dev']),
                'meteor': mean_meteor(dev_first, self.splits['dev']),
                'overlap': dataset_overlap(dev_first, self.splits['dev']),
                'hypothesis_length': mean_hypothesis_length(dev_first),
                'hypothesis_length_original': mean_hypothesis_length(self.splits['dev']),
            }
            train_probs = judge_probabilities(gen_train, judge)
            dev_probs = judge_probabilities(gen_dev, judge)

        rows = []
        filtered_train_sets = {}
        for threshold in cfg.filter.thresholds:
            f_train = self.filtered(gen_train, threshold, len(self.splits['train']), tag, train_probs)
            f_dev = self.filtered(gen_dev, threshold, len(self.splits['dev']), tag, dev_probs)
            filtered_train_sets[threshold] = f_train
            classifier = self.classifier_on(f_train, f_dev, f"{tag}-t{threshold:.2f}")
            with self.stage(f"evaluate:{tag}:t{threshold:.2f}"):
                test_loss, test_acc = classifier.evaluate(list(self.splits['test']))
                _, gen_dev_acc = classifier.evaluate(list(f_dev))
            rows.append({
                'kind': kind, 'z': latent_dim, 'threshold': threshold, 'train_size': len(f_train),
                'acc_test': test_acc, 'loss_test': test_loss, 'acc_gen_dev': gen_dev_acc,
                'acc_data': summary['acc_data'], 'nll': summary['nll'], 'disc_er': summary['disc_er'],
            })
        summary['rows'] = rows
        summary['filtered_train'] = filtered_train_sets
        return summary

    def merged_classifier(self, filtered_train: Dataset, tag: str) -> Dict:
        merged = merge_datasets(self.splits['train'], filtered_train)
        classifier = self.classifier_on(merged, self.splits['dev'], f"merged-{tag}")
        with self.stage(f"evaluate:merged-{tag}"):
            loss, accuracy = classifier.evaluate(list(self.splits['test']))
        return {'train_size': len(merged), 'acc_test': accuracy, 'loss_test': loss}

    def original_row(self) -> Dict:
        with self.stage('evaluate:original'):
            loss, accuracy = self.judge.evaluate(list(self.splits['test']))
        return {'train_size': len(self.splits['train']), 'acc_test': accuracy, 'loss_test': loss}

    def write_report(self, name: str, report: Dict, rows: Sequence[Dict]) -> None:
        atomic_write_text(self.path('reports', f"{name}.json"), _json_text(report))
        atomic_write_text(self.path('reports', f"{name}-table.txt"), render_table(rows, TABLE_COLUMNS) + '\n')


def _strip_datasets(summary: Dict) -> Dict:
    return {key: value for key, value in summary.items() if key != 'filtered_train'}


def run_full_pipeline(train_path: PathLike, dev_path: PathLike, test_path: PathLike, cfg: RunConfig,
                      out_dir: PathLike) -> Dict:
    """
    Judge, generator, generated train and dev sets, one retrained classifier per threshold, a
    classifier on original + filtered-at-``merge_threshold`` data, and the comparison report.

    Raises:
        PipelineStageError: names the failed stage and lists the artifacts written so far
    """
    run = PipelineRun(cfg, out_dir, train_path, dev_path, test_path)
    run.run_dir.mkdir(parents=True, exist_ok=True)
    with run_log(run.run_dir):
        logger.info(f"Pipeline run in {run.run_dir} (kind {cfg.kind}, z {cfg.train.latent_dim}, seed {cfg.seed})")
        run.prepare()
        run.original_classifier()
        original = run.original_row()
        summary = run.evaluate_generator(cfg.kind, cfg.train.latent_dim, cfg.kind)

        merge_threshold = cfg.filter.merge_threshold
        filtered = summary['filtered_train'].get(merge_threshold)
        if filtered is None:
            gen_train = run.generated(run.generator(cfg.kind, cfg.train.latent_dim, cfg.kind), 'train', cfg.kind)
            filtered = run.filtered(gen_train, merge_threshold, len(run.splits['train']), cfg.kind,
                                    judge_probabilities(gen_train, run.judge))
        merged = run.merged_classifier(filtered, f"{cfg.kind}-t{merge_threshold:.2f}")
        merged['threshold'] = merge_threshold

        report = {
            'seed': cfg.seed,
            'judge_checkpoint_hash': run.judge_hash,
            'vocab_hash': run.vocab.hash,
            'input_hashes': {split: file_hash(path) for split, path in run.paths.items()},
            'original': original,
            'generator': _strip_datasets(summary),
            'merged': merged,
            'generated_dev_filtering': 'generated dev filtered at the same threshold as generated train',
        }
        run.write_report('report', report, summary['rows'])
        logger.info("Pipeline finished:\n" + render_table(summary['rows'], TABLE_COLUMNS))
        return report


def run_latent_sweep(train_path: PathLike, dev_path: PathLike, test_path: PathLike, cfg: RunConfig,
                     out_dir: PathLike, latent_dims: Optional[Sequence[int]] = None) -> Dict:
    """Train an att-embed generator per latent size and report the generated-data measures of each."""
    latent_dims = list(latent_dims or cfg.latent_dims)
    if any(z < 1 for z in latent_dims):
        raise ConfigError(f"latent sizes must be at least 1, got {latent_dims}")
    run = PipelineRun(cfg, out_dir, train_path, dev_path, test_path)
    run.run_dir.mkdir(parents=True, exist_ok=True)
    with run_log(run.run_dir):
        logger.info(f"Latent sweep over {latent_dims} in {run.run_dir}")
        run.prepare()
        run.original_classifier()
        sections, rows = [], []
        for z in latent_dims:
            summary = run.evaluate_generator(ATT_EMBED, z, f"{ATT_EMBED}-z{z}")
            sections.append(_strip_datasets(summary))
            rows.extend(summary['rows'])
        report = {
            'seed': cfg.seed,
            'judge_checkpoint_hash': run.judge_hash,
            'vocab_hash': run.vocab.hash,
            'input_hashes': {split: file_hash(path) for split, path in run.paths.items()},
            'original': run.original_row(),
            'latent_dims': latent_dims,
            'generators': sections,
        }
        run.write_report('sweep', report, rows)
        return report
