"""
The networks: the match-LSTM classifier, the four hypothesis generators and the
real-vs-generated discriminator.

Each model owns a ``ParamStore`` and a frozen ``EmbeddingMatrix``. Batch methods accumulate
gradients into the store (loss summed over tokens per example, averaged over the batch);
the module-level functions are single-example entry points.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import attrs
import numpy as np

from .data import NULL_ID, EmbeddingMatrix, Example, LABELS, batch_arrays
from .exceptions import ConfigError, ShapeError
from .layers import (
    HierSoftmaxParams,
    LstmParams,
    LstmState,
    MatchLstmParams,
    hsoftmax_log_distribution,
    hsoftmax_nll,
    hsoftmax_target_log_probs,
    lstm_run,
    lstm_run_backward,
    lstm_step_cached,
    mlstm_run,
    mlstm_run_backward,
    mlstm_step_cached,
)
from .numerics import (
    DTYPE,
    ParamStore,
    Tensor,
    dense_backward,
    dense_forward,
    glorot_uniform,
    sigmoid,
    softmax,
)
from .utils import derive_rng

logger = logging.getLogger(__name__)

ATT_EMBED = 'att-embed'
BASE_EMBED = 'base-embed'
ENCDEC = 'encdec'
VAE_ENCDEC = 'vae-encdec'
GENERATOR_KINDS = (ATT_EMBED, BASE_EMBED, ENCDEC, VAE_ENCDEC)
EMBED_KINDS = (ATT_EMBED, BASE_EMBED)
ENCODER_KINDS = (ENCDEC, VAE_ENCDEC)

CLASSIFIER = 'classifier'
DISCRIMINATOR = 'discriminator'

NUM_LABELS = len(LABELS)
PROB_CLAMP = 1e-12


def one_hot_labels(labels: np.ndarray) -> Tensor:
    return np.eye(NUM_LABELS)[np.asarray(labels, dtype=np.int64)]


def _add_dense(store: ParamStore, prefix: str, out_dim: int, in_dim: int,
               rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W", glorot_uniform(rng, (out_dim, in_dim)))
    store.add(f"{prefix}.b", np.zeros(out_dim))


class NetworkModel:
    """Shared plumbing: parameters, frozen embeddings, dimensions and checkpoint metadata."""

    kind: str = ''

    def __init__(self, embeddings: EmbeddingMatrix, hidden_dim: int, seed: int = 0,
                 premise_len: int = 25, hypothesis_len: int = 15, vocab_hash: str = '',
                 vocab_tokens: Optional[Sequence[str]] = None):
        if hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be positive, got {hidden_dim}")
        self.store = ParamStore()
        self.embeddings = embeddings
        self.hidden_dim = hidden_dim
        self.seed = seed
        self.premise_len = premise_len
        self.hypothesis_len = hypothesis_len
        self.vocab_hash = vocab_hash
        self.vocab_tokens = list(vocab_tokens) if vocab_tokens is not None else None
        self.epochs_trained = 0

    @property
    def vocab_size(self) -> int:
        return len(self.embeddings)

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.dim

    def embed(self, ids: np.ndarray) -> Tensor:
        return self.embeddings.lookup(ids)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def grads(self) -> Dict[str, Tensor]:
        return {name: self.store.grad(name).copy() for name in self.store}

    @property
    def total_parameters(self) -> int:
        return self.store.size()

    @property
    def updated_parameters(self) -> int:
        """
        Upper bound on the parameters one training example touches: all dense and recurrent
        weights, the softmax class layer with its largest word block, and a single latent row.
        """
        names = [name for name in self.store
                 if not name.startswith('decoder.hsm.word_') and not name.startswith('latent.')]
        count = self.store.size(names)
        blocks = [self.store.size(HierSoftmaxParams.block_names('decoder.hsm', c))
                  for c in range(self.hsm.layout.class_count)] if 'decoder.hsm.class_W' in self.store else []
        count += max(blocks, default=0)
        if 'latent.Z' in self.store:
            count += self.store.param('latent.Z').shape[1]
        return count

    def metadata(self) -> Dict:
        return {
            'kind': self.kind,
            'd': self.hidden_dim,
            'z': 0,
            'vocab_hash': self.vocab_hash,
            'seed': self.seed,
            'epochs_trained': self.epochs_trained,
            'vocab_size': self.vocab_size,
            'embedding_dim': self.embedding_dim,
            'premise_len': self.premise_len,
            'hypothesis_len': self.hypothesis_len,
            'vocab': self.vocab_tokens,
        }

    def _check_padded(self, premise_ids: Sequence[int], hypothesis_ids: Optional[Sequence[int]]) -> None:
        if len(premise_ids) != self.premise_len:
            raise ShapeError(f"Premise must be padded to {self.premise_len} tokens, got {len(premise_ids)}")
        if hypothesis_ids is not None and len(hypothesis_ids) != self.hypothesis_len:
            raise ShapeError(
                f"Hypothesis must be padded to {self.hypothesis_len} tokens, got {len(hypothesis_ids)}")


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

@attrs.define
class _ClassifierPass:
    H_p: Tensor
    H_h: Tensor
    cache_p: list
    cache_h: list
    match: object
    h_last: Tensor
    probs: Tensor


class ClassifierModel(NetworkModel):
    """Premise and hypothesis LSTMs, a match-LSTM over both, and a dense softmax over the labels."""

    kind = CLASSIFIER

    def __init__(self, embeddings: EmbeddingMatrix, hidden_dim: int = 150, seed: int = 0, **kwargs):
        super().__init__(embeddings, hidden_dim, seed, **kwargs)
        rng = derive_rng(seed, 'init.classifier')
        e, d = self.embedding_dim, hidden_dim
        LstmParams.create(self.store, 'premise', e, d, rng)
        LstmParams.create(self.store, 'hypothesis', e, d, rng)
        MatchLstmParams.create(self.store, 'match', d, rng)
        _add_dense(self.store, 'output', NUM_LABELS, d, rng)

    def forward(self, premises: np.ndarray, hypotheses: np.ndarray) -> _ClassifierPass:
        store = self.store
        mask_p = (premises != NULL_ID).astype(DTYPE)
        mask_h = (hypotheses != NULL_ID).astype(DTYPE)
        H_p, _, cache_p = lstm_run(self.embed(premises), LstmParams.bind(store, 'premise'), mask=mask_p)
        H_h, _, cache_h = lstm_run(self.embed(hypotheses), LstmParams.bind(store, 'hypothesis'), mask=mask_h)
        match = mlstm_run(H_p, H_h, MatchLstmParams.bind(store, 'match'), None, mask_p, mask_h)
        h_last = match.H[:, -1]
        logits = dense_forward(h_last, store.param('output.W'), store.param('output.b'))
        return _ClassifierPass(H_p, H_h, cache_p, cache_h, match, h_last, softmax(logits))

    def backward(self, d_logits: Tensor, fwd: _ClassifierPass) -> None:
        store = self.store
        d_h, d_W, d_b = dense_backward(d_logits, fwd.h_last, store.param('output.W'))
        store.grad('output.W')[...] += d_W
        store.grad('output.b')[...] += d_b
        d_Hm = np.zeros_like(fwd.match.H)
        d_Hm[:, -1] = d_h
        d_Hp, d_Hh, _ = mlstm_run_backward(
            d_Hm, fwd.match, fwd.H_p, fwd.H_h,
            MatchLstmParams.bind(store, 'match'), MatchLstmParams.bind(store, 'match', grads=True))
        lstm_run_backward(d_Hp, fwd.cache_p, LstmParams.bind(store, 'premise'),
                          LstmParams.bind(store, 'premise', grads=True))
        lstm_run_backward(d_Hh, fwd.cache_h, LstmParams.bind(store, 'hypothesis'),
                          LstmParams.bind(store, 'hypothesis', grads=True))

    def batch_loss(self, examples: Sequence[Example], backward: bool = True) -> float:
        """Mean cross-entropy over the batch; accumulates gradients when ``backward``."""
        premises, hypotheses, labels = batch_arrays(examples)
        fwd = self.forward(premises, hypotheses)
        B = len(examples)
        rows = np.arange(B)
        loss = -float(np.mean(np.log(np.maximum(fwd.probs[rows, labels], PROB_CLAMP))))
        if backward:
            d_logits = fwd.probs.copy()
            d_logits[rows, labels] -= 1.0
            self.backward(d_logits / B, fwd)
        return loss

    def predict_proba(self, examples: Sequence[Example], batch_size: int = 256) -> Tensor:
        out = []
        for start in range(0, len(examples), batch_size):
            premises, hypotheses, _ = batch_arrays(examples[start:start + batch_size])
            out.append(self.forward(premises, hypotheses).probs)
        return np.concatenate(out) if out else np.zeros((0, NUM_LABELS))

    def evaluate(self, examples: Sequence[Example], batch_size: int = 256) -> Tuple[float, float]:
        """Returns (mean cross-entropy, accuracy)."""
        if not examples:
            return 0.0, 0.0
        probs = self.predict_proba(examples, batch_size)
        labels = np.array([example.label for example in examples])
        rows = np.arange(len(examples))
        loss = -float(np.mean(np.log(np.maximum(probs[rows, labels], PROB_CLAMP))))
        accuracy = float(np.mean(np.argmax(probs, axis=1) == labels))
        return loss, accuracy


def classify(model: ClassifierModel, premise_ids: Sequence[int], hypothesis_ids: Sequence[int],
             embeddings: Optional[EmbeddingMatrix] = None) -> Tensor:
    """
    Label probabilities for one padded (premise, hypothesis) pair.

    Raises:
        ShapeError: if either sentence is not padded to the model's lengths
    """
    model._check_padded(premise_ids, hypothesis_ids)
    if embeddings is not None and embeddings is not model.embeddings:
        model = _with_embeddings(model, embeddings)
    fwd = model.forward(np.array([premise_ids], dtype=np.int64), np.array([hypothesis_ids], dtype=np.int64))
    return fwd.probs[0]


def _with_embeddings(model: NetworkModel, embeddings: EmbeddingMatrix) -> NetworkModel:
    clone = object.__new__(type(model))
    clone.__dict__.update(model.__dict__)
    clone.embeddings = embeddings
    return clone


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

@attrs.define
class _DecoderPass:
    premises: np.ndarray
    labels: np.ndarray
    Z: Tensor
    targets: np.ndarray
    mask: Tensor
    H_out: Tensor
    H_p: Tensor
    cache_p: list
    init_in: Tensor
    H_h: Optional[Tensor] = None
    cache_h: Optional[list] = None
    match: object = None
    cache_dec: Optional[list] = None


@attrs.define
class _EncoderPass:
    H_p: Tensor
    H_h: Tensor
    cache_p: list
    cache_h: list
    match: object
    labels_1h: Tensor
    h_last: Tensor


@attrs.define
class DecoderContext:
    """Per-premise constants of incremental decoding."""
    H_p: Tensor
    premise_proj: Optional[Tensor]
    mask_p: Tensor


@attrs.define
class DecoderState:
    """Recurrent state of k partial hypotheses decoded in parallel."""
    hyp: Optional[LstmState]
    dec: LstmState

    def select(self, rows: np.ndarray) -> 'DecoderState':
        hyp = None if self.hyp is None else LstmState(h=self.hyp.h[rows], C=self.hyp.C[rows])
        return DecoderState(hyp=hyp, dec=LstmState(h=self.dec.h[rows], C=self.dec.C[rows]))


@attrs.define
class GeneratorBatchResult:
    loss: float
    nll: Tensor
    kl: Tensor
    tokens: Tensor


class GeneratorModel(NetworkModel):
    """
    Hypothesis generator of one of four kinds.

    ``att-embed`` and ``base-embed`` learn a latent row per training example (``latent.Z``);
    ``encdec`` and ``vae-encdec`` compute the latent from an encoder that sees the full example.
    ``base-embed`` replaces the match-LSTM decoder with a plain LSTM of size z + 3 + d whose
    initial cell state carries latent, label and the premise summary.
    """

    def __init__(self, kind: str, embeddings: EmbeddingMatrix, hidden_dim: int = 150,
                 latent_dim: int = 8, n_examples: int = 0, seed: int = 0,
                 latent_init_std: float = 0.05, **kwargs):
        if kind not in GENERATOR_KINDS:
            raise ConfigError(f"Unknown generator kind '{kind}', expected one of {GENERATOR_KINDS}")
        if latent_dim < 1:
            raise ConfigError(f"latent_dim must be at least 1, got {latent_dim}")
        if kind in EMBED_KINDS and n_examples < 1:
            raise ConfigError(f"{kind} needs the training-set size to allocate its latent table")
        super().__init__(embeddings, hidden_dim, seed, **kwargs)
        self.kind = kind
        self.latent_dim = latent_dim
        self.n_examples = n_examples if kind in EMBED_KINDS else 0
        self.latent_sigma: Optional[Tensor] = None

        rng = derive_rng(seed, f"init.{kind}")
        e, d, z = self.embedding_dim, hidden_dim, latent_dim
        store = self.store
        LstmParams.create(store, 'decoder.premise', e, d, rng)
        if kind == BASE_EMBED:
            self.decoder_dim = z + NUM_LABELS + d
            _add_dense(store, 'decoder.init', self.decoder_dim, z + NUM_LABELS + d, rng)
            LstmParams.create(store, 'decoder.lstm', e, self.decoder_dim, rng)
        else:
            self.decoder_dim = d
            LstmParams.create(store, 'decoder.hypothesis', e, d, rng)
            _add_dense(store, 'decoder.init', d, z + NUM_LABELS, rng)
            MatchLstmParams.create(store, 'decoder.match', d, rng)
        hsm = HierSoftmaxParams.create(store, 'decoder.hsm', self.decoder_dim, self.vocab_size, rng)
        self.hsm_layout = hsm.layout

        if kind in EMBED_KINDS:
            store.add('latent.Z', rng.normal(0.0, latent_init_std, size=(n_examples, z)), sparse_rows=True)
        else:
            LstmParams.create(store, 'encoder.premise', e, d, rng)
            LstmParams.create(store, 'encoder.hypothesis', e, d, rng)
            _add_dense(store, 'encoder.init', d, NUM_LABELS, rng)
            MatchLstmParams.create(store, 'encoder.match', d, rng)
            if kind == ENCDEC:
                _add_dense(store, 'encoder.latent', z, d, rng)
            else:
                _add_dense(store, 'encoder.mu', z, d, rng)
                _add_dense(store, 'encoder.logvar', z, d, rng)

    def metadata(self) -> Dict:
        meta = super().metadata()
        meta.update({'z': self.latent_dim, 'latent_rows': self.n_examples, 'decoder_dim': self.decoder_dim})
        return meta

    @property
    def hsm(self) -> HierSoftmaxParams:
        return HierSoftmaxParams.bind(self.store, 'decoder.hsm', self.vocab_size, layout=self.hsm_layout)

    # -- latent sources ----------------------------------------------------

    def latent_table(self) -> Tensor:
        if self.kind not in EMBED_KINDS:
            raise ConfigError(f"{self.kind} has no latent table")
        return self.store.param('latent.Z')

    def _check_indices(self, indices: Optional[Sequence[int]], count: int) -> np.ndarray:
        if indices is None or len(indices) != count:
            raise ShapeError(f"{self.kind} needs one latent-table index per example")
        idx = np.asarray(indices, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= self.n_examples:
            bad = int(idx[(idx < 0) | (idx >= self.n_examples)][0])
            raise IndexError(f"Example index {bad} outside latent table of {self.n_examples} rows")
        return idx

    def _encode(self, premises: np.ndarray, hypotheses: np.ndarray, labels: np.ndarray) -> _EncoderPass:
        store = self.store
        mask_p = (premises != NULL_ID).astype(DTYPE)
        mask_h = (hypotheses != NULL_ID).astype(DTYPE)
        H_p, _, cache_p = lstm_run(self.embed(premises), LstmParams.bind(store, 'encoder.premise'), mask=mask_p)
        H_h, _, cache_h = lstm_run(self.embed(hypotheses), LstmParams.bind(store, 'encoder.hypothesis'),
                                   mask=mask_h)
        labels_1h = one_hot_labels(labels)
        C0 = dense_forward(labels_1h, store.param('encoder.init.W'), store.param('encoder.init.b'))
        match = mlstm_run(H_p, H_h, MatchLstmParams.bind(store, 'encoder.match'), C0, mask_p, mask_h)
        return _EncoderPass(H_p, H_h, cache_p, cache_h, match, labels_1h, match.H[:, -1])

    def _encode_backward(self, enc: _EncoderPass, d_h_last: Tensor) -> None:
        store = self.store
        d_Hm = np.zeros_like(enc.match.H)
        d_Hm[:, -1] = d_h_last
        d_Hp, d_Hh, d_C0 = mlstm_run_backward(
            d_Hm, enc.match, enc.H_p, enc.H_h,
            MatchLstmParams.bind(store, 'encoder.match'), MatchLstmParams.bind(store, 'encoder.match', grads=True))
        _, d_W, d_b = dense_backward(d_C0, enc.labels_1h, store.param('encoder.init.W'))
        store.grad('encoder.init.W')[...] += d_W
        store.grad('encoder.init.b')[...] += d_b
        lstm_run_backward(d_Hp, enc.cache_p, LstmParams.bind(store, 'encoder.premise'),
                          LstmParams.bind(store, 'encoder.premise', grads=True))
        lstm_run_backward(d_Hh, enc.cache_h, LstmParams.bind(store, 'encoder.hypothesis'),
                          LstmParams.bind(store, 'encoder.hypothesis', grads=True))

    def _dense(self, prefix: str, x: Tensor) -> Tensor:
        return dense_forward(x, self.store.param(f"{prefix}.W"), self.store.param(f"{prefix}.b"))

    def _dense_backward(self, prefix: str, d_out: Tensor, x: Tensor) -> Tensor:
        d_x, d_W, d_b = dense_backward(d_out, x, self.store.param(f"{prefix}.W"))
        self.store.grad(f"{prefix}.W")[...] += d_W
        self.store.grad(f"{prefix}.b")[...] += d_b
        return d_x

    def encode_batch(self, examples: Sequence[Example]) -> Tensor:
        """Deterministic encoder output: Z for encdec, Z_mu for vae-encdec."""
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"{self.kind} has no encoder")
        premises, hypotheses, labels = batch_arrays(examples)
        enc = self._encode(premises, hypotheses, labels)
        head = 'encoder.latent' if self.kind == ENCDEC else 'encoder.mu'
        return self._dense(head, enc.h_last)

    def vae_heads(self, examples: Sequence[Example]) -> Tuple[Tensor, Tensor]:
        """(Z_mu, log Z_sigma^2) for a batch."""
        premises, hypotheses, labels = batch_arrays(examples)
        enc = self._encode(premises, hypotheses, labels)
        return self._dense('encoder.mu', enc.h_last), self._dense('encoder.logvar', enc.h_last)

    # -- decoder -------------------------------------------------------------

    def _decoder_forward(self, premises: np.ndarray, hypotheses: np.ndarray, labels: np.ndarray,
                         Z: Tensor) -> _DecoderPass:
        store = self.store
        B, N = hypotheses.shape
        shifted = np.concatenate([np.full((B, 1), NULL_ID), hypotheses], axis=1)
        targets = np.concatenate([hypotheses, np.full((B, 1), NULL_ID)], axis=1)
        lengths = (hypotheses != NULL_ID).sum(axis=1)
        mask = (np.arange(N + 1)[None, :] <= lengths[:, None]).astype(DTYPE)

        mask_p = (premises != NULL_ID).astype(DTYPE)
        H_p, _, cache_p = lstm_run(self.embed(premises), LstmParams.bind(store, 'decoder.premise'), mask=mask_p)
        labels_1h = one_hot_labels(labels)
        X_h = self.embed(shifted)

        if self.kind == BASE_EMBED:
            init_in = np.concatenate([Z, labels_1h, H_p[:, -1]], axis=1)
            C0 = self._dense('decoder.init', init_in)
            init = LstmState(h=np.zeros_like(C0), C=C0)
            H_out, _, cache_dec = lstm_run(X_h, LstmParams.bind(store, 'decoder.lstm'), init=init, mask=mask)
            return _DecoderPass(premises, labels, Z, targets, mask, H_out, H_p, cache_p, init_in,
                                cache_dec=cache_dec)

        init_in = np.concatenate([Z, labels_1h], axis=1)
        C0 = self._dense('decoder.init', init_in)
        H_h, _, cache_h = lstm_run(X_h, LstmParams.bind(store, 'decoder.hypothesis'), mask=mask)
        match = mlstm_run(H_p, H_h, MatchLstmParams.bind(store, 'decoder.match'), C0, mask_p, mask)
        return _DecoderPass(premises, labels, Z, targets, mask, match.H, H_p, cache_p, init_in,
                            H_h=H_h, cache_h=cache_h, match=match)

    def _decoder_backward(self, fwd: _DecoderPass, d_H_out: Tensor) -> Tensor:
        """Backpropagate from decoder outputs; returns the gradient w.r.t. Z."""
        store = self.store
        z = self.latent_dim
        if self.kind == BASE_EMBED:
            _, _, d_C0 = lstm_run_backward(d_H_out, fwd.cache_dec, LstmParams.bind(store, 'decoder.lstm'),
                                           LstmParams.bind(store, 'decoder.lstm', grads=True))
            d_init = self._dense_backward('decoder.init', d_C0, fwd.init_in)
            d_Hp = np.zeros_like(fwd.H_p)
            d_Hp[:, -1] = d_init[:, z + NUM_LABELS:]
        else:
            d_Hp, d_Hh, d_C0 = mlstm_run_backward(
                d_H_out, fwd.match, fwd.H_p, fwd.H_h,
                MatchLstmParams.bind(store, 'decoder.match'),
                MatchLstmParams.bind(store, 'decoder.match', grads=True))
            lstm_run_backward(d_Hh, fwd.cache_h, LstmParams.bind(store, 'decoder.hypothesis'),
                              LstmParams.bind(store, 'decoder.hypothesis', grads=True))
            d_init = self._dense_backward('decoder.init', d_C0, fwd.init_in)
        lstm_run_backward(d_Hp, fwd.cache_p, LstmParams.bind(store, 'decoder.premise'),
                          LstmParams.bind(store, 'decoder.premise', grads=True))
        return d_init[:, :z]

    def decoder_nll(self, examples: Sequence[Example], Z: Tensor) -> Tuple[Tensor, Tensor]:
        """Per-example (summed NLL, token count) of the gold hypotheses under latent rows Z."""
        premises, hypotheses, labels = batch_arrays(examples)
        fwd = self._decoder_forward(premises, hypotheses, labels, np.atleast_2d(Z))
        B, T, _ = fwd.H_out.shape
        logp = hsoftmax_target_log_probs(fwd.H_out.reshape(B * T, -1), fwd.targets.ravel(), self.hsm)
        nll = -(logp.reshape(B, T) * fwd.mask).sum(axis=1)
        return nll, fwd.mask.sum(axis=1)

    # -- training loss -------------------------------------------------------

    def batch_loss(self, examples: Sequence[Example], indices: Optional[Sequence[int]] = None,
                   epsilon: Optional[Tensor] = None, rng: Optional[np.random.Generator] = None,
                   backward: bool = True) -> GeneratorBatchResult:
        """
        Teacher-forced loss of a batch: per example, the NLL of the hypothesis tokens plus the
        terminal <null>, plus the KL term for vae-encdec; averaged over the batch.

        ``indices`` are latent-table rows (embed kinds). ``epsilon`` (B, z) is the VAE noise;
        when omitted it is drawn from ``rng``.
        """
        premises, hypotheses, labels = batch_arrays(examples)
        B = len(examples)
        kl = np.zeros(B)
        enc = None
        if self.kind in EMBED_KINDS:
            idx = self._check_indices(indices, B)
            Z = self.store.param('latent.Z')[idx].copy()
        else:
            enc = self._encode(premises, hypotheses, labels)
            if self.kind == ENCDEC:
                Z = self._dense('encoder.latent', enc.h_last)
            else:
                mu = self._dense('encoder.mu', enc.h_last)
                logvar = self._dense('encoder.logvar', enc.h_last)
                if epsilon is None:
                    rng = rng if rng is not None else derive_rng(self.seed, 'vae.epsilon')
                    epsilon = rng.standard_normal(mu.shape)
                epsilon = np.asarray(epsilon, dtype=DTYPE).reshape(mu.shape)
                sigma = np.exp(0.5 * logvar)
                Z = mu + sigma * epsilon
                kl = -0.5 * np.sum(1.0 + logvar - mu ** 2 - np.exp(logvar), axis=1)

        fwd = self._decoder_forward(premises, hypotheses, labels, Z)
        T = fwd.H_out.shape[1]
        flat_H = fwd.H_out.reshape(B * T, -1)
        weights = (fwd.mask / B).ravel()
        hsm_grads = HierSoftmaxParams.bind(self.store, 'decoder.hsm', self.vocab_size, grads=True,
                                           layout=self.hsm_layout) if backward else None
        loss, d_flat = hsoftmax_nll(flat_H, fwd.targets.ravel(), weights, self.hsm, hsm_grads)
        nll = -(hsoftmax_target_log_probs(flat_H, fwd.targets.ravel(), self.hsm).reshape(B, T)
                * fwd.mask).sum(axis=1)
        loss += float(np.mean(kl))

        if backward:
            d_Z = self._decoder_backward(fwd, d_flat.reshape(fwd.H_out.shape))
            if self.kind in EMBED_KINDS:
                np.add.at(self.store.grad('latent.Z'), idx, d_Z)
                self.store.mark_rows('latent.Z', idx)
            elif self.kind == ENCDEC:
                d_h = self._dense_backward('encoder.latent', d_Z, enc.h_last)
                self._encode_backward(enc, d_h)
            else:
                d_mu = d_Z + mu / B
                d_logvar = d_Z * epsilon * 0.5 * sigma + 0.5 * (np.exp(logvar) - 1.0) / B
                d_h = self._dense_backward('encoder.mu', d_mu, enc.h_last)
                d_h = d_h + self._dense_backward('encoder.logvar', d_logvar, enc.h_last)
                self._encode_backward(enc, d_h)
        return GeneratorBatchResult(loss=loss, nll=nll, kl=kl, tokens=fwd.mask.sum(axis=1))

    # -- incremental decoding -------------------------------------------------

    def decoder_start(self, premise_ids: Sequence[int], label: int,
                      Z: Tensor) -> Tuple[DecoderContext, DecoderState]:
        store = self.store
        premises = np.asarray(premise_ids, dtype=np.int64)[None]
        mask_p = (premises != NULL_ID).astype(DTYPE)
        H_p, _, _ = lstm_run(self.embed(premises), LstmParams.bind(store, 'decoder.premise'), mask=mask_p)
        labels_1h = one_hot_labels([label])
        Z = np.asarray(Z, dtype=DTYPE).reshape(1, self.latent_dim)
        if self.kind == BASE_EMBED:
            C0 = self._dense('decoder.init', np.concatenate([Z, labels_1h, H_p[:, -1]], axis=1))
            context = DecoderContext(H_p=H_p, premise_proj=None, mask_p=mask_p)
            return context, DecoderState(hyp=None, dec=LstmState(h=np.zeros_like(C0), C=C0))
        C0 = self._dense('decoder.init', np.concatenate([Z, labels_1h], axis=1))
        proj = H_p @ store.param('decoder.match.W_s').T
        context = DecoderContext(H_p=H_p, premise_proj=proj, mask_p=mask_p)
        d = self.hidden_dim
        hyp = LstmState(h=np.zeros((1, d)), C=np.zeros((1, d)))
        return context, DecoderState(hyp=hyp, dec=LstmState(h=np.zeros((1, d)), C=C0))

    def decoder_step(self, context: DecoderContext, state: DecoderState,
                     tokens: np.ndarray) -> Tuple[Tensor, DecoderState]:
        """Feed one token per partial hypothesis; returns next-word log-probabilities (k, V)."""
        store = self.store
        x = self.embed(np.asarray(tokens, dtype=np.int64))
        k = x.shape[0]
        if self.kind == BASE_EMBED:
            dec, _ = lstm_step_cached(x, state.dec, LstmParams.bind(store, 'decoder.lstm'))
            return hsoftmax_log_distribution(dec.h, self.hsm), DecoderState(hyp=None, dec=dec)
        hyp, _ = lstm_step_cached(x, state.hyp, LstmParams.bind(store, 'decoder.hypothesis'))
        H_p = np.broadcast_to(context.H_p, (k,) + context.H_p.shape[1:])
        proj = np.broadcast_to(context.premise_proj, (k,) + context.premise_proj.shape[1:])
        mask_p = np.broadcast_to(context.mask_p, (k,) + context.mask_p.shape[1:])
        dec, _ = mlstm_step_cached(hyp.h, state.dec, H_p, proj, MatchLstmParams.bind(store, 'decoder.match'),
                                   mask_p)
        return hsoftmax_log_distribution(dec.h, self.hsm), DecoderState(hyp=hyp, dec=dec)

    # -- latent statistics ---------------------------------------------------

    def compute_latent_sigma(self, examples: Optional[Sequence[Example]] = None,
                             batch_size: int = 256) -> Tensor:
        """
        Per-dimension spread used when sampling latents for generation: the std of the latent
        table rows (embed kinds), of encoder outputs over ``examples`` (encdec), or ones (vae prior).
        """
        if self.kind in EMBED_KINDS:
            sigma = self.latent_table().std(axis=0)
        elif self.kind == VAE_ENCDEC:
            sigma = np.ones(self.latent_dim)
        else:
            if not examples:
                raise ConfigError("encdec latent spread needs the training examples")
            outputs = [self.encode_batch(examples[start:start + batch_size])
                       for start in range(0, len(examples), batch_size)]
            sigma = np.concatenate(outputs).std(axis=0)
        self.latent_sigma = sigma
        return sigma


def generator_loss(model: GeneratorModel, example: Example, example_index: Optional[int] = None,
                   epsilon: Optional[Tensor] = None) -> Tuple[float, Dict[str, Tensor]]:
    """
    Teacher-forced loss of one example with its parameter gradients.

    Raises:
        IndexError: if ``example_index`` is outside the latent table (embed kinds)
    """
    indices = None if example_index is None else [example_index]
    if model.kind in EMBED_KINDS and example_index is None:
        raise IndexError(f"{model.kind} needs the example's latent-table index")
    if model.kind == VAE_ENCDEC and epsilon is None:
        epsilon = derive_rng(model.seed, 'vae.epsilon', example_index or 0).standard_normal(model.latent_dim)
    model.zero_grad()
    result = model.batch_loss([example], indices, None if epsilon is None else np.atleast_2d(epsilon))
    grads = model.grads()
    model.zero_grad()
    return result.loss, grads


def encode_latent(model: GeneratorModel, example: Example) -> Tensor:
    """Encoder latent Z = Dense_z(h_N^m) for one full example (encdec kinds)."""
    return model.encode_batch([example])[0]


def vae_latent(model: GeneratorModel, example: Example, epsilon: Tensor) -> Tuple[Tensor, float]:
    """Reparameterised sample ``Z = mu + sigma * epsilon`` and its KL to N(0, I)."""
    if model.kind != VAE_ENCDEC:
        raise ConfigError(f"{model.kind} is not a variational model")
    mu, logvar = model.vae_heads([example])
    mu, logvar = mu[0], logvar[0]
    Z = mu + np.exp(0.5 * logvar) * np.asarray(epsilon, dtype=DTYPE)
    kl = -0.5 * float(np.sum(1.0 + logvar - mu ** 2 - np.exp(logvar)))
    return Z, kl


def kl_divergence(mu: Tensor, sigma: Tensor) -> float:
    """KL(N(mu, sigma^2) || N(0, I)), with sigma > 0."""
    mu = np.asarray(mu, dtype=DTYPE)
    sigma = np.asarray(sigma, dtype=DTYPE)
    return -0.5 * float(np.sum(1.0 + np.log(sigma ** 2) - mu ** 2 - sigma ** 2))


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

class DiscriminatorModel(NetworkModel):
    """``D(X) = sigmoid(Dense_1(LSTM(X)))`` over hypothesis embeddings."""

    kind = DISCRIMINATOR

    def __init__(self, embeddings: EmbeddingMatrix, hidden_dim: int = 150, seed: int = 0, **kwargs):
        super().__init__(embeddings, hidden_dim, seed, **kwargs)
        rng = derive_rng(seed, 'init.discriminator')
        LstmParams.create(self.store, 'disc.lstm', self.embedding_dim, hidden_dim, rng)
        _add_dense(self.store, 'disc.output', 1, hidden_dim, rng)

    def _forward(self, hypotheses: np.ndarray):
        mask = (hypotheses != NULL_ID).astype(DTYPE)
        H, _, cache = lstm_run(self.embed(hypotheses), LstmParams.bind(self.store, 'disc.lstm'), mask=mask)
        h_last = H[:, -1]
        logits = dense_forward(h_last, self.store.param('disc.output.W'), self.store.param('disc.output.b'))[:, 0]
        return sigmoid(logits), H, cache, h_last

    def scores(self, hypotheses: np.ndarray, batch_size: int = 256) -> Tensor:
        hypotheses = np.asarray(hypotheses, dtype=np.int64)
        out = [self._forward(hypotheses[start:start + batch_size])[0]
               for start in range(0, len(hypotheses), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def pair_loss(self, originals: np.ndarray, generated: np.ndarray, backward: bool = True) -> float:
        """Mean of ``-[log D(orig) + log(1 - D(gen))]`` over aligned pairs."""
        originals = np.asarray(originals, dtype=np.int64)
        generated = np.asarray(generated, dtype=np.int64)
        if originals.shape != generated.shape:
            raise ShapeError(f"Pair shapes differ: {originals.shape} vs {generated.shape}")
        B = originals.shape[0]
        both = np.concatenate([originals, generated])
        D, H, cache, h_last = self._forward(both)
        D_clamped = np.clip(D, PROB_CLAMP, 1.0 - PROB_CLAMP)
        loss = -float(np.mean(np.log(D_clamped[:B]) + np.log(1.0 - D_clamped[B:])))
        if backward:
            d_logits = np.concatenate([D[:B] - 1.0, D[B:]])[:, None] / B
            d_h, d_W, d_b = dense_backward(d_logits, h_last, self.store.param('disc.output.W'))
            self.store.grad('disc.output.W')[...] += d_W
            self.store.grad('disc.output.b')[...] += d_b
            d_H = np.zeros_like(H)
            d_H[:, -1] = d_h
            lstm_run_backward(d_H, cache, LstmParams.bind(self.store, 'disc.lstm'),
                              LstmParams.bind(self.store, 'disc.lstm', grads=True))
        return loss


def discriminator_score(model: DiscriminatorModel, hypothesis_ids: Sequence[int],
                        embeddings: Optional[EmbeddingMatrix] = None) -> float:
    """Probability in (0, 1) that a padded hypothesis is human-written."""
    model._check_padded([NULL_ID] * model.premise_len, hypothesis_ids)
    if embeddings is not None and embeddings is not model.embeddings:
        model = _with_embeddings(model, embeddings)
    return float(model.scores(np.array([hypothesis_ids]))[0])


def discriminator_loss(model: DiscriminatorModel, original: Sequence[int],
                       generated: Sequence[int]) -> Tuple[float, Dict[str, Tensor]]:
    """Loss of one (original, generated) pair with its parameter gradients."""
    model.zero_grad()
    loss = model.pair_loss(np.array([original]), np.array([generated]))
    grads = model.grads()
    model.zero_grad()
    return loss, grads


# ---------------------------------------------------------------------------
# Construction from checkpoint metadata
# ---------------------------------------------------------------------------

def model_from_metadata(meta: Dict, embeddings: EmbeddingMatrix) -> NetworkModel:
    common = {
        'premise_len': meta.get('premise_len', 25),
        'hypothesis_len': meta.get('hypothesis_len', 15),
        'vocab_hash': meta.get('vocab_hash', ''),
        'vocab_tokens': meta.get('vocab'),
    }
    kind = meta['kind']
    if kind == CLASSIFIER:
        model = ClassifierModel(embeddings, meta['d'], meta.get('seed', 0), **common)
    elif kind == DISCRIMINATOR:
        model = DiscriminatorModel(embeddings, meta['d'], meta.get('seed', 0), **common)
    elif kind in GENERATOR_KINDS:
        model = GeneratorModel(kind, embeddings, meta['d'], meta['z'], meta.get('latent_rows', 0),
                               meta.get('seed', 0), **common)
    else:
        raise ConfigError(f"Unknown model kind '{kind}'")
    model.epochs_trained = meta.get('epochs_trained', 0)
    return model
