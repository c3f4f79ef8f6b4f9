"""
Recurrent and output layers with hand-derived backward passes.

Every forward function works on a leading batch axis and takes an optional step mask; on a
masked step an LSTM carries its previous (h, C) unchanged, so the final state of a padded
sequence is the state after its last real token. Backward functions accumulate parameter
gradients into a ``*Params`` object whose arrays are the gradient slots of a ``ParamStore``.
"""
import logging
import math
from typing import List, Optional, Sequence, Tuple

import attrs
import numpy as np

from .exceptions import ShapeError
from .numerics import DTYPE, ParamStore, Tensor, glorot_uniform, log_softmax, sigmoid, softmax, softmax_backward

logger = logging.getLogger(__name__)

MASKED_SCORE = -1e30

LSTM_FIELDS = ('W_i', 'W_f', 'W_o', 'W_c', 'U_i', 'U_f', 'U_o', 'U_c', 'b_i', 'b_f', 'b_o', 'b_c')


@attrs.define
class LstmState:
    h: Tensor
    C: Tensor


@attrs.define
class LstmParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_c: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_i.shape[1]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, input_dim: int, hidden_dim: int,
               rng: np.random.Generator) -> 'LstmParams':
        for gate in 'ifoc':
            store.add(f"{prefix}.W_{gate}", glorot_uniform(rng, (hidden_dim, input_dim)))
        for gate in 'ifoc':
            store.add(f"{prefix}.U_{gate}", glorot_uniform(rng, (hidden_dim, hidden_dim)))
        for gate in 'ifoc':
            bias = np.ones(hidden_dim) if gate == 'f' else np.zeros(hidden_dim)
            store.add(f"{prefix}.b_{gate}", bias)
        return cls.bind(store, prefix)

    @classmethod
    def bind(cls, store: ParamStore, prefix: str, grads: bool = False) -> 'LstmParams':
        getter = store.grad if grads else store.param
        return cls(**{name: getter(f"{prefix}.{name}") for name in LSTM_FIELDS})


@attrs.define
class MatchLstmParams:
    W_s: Tensor
    W_t: Tensor
    W_m: Tensor
    w_e: Tensor
    lstm: LstmParams

    @property
    def hidden_dim(self) -> int:
        return self.W_s.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, hidden_dim: int,
               rng: np.random.Generator) -> 'MatchLstmParams':
        for name in ('W_s', 'W_t', 'W_m'):
            store.add(f"{prefix}.{name}", glorot_uniform(rng, (hidden_dim, hidden_dim)))
        store.add(f"{prefix}.w_e", glorot_uniform(rng, (1, hidden_dim))[0])
        LstmParams.create(store, f"{prefix}.lstm", 2 * hidden_dim, hidden_dim, rng)
        return cls.bind(store, prefix)

    @classmethod
    def bind(cls, store: ParamStore, prefix: str, grads: bool = False) -> 'MatchLstmParams':
        getter = store.grad if grads else store.param
        return cls(
            W_s=getter(f"{prefix}.W_s"),
            W_t=getter(f"{prefix}.W_t"),
            W_m=getter(f"{prefix}.W_m"),
            w_e=getter(f"{prefix}.w_e"),
            lstm=LstmParams.bind(store, f"{prefix}.lstm", grads=grads),
        )


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@attrs.define
class _StepCache:
    x: Tensor
    h_prev: Tensor
    C_prev: Tensor
    i: Tensor
    f: Tensor
    o: Tensor
    g: Tensor
    tanh_C: Tensor
    mask: Tensor


def _check_lstm_dims(x: Tensor, prev: LstmState, params: LstmParams) -> None:
    d, e = params.hidden_dim, params.input_dim
    if x.shape[-1] != e or prev.h.shape[-1] != d or prev.C.shape[-1] != d:
        raise ShapeError(
            f"lstm_step shape mismatch: x {x.shape}, h {prev.h.shape}, C {prev.C.shape}, "
            f"expected input {e} and hidden {d}"
        )


def lstm_step_cached(x: Tensor, prev: LstmState, params: LstmParams,
                     mask: Optional[Tensor] = None) -> Tuple[LstmState, _StepCache]:
    """One LSTM step on a batch (B, e) with an optional (B,) step mask."""
    _check_lstm_dims(x, prev, params)
    h_prev, C_prev = prev.h, prev.C
    i = sigmoid(x @ params.W_i.T + h_prev @ params.U_i.T + params.b_i)
    f = sigmoid(x @ params.W_f.T + h_prev @ params.U_f.T + params.b_f)
    o = sigmoid(x @ params.W_o.T + h_prev @ params.U_o.T + params.b_o)
    g = np.tanh(x @ params.W_c.T + h_prev @ params.U_c.T + params.b_c)
    C_new = f * C_prev + i * g
    tanh_C = np.tanh(C_new)
    h_new = o * tanh_C
    if mask is None:
        mask = np.ones(h_new.shape[:-1], dtype=DTYPE)
    m = mask[..., None]
    state = LstmState(h=m * h_new + (1.0 - m) * h_prev, C=m * C_new + (1.0 - m) * C_prev)
    return state, _StepCache(x, h_prev, C_prev, i, f, o, g, tanh_C, m)


def lstm_step(x: Tensor, prev: LstmState, params: LstmParams) -> LstmState:
    """
    Single LSTM step: sigmoid gates, ``C = f*C_prev + i*tanh(W_c x + U_c h_prev + b_c)``,
    ``h = o*tanh(C)``. Works on one vector or a batch.
    """
    x = np.asarray(x, dtype=DTYPE)
    return lstm_step_cached(x, prev, params)[0]


def lstm_step_backward(d_h: Tensor, d_C: Tensor, cache: _StepCache, params: LstmParams,
                       grads: LstmParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Backward of one step. Returns (d_x, d_h_prev, d_C_prev)."""
    m = cache.mask
    d_h_new = m * d_h
    d_C_new = m * d_C + d_h_new * cache.o * (1.0 - cache.tanh_C ** 2)
    d_C_prev = (1.0 - m) * d_C + d_C_new * cache.f
    d_h_prev = (1.0 - m) * d_h

    d_zi = d_C_new * cache.g * cache.i * (1.0 - cache.i)
    d_zf = d_C_new * cache.C_prev * cache.f * (1.0 - cache.f)
    d_zo = d_h_new * cache.tanh_C * cache.o * (1.0 - cache.o)
    d_zc = d_C_new * cache.i * (1.0 - cache.g ** 2)

    d_x = np.zeros_like(cache.x)
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    h2 = cache.h_prev.reshape(-1, cache.h_prev.shape[-1])
    for gate, d_z in (('i', d_zi), ('f', d_zf), ('o', d_zo), ('c', d_zc)):
        d_z2 = d_z.reshape(-1, d_z.shape[-1])
        getattr(grads, f"W_{gate}")[...] += d_z2.T @ x2
        getattr(grads, f"U_{gate}")[...] += d_z2.T @ h2
        getattr(grads, f"b_{gate}")[...] += d_z2.sum(axis=0)
        d_x += d_z @ getattr(params, f"W_{gate}")
        d_h_prev = d_h_prev + d_z @ getattr(params, f"U_{gate}")
    return d_x, d_h_prev, d_C_prev


def zero_state(batch: int, hidden_dim: int) -> LstmState:
    return LstmState(h=np.zeros((batch, hidden_dim)), C=np.zeros((batch, hidden_dim)))


def lstm_run(X: Tensor, params: LstmParams, init: Optional[LstmState] = None,
             mask: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, List[_StepCache]]:
    """
    Batched LSTM over X (B, T, e). Returns (H, C, caches) with H and C of shape (B, T, d).
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 3:
        raise ShapeError(f"lstm_run expects (batch, steps, input), got {X.shape}")
    B, T, _ = X.shape
    if T == 0:
        raise ShapeError("lstm_run on an empty sequence")
    state = init if init is not None else zero_state(B, params.hidden_dim)
    H = np.zeros((B, T, params.hidden_dim))
    C = np.zeros((B, T, params.hidden_dim))
    caches = []
    for t in range(T):
        state, cache = lstm_step_cached(X[:, t], state, params, None if mask is None else mask[:, t])
        H[:, t], C[:, t] = state.h, state.C
        caches.append(cache)
    return H, C, caches


def lstm_run_backward(d_H: Tensor, caches: List[_StepCache], params: LstmParams, grads: LstmParams,
                      d_C_last: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Backward of ``lstm_run``. ``d_H`` is the loss gradient w.r.t. every output h (B, T, d).

    Returns (d_X, d_h0, d_C0).
    """
    B, T, d = d_H.shape
    d_X = np.zeros((B, T, caches[0].x.shape[-1]))
    d_h = np.zeros((B, d))
    d_C = np.zeros((B, d)) if d_C_last is None else d_C_last.copy()
    for t in reversed(range(T)):
        d_h = d_h + d_H[:, t]
        d_X[:, t], d_h, d_C = lstm_step_backward(d_h, d_C, caches[t], params, grads)
    return d_X, d_h, d_C


def lstm_forward(X: Sequence[Tensor], params: LstmParams,
                 init: Optional[LstmState] = None) -> List[LstmState]:
    """
    Fold ``lstm_step`` over an unbatched sequence of input vectors.

    ``init`` defaults to zeros; a supplied initial cell state (computed by an earlier layer)
    seeds the recurrence.

    Raises:
        ShapeError: on an empty sequence or mismatched dimensions
    """
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError(f"lstm_forward expects a non-empty (steps, input) sequence, got {X.shape}")
    batch_init = None
    if init is not None:
        batch_init = LstmState(h=np.atleast_2d(init.h), C=np.atleast_2d(init.C))
    H, C, _ = lstm_run(X[None], params, batch_init)
    return [LstmState(h=H[0, t], C=C[0, t]) for t in range(X.shape[0])]


# ---------------------------------------------------------------------------
# match-LSTM
# ---------------------------------------------------------------------------

@attrs.define
class _MatchStepCache:
    u: Tensor
    alpha: Tensor
    h_m_prev: Tensor
    lstm: _StepCache


@attrs.define
class MatchLstmResult:
    H: Tensor
    C: Tensor
    alpha: Tensor
    caches: List[_MatchStepCache]
    premise_proj: Tensor


def mlstm_run(H_p: Tensor, H_h: Tensor, params: MatchLstmParams, init_C0: Optional[Tensor] = None,
              mask_p: Optional[Tensor] = None, mask_h: Optional[Tensor] = None) -> MatchLstmResult:
    """
    Batched match-LSTM over premise states H_p (B, M, d) and hypothesis states H_h (B, N, d).

    At step t the match score of premise position j is
    ``w_e . tanh(W_s h_p_j + W_t h_h_t + W_m h_m_{t-1})``; the attention-weighted premise summary
    ``a_t`` is concatenated with ``h_h_t`` and fed to the inner LSTM whose initial cell state is
    ``init_C0``.
    """
    H_p = np.asarray(H_p, dtype=DTYPE)
    H_h = np.asarray(H_h, dtype=DTYPE)
    d = params.hidden_dim
    if H_p.ndim != 3 or H_h.ndim != 3 or H_p.shape[-1] != d or H_h.shape[-1] != d \
            or H_p.shape[0] != H_h.shape[0]:
        raise ShapeError(f"mlstm shape mismatch: premise {H_p.shape}, hypothesis {H_h.shape}, d={d}")
    B, M, _ = H_p.shape
    N = H_h.shape[1]
    if M == 0 or N == 0:
        raise ShapeError("mlstm needs at least one premise and one hypothesis step")
    if mask_p is None:
        mask_p = np.ones((B, M))

    premise_proj = H_p @ params.W_s.T
    C0 = np.zeros((B, d)) if init_C0 is None else np.broadcast_to(init_C0, (B, d)).astype(DTYPE)
    state = LstmState(h=np.zeros((B, d)), C=C0)
    H = np.zeros((B, N, d))
    C = np.zeros((B, N, d))
    alphas = np.zeros((B, N, M))
    caches = []
    for t in range(N):
        state, cache = mlstm_step_cached(H_h[:, t], state, H_p, premise_proj, params, mask_p,
                                         None if mask_h is None else mask_h[:, t])
        H[:, t], C[:, t] = state.h, state.C
        alphas[:, t] = cache.alpha
        caches.append(cache)
    return MatchLstmResult(H=H, C=C, alpha=alphas, caches=caches, premise_proj=premise_proj)


def mlstm_step_cached(h_h: Tensor, prev: LstmState, H_p: Tensor, premise_proj: Tensor,
                      params: MatchLstmParams, mask_p: Tensor,
                      mask: Optional[Tensor] = None) -> Tuple[LstmState, _MatchStepCache]:
    """
    One match-LSTM step for hypothesis states h_h (B, d) against premise states H_p (B, M, d).

    ``premise_proj`` is ``H_p @ W_s.T``, computed once per sequence.
    """
    q = h_h @ params.W_t.T + prev.h @ params.W_m.T
    u = np.tanh(premise_proj + q[:, None, :])
    scores = np.where(mask_p > 0, u @ params.w_e, MASKED_SCORE)
    alpha = softmax(scores, axis=-1)
    a = np.einsum('bm,bmd->bd', alpha, H_p)
    x = np.concatenate([a, h_h], axis=-1)
    state, lstm_cache = lstm_step_cached(x, prev, params.lstm, mask)
    return state, _MatchStepCache(u=u, alpha=alpha, h_m_prev=prev.h, lstm=lstm_cache)


def mlstm_run_backward(d_H: Tensor, result: MatchLstmResult, H_p: Tensor, H_h: Tensor,
                       params: MatchLstmParams, grads: MatchLstmParams,
                       d_C_last: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """Backward of ``mlstm_run``. Returns (d_H_p, d_H_h, d_C0)."""
    B, N, d = d_H.shape
    d_H_p = np.zeros_like(H_p)
    d_H_h = np.zeros_like(H_h)
    d_proj = np.zeros_like(result.premise_proj)
    d_h = np.zeros((B, d))
    d_C = np.zeros((B, d)) if d_C_last is None else d_C_last.copy()
    for t in reversed(range(N)):
        cache = result.caches[t]
        d_h = d_h + d_H[:, t]
        d_x, d_h_prev, d_C = lstm_step_backward(d_h, d_C, cache.lstm, params.lstm, grads.lstm)
        d_a, d_H_h[:, t] = d_x[:, :d], d_x[:, d:]

        d_alpha = np.einsum('bmd,bd->bm', H_p, d_a)
        d_H_p += cache.alpha[:, :, None] * d_a[:, None, :]
        d_scores = softmax_backward(d_alpha, cache.alpha)
        grads.w_e[...] += np.einsum('bm,bmd->d', d_scores, cache.u)
        d_u = d_scores[:, :, None] * params.w_e[None, None, :] * (1.0 - cache.u ** 2)
        d_proj += d_u
        d_q = d_u.sum(axis=1)
        grads.W_t[...] += d_q.T @ H_h[:, t]
        d_H_h[:, t] += d_q @ params.W_t
        grads.W_m[...] += d_q.T @ cache.h_m_prev
        d_h = d_h_prev + d_q @ params.W_m

    grads.W_s[...] += np.einsum('bmd,bme->de', d_proj, H_p)
    d_H_p += d_proj @ params.W_s
    return d_H_p, d_H_h, d_C


def mlstm_forward(H_p: Sequence[Tensor], H_h: Sequence[Tensor], init_C0: Tensor,
                  params: MatchLstmParams) -> List[LstmState]:
    """Unbatched match-LSTM: one premise (M, d) against one hypothesis (N, d)."""
    result = mlstm_run(np.asarray(H_p)[None], np.asarray(H_h)[None], params,
                       np.asarray(init_C0, dtype=DTYPE)[None])
    return [LstmState(h=result.H[0, t], C=result.C[0, t]) for t in range(result.H.shape[1])]


def mlstm_attention(H_p: Sequence[Tensor], H_h: Sequence[Tensor], init_C0: Tensor,
                    params: MatchLstmParams) -> Tensor:
    """Attention weights (N, M) of an unbatched match-LSTM run."""
    result = mlstm_run(np.asarray(H_p)[None], np.asarray(H_h)[None], params,
                       np.asarray(init_C0, dtype=DTYPE)[None])
    return result.alpha[0]


# ---------------------------------------------------------------------------
# Two-level hierarchical softmax
# ---------------------------------------------------------------------------

@attrs.define
class HierSoftmaxLayout:
    vocab_size: int
    block_size: int
    class_count: int
    word_to_class: np.ndarray
    word_to_index: np.ndarray

    @classmethod
    def for_vocab(cls, vocab_size: int) -> 'HierSoftmaxLayout':
        """
        Contiguous blocks over frequency-sorted ids: ``class = id // block``.
        """
        if vocab_size < 2:
            raise ShapeError(f"Hierarchical softmax needs at least 2 words, got {vocab_size}")
        target_classes = math.ceil(math.sqrt(vocab_size))
        block_size = math.ceil(vocab_size / target_classes)
        class_count = math.ceil(vocab_size / block_size)
        ids = np.arange(vocab_size)
        return cls(vocab_size, block_size, class_count, ids // block_size, ids % block_size)

    def class_size(self, c: int) -> int:
        return min(self.block_size, self.vocab_size - c * self.block_size)


@attrs.define
class HierSoftmaxParams:
    layout: HierSoftmaxLayout
    class_W: Tensor
    class_b: Tensor
    word_W: List[Tensor]
    word_b: List[Tensor]

    @property
    def input_dim(self) -> int:
        return self.class_W.shape[1]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, input_dim: int, vocab_size: int,
               rng: np.random.Generator) -> 'HierSoftmaxParams':
        layout = HierSoftmaxLayout.for_vocab(vocab_size)
        store.add(f"{prefix}.class_W", glorot_uniform(rng, (layout.class_count, input_dim)))
        store.add(f"{prefix}.class_b", np.zeros(layout.class_count))
        for c in range(layout.class_count):
            store.add(f"{prefix}.word_W.{c}", glorot_uniform(rng, (layout.class_size(c), input_dim)))
            store.add(f"{prefix}.word_b.{c}", np.zeros(layout.class_size(c)))
        return cls.bind(store, prefix, vocab_size)

    @classmethod
    def bind(cls, store: ParamStore, prefix: str, vocab_size: int, grads: bool = False,
             layout: Optional[HierSoftmaxLayout] = None) -> 'HierSoftmaxParams':
        getter = store.grad if grads else store.param
        layout = layout or HierSoftmaxLayout.for_vocab(vocab_size)
        return cls(
            layout=layout,
            class_W=getter(f"{prefix}.class_W"),
            class_b=getter(f"{prefix}.class_b"),
            word_W=[getter(f"{prefix}.word_W.{c}") for c in range(layout.class_count)],
            word_b=[getter(f"{prefix}.word_b.{c}") for c in range(layout.class_count)],
        )

    @staticmethod
    def block_names(prefix: str, c: int) -> Tuple[str, str]:
        return f"{prefix}.word_W.{c}", f"{prefix}.word_b.{c}"


def _check_hsoftmax_input(h: Tensor, params: HierSoftmaxParams) -> None:
    if h.shape[-1] != params.input_dim:
        raise ShapeError(f"hsoftmax input has size {h.shape[-1]}, layer expects {params.input_dim}")


def hsoftmax_log_distribution(h: Tensor, params: HierSoftmaxParams) -> Tensor:
    """Log-probabilities over the whole vocabulary for h (d_in,) or (B, d_in)."""
    h = np.asarray(h, dtype=DTYPE)
    _check_hsoftmax_input(h, params)
    layout = params.layout
    class_logp = log_softmax(h @ params.class_W.T + params.class_b)
    out = np.zeros(h.shape[:-1] + (layout.vocab_size,))
    for c in range(layout.class_count):
        start = c * layout.block_size
        word_logp = log_softmax(h @ params.word_W[c].T + params.word_b[c])
        out[..., start:start + layout.class_size(c)] = class_logp[..., c:c + 1] + word_logp
    return out


def hsoftmax_distribution(h: Tensor, params: HierSoftmaxParams) -> Tensor:
    """``p(word | h) = p(class(word) | h) * p(word | class, h)`` over the whole vocabulary."""
    h = np.asarray(h, dtype=DTYPE)
    _check_hsoftmax_input(h, params)
    layout = params.layout
    class_p = softmax(h @ params.class_W.T + params.class_b)
    out = np.zeros(h.shape[:-1] + (layout.vocab_size,))
    for c in range(layout.class_count):
        start = c * layout.block_size
        word_p = softmax(h @ params.word_W[c].T + params.word_b[c])
        out[..., start:start + layout.class_size(c)] = class_p[..., c:c + 1] * word_p
    return out


def hsoftmax_log_prob(h: Tensor, target_word: int, params: HierSoftmaxParams) -> float:
    """
    Log-probability of one target word, touching only the class layer and the target's block.

    Raises:
        ShapeError: if ``target_word`` is not a vocabulary index
    """
    h = np.asarray(h, dtype=DTYPE)
    _check_hsoftmax_input(h, params)
    layout = params.layout
    if not 0 <= int(target_word) < layout.vocab_size:
        raise ShapeError(f"Word index {target_word} outside vocabulary of size {layout.vocab_size}")
    c = int(layout.word_to_class[target_word])
    k = int(layout.word_to_index[target_word])
    class_logp = log_softmax(h @ params.class_W.T + params.class_b)
    word_logp = log_softmax(h @ params.word_W[c].T + params.word_b[c])
    return float(class_logp[c] + word_logp[k])


def hsoftmax_nll(H: Tensor, targets: np.ndarray, weights: Tensor, params: HierSoftmaxParams,
                 grads: Optional[HierSoftmaxParams] = None) -> Tuple[float, Tensor]:
    """
    Weighted negative log-likelihood of ``targets`` (R,) under rows of H (R, d_in).

    When ``grads`` is given, parameter gradients are accumulated into it; only the class layer
    and the blocks of classes that occur among the weighted targets receive gradient.
    Returns (loss, d_H).
    """
    H = np.asarray(H, dtype=DTYPE)
    _check_hsoftmax_input(H, params)
    layout = params.layout
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= layout.vocab_size):
        raise ShapeError(f"Target index outside vocabulary of size {layout.vocab_size}")
    active = np.nonzero(weights)[0]
    d_H = np.zeros_like(H)
    if active.size == 0:
        return 0.0, d_H

    H_act = H[active]
    w_act = weights[active]
    tgt_class = layout.word_to_class[targets[active]]
    tgt_index = layout.word_to_index[targets[active]]

    class_logp = log_softmax(H_act @ params.class_W.T + params.class_b)
    rows = np.arange(active.size)
    loss = -float(np.sum(w_act * class_logp[rows, tgt_class]))
    d_class = np.exp(class_logp)
    d_class[rows, tgt_class] -= 1.0
    d_class *= w_act[:, None]
    d_H_act = d_class @ params.class_W
    if grads is not None:
        grads.class_W[...] += d_class.T @ H_act
        grads.class_b[...] += d_class.sum(axis=0)

    for c in np.unique(tgt_class):
        sel = np.nonzero(tgt_class == c)[0]
        H_c = H_act[sel]
        word_logp = log_softmax(H_c @ params.word_W[c].T + params.word_b[c])
        sub = np.arange(sel.size)
        loss -= float(np.sum(w_act[sel] * word_logp[sub, tgt_index[sel]]))
        d_word = np.exp(word_logp)
        d_word[sub, tgt_index[sel]] -= 1.0
        d_word *= w_act[sel][:, None]
        d_H_act[sel] += d_word @ params.word_W[c]
        if grads is not None:
            grads.word_W[c][...] += d_word.T @ H_c
            grads.word_b[c][...] += d_word.sum(axis=0)

    d_H[active] = d_H_act
    return loss, d_H


def hsoftmax_target_log_probs(H: Tensor, targets: np.ndarray, params: HierSoftmaxParams) -> Tensor:
    """Log-probability of each row's target word; rows of H (R, d_in), targets (R,)."""
    H = np.asarray(H, dtype=DTYPE)
    _check_hsoftmax_input(H, params)
    layout = params.layout
    targets = np.asarray(targets, dtype=np.int64)
    tgt_class = layout.word_to_class[targets]
    tgt_index = layout.word_to_index[targets]
    rows = np.arange(targets.size)
    out = log_softmax(H @ params.class_W.T + params.class_b)[rows, tgt_class]
    for c in np.unique(tgt_class):
        sel = np.nonzero(tgt_class == c)[0]
        word_logp = log_softmax(H[sel] @ params.word_W[c].T + params.word_b[c])
        out[sel] += word_logp[np.arange(sel.size), tgt_index[sel]]
    return out
