"""
Numeric substrate: dense math, the parameter store with gradient slots, Adam and
finite-difference gradient checking.

All values are 64-bit floats. Gradients are derived by hand per layer and accumulated into
the store; nothing here builds a computation graph.
"""
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import attrs
import numpy as np

from .exceptions import GradientCheckError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

DTYPE = np.float64


def _unit_interval(instance, attribute, value):
    if not 0.0 < value < 1.0:
        raise ValueError(f"{attribute.name} must lie in (0, 1), got {value}")


@attrs.define(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = attrs.field(default=0.9, validator=_unit_interval)
    beta2: float = attrs.field(default=0.999, validator=_unit_interval)
    epsilon: float = 1e-8


@attrs.define
class ParamEntry:
    param: Tensor
    grad: Tensor
    adam_m: Tensor
    adam_v: Tensor
    # Sparse entries (latent tables) update only rows that received gradient, each row
    # keeping its own Adam step count.
    sparse_rows: bool = False
    row_steps: Optional[np.ndarray] = None
    touched: set = attrs.field(factory=set)
    trainable: bool = True


class ParamStore:
    """Named tensors of one model, each with gradient and Adam slots."""

    def __init__(self) -> None:
        self.entries: Dict[str, ParamEntry] = {}
        self.step_count: int = 0

    def add(self, name: str, value: Tensor, sparse_rows: bool = False,
            trainable: bool = True) -> Tensor:
        if name in self.entries:
            raise ValueError(f"Parameter '{name}' already exists")
        value = np.array(value, dtype=DTYPE)
        if value.ndim == 0:
            value = value.reshape(1)
        self.entries[name] = ParamEntry(
            param=value,
            grad=np.zeros_like(value),
            adam_m=np.zeros_like(value),
            adam_v=np.zeros_like(value),
            sparse_rows=sparse_rows,
            row_steps=np.zeros(value.shape[0], dtype=np.int64) if sparse_rows else None,
            trainable=trainable,
        )
        return self.entries[name].param

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def names(self) -> List[str]:
        return list(self.entries)

    def param(self, name: str) -> Tensor:
        try:
            return self.entries[name].param
        except KeyError:
            raise KeyError(f"Unknown parameter '{name}'") from None

    def grad(self, name: str) -> Tensor:
        try:
            return self.entries[name].grad
        except KeyError:
            raise KeyError(f"Unknown parameter '{name}'") from None

    def mark_rows(self, name: str, rows: Sequence[int]) -> None:
        self.entries[name].touched.update(int(row) for row in rows)

    def zero_grad(self) -> None:
        for entry in self.entries.values():
            entry.grad.fill(0.0)
            entry.touched.clear()

    def size(self, names: Optional[Sequence[str]] = None) -> int:
        names = self.names() if names is None else names
        return int(sum(self.entries[name].param.size for name in names))

    def snapshot(self) -> Dict[str, Tensor]:
        return {name: entry.param.copy() for name, entry in self.entries.items()}

    def restore(self, values: Dict[str, Tensor]) -> None:
        for name, value in values.items():
            target = self.param(name)
            if target.shape != value.shape:
                raise ShapeError(f"Cannot restore '{name}': shape {value.shape} != {target.shape}")
            target[...] = value


def check_finite(values: Tensor, name: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"Non-finite values in '{name}'", param_name=name)


def _finite_output(values: Tensor, op: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{op} produced non-finite values")
    return values


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, int]) -> Tensor:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows and gives exactly 0.5 at zero.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dense_forward(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """
    Fully connected layer, ``output_i = sum_j weights[i, j] * input[j] + bias[i]``.

    ``input`` may carry leading batch axes; the last axis must match ``weights.shape[1]``.

    Raises:
        ShapeError: if the shapes of input, weights and bias disagree
    """
    input = np.asarray(input, dtype=DTYPE)
    if weights.ndim != 2 or input.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"dense_forward shape mismatch: input {input.shape}, weights {weights.shape}, "
            f"bias {bias.shape}"
        )
    return _finite_output(input @ weights.T + bias, "dense_forward")


def dense_backward(d_out: Tensor, input: Tensor, weights: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of ``dense_forward``: returns (d_input, d_weights, d_bias)."""
    d_input = d_out @ weights
    flat_out = d_out.reshape(-1, d_out.shape[-1])
    flat_in = np.asarray(input).reshape(-1, input.shape[-1])
    return d_input, flat_out.T @ flat_in, flat_out.sum(axis=0)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return _finite_output(exps / np.sum(exps, axis=axis, keepdims=True), "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise ShapeError("log_softmax of an empty vector")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return _finite_output(shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True)), "log_softmax")


def softmax_backward(d_probs: Tensor, probs: Tensor, axis: int = -1) -> Tensor:
    return probs * (d_probs - np.sum(d_probs * probs, axis=axis, keepdims=True))


def global_grad_norm(store: ParamStore) -> float:
    return float(np.sqrt(sum(float(np.sum(entry.grad ** 2)) for entry in store.entries.values())))


def clip_gradients(store: ParamStore, max_norm: Optional[float]) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    norm = global_grad_norm(store)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for entry in store.entries.values():
            entry.grad *= scale
    return norm


def adam_step(store: ParamStore, cfg: AdamConfig) -> ParamStore:
    """
    Apply one bias-corrected Adam update to every trainable entry, then zero the gradients.

    Sparse-row entries only move the rows marked as touched since the last step.

    Raises:
        NumericalError: if any gradient is non-finite (names the parameter)
    """
    for name, entry in store.entries.items():
        if entry.trainable:
            check_finite(entry.grad, name)

    step = store.step_count + 1
    for name, entry in store.entries.items():
        if not entry.trainable:
            continue
        if entry.sparse_rows:
            if not entry.touched:
                continue
            rows = np.array(sorted(entry.touched), dtype=np.int64)
            grad = entry.grad[rows]
            entry.adam_m[rows] = cfg.beta1 * entry.adam_m[rows] + (1.0 - cfg.beta1) * grad
            entry.adam_v[rows] = cfg.beta2 * entry.adam_v[rows] + (1.0 - cfg.beta2) * grad * grad
            entry.row_steps[rows] += 1
            row_t = entry.row_steps[rows].astype(DTYPE)
            shape = (-1,) + (1,) * (entry.param.ndim - 1)
            m_hat = entry.adam_m[rows] / (1.0 - cfg.beta1 ** row_t).reshape(shape)
            v_hat = entry.adam_v[rows] / (1.0 - cfg.beta2 ** row_t).reshape(shape)
            entry.param[rows] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        else:
            grad = entry.grad
            entry.adam_m *= cfg.beta1
            entry.adam_m += (1.0 - cfg.beta1) * grad
            entry.adam_v *= cfg.beta2
            entry.adam_v += (1.0 - cfg.beta2) * grad * grad
            m_hat = entry.adam_m / (1.0 - cfg.beta1 ** step)
            v_hat = entry.adam_v / (1.0 - cfg.beta2 ** step)
            entry.param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)

    store.step_count = step
    store.zero_grad()
    return store


def finite_diff_grad(loss_fn: Callable[[], float], store: ParamStore, param_name: str,
                     h: float = 1e-4) -> Tensor:
    """
    Central-difference gradient of ``loss_fn`` with respect to one stored parameter.

    ``loss_fn`` takes no arguments and reads the current parameter values from ``store``.

    Raises:
        GradientCheckError: if ``h`` is not positive or ``loss_fn`` is not deterministic
    """
    if not h > 0:
        raise GradientCheckError(f"Finite-difference step must be positive, got {h}")
    first, second = float(loss_fn()), float(loss_fn())
    if first != second:
        raise GradientCheckError(
            f"loss_fn is not deterministic ({first!r} != {second!r}); fix its seed"
        )

    values = store.param(param_name)
    grad = np.zeros_like(values)
    flat_values = values.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_values.size):
        original = flat_values[i]
        flat_values[i] = original + h
        loss_plus = float(loss_fn())
        flat_values[i] = original - h
        loss_minus = float(loss_fn())
        flat_values[i] = original
        flat_grad[i] = (loss_plus - loss_minus) / (2.0 * h)
    return grad
