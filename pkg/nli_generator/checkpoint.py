"""
Bit-exact model persistence.

Layout (little-endian)::

    b"NLIGEN01"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank, rank x u32 dims,
                row-major values
    u32 metadata length, UTF-8 JSON metadata

Besides the model parameters a checkpoint carries the frozen embedding matrix and, for
generators, the latent sampling spread, so it is usable without the original corpus files.
"""
import json
import logging
import struct
import traceback
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .data import EmbeddingMatrix, Vocab
from .exceptions import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    NotACheckpointError,
    VocabMismatchError,
)
from .models import GeneratorModel, NetworkModel, model_from_metadata
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC_PREFIX = b'NLIGEN'
VERSION = b'01'
MAGIC = MAGIC_PREFIX + VERSION

DTYPE_CODES = {'f32': 0, 'f64': 1}
_NUMPY_DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}

EMBEDDINGS_TENSOR = '__embeddings__'
LATENT_SIGMA_TENSOR = '__latent_sigma__'


def _tensor_bytes(name: str, values: np.ndarray, code: int) -> bytes:
    encoded = name.encode('utf-8')
    values = np.ascontiguousarray(values, dtype=_NUMPY_DTYPES[code])
    header = struct.pack('<H', len(encoded)) + encoded + struct.pack('<BB', code, values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    return header + values.tobytes(order='C')


def checkpoint_bytes(model: NetworkModel, dtype: str = 'f64') -> bytes:
    if dtype not in DTYPE_CODES:
        raise CheckpointError(f"Unknown checkpoint dtype '{dtype}', expected f32 or f64")
    code = DTYPE_CODES[dtype]
    tensors = [(name, model.store.param(name)) for name in model.store]
    tensors.append((EMBEDDINGS_TENSOR, model.embeddings.vectors))
    if isinstance(model, GeneratorModel) and model.latent_sigma is not None:
        tensors.append((LATENT_SIGMA_TENSOR, np.asarray(model.latent_sigma)))

    parts = [MAGIC, struct.pack('<I', len(tensors))]
    parts.extend(_tensor_bytes(name, values, code) for name, values in tensors)
    meta = dict(model.metadata(), dtype=dtype)
    payload = json.dumps(meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts.append(struct.pack('<I', len(payload)) + payload)
    return b''.join(parts)


def save_checkpoint(model: NetworkModel, path: Union[str, Path], dtype: str = 'f64') -> None:
    """
    Write ``model`` atomically (temp file + rename).

    Raises:
        CheckpointError: if the file cannot be written (names the path)
    """
    payload = checkpoint_bytes(model, dtype)
    try:
        atomic_write_bytes(path, payload)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {str(e)}") from e
    logger.info(f"Saved {model.kind} checkpoint to {path} ({len(payload)} bytes, {dtype})")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointCorruptError(
                f"truncated while reading {what}: need {size} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Parse checkpoint bytes into (tensors as float64 arrays, metadata)."""
    if len(data) < len(MAGIC) or data[:len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise NotACheckpointError("not a checkpoint: magic bytes do not match")
    if data[len(MAGIC_PREFIX):len(MAGIC)] != VERSION:
        found = data[len(MAGIC_PREFIX):len(MAGIC)].decode('ascii', errors='replace')
        raise CheckpointVersionError(f"unsupported checkpoint version '{found}', expected '{VERSION.decode()}'")

    reader = _Reader(data)
    reader.offset = len(MAGIC)
    (count,) = reader.unpack('<I', 'tensor count')
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack('<H', 'tensor name length')
        try:
            name = reader.take(name_len, 'tensor name').decode('utf-8')
        except UnicodeDecodeError as e:
            raise CheckpointCorruptError(f"tensor name is not UTF-8: {str(e)}", start) from e
        code, rank = reader.unpack('<BB', f"header of '{name}'")
        if code not in _NUMPY_DTYPES:
            raise CheckpointCorruptError(f"unknown dtype code {code} for '{name}'", reader.offset - 2)
        dims = reader.unpack(f"<{rank}I", f"dims of '{name}'") if rank else ()
        dtype = _NUMPY_DTYPES[code]
        size = int(np.prod(dims)) if dims else 1
        raw = reader.take(size * dtype.itemsize, f"values of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.float64)

    (meta_len,) = reader.unpack('<I', 'metadata length')
    meta_start = reader.offset
    try:
        meta = json.loads(reader.take(meta_len, 'metadata').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"metadata is not valid JSON: {str(e)}", meta_start) from e
    if reader.offset != len(data):
        raise CheckpointCorruptError(f"{len(data) - reader.offset} trailing bytes", reader.offset)
    return tensors, meta


def load_checkpoint(path: Union[str, Path], vocab: Optional[Vocab] = None) -> NetworkModel:
    """
    Rebuild the model stored at ``path``.

    Raises:
        NotACheckpointError: wrong magic bytes
        CheckpointVersionError: unsupported format version
        CheckpointCorruptError: truncated or malformed content (with the byte offset)
        VocabMismatchError: ``vocab`` hashes differently from the checkpoint's vocabulary
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {str(e)}") from e
    tensors, meta = read_checkpoint(data)

    if vocab is not None and vocab.hash != meta.get('vocab_hash'):
        raise VocabMismatchError(meta.get('vocab_hash', ''), vocab.hash)
    if EMBEDDINGS_TENSOR not in tensors:
        raise CheckpointCorruptError("checkpoint carries no embedding matrix", len(data))

    embeddings = EmbeddingMatrix(vectors=tensors.pop(EMBEDDINGS_TENSOR))
    latent_sigma = tensors.pop(LATENT_SIGMA_TENSOR, None)
    try:
        model = model_from_metadata(meta, embeddings)
    except (KeyError, TypeError, ConfigError) as e:
        logger.error(f"Checkpoint {path} has unusable metadata: {str(e)}")
        logger.error(traceback.format_exc())
        raise CheckpointCorruptError(f"incomplete metadata: {str(e)}", len(data)) from e

    expected, found = set(model.store.names()), set(tensors)
    if expected != found:
        missing = sorted(expected - found)[:5]
        extra = sorted(found - expected)[:5]
        raise CheckpointCorruptError(f"parameter set differs (missing {missing}, unexpected {extra})", len(data))
    model.store.restore(tensors)
    if isinstance(model, GeneratorModel) and latent_sigma is not None:
        model.latent_sigma = latent_sigma
    logger.info(f"Loaded {model.kind} checkpoint {path} (epochs trained: {model.epochs_trained})")
    return model


def model_vocab(model: NetworkModel) -> Vocab:
    """Vocabulary recorded in a checkpoint's metadata."""
    if not model.vocab_tokens:
        raise CheckpointError(f"{model.kind} checkpoint does not record its vocabulary")
    return Vocab(model.vocab_tokens)
