import asyncio
import logging
import os
import tempfile
import traceback
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Callable, List, Sequence, TypeVar, Union

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')

FNV64_OFFSET = 0xcbf29ce484222325
FNV64_PRIME = 0x100000001b3
FNV32_OFFSET = 0x811c9dc5
FNV32_PRIME = 0x01000193


def fnv1a_64(data: bytes) -> str:
    """FNV-1a 64-bit hash of ``data`` as a 16-character lowercase hex string."""
    value = FNV64_OFFSET
    for byte in data:
        value ^= byte
        value = (value * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return f"{value:016x}"


def fnv1a_32(text: str) -> int:
    value = FNV32_OFFSET
    for byte in text.encode('utf-8'):
        value ^= byte
        value = (value * FNV32_PRIME) & 0xFFFFFFFF
    return value


def derive_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """
    Named sub-stream of the run seed.

    Every random draw in a run goes through here, so one seed reproduces the whole run and
    two streams with different names never share state.
    """
    return np.random.default_rng([int(seed), fnv1a_32(name), int(index)])


def file_hash(path: Union[str, Path]) -> str:
    with open(path, 'rb') as handle:
        return fnv1a_64(handle.read())


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    """Write ``payload`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except Exception:
        logger.error(f"Atomic write to {path} failed")
        logger.error(traceback.format_exc())
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def run_in_executor(executor, func, *args):
    """Run a sync function in an executor."""
    loop = asyncio.get_event_loop()
    return loop.run_in_executor(executor, partial(func, *args))


def run_async(coro):
    """Run an async function synchronously."""
    loop = asyncio.new_event_loop()
    asyncio.set_event_loop(loop)
    try:
        return loop.run_until_complete(coro)
    finally:
        loop.close()


def parallel_map(func: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """
    Apply ``func`` to every item, preserving input order in the result.

    With ``workers <= 1`` the map runs inline. Otherwise items are spread over a thread pool;
    callers must make ``func`` depend only on its argument so both paths agree.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    async def gather_all():
        with ThreadPoolExecutor(max_workers=workers) as executor:
            tasks = [run_in_executor(executor, func, item) for item in items]
            return await asyncio.gather(*tasks)

    return list(run_async(gather_all()))

