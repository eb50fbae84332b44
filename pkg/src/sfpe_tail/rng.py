"""Counter-based random substreams.

Every unit of simulated work (a block of cycles, a block of walks) draws
from its own Philox stream whose key is derived from the master seed, a
label path, and the block index. Results therefore do not depend on how
blocks are scheduled across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_BLOCK = 4096


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a hash."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


@dataclass(frozen=True)
class Stream:
    """Handle on a family of substreams below ``(seed, path)``."""

    seed: int
    path: tuple[int, ...] = field(default=())

    def child(self, name: str | int) -> "Stream":
        key = name if isinstance(name, int) else fnv1a64(name) & 0xFFFFFFFF
        return Stream(self.seed, self.path + (key,))

    def generator(self, index: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & MASK64, spawn_key=self.path + (int(index),))
        return np.random.Generator(np.random.Philox(ss))


def as_stream(stream: Stream | int | None) -> Stream:
    if isinstance(stream, Stream):
        return stream
    if stream is None:
        return Stream(0)
    return Stream(int(stream))


def block_sizes(n_total: int, block: int = DEFAULT_BLOCK) -> list[int]:
    n_total = int(n_total)
    if n_total <= 0:
        return []
    full, rest = divmod(n_total, block)
    return [block] * full + ([rest] if rest else [])


def run_blocks(
    fn: Callable,
    stream: Stream,
    n_total: int,
    args: Sequence = (),
    block: int = DEFAULT_BLOCK,
    mapper: Callable | None = None,
) -> list:
    """Evaluate ``fn(*args, rng, size)`` for each block, in block order.

    ``mapper`` is any ``map``-like callable (e.g. ``Executor.map``); the
    caller owns it. Output order follows block index regardless of mapper.
    """
    sizes = block_sizes(n_total, block)
    tasks = [(fn, tuple(args), stream, k, size) for k, size in enumerate(sizes)]
    m = mapper or map
    return list(m(_run_task, tasks))


def _run_task(task):
    fn, args, stream, k, size = task
    return fn(*args, stream.generator(k), size)


def concat(results: Iterable[dict], key: str) -> np.ndarray:
    return np.concatenate([r[key] for r in results])
