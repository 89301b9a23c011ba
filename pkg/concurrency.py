"""Replicate-parallel execution engine with per-block counter-based RNG streams."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

LOGGER = logging.getLogger("fpt_lab.concurrency")

T = TypeVar("T")

# Stream tags keep independent experiments on disjoint RNG streams for one master seed.
STREAM_TAGS = {
    "killed": 1,
    "bridge": 2,
    "ladder_descending": 3,
    "ladder_ascending": 4,
    "weighted": 5,
    "window": 6,
    "rayleigh": 7,
    "lg": 8,
    "cascade": 9,
    "tau_tail": 11,
}


def block_generator(master_seed: int, stream: str, block_index: int) -> np.random.Generator:
    """Return the generator owned by one replicate block.

    The stream depends only on (master seed, stream tag, block index), never on
    which worker runs the block.
    """
    tag = STREAM_TAGS.get(stream)
    if tag is None:
        raise KeyError(f"Unknown RNG stream: {stream}")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(tag, int(block_index)))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class Block:
    """A contiguous slice of replicates with its own RNG stream."""

    index: int
    start: int
    size: int
    rng: np.random.Generator


def plan_blocks(reps: int, block_size: int, master_seed: int, stream: str) -> List[Block]:
    if reps < 1:
        raise ValueError(f"reps must be positive, got {reps}")
    if block_size < 1:
        raise ValueError(f"block_size must be positive, got {block_size}")
    count = math.ceil(reps / block_size)
    blocks: List[Block] = []
    for index in range(count):
        start = index * block_size
        size = min(block_size, reps - start)
        blocks.append(Block(index=index, start=start, size=size, rng=block_generator(master_seed, stream, index)))
    return blocks


class RunningMoments:
    """Sufficient statistics (count, sum, sum of squares) with exact merging."""

    def __init__(self, count: int = 0, total: float = 0.0, total_sq: float = 0.0) -> None:
        self.count = count
        self.total = total
        self.total_sq = total_sq

    @classmethod
    def from_values(cls, values: np.ndarray) -> "RunningMoments":
        values = np.asarray(values, dtype=float)
        return cls(int(values.size), float(values.sum()), float(np.dot(values, values)))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        return RunningMoments(
            self.count + other.count,
            self.total + other.total,
            self.total_sq + other.total_sq,
        )

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else math.nan

    @property
    def variance(self) -> float:
        if self.count < 2:
            return math.nan
        mean = self.mean
        var = (self.total_sq - self.count * mean * mean) / (self.count - 1)
        return max(var, 0.0)

    @property
    def std_error(self) -> float:
        if self.count < 2:
            return math.nan
        return math.sqrt(self.variance / self.count)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"RunningMoments(count={self.count}, mean={self.mean:.6g}, se={self.std_error:.3g})"


def merge_moments(parts: Iterable[RunningMoments]) -> RunningMoments:
    result = RunningMoments()
    for part in parts:
        result = result.merge(part)
    return result


class ReplicateExecutor:
    """Runs a block function over replicate blocks on a thread pool.

    Results come back in block order, so any reduction over them is
    independent of the worker count.
    """

    def __init__(self, max_workers: int = 1, block_size: int = 4096) -> None:
        if max_workers < 1:
            raise ValueError(f"max_workers must be positive, got {max_workers}")
        self.max_workers = max_workers
        self.block_size = block_size

    def map_blocks(
        self,
        func: Callable[[Block], T],
        reps: int,
        master_seed: int,
        stream: str,
    ) -> List[T]:
        blocks = plan_blocks(reps, self.block_size, master_seed, stream)
        start_ts = time.time()
        if self.max_workers == 1 or len(blocks) == 1:
            results = [func(block) for block in blocks]
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                results = list(pool.map(func, blocks))
        LOGGER.debug(
            "blocks_completed",
            extra={
                "stream": stream,
                "blocks": len(blocks),
                "reps": reps,
                "workers": self.max_workers,
                "duration_ms": int((time.time() - start_ts) * 1000),
            },
        )
        return results

    def map_items(self, func: Callable[[T], object], items: Sequence[T]) -> List[object]:
        """Run independent deterministic jobs (kernel evaluations) in input order."""
        if self.max_workers == 1 or len(items) <= 1:
            return [func(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            return list(pool.map(func, items))


_DEFAULT_EXECUTOR: Optional[ReplicateExecutor] = None


def default_executor() -> ReplicateExecutor:
    global _DEFAULT_EXECUTOR
    if _DEFAULT_EXECUTOR is None:
        _DEFAULT_EXECUTOR = ReplicateExecutor()
    return _DEFAULT_EXECUTOR


def set_default_executor(executor: ReplicateExecutor) -> None:
    global _DEFAULT_EXECUTOR
    _DEFAULT_EXECUTOR = executor


__all__ = [
    "Block",
    "ReplicateExecutor",
    "RunningMoments",
    "block_generator",
    "default_executor",
    "merge_moments",
    "plan_blocks",
    "set_default_executor",
]
