"""Path-level simulation: killed walks, Gaussian bridges and ladder statistics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from boundaries import BoundarySequence
from concurrency import Block, ReplicateExecutor, RunningMoments, default_executor, merge_moments
from config import SimulationConfig
from diagnostics import report
from errors import DomainError
from increments import IncrementModel, sparre_andersen

LOGGER = logging.getLogger("fpt_lab.walk_sim")

# Upper bound on the number of increments drawn at once for one block.
CHUNK_ELEMENTS = 1 << 20

Threshold = Callable[[int, int], "np.ndarray | float"]


@dataclass
class WalkPath:
    """S_1..S_m of one walk; ``killed_at`` is the first i with S_i <= g_i."""

    values: np.ndarray = field(repr=False)
    killed_at: Optional[int] = None
    seed: Optional[int] = None
    start: float = 0.0

    @property
    def length(self) -> int:
        return int(self.values.size)

    def reversed(self) -> "WalkPath":
        """The reversed walk S~_m = S_{n-m}, m = 1..n, with S_0 = start."""
        full = np.concatenate(([self.start], self.values))
        return WalkPath(values=full[-2::-1].copy(), seed=self.seed, start=float(full[-1]))


def _boundary_threshold(boundary: BoundarySequence) -> Threshold:
    if boundary.family == "constant":
        value = float(boundary.params[0])
        return lambda t0, count: value
    return lambda t0, count: boundary.g(np.arange(t0 + 1, t0 + count + 1))


def _run_until_killed(
    model: IncrementModel,
    rng: np.random.Generator,
    start: np.ndarray,
    threshold: Threshold,
    max_steps: int,
    negate: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Advance all walks until S_i <= threshold or ``max_steps``.

    Returns the kill index (0 for walks still alive) and the position at the
    kill, or at ``max_steps`` for survivors.
    """
    reps = start.size
    kill = np.zeros(reps, dtype=np.int64)
    pos = np.asarray(start, dtype=float).copy()
    alive = np.arange(reps)
    t = 0
    while alive.size and t < max_steps:
        chunk = int(min(max_steps - t, max(1, CHUNK_ELEMENTS // alive.size)))
        steps = model.sample(rng, (alive.size, chunk))
        if negate:
            steps = -steps
        paths = pos[alive, None] + np.cumsum(steps, axis=1)
        below = paths <= threshold(t, chunk)
        hit = below.any(axis=1)
        first = below.argmax(axis=1)
        hit_idx = alive[hit]
        kill[hit_idx] = t + first[hit] + 1
        pos[hit_idx] = paths[hit, first[hit]]
        survivors = ~hit
        pos[alive[survivors]] = paths[survivors, -1]
        alive = alive[survivors]
        t += chunk
    return kill, pos


def simulate_killed(
    model: IncrementModel,
    boundary: BoundarySequence,
    horizon: int,
    rng: np.random.Generator,
    start: float = 0.0,
) -> WalkPath:
    """One walk up to min(tau_g, horizon); the kill is inclusive."""
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    values: List[np.ndarray] = []
    position = start
    t = 0
    while t < horizon:
        chunk = min(horizon - t, 4096)
        path = position + np.cumsum(model.sample(rng, chunk))
        below = np.nonzero(path <= boundary.g(np.arange(t + 1, t + chunk + 1)))[0]
        if below.size:
            values.append(path[: below[0] + 1])
            return WalkPath(values=np.concatenate(values), killed_at=t + int(below[0]) + 1, start=start)
        values.append(path)
        position = float(path[-1])
        t += chunk
    return WalkPath(values=np.concatenate(values), start=start)


@dataclass
class KilledBatch:
    """Per-replicate outcome of killed walks, in replicate order."""

    horizon: int
    kill_index: np.ndarray = field(repr=False)
    position: np.ndarray = field(repr=False)

    @property
    def reps(self) -> int:
        return int(self.kill_index.size)

    @property
    def survived(self) -> np.ndarray:
        return self.kill_index == 0

    def survival_at(self, m: int) -> np.ndarray:
        """Indicator of tau_g > m for m <= horizon."""
        if not 0 <= m <= self.horizon:
            raise DomainError(f"m must lie in [0, {self.horizon}], got {m}")
        return (self.kill_index == 0) | (self.kill_index > m)

    def survival_moments(self, m: Optional[int] = None) -> RunningMoments:
        indicator = self.survival_at(self.horizon if m is None else m).astype(float)
        return RunningMoments.from_values(indicator)


def simulate_killed_batch(
    model: IncrementModel,
    boundary: BoundarySequence,
    horizon: int,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
    start: float = 0.0,
    stream: str = "killed",
) -> KilledBatch:
    """Vectorised killed walks with alive-set compaction, one RNG stream per block."""
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    executor = executor or default_executor()
    threshold = _boundary_threshold(boundary)

    def run_block(block: Block) -> Tuple[np.ndarray, np.ndarray]:
        return _run_until_killed(model, block.rng, np.full(block.size, start), threshold, horizon)

    parts = executor.map_blocks(run_block, reps, seed, stream)
    return KilledBatch(
        horizon=horizon,
        kill_index=np.concatenate([p[0] for p in parts]),
        position=np.concatenate([p[1] for p in parts]),
    )


def killed_score_moments(
    model: IncrementModel,
    boundary: BoundarySequence,
    horizon: int,
    reps: int,
    seed: int,
    score: Callable[[np.ndarray, np.ndarray], np.ndarray],
    executor: Optional[ReplicateExecutor] = None,
    start: float = 0.0,
    stream: str = "killed",
) -> RunningMoments:
    """Moments of score(kill_index, position) over killed walks, reduced per block.

    Blocks use the same streams as :func:`simulate_killed_batch`, so the two
    agree replicate by replicate for equal arguments.
    """
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    executor = executor or default_executor()
    threshold = _boundary_threshold(boundary)

    def run_block(block: Block) -> RunningMoments:
        kill, pos = _run_until_killed(model, block.rng, np.full(block.size, start), threshold, horizon)
        return RunningMoments.from_values(score(kill, pos))

    return merge_moments(executor.map_blocks(run_block, reps, seed, stream))


def simulate_endpoint_batch(
    model: IncrementModel,
    boundary: BoundarySequence,
    n: int,
    k: int,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
    stream: str = "window",
) -> Tuple[np.ndarray, np.ndarray]:
    """Unconditioned walks to time n: indicator of tau_g > k and the endpoint S_n."""
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got n={n}, k={k}")
    executor = executor or default_executor()
    g_values = boundary.values_upto(k)

    def run_block(block: Block) -> Tuple[np.ndarray, np.ndarray]:
        pos = np.zeros(block.size)
        alive = np.ones(block.size, dtype=bool)
        t = 0
        chunk = max(1, CHUNK_ELEMENTS // block.size)
        while t < n:
            width = min(chunk, n - t)
            paths = pos[:, None] + np.cumsum(model.sample(block.rng, (block.size, width)), axis=1)
            if t < k:
                upto = min(width, k - t)
                alive &= ~np.any(paths[:, :upto] <= g_values[t : t + upto], axis=1)
            pos = paths[:, -1]
            t += width
        return alive, pos

    parts = executor.map_blocks(run_block, reps, seed, stream)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def sample_gaussian_bridge(n: int, rng: np.random.Generator) -> WalkPath:
    """Exact Gaussian bridge S_1..S_n with S_n = 0."""
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    values = np.empty(n)
    s = 0.0
    z = rng.standard_normal(n)
    for i in range(n):
        rest = n - i
        s = s + (-s / rest) + math.sqrt((rest - 1) / rest) * z[i]
        values[i] = s
    return WalkPath(values=values)


def simulate_bridge_batch(
    n: int,
    k: int,
    boundary: BoundarySequence,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
    record: Sequence[int] = (),
) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Gaussian bridges of length n, each followed up to step k.

    Returns the indicator of tau_g > k and the positions at the steps listed in
    ``record`` (for all replicates, regardless of killing).
    """
    if not 1 <= k < n:
        raise DomainError(f"need 1 <= k < n, got n={n}, k={k}")
    executor = executor or default_executor()
    g_values = boundary.values_upto(k)
    wanted = sorted(set(int(m) for m in record))
    last = max([k] + wanted)
    if last >= n:
        raise DomainError(f"recorded steps must be < n={n}")

    def run_block(block: Block) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
        s = np.zeros(block.size)
        alive = np.ones(block.size, dtype=bool)
        snapshots: Dict[int, np.ndarray] = {}
        for i in range(last):
            rest = n - i
            z = block.rng.standard_normal(block.size)
            s = s - s / rest + math.sqrt((rest - 1) / rest) * z
            step = i + 1
            if step <= k:
                alive &= s > g_values[i]
            if step in wanted:
                snapshots[step] = s.copy()
        return alive, snapshots

    parts = executor.map_blocks(run_block, reps, seed, "bridge")
    survived = np.concatenate([p[0] for p in parts])
    snaps = {m: np.concatenate([p[1][m] for p in parts]) for m in wanted}
    return survived, snaps


# ---------------------------------------------------------------- ladder


@dataclass
class LadderStats:
    """Ladder-height means and tabulated renewal functions on [0, height_max].

    U counts ascending strict ladder points, V descending ones; both include
    the origin, so U(0) = V(0) = 1.
    """

    model: str
    mean_descending: float
    mean_ascending_dual: float
    se_descending: float
    se_ascending_dual: float
    heights: np.ndarray = field(repr=False)
    U_table: np.ndarray = field(repr=False)
    V_table: np.ndarray = field(repr=False)
    samples_descending: int = 0
    samples_ascending: int = 0
    capped_descending: int = 0
    capped_ascending: int = 0

    @property
    def product(self) -> float:
        return self.mean_descending * self.mean_ascending_dual

    @property
    def product_se(self) -> float:
        return math.hypot(
            self.mean_ascending_dual * self.se_descending,
            self.mean_descending * self.se_ascending_dual,
        )

    def _renewal(self, table: np.ndarray, slope_mean: float, t):
        arr = np.asarray(t, dtype=float)
        top = self.heights[-1]
        inside = np.interp(arr, self.heights, table)
        beyond = table[-1] + (arr - top) / slope_mean
        out = np.where(arr < 0, 0.0, np.where(arr > top, beyond, inside))
        return float(out) if out.ndim == 0 else out

    def U(self, t):
        return self._renewal(self.U_table, self.mean_ascending_dual, t)

    def V(self, t):
        return self._renewal(self.V_table, self.mean_descending, t)


def renewal_table(heights: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Empirical renewal function from i.i.d. ladder heights.

    The sample is read as one cyclic renewal sequence and the count of
    renewals in [0, t] is averaged over every starting point.
    """
    heights = np.asarray(heights, dtype=float)
    if heights.size == 0:
        raise DomainError("no ladder heights to build a renewal table from")
    cumulative = np.concatenate(([0.0], np.cumsum(np.concatenate((heights, heights)))))
    starts = cumulative[: heights.size]
    table = np.empty(grid.size)
    for j, t in enumerate(grid):
        counts = np.searchsorted(cumulative, starts + t, side="right") - np.arange(heights.size)
        table[j] = counts.mean()
    return table


def _ladder_heights(
    model: IncrementModel,
    paths: int,
    seed: int,
    stream: str,
    negate: bool,
    max_steps: int,
    executor: ReplicateExecutor,
) -> Tuple[np.ndarray, int]:
    def run_block(block: Block) -> Tuple[np.ndarray, np.ndarray]:
        return _run_until_killed(model, block.rng, np.zeros(block.size), lambda t0, c: 0.0, max_steps, negate)

    parts = executor.map_blocks(run_block, paths, seed, stream)
    kill = np.concatenate([p[0] for p in parts])
    pos = np.concatenate([p[1] for p in parts])
    reached = kill > 0
    return -pos[reached], int((~reached).sum())


def estimate_ladder_stats(
    model: IncrementModel,
    paths: int,
    height_grid_max: float,
    seed: int,
    grid_points: int = 201,
    executor: Optional[ReplicateExecutor] = None,
    simulation: Optional[SimulationConfig] = None,
    min_paths: int = 10_000,
) -> LadderStats:
    """Estimate E(-S_{T_0}), E(-S~_{T_0}) and the renewal functions U and V."""
    if paths < min_paths:
        raise DomainError(f"paths must be >= {min_paths}, got {paths}")
    if height_grid_max <= 0:
        raise DomainError(f"height_grid_max must be > 0, got {height_grid_max}")
    simulation = simulation or SimulationConfig()
    executor = executor or default_executor()
    cap = simulation.ladder_max_steps

    down, capped_down = _ladder_heights(model, paths, seed, "ladder_descending", False, cap, executor)
    up, capped_up = _ladder_heights(model, paths, seed, "ladder_ascending", True, cap, executor)
    for label, capped in (("descending", capped_down), ("ascending", capped_up)):
        fraction = capped / paths
        if fraction > simulation.cap_warn_fraction:
            report(
                "cap_bias_warning",
                "warning",
                f"{fraction:.2%} of {label} ladder paths hit the {cap}-step cap",
                law=model.name,
                direction=label,
                capped=capped,
            )

    grid = np.linspace(0.0, height_grid_max, grid_points)
    down_m = RunningMoments.from_values(down)
    up_m = RunningMoments.from_values(up)
    stats = LadderStats(
        model=model.name,
        mean_descending=down_m.mean,
        mean_ascending_dual=up_m.mean,
        se_descending=down_m.std_error,
        se_ascending_dual=up_m.std_error,
        heights=grid,
        U_table=renewal_table(up, grid),
        V_table=renewal_table(down, grid),
        samples_descending=down_m.count,
        samples_ascending=up_m.count,
        capped_descending=capped_down,
        capped_ascending=capped_up,
    )
    LOGGER.info(
        "ladder_stats_estimated",
        extra={
            "law": model.name,
            "mean_descending": stats.mean_descending,
            "mean_ascending_dual": stats.mean_ascending_dual,
            "product": stats.product,
            "product_se": stats.product_se,
        },
    )
    return stats


def exact_ladder_stats(model: IncrementModel, height_grid_max: float, grid_points: int = 201) -> LadderStats:
    """Ladder statistics with renewal functions linearised from known means.

    Only the means are exact; U(t) = 1 + t / E(-S~_{T_0}) and V likewise.
    """
    if model.ladder_constants_exact is None:
        raise DomainError(f"no exact ladder constants for {model.name}")
    down, up = model.ladder_constants_exact
    grid = np.linspace(0.0, height_grid_max, grid_points)
    return LadderStats(
        model=model.name,
        mean_descending=down,
        mean_ascending_dual=up,
        se_descending=0.0,
        se_ascending_dual=0.0,
        heights=grid,
        U_table=1.0 + grid / up,
        V_table=1.0 + grid / down,
    )


@dataclass(frozen=True)
class SparreAndersenRow:
    m: int
    empirical: float
    std_error: float
    exact: float

    @property
    def z_score(self) -> float:
        return (self.empirical - self.exact) / self.std_error if self.std_error > 0 else math.inf


def sparre_andersen_check(
    model: IncrementModel,
    m_values: Sequence[int],
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
) -> List[SparreAndersenRow]:
    """Empirical P(T_0 > m) against C(2m, m) 4^{-m}; symmetric laws only."""
    if not model.symmetric:
        raise DomainError(f"C(2m, m) 4^{{-m}} holds only for symmetric laws, {model.name} is not symmetric")
    if not m_values or min(m_values) < 1:
        raise DomainError(f"m values must be >= 1, got {list(m_values)}")
    horizon = max(m_values)
    batch = simulate_killed_batch(
        model, BoundarySequence("constant", (0.0,)), horizon, reps, seed, executor=executor
    )
    rows = []
    for m in m_values:
        moments = batch.survival_moments(m)
        rows.append(SparreAndersenRow(m=m, empirical=moments.mean, std_error=moments.std_error, exact=sparre_andersen(m)))
    return rows


def dump_path_csv(path: str | Path, walk: WalkPath) -> Path:
    """Write (step, value, killed) rows for one path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "value", "killed"])
        for step, value in enumerate(walk.values, start=1):
            writer.writerow([step, repr(float(value)), int(walk.killed_at == step)])
    return path


__all__ = [
    "KilledBatch",
    "LadderStats",
    "SparreAndersenRow",
    "WalkPath",
    "dump_path_csv",
    "estimate_ladder_stats",
    "exact_ladder_stats",
    "killed_score_moments",
    "renewal_table",
    "sample_gaussian_bridge",
    "simulate_bridge_batch",
    "simulate_endpoint_batch",
    "simulate_killed",
    "simulate_killed_batch",
    "sparre_andersen_check",
]
