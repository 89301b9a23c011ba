"""Cascading-failure model: uniform order statistics crossing a load curve.

A system of n components with i.i.d. uniform capacities fails in a cascade;
A_n is the number of components that have failed when the sorted capacities
first rise above the load curve a_i = (theta + i - 1 - g(i)) / n. The event
{A_n >= k} is the survival of the centred exponential walk S_i = i - sum E_j
above 1 - theta + g(i) up to step k, conditioned on returning to 0.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from scipy import integrate, stats

from asymptotics import far_return_value
from boundaries import BoundarySequence, constant, parse_boundary
from concurrency import Block, ReplicateExecutor, default_executor
from config import DiagnosticsConfig, GridConfig
from diagnostics import report
from errors import ConfigError, DomainError
from estimators import (
    EstimateRecord,
    binomial_record,
    estimate_Lg,
    estimate_conditional_survival_weighted,
)
from increments import get_model

try:  # pragma: no cover - allow tests without PyYAML
    import yaml  # type: ignore
except ModuleNotFoundError:  # pragma: no cover
    yaml = None

LOGGER = logging.getLogger("fpt_lab.cascade")

EXACT_MAX_N = 200
QUADRATURE_MAX_N = 3
CHUNK_ELEMENTS = 1 << 20

CASCADE_COLUMNS = ("n", "k", "theta", "method", "value", "se", "seed")


@dataclass
class CascadeConfig:
    n: int
    theta: float
    perturbation: Optional[BoundarySequence] = None
    label: str = ""

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 1:
            raise DomainError(f"n must be a positive integer, got {self.n}")
        self.n = int(self.n)
        if not math.isfinite(self.theta) or self.theta < 0:
            raise DomainError(f"theta must be finite and >= 0, got {self.theta}")
        if self.theta > self.n:
            LOGGER.warning("theta_exceeds_n", extra={"theta": self.theta, "n": self.n})
            report("theta_exceeds_n", "warning", f"theta={self.theta} > n={self.n}: curve saturates", n=self.n)
        if not self.label:
            suffix = f",g={self.perturbation.label}" if self.perturbation is not None else ""
            self.label = f"cascade:n={self.n},theta={self.theta:g}{suffix}"

    def g(self, i):
        if self.perturbation is None:
            return np.zeros(np.shape(i)) if np.ndim(i) else 0.0
        return self.perturbation.g(i)

    def walk_boundary(self) -> BoundarySequence:
        """1 - theta + g(i): the boundary seen by the centred exponential walk."""
        if self.perturbation is None:
            return constant(1.0 - self.theta)
        return self.perturbation.shifted(self.theta - 1.0)


def cascade_curve(cfg: CascadeConfig) -> np.ndarray:
    """a_1..a_n = (theta + i - 1 - g(i)) / n clamped to [0, 1]."""
    i = np.arange(1, cfg.n + 1, dtype=float)
    raw = (cfg.theta + i - 1.0 - np.asarray(cfg.g(np.arange(1, cfg.n + 1)), dtype=float)) / cfg.n
    return np.clip(raw, 0.0, 1.0)


def _sizes_from_sorted(ordered: np.ndarray, curve: np.ndarray) -> np.ndarray:
    above = ordered > curve
    first = above.argmax(axis=1)
    return np.where(above.any(axis=1), first, curve.size)


def simulate_cascade_size(cfg: CascadeConfig, rng: np.random.Generator) -> int:
    """One draw of A_n: the length of the leading run of U_(i) <= a_i."""
    ordered = np.sort(rng.random(cfg.n))
    return int(_sizes_from_sorted(ordered[None, :], cascade_curve(cfg))[0])


def simulate_cascade_batch(
    cfg: CascadeConfig,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
    stream: str = "cascade",
) -> np.ndarray:
    """A_n for ``reps`` independent systems, in replicate order."""
    executor = executor or default_executor()
    curve = cascade_curve(cfg)
    rows_per_chunk = max(1, CHUNK_ELEMENTS // cfg.n)

    def run_block(block: Block) -> np.ndarray:
        out = np.empty(block.size, dtype=np.int64)
        for lo in range(0, block.size, rows_per_chunk):
            hi = min(block.size, lo + rows_per_chunk)
            ordered = np.sort(block.rng.random((hi - lo, cfg.n)), axis=1)
            out[lo:hi] = _sizes_from_sorted(ordered, curve)
        return out

    return np.concatenate(executor.map_blocks(run_block, reps, seed, stream))


def cascade_survival_mc(
    cfg: CascadeConfig,
    k: int,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
) -> EstimateRecord:
    """Empirical P(A_n >= k) with binomial standard error."""
    _check_k(cfg, k)
    sizes = simulate_cascade_batch(cfg, reps, seed, executor)
    record = binomial_record(sizes >= k, method="order_statistics", seed=seed, model="cascade", boundary=cfg.label, n=cfg.n, k=k)
    record.extra = {"theta": cfg.theta}
    return record


def _check_k(cfg: CascadeConfig, k: int) -> None:
    if not 1 <= k <= cfg.n:
        raise DomainError(f"need 1 <= k <= n={cfg.n}, got {k}")


def exact_crossing_probability(
    cfg: CascadeConfig,
    k: int,
    diagnostics: Optional[DiagnosticsConfig] = None,
) -> float:
    """P(U_(i) <= a_i for i = 1..k) for n <= 200.

    Runs over the monotone envelope a'_i = min_{j >= i} a_j and tracks the
    distribution of the number of uniforms below a'_i; given c points below
    a'_{i-1}, the other n - c are uniform on (a'_{i-1}, 1].
    """
    _check_k(cfg, k)
    if cfg.n > EXACT_MAX_N:
        raise DomainError(f"exact recursion is limited to n <= {EXACT_MAX_N}, got {cfg.n}")
    diagnostics = diagnostics or DiagnosticsConfig()
    n = cfg.n
    envelope = np.minimum.accumulate(cascade_curve(cfg)[:k][::-1])[::-1]
    counts = np.arange(n + 1)
    prob = np.zeros(n + 1)
    prob[0] = 1.0
    prev = 0.0
    worst_drift = 0.0
    for i, level in enumerate(envelope, start=1):
        room = 1.0 - prev
        p = 1.0 if room <= 0.0 else min(max((level - prev) / room, 0.0), 1.0)
        # transition[c, c'] = P(c' - c new points | n - c remaining)
        transition = stats.binom.pmf(counts[None, :] - counts[:, None], (n - counts)[:, None], p)
        worst_drift = max(worst_drift, float(np.max(np.abs(transition.sum(axis=1) - 1.0))))
        prob = prob @ transition
        prob[:i] = 0.0
        prev = max(prev, float(level))
    value = float(min(max(prob.sum(), 0.0), 1.0))
    if worst_drift > diagnostics.cancellation_tolerance:
        LOGGER.warning("exact_recursion_unstable", extra={"drift": worst_drift, "n": n, "k": k})
        report("exact_recursion_unstable", "warning", f"transition mass drift {worst_drift:.3g}", n=n, k=k)
    return value


def order_statistic_quadrature(cfg: CascadeConfig, k: int) -> float:
    """Integrate n! over {0 < u_1 < ... < u_n < 1, u_i <= a_i for i <= k}; n <= 3."""
    _check_k(cfg, k)
    if cfg.n > QUADRATURE_MAX_N:
        raise DomainError(f"direct quadrature is limited to n <= {QUADRATURE_MAX_N}, got {cfg.n}")
    n = cfg.n
    curve = cascade_curve(cfg)
    caps = [float(curve[i]) if i < k else 1.0 for i in range(n)]

    def bounds(index: int):
        if index == n - 1:
            return lambda *args: [0.0, caps[index]]
        return lambda *args: [0.0, max(0.0, min(caps[index], args[0]))]

    value, _ = integrate.nquad(
        lambda *u: float(math.factorial(n)),
        [bounds(index) for index in range(n)],
        opts={"epsabs": 1e-12, "epsrel": 1e-12, "limit": 200},
    )
    return float(value)


@dataclass
class CascadeComparison:
    """The cascade probability from the order statistics and from the walk bridge."""

    n: int
    k: int
    theta: float
    order_statistics: EstimateRecord
    weighted: EstimateRecord
    asymptotic: float
    prefactor: float
    prefactor_source: str
    seed: int
    exact: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def joint_se(self) -> float:
        return math.hypot(self.order_statistics.std_error, self.weighted.std_error)

    def rows(self) -> List[Dict[str, Any]]:
        base = {"n": self.n, "k": self.k, "theta": self.theta, "seed": self.seed}
        rows = [
            {**base, "method": "order_statistics", "value": self.order_statistics.value, "se": self.order_statistics.std_error},
            {**base, "method": "weighted_bridge", "value": self.weighted.value, "se": self.weighted.std_error},
            {**base, "method": f"asymptotic_{self.prefactor_source}", "value": self.asymptotic, "se": 0.0},
        ]
        if self.exact is not None:
            rows.append({**base, "method": "exact", "value": self.exact, "se": 0.0})
        return rows


def cascade_vs_bridge(
    cfg: CascadeConfig,
    k: int,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
    grid_config: Optional[GridConfig] = None,
    lg_reps: Optional[int] = None,
) -> CascadeComparison:
    """Order-statistics MC, the weighted estimator on the exponential walk, and far_return_value.

    The order-statistics identity conditions on S_{n+1} = 1 while the walk
    side conditions on S_n = 0, so the two agree only to leading order.
    """
    _check_k(cfg, k)
    if cfg.n - k < 2:
        raise DomainError(f"need n - k >= 2, got n={cfg.n}, k={k}")
    model = get_model("centered_exponential")
    boundary = cfg.walk_boundary()
    ordered = cascade_survival_mc(cfg, k, reps, seed, executor)
    weighted = estimate_conditional_survival_weighted(
        model, boundary, cfg.n, k, reps, seed, grid_config, executor=executor
    )
    if cfg.perturbation is None:
        prefactor, source = cfg.theta, "theta"
    else:
        prefactor = estimate_Lg(model, boundary, k, lg_reps or reps, seed, executor).primary.value
        source = "lg_hat"
    asymptotic = far_return_value(cfg.n, k, prefactor)
    exact = exact_crossing_probability(cfg, k) if cfg.n <= EXACT_MAX_N else None
    LOGGER.info(
        "cascade_compared",
        extra={"n": cfg.n, "k": k, "theta": cfg.theta, "mc": ordered.value, "bridge": weighted.value},
    )
    return CascadeComparison(
        n=cfg.n,
        k=k,
        theta=cfg.theta,
        order_statistics=ordered,
        weighted=weighted,
        asymptotic=asymptotic,
        prefactor=prefactor,
        prefactor_source=source,
        seed=seed,
        exact=exact,
    )


CASCADE_KEYS = {"n", "theta", "perturbation", "label"}


def load_cascade_config(path: str | Path) -> CascadeConfig:
    """Read ``n``, ``theta`` and optional ``perturbation`` (boundary syntax) from a YAML mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Cascade config not found: {path}")
    contents = path.read_text(encoding="utf-8")
    raw = (yaml.safe_load(contents) if yaml is not None else json.loads(contents)) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping")
    unknown = set(raw) - CASCADE_KEYS
    if unknown:
        raise ConfigError(f"Unknown cascade keys: {', '.join(sorted(unknown))}")
    if "n" not in raw or "theta" not in raw:
        raise ConfigError(f"{path} needs both n and theta")
    perturbation = raw.get("perturbation")
    try:
        return CascadeConfig(
            n=int(raw["n"]),
            theta=float(raw["theta"]),
            perturbation=parse_boundary(str(perturbation)) if perturbation else None,
            label=str(raw.get("label", "")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid cascade config {path}: {exc}") from exc


__all__ = [
    "CASCADE_COLUMNS",
    "CascadeComparison",
    "CascadeConfig",
    "cascade_curve",
    "cascade_survival_mc",
    "cascade_vs_bridge",
    "exact_crossing_probability",
    "load_cascade_config",
    "order_statistic_quadrature",
    "simulate_cascade_batch",
    "simulate_cascade_size",
]
