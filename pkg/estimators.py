"""Monte Carlo estimators and the convergence sweep against the asymptotic formulas."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from asymptotics import RegimeLabel, asymptotic_value
from boundaries import BoundarySequence
from concurrency import ReplicateExecutor, RunningMoments, default_executor
from config import DiagnosticsConfig, GridConfig
from density_kernel import bridge_survival, gaussian_density
from diagnostics import report
from errors import (
    ConfigError,
    DegenerateEstimateError,
    DomainError,
    LabError,
    ModelMismatchError,
    NumericalDiagnosticError,
)
from increments import IncrementModel, unkilled_lattice
from walk_sim import (
    KilledBatch,
    killed_score_moments,
    simulate_bridge_batch,
    simulate_endpoint_batch,
    simulate_killed_batch,
)

LOGGER = logging.getLogger("fpt_lab.estimators")

METHODS = ("bridge_direct", "weighted", "window", "kernel")

SWEEP_COLUMNS = ("model", "boundary", "n", "k", "regime", "method", "estimate", "se", "asymptotic", "ratio", "seed")


@dataclass
class EstimateRecord:
    """A point estimate with its standard error and the parameters it belongs to.

    Kernel records carry ``std_error = 0`` and report ``quadrature_loss``.
    """

    value: float
    std_error: float
    samples: int
    method: str
    seed: Optional[int]
    model: str = ""
    boundary: str = ""
    n: Optional[int] = None
    k: Optional[int] = None
    quadrature_loss: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def as_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row.update(row.pop("extra"))
        return row


def binomial_record(indicator: np.ndarray, **fields: Any) -> EstimateRecord:
    moments = RunningMoments.from_values(indicator.astype(float))
    p = moments.mean
    se = math.sqrt(max(p * (1.0 - p), 0.0) / moments.count)
    return EstimateRecord(value=p, std_error=se, samples=moments.count, **fields)


def estimate_conditional_survival_bridge(
    model: IncrementModel,
    boundary: BoundarySequence,
    n: int,
    k: int,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
) -> EstimateRecord:
    """Fraction of exact Gaussian bridges staying above g up to step k."""
    if not model.is_gaussian:
        raise ModelMismatchError(f"bridge sampling is exact only for the gaussian law, not {model.name}")
    survived, _ = simulate_bridge_batch(n, k, boundary, reps, seed, executor=executor)
    return binomial_record(
        survived, method="bridge_direct", seed=seed, model=model.name, boundary=boundary.label, n=n, k=k
    )


class ReverseDensity:
    """f_{n-k}(-x) / f_n(0) as a function of x, for weighting killed walks."""

    def __init__(self, model: IncrementModel, n: int, k: int, grid: Optional[GridConfig] = None) -> None:
        if not 1 <= k < n:
            raise DomainError(f"need 1 <= k < n, got n={n}, k={k}")
        self.model = model
        self.rest = n - k
        if model.is_gaussian:
            self._density = lambda x: gaussian_density(self.rest, x)
            self.f_n0 = float(gaussian_density(n, 0.0))
        else:
            if self.rest < 2:
                raise DomainError(f"need n - k >= 2 for {model.name}, got {self.rest}")
            lattices = unkilled_lattice(model, n, grid or GridConfig(), snapshots=[self.rest])
            self._density = lattices[self.rest]
            self.f_n0 = float(lattices[n](0.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._density(-np.asarray(x, dtype=float))) / self.f_n0


def estimate_conditional_survival_weighted(
    model: IncrementModel,
    boundary: BoundarySequence,
    n: int,
    k: int,
    reps: int,
    seed: int,
    grid_config: Optional[GridConfig] = None,
    diagnostics: Optional[DiagnosticsConfig] = None,
    executor: Optional[ReplicateExecutor] = None,
) -> EstimateRecord:
    """Mean of 1{tau_g > k} f_{n-k}(-S_k) / f_n(0) over free walks."""
    diagnostics = diagnostics or DiagnosticsConfig()
    weight = ReverseDensity(model, n, k, grid_config)
    if weight.f_n0 < diagnostics.density_floor:
        raise DomainError(f"f_n(0) = {weight.f_n0:.3g} is below the density floor {diagnostics.density_floor:.3g} for n={n}")
    moments = killed_score_moments(
        model,
        boundary,
        k,
        reps,
        seed,
        lambda kill, pos: np.where(kill == 0, weight(pos), 0.0),
        executor=executor,
        stream="weighted",
    )
    return EstimateRecord(
        value=moments.mean,
        std_error=moments.std_error,
        samples=moments.count,
        method="weighted",
        seed=seed,
        model=model.name,
        boundary=boundary.label,
        n=n,
        k=k,
        extra={"f_n0": weight.f_n0},
    )


def estimate_conditional_survival_window(
    model: IncrementModel,
    boundary: BoundarySequence,
    n: int,
    k: int,
    reps: int,
    seed: int,
    delta: float = 0.1,
    executor: Optional[ReplicateExecutor] = None,
) -> EstimateRecord:
    """P(tau_g > k ; |S_n| <= delta) / P(|S_n| <= delta), with delta-method s.e."""
    if delta <= 0:
        raise DomainError(f"delta must be > 0, got {delta}")
    survived, endpoint = simulate_endpoint_batch(model, boundary, n, k, reps, seed, executor=executor)
    inside = np.abs(endpoint) <= delta
    hits = int(inside.sum())
    if hits == 0:
        raise DegenerateEstimateError(f"no endpoint fell within {delta} of 0", reps=reps)
    both = float(np.sum(survived & inside))
    ratio = both / hits
    se = math.sqrt(max(ratio * (1.0 - ratio), 0.0) / hits)
    return EstimateRecord(
        value=ratio,
        std_error=se,
        samples=hits,
        method="window",
        seed=seed,
        model=model.name,
        boundary=boundary.label,
        n=n,
        k=k,
        extra={"delta": delta, "reps": reps},
    )


@dataclass
class LgEstimate:
    """Both forms of L_g(k); ``primary`` is E(-S_tau; tau <= k)."""

    primary: EstimateRecord
    terminal: EstimateRecord
    difference: float
    difference_se: float


def undershoot_values(batch: KilledBatch, k: int) -> np.ndarray:
    """Per-replicate -S_tau 1{tau <= k}."""
    killed = (batch.kill_index > 0) & (batch.kill_index <= k)
    return np.where(killed, -batch.position, 0.0)


def estimate_Lg(
    model: IncrementModel,
    boundary: BoundarySequence,
    k: int,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
) -> LgEstimate:
    """E(-S_tau; tau <= k) and E(S_k - g_k; tau > k) from the same walks."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if boundary.unreachable:
        raise DomainError("L_g is undefined for an unreachable boundary")
    batch = simulate_killed_batch(model, boundary, k, reps, seed, executor=executor, stream="lg")
    first = undershoot_values(batch, k)
    second = np.where(batch.survived, batch.position - float(boundary.g(k)), 0.0)
    m1 = RunningMoments.from_values(first)
    m2 = RunningMoments.from_values(second)
    diff = RunningMoments.from_values(first - second)
    common = dict(seed=seed, model=model.name, boundary=boundary.label, k=k)
    return LgEstimate(
        primary=EstimateRecord(m1.mean, m1.std_error, m1.count, method="undershoot", **common),
        terminal=EstimateRecord(m2.mean, m2.std_error, m2.count, method="terminal_excess", **common),
        difference=diff.mean,
        difference_se=diff.std_error,
    )


def estimate_rayleigh_tail(
    model: IncrementModel,
    boundary: BoundarySequence,
    n: int,
    v: float,
    reps: int,
    seed: int,
    diagnostics: Optional[DiagnosticsConfig] = None,
    executor: Optional[ReplicateExecutor] = None,
) -> EstimateRecord:
    """P(S_n > g_n + v sqrt(n) | tau_g > n) by keeping the surviving walks."""
    if v < 0:
        raise DomainError(f"v must be >= 0, got {v}")
    diagnostics = diagnostics or DiagnosticsConfig()
    batch = simulate_killed_batch(model, boundary, n, reps, seed, executor=executor, stream="rayleigh")
    survivors = batch.position[batch.survived]
    if survivors.size < diagnostics.min_survivors:
        report(
            "degenerate_conditioning",
            "error",
            f"only {survivors.size} survivors out of {reps}",
            survivors=int(survivors.size),
            n=n,
        )
        raise DegenerateEstimateError(
            f"{survivors.size} survivors is below the minimum of {diagnostics.min_survivors}",
            survivors=int(survivors.size),
        )
    above = survivors > float(boundary.g(n)) + v * math.sqrt(n)
    record = binomial_record(above, method="survivor_rejection", seed=seed, model=model.name, boundary=boundary.label, n=n)
    record.extra = {"v": v, "reps": reps}
    return record


def estimate_tau_tail(
    model: IncrementModel,
    boundary: BoundarySequence,
    k: int,
    reps: int,
    seed: int,
    executor: Optional[ReplicateExecutor] = None,
) -> EstimateRecord:
    """Unconditioned P(tau_g > k)."""
    batch = simulate_killed_batch(model, boundary, k, reps, seed, executor=executor, stream="tau_tail")
    return binomial_record(batch.survived, method="tau_tail", seed=seed, model=model.name, boundary=boundary.label, k=k)


# ---------------------------------------------------------------- sweeps


def parse_k_rule(rule: str):
    """``frac:p`` gives k = floor(p n); ``minus_pow:p`` gives k = n - ceil(n^p)."""
    kind, _, raw = rule.partition(":")
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"Invalid k rule: {rule!r}") from None
    if kind == "frac" and 0.0 < value < 1.0:
        return lambda n: max(1, int(math.floor(value * n)))
    if kind == "minus_pow" and 0.0 < value < 1.0:
        return lambda n: n - int(math.ceil(n**value))
    if kind == "fixed" and value >= 1 and float(value).is_integer():
        return lambda n: int(value)
    raise ConfigError(f"Invalid k rule: {rule!r}")


@dataclass
class SweepConfig:
    model: IncrementModel
    boundary: BoundarySequence
    n_values: Sequence[int]
    k_rule: str
    regime: RegimeLabel
    method: str = "kernel"
    reps: int = 100_000
    seed: int = 0
    lg_reps: Optional[int] = None
    signed_gamma: bool = True
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self) -> None:
        if self.method not in ("kernel", "bridge_direct", "weighted"):
            raise ConfigError(f"Unknown sweep method: {self.method}")
        if not self.n_values:
            raise ConfigError("sweep needs at least one n")
        self.regime = RegimeLabel.parse(self.regime)
        parse_k_rule(self.k_rule)


def _sweep_row(cfg: SweepConfig, n: int, executor: ReplicateExecutor) -> Dict[str, Any]:
    k = parse_k_rule(cfg.k_rule)(n)
    if not 1 <= k < n:
        raise DomainError(f"k rule {cfg.k_rule} gives k={k} for n={n}")
    g_k = float(cfg.boundary.g(k))
    if cfg.method == "kernel":
        result = bridge_survival(cfg.model, cfg.boundary, n, k, cfg.grid)
        estimate, se, L = result.value, 0.0, result.prefactor
    else:
        if cfg.method == "bridge_direct":
            record = estimate_conditional_survival_bridge(cfg.model, cfg.boundary, n, k, cfg.reps, cfg.seed, executor)
        else:
            record = estimate_conditional_survival_weighted(
                cfg.model, cfg.boundary, n, k, cfg.reps, cfg.seed, cfg.grid, executor=executor
            )
        estimate, se = record.value, record.std_error
        L = estimate_Lg(cfg.model, cfg.boundary, k, cfg.lg_reps or cfg.reps, cfg.seed, executor).primary.value
    asymptotic = asymptotic_value(n, k, L, g_k, cfg.regime, signed=cfg.signed_gamma)
    return {
        "model": cfg.model.name,
        "boundary": cfg.boundary.label,
        "n": n,
        "k": k,
        "regime": cfg.regime.value,
        "method": cfg.method,
        "estimate": estimate,
        "se": se,
        "asymptotic": asymptotic,
        "ratio": estimate / asymptotic if asymptotic > 0 else math.nan,
        "seed": cfg.seed,
    }


def convergence_sweep(cfg: SweepConfig, executor: Optional[ReplicateExecutor] = None) -> List[Dict[str, Any]]:
    """One row per n; a failing row is logged and kept with empty numbers."""
    executor = executor or default_executor()
    rows: List[Dict[str, Any]] = []
    for n in cfg.n_values:
        try:
            rows.append(_sweep_row(cfg, int(n), executor))
        except LabError as exc:
            severity = "error" if isinstance(exc, NumericalDiagnosticError) else "warning"
            report("sweep_row_failed", severity, str(exc), n=int(n), method=cfg.method)
            LOGGER.warning("sweep_row_failed", extra={"n": int(n), "error": str(exc)})
            rows.append(
                {
                    "model": cfg.model.name,
                    "boundary": cfg.boundary.label,
                    "n": int(n),
                    "k": "",
                    "regime": cfg.regime.value,
                    "method": cfg.method,
                    "estimate": "",
                    "se": "",
                    "asymptotic": "",
                    "ratio": "",
                    "seed": cfg.seed,
                }
            )
    return rows


__all__ = [
    "EstimateRecord",
    "LgEstimate",
    "METHODS",
    "ReverseDensity",
    "SWEEP_COLUMNS",
    "SweepConfig",
    "binomial_record",
    "convergence_sweep",
    "estimate_Lg",
    "estimate_conditional_survival_bridge",
    "estimate_conditional_survival_weighted",
    "estimate_conditional_survival_window",
    "estimate_rayleigh_tail",
    "estimate_tau_tail",
    "parse_k_rule",
    "undershoot_values",
]
