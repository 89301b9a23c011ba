"""Moving boundaries g_1, g_2, ... and their admissibility diagnostics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from errors import DomainError

LOGGER = logging.getLogger("fpt_lab.boundaries")

FAMILIES = ("constant", "power", "log", "table")


@dataclass(frozen=True)
class BoundarySequence:
    """A boundary sequence; a walk is killed at the first i with S_i <= g_i.

    ``power`` means g_i = -c * i**alpha and ``log`` means g_i = -c * log(i + 1).
    """

    family: str
    params: Tuple[float, ...] = ()
    values: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    label: str = ""
    shift: float = 0.0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise DomainError(f"Unknown boundary family: {self.family}")
        if self.family == "power":
            _, alpha = self.params
            if alpha >= 0.5:
                raise DomainError(f"power boundary needs alpha < 1/2, got {alpha}")
        if self.family == "table":
            if self.values is None or np.asarray(self.values).size == 0:
                raise DomainError("table boundary needs at least one value")
            if not np.all(np.isfinite(self.values)):
                raise DomainError("table boundary values must be finite")
        if not self.label:
            object.__setattr__(self, "label", self._default_label())

    def _default_label(self) -> str:
        if self.family == "table":
            return f"table:{np.asarray(self.values).size}"
        return f"{'const' if self.family == 'constant' else self.family}:" + ",".join(
            _fmt(p) for p in self.params
        )

    def g(self, i):
        """Boundary value(s) at index i >= 1; accepts an int or an integer array."""
        idx = np.asarray(i)
        if np.any(idx < 1):
            raise DomainError("boundary indices start at 1")
        if self.family == "constant":
            out = np.full(idx.shape, self.params[0], dtype=float)
        elif self.family == "power":
            c, alpha = self.params
            out = -c * np.power(idx.astype(float), alpha)
        elif self.family == "log":
            out = -self.params[0] * np.log1p(idx.astype(float))
        else:
            table = np.asarray(self.values, dtype=float)
            if np.any(idx > table.size):
                raise DomainError(f"table boundary defined up to index {table.size}")
            out = table[idx.astype(int) - 1]
        if self.shift:
            out = out + self.shift
        return float(out) if out.ndim == 0 else out

    def values_upto(self, horizon: int) -> np.ndarray:
        """g_1..g_horizon as an array."""
        return np.asarray(self.g(np.arange(1, horizon + 1)), dtype=float)

    @property
    def unreachable(self) -> bool:
        return self.family == "constant" and self.params[0] == -math.inf

    @property
    def max_index(self) -> Optional[int]:
        return int(np.asarray(self.values).size) if self.family == "table" else None

    @property
    def non_increasing(self) -> bool:
        if self.family == "constant":
            return True
        if self.family in ("power", "log"):
            c = self.params[0]
            alpha = self.params[1] if self.family == "power" else 1.0
            return c == 0 or (c > 0 and alpha >= 0) or (c < 0 and alpha <= 0)
        return bool(np.all(np.diff(self.values) <= 0))

    @property
    def analytic_L_finite(self) -> Optional[bool]:
        """Whether L_g(infinity) is known finite; None when only numeric evidence exists."""
        if self.family == "constant":
            return None if self.unreachable else True
        if self.family in ("power", "log") and self.params[0] >= 0:
            return True
        return None

    def negated(self) -> "BoundarySequence":
        if self.family == "table":
            return BoundarySequence("table", values=-np.asarray(self.values, dtype=float), shift=-self.shift)
        if self.family == "power":
            return BoundarySequence("power", (-self.params[0], self.params[1]), shift=-self.shift)
        return BoundarySequence(self.family, (-self.params[0],), shift=-self.shift)

    def shifted(self, offset: float) -> "BoundarySequence":
        """The boundary g_i - offset, as seen by a walk started at ``offset``."""
        if offset == 0.0:
            return self
        if self.family == "constant":
            return BoundarySequence("constant", (self.params[0] - offset,))
        return replace(self, shift=self.shift - float(offset), label=f"{self.label}{-offset:+g}")


def _fmt(value: float) -> str:
    if value == -math.inf:
        return "-inf"
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def constant(c: float) -> BoundarySequence:
    return BoundarySequence("constant", (float(c),))


def power(c: float, alpha: float) -> BoundarySequence:
    return BoundarySequence("power", (float(c), float(alpha)))


def log_boundary(c: float) -> BoundarySequence:
    return BoundarySequence("log", (float(c),))


def table(values) -> BoundarySequence:
    return BoundarySequence("table", values=np.asarray(values, dtype=float))


def load_table_boundary(path: str | Path) -> BoundarySequence:
    """Read g_1..g_N from a one-column CSV; a non-numeric first row is a header."""
    path = Path(path)
    if not path.exists():
        raise DomainError(f"Boundary table not found: {path}")
    values = []
    with path.open("r", encoding="utf-8", newline="") as handle:
        for row_no, row in enumerate(csv.reader(handle)):
            if not row or not row[0].strip():
                continue
            try:
                values.append(float(row[0]))
            except ValueError:
                if row_no == 0:
                    continue
                raise DomainError(f"{path}:{row_no + 1}: not a number: {row[0]!r}") from None
    boundary = BoundarySequence("table", values=np.asarray(values, dtype=float), label=f"table:{path.name}")
    LOGGER.debug("boundary_table_loaded", extra={"path": str(path), "size": len(values)})
    return boundary


def parse_boundary(text: str) -> BoundarySequence:
    """Parse ``const:c``, ``const:-inf``, ``power:c,alpha``, ``log:c`` or ``table:path.csv``."""
    family, _, rest = text.partition(":")
    family = family.strip().lower()
    if not rest:
        raise DomainError(f"Boundary needs parameters: {text!r}")
    if family == "table":
        return load_table_boundary(rest)
    try:
        numbers = [float(part) for part in rest.split(",")]
    except ValueError:
        raise DomainError(f"Invalid boundary parameters: {text!r}") from None
    if family in ("const", "constant") and len(numbers) == 1:
        return BoundarySequence("constant", (numbers[0],), label=text)
    if family == "power" and len(numbers) == 2:
        return BoundarySequence("power", (numbers[0], numbers[1]), label=text)
    if family == "log" and len(numbers) == 1:
        return BoundarySequence("log", (numbers[0],), label=text)
    raise DomainError(f"Invalid boundary: {text!r}")


def fluctuation_ratio(b: BoundarySequence, k: int, eps: float) -> float:
    """sup over ceil((1-eps)k) <= j <= k of |g_j - g_k| / |g_k|."""
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if b.family == "constant":
        return 0.0
    j0 = max(1, math.ceil((1.0 - eps) * k - 1e-9))
    window = b.g(np.arange(j0, k + 1))
    g_k = float(window[-1])
    sup = float(np.max(np.abs(window - g_k)))
    if g_k == 0.0:
        return math.inf if sup > 0.0 else 0.0
    return sup / abs(g_k)


def boundary_scale_ratio(b: BoundarySequence, horizon: int) -> float:
    """max |g_i| / sqrt(i) over horizon/10 < i <= horizon."""
    if horizon < 10:
        raise DomainError(f"horizon must be >= 10, got {horizon}")
    idx = np.arange(horizon // 10 + 1, horizon + 1)
    return float(np.max(np.abs(b.g(idx)) / np.sqrt(idx)))


@dataclass(frozen=True)
class CriterionReport:
    boundary: str
    verdict: str
    criterion: Optional[str]
    partial_sums: Dict[int, Tuple[float, float]]


def l_infinity_criterion(b: BoundarySequence, horizon: int) -> CriterionReport:
    """Finiteness verdict for L_g(infinity) with partial sums of both series.

    The series are sum -g_n / n^{3/2} and sum sqrt(log n) (-g_n) / n^{3/2}.
    """
    if horizon < 1000:
        raise DomainError(f"horizon must be >= 1000, got {horizon}")
    if b.unreachable:
        raise DomainError("criterion undefined for an unreachable boundary")
    limit = horizon if b.max_index is None else min(horizon, b.max_index)
    n = np.arange(1, limit + 1, dtype=float)
    minus_g = -b.values_upto(limit)
    first = np.cumsum(minus_g / n**1.5)
    second = np.cumsum(np.sqrt(np.log(n)) * minus_g / n**1.5)
    sums = {
        h: (float(first[h - 1]), float(second[h - 1]))
        for h in sorted({100, 1000, limit})
        if h <= limit
    }
    if not b.analytic_L_finite:
        verdict, criterion = "evidence_only", None
    elif b.family == "constant" or b.params[0] == 0.0:
        verdict, criterion = "finite", "greenwood"
    else:
        verdict, criterion = "finite", "wachtel"
    return CriterionReport(boundary=b.label, verdict=verdict, criterion=criterion, partial_sums=sums)


__all__ = [
    "BoundarySequence",
    "CriterionReport",
    "boundary_scale_ratio",
    "constant",
    "fluctuation_ratio",
    "l_infinity_criterion",
    "load_table_boundary",
    "log_boundary",
    "parse_boundary",
    "power",
    "table",
]
