"""Deterministic killed-density propagation and the bridge survival oracle.

The sub-density u -> P(S_m in du; tau_g > m) lives on the lattice
``offset + j h`` and is advanced by discrete convolution with the lattice
kernel of the increment law. Killing keeps the part of the cell straddling
g_m that lies above it. For constant boundaries the lattice is shifted so that
g falls on a cell edge and the kill is exact.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from boundaries import BoundarySequence
from config import DiagnosticsConfig, GridConfig
from errors import DomainError, GridResolutionError
from increments import (
    IncrementModel,
    LatticeDensity,
    clip_window,
    convolve_step,
    lattice_kernel,
    unkilled_lattice,
    window_indices,
)

LOGGER = logging.getLogger("fpt_lab.density_kernel")

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class KilledDensityGrid:
    """Sub-density of S_m on the walk's survival event, sampled at lattice nodes."""

    m: int
    h: float
    start: int
    values: np.ndarray = field(repr=False)
    offset: float = 0.0
    origin: float = 0.0
    boundary: str = ""
    model: str = ""
    kernel_loss: float = 0.0
    window_loss: float = 0.0

    @property
    def nodes(self) -> np.ndarray:
        return self.offset + (self.start + np.arange(self.values.size)) * self.h

    @property
    def lo(self) -> float:
        return float(self.nodes[0])

    @property
    def hi(self) -> float:
        return float(self.nodes[-1])

    @property
    def survival_mass(self) -> float:
        return float(self.values.sum() * self.h)

    @property
    def quadrature_loss(self) -> float:
        return self.kernel_loss + self.window_loss

    def __call__(self, u):
        out = np.interp(np.asarray(u, dtype=float), self.nodes, self.values, left=0.0, right=0.0)
        return float(out) if np.ndim(out) == 0 else out

    def as_lattice(self) -> LatticeDensity:
        return LatticeDensity(h=self.h, start=self.start, values=self.values, offset=self.offset)


def lattice_offset(boundary: BoundarySequence, h: float, k: int) -> float:
    """Lattice offset putting g (or g_k for moving boundaries) on a cell edge."""
    if boundary.unreachable:
        return 0.0
    anchor = float(boundary.g(k if boundary.max_index is None else min(k, boundary.max_index)))
    return float(np.mod(anchor + 0.5 * h, h))


def _kill(values: np.ndarray, start: int, g: float, offset: float, h: float):
    """Apply the inclusive kill at level g; returns trimmed values and start."""
    if g == -math.inf:
        return values, start
    q = (g - offset) / h + 0.5
    nearest = round(q)
    if abs(q - nearest) < _EDGE_TOL:
        q = float(nearest)
    edge = int(math.floor(q))
    frac = edge + 0.5 - (g - offset) / h
    frac = min(max(frac, 0.0), 1.0)
    local = edge - start
    if local >= values.size:
        return np.zeros(1), edge
    if local < 0:
        return values, start
    out = values[local:].copy()
    out[0] *= frac
    node = offset + edge * h
    if node <= g and out[0] > 0.0:
        if out.size == 1:
            out = np.append(out, 0.0)
        out[1] += out[0]
        out[0] = 0.0
    return out, edge


def _start_values(model: IncrementModel, grid: GridConfig, offset: float, origin: float):
    h = grid.spacing
    first = lattice_kernel(model, h, grid.kernel_tail, shift=offset - origin)
    return first.weights / h, first.offset, 1.0 - first.mass


def propagate_killed(
    model: IncrementModel,
    boundary: BoundarySequence,
    k: int,
    grid_config: Optional[GridConfig] = None,
    start: float = 0.0,
    initial: Optional[KilledDensityGrid] = None,
    offset: Optional[float] = None,
    snapshots: Sequence[int] = (),
) -> KilledDensityGrid | Dict[int, KilledDensityGrid]:
    """Killed sub-density at time k for the walk started at ``start``.

    ``initial`` continues an earlier grid of the same boundary. With
    ``snapshots`` a dict of grids at those times (and k) is returned.
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    grid_config = grid_config or GridConfig()
    h = grid_config.spacing
    kernel = lattice_kernel(model, h, grid_config.kernel_tail)
    wanted = {int(s) for s in snapshots} | {k}
    taken: Dict[int, KilledDensityGrid] = {}

    if initial is not None:
        if initial.m >= k:
            raise DomainError(f"initial grid is at time {initial.m}, cannot continue to {k}")
        offset = initial.offset
        origin = initial.origin
        values, first_idx = initial.values, initial.start
        m0 = initial.m
        kernel_loss, window_loss = initial.kernel_loss, initial.window_loss
    else:
        offset = lattice_offset(boundary, h, k) if offset is None else offset
        origin = start
        values, first_idx, kernel_loss = _start_values(model, grid_config, offset, origin)
        values, first_idx = _kill(values, first_idx, boundary.g(1), offset, h)
        m0 = 1
        window_loss = 0.0
        if 1 in wanted:
            taken[1] = _grid(1, h, first_idx, values, offset, origin, boundary, model, kernel_loss, window_loss)

    center = int(round((origin - offset) / h))
    kernel_tail_loss = 1.0 - kernel.mass
    for m in range(m0 + 1, k + 1):
        before = float(values.sum() * h)
        values, first_idx = convolve_step(values, first_idx, kernel)
        lo, hi = window_indices(kernel, m, grid_config.width_sd, center)
        values, first_idx, dropped = clip_window(values, first_idx, lo, hi)
        values, first_idx = _kill(values, first_idx, boundary.g(m), offset, h)
        step_loss = before * kernel_tail_loss + dropped * h
        kernel_loss += before * kernel_tail_loss
        window_loss += dropped * h
        if step_loss > grid_config.mass_tolerance:
            raise GridResolutionError(
                f"step {m} lost mass {step_loss:.3g} beyond tolerance", step=m, loss=step_loss
            )
        if m in wanted:
            taken[m] = _grid(m, h, first_idx, values, offset, origin, boundary, model, kernel_loss, window_loss)

    LOGGER.debug(
        "killed_density_propagated",
        extra={
            "law": model.name,
            "boundary": boundary.label,
            "k": k,
            "nodes": int(taken[k].values.size),
            "survival_mass": taken[k].survival_mass,
            "quadrature_loss": taken[k].quadrature_loss,
        },
    )
    return taken if snapshots else taken[k]


def _grid(m, h, first_idx, values, offset, origin, boundary, model, kernel_loss, window_loss) -> KilledDensityGrid:
    return KilledDensityGrid(
        m=m,
        h=h,
        start=int(first_idx),
        values=np.array(values, copy=True),
        offset=offset,
        origin=origin,
        boundary=boundary.label,
        model=model.name,
        kernel_loss=kernel_loss,
        window_loss=window_loss,
    )


def unkilled_density(
    model: IncrementModel,
    m: int,
    grid_config: Optional[GridConfig] = None,
    offset: float = 0.0,
) -> KilledDensityGrid:
    """Density of S_m on the lattice, as a grid with an unreachable boundary."""
    grid_config = grid_config or GridConfig()
    lattice = unkilled_lattice(model, m, grid_config, offset=offset)
    deficit = abs(1.0 - lattice.mass)
    if deficit > grid_config.mass_tolerance:
        raise GridResolutionError(f"mass deficit {deficit:.3g} for S_{m}", deficit=deficit, m=m)
    return KilledDensityGrid(
        m=m,
        h=lattice.h,
        start=lattice.start,
        values=lattice.values,
        offset=offset,
        boundary="const:-inf",
        model=model.name,
        window_loss=lattice.truncated_mass,
        kernel_loss=max(0.0, 1.0 - lattice.mass - lattice.truncated_mass),
    )


def gaussian_density(m: int, x):
    return INV_SQRT_2PI / math.sqrt(m) * np.exp(-0.5 * np.asarray(x, dtype=float) ** 2 / m)


@dataclass(frozen=True)
class BridgeSurvival:
    """P(tau_g > k | S_n = 0) with the pieces it is assembled from."""

    n: int
    k: int
    value: float
    numerator: float
    normaliser: float
    f_n0: float
    survival_mass: float
    quadrature_loss: float
    prefactor: float = math.nan

    def __float__(self) -> float:
        return self.value


def reverse_weights(
    model: IncrementModel,
    grid: KilledDensityGrid,
    j: int,
    grid_config: GridConfig,
) -> np.ndarray:
    """f_j(-u) at the nodes of ``grid``: the density of the reversed walk."""
    if model.is_gaussian:
        return gaussian_density(j, -grid.nodes)
    reverse_offset = float(np.mod(-grid.offset, grid.h))
    reverse = unkilled_lattice(model, j, grid_config, offset=reverse_offset)
    shift = int(round((-grid.offset - reverse_offset) / grid.h))
    index = shift - (grid.start + np.arange(grid.values.size))
    return reverse.at_index(index)


def bridge_survival(
    model: IncrementModel,
    boundary: BoundarySequence,
    n: int,
    k: int,
    grid_config: Optional[GridConfig] = None,
    diagnostics: Optional[DiagnosticsConfig] = None,
) -> BridgeSurvival:
    """(1/f_n(0)) int_{g_k}^inf h_k(u) f_{n-k}(-u) du.

    The normaliser f_n(0) is assembled with the same reversed-walk weights
    applied to the unkilled lattice density at time k, so the lattice
    discretisation cancels between numerator and denominator.
    """
    if not 1 <= k < n:
        raise DomainError(f"need 1 <= k < n, got n={n}, k={k}")
    if n - k < 2 and not model.is_gaussian:
        raise DomainError(f"need n - k >= 2 for {model.name}, got {n - k}")
    grid_config = grid_config or GridConfig()
    diagnostics = diagnostics or DiagnosticsConfig()
    h = grid_config.spacing

    killed = propagate_killed(model, boundary, k, grid_config)
    free = propagate_killed(model, BoundarySequence("constant", (-math.inf,)), k, grid_config, offset=killed.offset)
    rest = n - k
    numerator = float(np.dot(killed.values, reverse_weights(model, killed, rest, grid_config)) * h)
    normaliser = float(np.dot(free.values, reverse_weights(model, free, rest, grid_config)) * h)
    if normaliser < diagnostics.density_floor:
        raise DomainError(f"f_n(0) = {normaliser:.3g} below the density floor")
    f_n0 = float(gaussian_density(n, 0.0)) if model.is_gaussian else normaliser
    value = min(max(numerator / normaliser, 0.0), 1.0)
    return BridgeSurvival(
        n=n,
        k=k,
        value=value,
        numerator=numerator,
        normaliser=normaliser,
        f_n0=f_n0,
        survival_mass=killed.survival_mass,
        quadrature_loss=killed.quadrature_loss,
        prefactor=math.nan if boundary.unreachable else kernel_prefactor(killed, float(boundary.g(k))),
    )


def kernel_prefactor(grid: KilledDensityGrid, g_k: float) -> float:
    """L_g(k) = E(S_k - g_k; tau_g > k) from the killed grid."""
    return float(np.dot(grid.nodes - g_k, grid.values) * grid.h)


def boxed_mass(grid: KilledDensityGrid, lo: float, hi: float) -> float:
    """int_lo^hi of the sub-density, cells counted by the fraction inside [lo, hi]."""
    if hi < lo:
        raise DomainError(f"need lo <= hi, got {lo}, {hi}")
    left = grid.nodes - 0.5 * grid.h
    right = grid.nodes + 0.5 * grid.h
    overlap = np.clip(np.minimum(right, hi) - np.maximum(left, lo), 0.0, None)
    return float(np.dot(grid.values, overlap))


def close_to_boundary_mass(grid: KilledDensityGrid, g_k: float, x_k: float) -> float:
    """P(S_k <= g_k + x_k; tau_g > k)."""
    return boxed_mass(grid, g_k, g_k + x_k)


def close_to_boundary_bound(k: int, x_k: float, L: float, slack: float = 1.1) -> float:
    """slack * x_k^2 / sqrt(2 pi) * L / k^{3/2}."""
    return slack * x_k * x_k * INV_SQRT_2PI * L / k**1.5


def gaussian_reversal_integral(grid: KilledDensityGrid, n: int) -> float:
    """sqrt(n / (n - k)) int h_k(u) exp(-u^2 / (2 (n - k))) du."""
    rest = n - grid.m
    if rest < 1:
        raise DomainError(f"need n > k, got n={n}, k={grid.m}")
    weights = np.exp(-0.5 * grid.nodes**2 / rest)
    return math.sqrt(n / rest) * float(np.dot(grid.values, weights) * grid.h)


def local_clt_distance_grid(grid: KilledDensityGrid, span: float = 6.0, points: int = 1201) -> float:
    """sup |sqrt(m) f_m(sqrt(m) x) - phi(x)| for an unkilled grid."""
    xs = np.linspace(-span, span, points)
    root = math.sqrt(grid.m)
    scaled = root * np.asarray(grid(root * xs))
    return float(np.max(np.abs(scaled - INV_SQRT_2PI * np.exp(-0.5 * xs * xs))))


def export_grid_csv(path: str | Path, grid: KilledDensityGrid) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["node", "value"])
        for node, value in zip(grid.nodes, grid.values):
            writer.writerow([repr(float(node)), repr(float(value))])
    return path


__all__ = [
    "BridgeSurvival",
    "KilledDensityGrid",
    "boxed_mass",
    "bridge_survival",
    "close_to_boundary_bound",
    "close_to_boundary_mass",
    "export_grid_csv",
    "gaussian_density",
    "gaussian_reversal_integral",
    "kernel_prefactor",
    "lattice_offset",
    "local_clt_distance_grid",
    "propagate_killed",
    "reverse_weights",
    "unkilled_density",
]
