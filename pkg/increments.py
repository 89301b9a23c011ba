"""Increment laws with zero mean and unit variance, and their n-fold densities.

Every law carries a sampler, a density and a distribution function. Densities
of partial sums are computed on the lattice ``h * Z`` by repeated discrete
convolution with the cell masses ``F((j + 1/2) h) - F((j - 1/2) h)``; the same
lattice kernel drives the killed propagation in :mod:`density_kernel`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special, stats

from config import GridConfig
from errors import DomainError, GridResolutionError

LOGGER = logging.getLogger("fpt_lab.increments")

SQRT3 = math.sqrt(3.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

Size = Union[None, int, Tuple[int, ...]]
Sampler = Callable[[np.random.Generator, Size], np.ndarray]
ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class IncrementModel:
    """An increment law X with E X = 0 and E X^2 = 1.

    ``ladder_constants_exact`` holds (E(-S_{T_0}), E(-S~_{T_0})) when known in
    closed form; their product is 1/2 for every unit-variance walk.
    ``closed_form_gaussian`` marks the built-in N(0, 1) law, whose n-fold
    densities and bridges are sampled and evaluated exactly.
    """

    name: str
    sampler: Sampler = field(repr=False)
    pdf_fn: ArrayFn = field(repr=False)
    cdf_fn: ArrayFn = field(repr=False)
    ppf_fn: ArrayFn = field(repr=False)
    support: Tuple[float, float] = (-math.inf, math.inf)
    symmetric: bool = False
    closed_form_gaussian: bool = False
    ladder_constants_exact: Optional[Tuple[float, float]] = None
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self) -> None:
        if self.ladder_constants_exact is not None:
            down, up = self.ladder_constants_exact
            if not math.isclose(down * up, 0.5, rel_tol=1e-12):
                raise DomainError(
                    f"ladder constants of {self.name} must multiply to 1/2, got {down * up}"
                )

    def sample(self, rng: np.random.Generator, size: Size = None) -> np.ndarray | float:
        """Draw X_i; a scalar when ``size`` is None."""
        draws = self.sampler(rng, size)
        if size is None:
            return float(np.asarray(draws).reshape(-1)[0])
        return draws

    def pdf(self, x: np.ndarray | float) -> np.ndarray | float:
        out = self.pdf_fn(np.asarray(x, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    def cdf(self, x: np.ndarray | float) -> np.ndarray | float:
        out = self.cdf_fn(np.asarray(x, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    def ppf(self, q: np.ndarray | float) -> np.ndarray | float:
        out = self.ppf_fn(np.asarray(q, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    @property
    def is_gaussian(self) -> bool:
        return self.closed_form_gaussian

    def kernel_bounds(self, tail: float) -> Tuple[float, float]:
        """Interval outside which each tail holds at most ``tail`` mass."""
        lo = max(self.support[0], float(self.ppf(tail)))
        hi = min(self.support[1], float(self.ppf(1.0 - tail)))
        return lo, hi


def make_gaussian() -> IncrementModel:
    norm = stats.norm()
    return IncrementModel(
        name="gaussian",
        sampler=lambda rng, size: rng.standard_normal(size),
        pdf_fn=norm.pdf,
        cdf_fn=special.ndtr,
        ppf_fn=special.ndtri,
        support=(-math.inf, math.inf),
        symmetric=True,
        closed_form_gaussian=True,
        ladder_constants_exact=(1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)),
    )


def _centered_exp_pdf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where(x <= 1.0, np.exp(np.minimum(x, 1.0) - 1.0), 0.0)


def _centered_exp_cdf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where(x <= 1.0, np.exp(np.minimum(x, 1.0) - 1.0), 1.0)


def _centered_exp_ppf(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore"):
        return 1.0 + np.log(q)


def make_centered_exponential() -> IncrementModel:
    """X = 1 - E with E ~ Exp(1).

    Downward overshoots below any level are Exp(1), so E(-S_{T_0}) = 1.
    """
    return IncrementModel(
        name="centered_exponential",
        sampler=lambda rng, size: 1.0 - rng.standard_exponential(size),
        pdf_fn=_centered_exp_pdf,
        cdf_fn=_centered_exp_cdf,
        ppf_fn=_centered_exp_ppf,
        support=(-math.inf, 1.0),
        symmetric=False,
        ladder_constants_exact=(1.0, 0.5),
    )


def make_uniform_centered() -> IncrementModel:
    law = stats.uniform(loc=-SQRT3, scale=2.0 * SQRT3)
    return IncrementModel(
        name="uniform_centered",
        sampler=lambda rng, size: rng.uniform(-SQRT3, SQRT3, size),
        pdf_fn=law.pdf,
        cdf_fn=law.cdf,
        ppf_fn=law.ppf,
        support=(-SQRT3, SQRT3),
        symmetric=True,
        ladder_constants_exact=None,
    )


def from_distribution(
    name: str,
    pdf: ArrayFn,
    cdf: ArrayFn,
    ppf: ArrayFn,
    support: Tuple[float, float] = (-math.inf, math.inf),
    symmetric: bool = False,
    tolerance: float = 1e-6,
) -> IncrementModel:
    """Build a user law from a (pdf, cdf, inverse-cdf) triple.

    The law is validated by quadrature: total mass 1, mean 0 and variance 1
    within ``tolerance``. Boundedness of some n-fold density is assumed, not
    checked.
    """
    lo, hi = support
    pieces = [(lo, 0.0), (0.0, hi)] if lo < 0.0 < hi else [(lo, hi)]

    def moment(power: int) -> float:
        total = 0.0
        for a, b in pieces:
            value, _ = integrate.quad(lambda t: t**power * float(pdf(np.asarray(t))), a, b, limit=200)
            total += value
        return total

    mass, mean, second = moment(0), moment(1), moment(2)
    if abs(mass - 1.0) > tolerance:
        raise DomainError(f"density of {name} integrates to {mass}, not 1")
    if abs(mean) > tolerance:
        raise DomainError(f"law {name} has mean {mean}, expected 0")
    if abs(second - 1.0) > tolerance:
        raise DomainError(f"law {name} has variance {second}, expected 1")
    LOGGER.info("user_law_validated", extra={"law": name, "mass": mass, "mean": mean, "variance": second})
    return IncrementModel(
        name=name,
        sampler=lambda rng, size: ppf(rng.random(size)),
        pdf_fn=pdf,
        cdf_fn=cdf,
        ppf_fn=ppf,
        support=support,
        symmetric=symmetric,
    )


BUILTIN_MODELS = {
    "gaussian": make_gaussian,
    "centered_exponential": make_centered_exponential,
    "exponential": make_centered_exponential,
    "uniform_centered": make_uniform_centered,
    "uniform": make_uniform_centered,
}


def get_model(name: str) -> IncrementModel:
    try:
        return BUILTIN_MODELS[name]()
    except KeyError:
        raise DomainError(f"Unknown increment model: {name}") from None


# ---------------------------------------------------------------- lattice


@dataclass(frozen=True)
class LatticeKernel:
    """Cell masses of X on h*Z: ``weights[j]`` is the mass of cell ``offset + j``."""

    h: float
    offset: int
    weights: np.ndarray = field(repr=False)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def upper_index(self) -> int:
        return self.offset + self.weights.size - 1


@dataclass(frozen=True)
class LatticeDensity:
    """Density values on the nodes ``offset + (start + j) * h``."""

    h: float
    start: int
    values: np.ndarray = field(repr=False)
    truncated_mass: float = 0.0
    offset: float = 0.0

    @property
    def nodes(self) -> np.ndarray:
        return self.offset + (self.start + np.arange(self.values.size)) * self.h

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.h)

    def at_index(self, index: np.ndarray) -> np.ndarray:
        """Values at global lattice indices; zero outside the stored window."""
        index = np.asarray(index)
        local = index - self.start
        inside = (local >= 0) & (local < self.values.size)
        out = np.zeros(local.shape)
        out[inside] = self.values[local[inside]]
        return out

    def __call__(self, x: np.ndarray | float) -> np.ndarray | float:
        out = np.interp(np.asarray(x, dtype=float), self.nodes, self.values, left=0.0, right=0.0)
        return float(out) if np.ndim(out) == 0 else out

    def cdf(self, x: np.ndarray | float) -> np.ndarray | float:
        """Piecewise-linear distribution function built from the cell masses."""
        edges = self.offset + (self.start + np.arange(self.values.size + 1) - 0.5) * self.h
        cumulative = np.concatenate(([0.0], np.cumsum(self.values) * self.h))
        out = np.interp(np.asarray(x, dtype=float), edges, cumulative, left=0.0, right=cumulative[-1])
        return float(out) if np.ndim(out) == 0 else out


def lattice_kernel(model: IncrementModel, h: float, tail: float = 1e-15, shift: float = 0.0) -> LatticeKernel:
    """Masses of X in the cells ``[shift + (j - 1/2) h, shift + (j + 1/2) h)``."""
    lo, hi = model.kernel_bounds(tail)
    j_lo = int(math.floor((lo - shift) / h - 0.5))
    j_hi = int(math.ceil((hi - shift) / h + 0.5))
    idx = np.arange(j_lo, j_hi + 1)
    upper = np.asarray(model.cdf(shift + (idx + 0.5) * h), dtype=float)
    lower = np.asarray(model.cdf(shift + (idx - 0.5) * h), dtype=float)
    weights = np.clip(upper - lower, 0.0, None)
    nz = np.nonzero(weights)[0]
    if nz.size == 0:
        raise GridResolutionError(f"lattice kernel of {model.name} is empty at h={h}", h=h)
    weights = weights[nz[0] : nz[-1] + 1]
    return LatticeKernel(h=h, offset=int(idx[nz[0]]), weights=weights)


def window_indices(kernel: LatticeKernel, m: int, width_sd: float, center: int = 0) -> Tuple[int, int]:
    """Lattice index window kept at time m for a walk started near index ``center``.

    The window never cuts inside the exact support of S_m and never extends
    more than one kernel width beyond ``width_sd`` standard deviations.
    """
    h = kernel.h
    spread = int(math.ceil(width_sd * math.sqrt(m) / h))
    lo = max(m * kernel.offset, -spread + kernel.offset)
    hi = min(m * kernel.upper_index, spread + kernel.upper_index)
    return center + lo, center + hi


def convolve_step(values: np.ndarray, start: int, kernel: LatticeKernel) -> Tuple[np.ndarray, int]:
    """One step of the lattice recursion: density of the next position."""
    out = np.convolve(values, kernel.weights)
    return out, start + kernel.offset


def clip_window(values: np.ndarray, start: int, lo: int, hi: int) -> Tuple[np.ndarray, int, float]:
    """Restrict to indices [lo, hi]; returns the dropped (unnormalised) mass."""
    end = start + values.size - 1
    a = max(lo, start)
    b = min(hi, end)
    if a > b:
        return np.zeros(1), lo, float(values.sum())
    kept = values[a - start : b - start + 1]
    dropped = float(values.sum() - kept.sum())
    return kept, a, dropped


def unkilled_lattice(
    model: IncrementModel,
    m: int,
    grid: GridConfig,
    offset: float = 0.0,
    snapshots: Sequence[int] = (),
) -> LatticeDensity | Dict[int, LatticeDensity]:
    """Lattice density of S_m (no killing) on the nodes ``offset + j h``.

    With ``snapshots`` a dict of the densities at those times (and m) is
    returned from a single pass.
    """
    if m < 1:
        raise DomainError(f"m must be >= 1, got {m}")
    h = grid.spacing
    kernel = lattice_kernel(model, h, grid.kernel_tail)
    first = lattice_kernel(model, h, grid.kernel_tail, shift=offset)
    values = first.weights / h
    start = first.offset
    truncated = 0.0
    wanted = {int(s) for s in snapshots if 1 <= s <= m} | {m}
    taken: Dict[int, LatticeDensity] = {}
    for step in range(1, m + 1):
        if step > 1:
            values, start = convolve_step(values, start, kernel)
            lo, hi = window_indices(kernel, step, grid.width_sd)
            values, start, dropped = clip_window(values, start, lo, hi)
            truncated += dropped * h
        if step in wanted:
            taken[step] = LatticeDensity(h=h, start=start, values=values, truncated_mass=truncated, offset=offset)
    return taken if snapshots else taken[m]


def nfold_density(
    model: IncrementModel,
    m: int,
    x: np.ndarray | float,
    grid: Optional[GridConfig] = None,
) -> np.ndarray | float:
    """Density f_m(x) of S_m.

    Closed form for the Gaussian law and for m = 1; otherwise lattice
    convolution. A mass deficit above ``grid.mass_tolerance`` is reported as
    a grid-too-coarse error.
    """
    if m < 1:
        raise DomainError(f"m must be >= 1, got {m}")
    if model.is_gaussian:
        return model.pdf(np.asarray(x, dtype=float) / math.sqrt(m)) / math.sqrt(m)
    if m == 1:
        return model.pdf(x)
    grid = grid or GridConfig()
    lattice = unkilled_lattice(model, m, grid)
    deficit = abs(1.0 - lattice.mass)
    if deficit > grid.mass_tolerance:
        raise GridResolutionError(
            f"mass deficit {deficit:.3g} for S_{m} of {model.name}", deficit=deficit, m=m
        )
    return lattice(x)


def sparre_andersen(m: int) -> float:
    """C(2m, m) 4^{-m}: P(T_0 > m) for any symmetric continuous increment law."""
    if m < 0:
        raise DomainError(f"m must be >= 0, got {m}")
    return float(special.comb(2 * m, m, exact=True)) / 4.0**m


def local_clt_distance(
    model: IncrementModel,
    m: int,
    grid: Optional[GridConfig] = None,
    span: float = 6.0,
    points: int = 1201,
) -> float:
    """sup_x |sqrt(m) f_m(sqrt(m) x) - phi(x)| over x in [-span, span]."""
    grid = grid or GridConfig()
    xs = np.linspace(-span, span, points)
    scaled = math.sqrt(m) * np.asarray(nfold_density(model, m, math.sqrt(m) * xs, grid))
    phi = INV_SQRT_2PI * np.exp(-0.5 * xs * xs)
    return float(np.max(np.abs(scaled - phi)))


__all__ = [
    "IncrementModel",
    "LatticeDensity",
    "LatticeKernel",
    "BUILTIN_MODELS",
    "clip_window",
    "convolve_step",
    "from_distribution",
    "get_model",
    "lattice_kernel",
    "local_clt_distance",
    "make_centered_exponential",
    "make_gaussian",
    "make_uniform_centered",
    "nfold_density",
    "sparre_andersen",
    "unkilled_lattice",
    "window_indices",
]
