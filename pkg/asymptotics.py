"""Closed-form asymptotic evaluators and the Gaussian integral identities they rest on."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, Iterable, List, Tuple

import numpy as np
from scipy import integrate, special

from errors import DomainError, RegimeMismatchError

if TYPE_CHECKING:  # pragma: no cover
    from walk_sim import LadderStats

LOGGER = logging.getLogger("fpt_lab.asymptotics")

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
SQRT_PI_OVER_2 = math.sqrt(math.pi / 2.0)
SQRT_2PI = math.sqrt(2.0 * math.pi)
INV_SQRT_2PI = 1.0 / SQRT_2PI

# Beyond this argument gamma_fn switches to its asymptotic series.
_GAMMA_SERIES_FROM = 30.0


class RegimeLabel(str, Enum):
    """Position of k relative to n and of |g_k| relative to sqrt(n - k)."""

    FAR = "far"
    NEAR_SMALL = "near_small"
    NEAR_CRITICAL = "near_critical"
    NEAR_LARGE = "near_large"

    @classmethod
    def parse(cls, value: "str | RegimeLabel") -> "RegimeLabel":
        if isinstance(value, RegimeLabel):
            return value
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise RegimeMismatchError(f"Unknown regime: {value!r}") from None


def normal_tail_integral(y):
    """int_y^inf exp(-x^2/2) dx."""
    return SQRT_PI_OVER_2 * special.erfc(np.asarray(y, dtype=float) / math.sqrt(2.0))


def gamma_fn(y):
    """gamma(y) = exp(-y^2/2) - y * int_y^inf exp(-x^2/2) dx for y >= 0.

    Evaluated as exp(-y^2/2) * (1 - y sqrt(pi/2) erfcx(y/sqrt2)) so the two
    terms never cancel in absolute terms.
    """
    arr = np.asarray(y, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError("gamma_fn is defined for y >= 0")
    inner = 1.0 - arr * SQRT_PI_OVER_2 * special.erfcx(arr / math.sqrt(2.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv2 = 1.0 / (arr * arr)
        series = inv2 * (1.0 - inv2 * (3.0 - inv2 * (15.0 - 105.0 * inv2)))
    inner = np.where(arr > _GAMMA_SERIES_FROM, series, inner)
    out = np.exp(-0.5 * arr * arr) * inner
    return float(out) if out.ndim == 0 else out


def signed_gamma(z):
    """The same expression for any real z; grows like |z| sqrt(2 pi) as z -> -inf."""
    arr = np.asarray(z, dtype=float)
    neg = np.minimum(arr, 0.0)
    negative_branch = np.exp(-0.5 * neg * neg) - neg * normal_tail_integral(neg)
    out = np.where(arr >= 0.0, gamma_fn(np.maximum(arr, 0.0)), negative_branch)
    return float(out) if out.ndim == 0 else out


def _check_nk(n: int, k: int) -> None:
    if not 1 <= k < n:
        raise DomainError(f"need 1 <= k < n, got n={n}, k={k}")


def far_return_value(n: int, k: int, L: float) -> float:
    """sqrt(2/pi) L sqrt((n - k)/n) / sqrt(k)."""
    _check_nk(n, k)
    return SQRT_2_OVER_PI * L * math.sqrt((n - k) / n) / math.sqrt(k)


def near_return_value(
    n: int,
    k: int,
    L: float,
    g_k: float,
    regime: "str | RegimeLabel",
    signed: bool = False,
) -> float:
    """Near-return asymptotic value of P(tau_g > k | S_n = 0).

    With ``signed`` the critical branch uses gamma of g_k / sqrt(n - k) rather
    than of |g_k| / sqrt(n - k); only the signed form joins the large branch
    continuously for negative g_k.
    """
    _check_nk(n, k)
    regime = RegimeLabel.parse(regime)
    rest = n - k
    base = SQRT_2_OVER_PI * L * math.sqrt(rest) / k
    if regime is RegimeLabel.NEAR_SMALL:
        return base
    if regime is RegimeLabel.NEAR_CRITICAL:
        if g_k > 0:
            LOGGER.warning(
                "positive_critical_boundary",
                extra={"n": n, "k": k, "g_k": g_k, "signed": signed},
            )
        if signed:
            return base * signed_gamma(g_k / math.sqrt(rest))
        return base * gamma_fn(abs(g_k) / math.sqrt(rest))
    if regime is RegimeLabel.NEAR_LARGE:
        if g_k >= 0:
            raise RegimeMismatchError(f"near_large needs g_k < 0, got {g_k}")
        return 2.0 * L * abs(g_k) / k
    raise RegimeMismatchError("far regime is covered by far_return_value")


def asymptotic_value(
    n: int,
    k: int,
    L: float,
    g_k: float,
    regime: "str | RegimeLabel",
    signed: bool = False,
) -> float:
    regime = RegimeLabel.parse(regime)
    if regime is RegimeLabel.FAR:
        return far_return_value(n, k, L)
    return near_return_value(n, k, L, g_k, regime, signed=signed)


def rayleigh_tail(v: float) -> float:
    if v < 0:
        raise DomainError(f"v must be >= 0, got {v}")
    return math.exp(-0.5 * v * v)


def tau_tail_value(k: int, L: float) -> float:
    """sqrt(2/pi) L / sqrt(k), the tail of the unconditioned first-passage time."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    return SQRT_2_OVER_PI * L / math.sqrt(k)


def meander_density_q(u, v):
    """Transition density over unit time of Brownian motion killed at 0."""
    u_arr = np.asarray(u, dtype=float)
    v_arr = np.asarray(v, dtype=float)
    if np.any(u_arr <= 0) or np.any(v_arr <= 0):
        raise DomainError("meander density needs u > 0 and v > 0")
    diff = u_arr - v_arr
    out = INV_SQRT_2PI * np.exp(-0.5 * diff * diff) * -np.expm1(-2.0 * u_arr * v_arr)
    return float(out) if out.ndim == 0 else out


LOCAL_DENSITY_REGIMES = ("i", "ii_a", "ii_b", "iii")


def killed_walk_local_density(
    regime: str,
    x: float,
    y: float,
    n: int,
    delta: float,
    ladder: "LadderStats",
) -> float:
    """Approximate P_x(S_n in [y, y + delta); T_0 > n) for a walk started at x > 0.

    ``i``: x and y both o(sqrt n); ``ii_a``: x = o(sqrt n), y of order sqrt n;
    ``ii_b``: the dual; ``iii``: both of order sqrt n.
    """
    if regime not in LOCAL_DENSITY_REGIMES:
        raise RegimeMismatchError(f"Unknown local-limit regime: {regime!r}")
    if x < 0 or y < 0 or delta <= 0 or n < 1:
        raise DomainError("need x >= 0, y >= 0, delta > 0, n >= 1")
    root_n = math.sqrt(n)
    if regime == "i":
        mass, _ = integrate.quad(ladder.U, y, y + delta, limit=200)
        return ladder.V(x) * mass / (SQRT_2PI * n**1.5)
    if regime == "ii_a":
        return (
            SQRT_2_OVER_PI * ladder.mean_descending * ladder.V(x) * delta / root_n
            * (y / n) * math.exp(-y * y / (2.0 * n))
        )
    if regime == "ii_b":
        return (
            SQRT_2_OVER_PI * ladder.mean_ascending_dual * ladder.U(y) * delta / root_n
            * (x / n) * math.exp(-x * x / (2.0 * n))
        )
    if x == 0 or y == 0:
        raise RegimeMismatchError("regime iii needs x > 0 and y > 0")
    return delta * meander_density_q(x / root_n, y / root_n) / root_n


def boundary_layer_density(
    t: float,
    k: int,
    L: float,
    g_k: float,
    ladder: "LadderStats | None",
    branch: str,
) -> float:
    """Approximate density of the killed walk at height t at time k."""
    if t < g_k:
        raise DomainError(f"need t >= g_k, got t={t}, g_k={g_k}")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    prefactor = SQRT_2_OVER_PI * L / k**1.5
    if branch == "small_t":
        if ladder is None:
            raise RegimeMismatchError("small_t branch needs ladder statistics")
        return prefactor * ladder.mean_ascending_dual * ladder.U(t - g_k)
    if branch == "large_t":
        if t <= 0:
            raise RegimeMismatchError(f"large_t branch needs t > 0, got {t}")
        return prefactor * t * math.exp(-t * t / (2.0 * k))
    raise RegimeMismatchError(f"Unknown branch: {branch!r}")


# ---------------------------------------------------------------- identities


def _eps_check(eps: float) -> float:
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps must lie in (0, 1), got {eps}")
    return eps * (1.0 - eps)


def squared_tail_integral(x: float, eps: float) -> float:
    """int_x^inf y^2 exp(-y^2 / (2 eps (1 - eps))) dy in closed form."""
    a = _eps_check(eps)
    if x < 0:
        raise DomainError(f"x must be >= 0, got {x}")
    return x * a * math.exp(-x * x / (2.0 * a)) + a**1.5 * SQRT_2PI * special.ndtr(-x / math.sqrt(a))


def _b2_integrand(y: float, c: float, eps: float) -> float:
    return (
        y / (1.0 - eps) * math.exp(-y * y / (2.0 * (1.0 - eps)))
        * (math.exp(-(y - c) ** 2 / (2.0 * eps)) - math.exp(-(y + c) ** 2 / (2.0 * eps)))
    )


def mixed_tail_integral(c: float, eps: float) -> float:
    a = _eps_check(eps)
    if c <= 0:
        raise DomainError(f"c must be > 0, got {c}")
    return SQRT_2PI * math.sqrt(a) * c * math.exp(-0.5 * c * c)


def mixed_partial_integral(x: float, c: float, eps: float) -> float:
    """The same integral over [0, x]; bounded by 1 - exp(-x^2 / (2 (1 - eps)))."""
    a = _eps_check(eps)
    if c <= 0 or x < 0:
        raise DomainError("need c > 0 and x >= 0")
    root_a = math.sqrt(a)
    m = c * (1.0 - eps)
    gauss = a * (math.exp(-(x + m) ** 2 / (2.0 * a)) - math.exp(-(x - m) ** 2 / (2.0 * a)))
    central = special.ndtr((x + m) / root_a) - special.ndtr((m - x) / root_a)
    return math.exp(-0.5 * c * c) / (1.0 - eps) * (gauss + m * SQRT_2PI * root_a * central)


def mixed_partial_bound(x: float, eps: float) -> float:
    return -math.expm1(-x * x / (2.0 * (1.0 - eps)))


def _normal_mass(lo: float, hi: float) -> float:
    """Phi(hi) - Phi(lo) without cancellation in the upper tail."""
    if lo > 0:
        return special.ndtr(-lo) - special.ndtr(-hi)
    return special.ndtr(hi) - special.ndtr(lo)


def shifted_moment_integral(a: float, b: float, g_k: float, n: int, k: int) -> float:
    """int_a^b y exp(-(y + g_k)^2 / (2 (n - k))) dy; b may be infinite."""
    _check_nk(n, k)
    if not 0.0 <= a <= b:
        raise DomainError(f"need 0 <= a <= b, got a={a}, b={b}")
    s = float(n - k)
    root_s = math.sqrt(s)
    upper = 0.0 if math.isinf(b) else math.exp(-((b + g_k) ** 2) / (2.0 * s))
    hi = math.inf if math.isinf(b) else (b + g_k) / root_s
    return s * (math.exp(-((a + g_k) ** 2) / (2.0 * s)) - upper) - g_k * root_s * SQRT_2PI * _normal_mass(
        (a + g_k) / root_s, hi
    )


@dataclass
class IdentityReport:
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    bound_violations: int = 0
    evaluations: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def _quad(func, lo: float, hi: float, points: Iterable[float] = ()) -> float:
    inside = [p for p in points if lo < p < hi]
    value, _ = integrate.quad(func, lo, hi, epsabs=0.0, epsrel=1e-13, limit=400, points=inside or None)
    return value


def _rel(closed: float, numeric: float) -> float:
    return abs(closed - numeric) / max(abs(numeric), 1e-300)


def identity_lattice_check(size: int = 10) -> IdentityReport:
    """Compare every closed-form identity with adaptive quadrature on a parameter lattice."""
    report = IdentityReport()
    eps_grid = np.linspace(0.1, 0.9, size)
    errors: Dict[str, List[float]] = {"squared_tail": [], "mixed_tail": [], "mixed_partial": [], "shifted_moment": []}

    for eps in eps_grid:
        a = eps * (1.0 - eps)
        span = 40.0 * math.sqrt(a)
        for x in np.linspace(0.0, 2.0, size):
            numeric = _quad(lambda y: y * y * math.exp(-y * y / (2.0 * a)), x, x + span)
            errors["squared_tail"].append(_rel(squared_tail_integral(x, eps), numeric))
        for c in np.linspace(0.25, 3.0, size):
            m = c * (1.0 - eps)
            numeric = _quad(lambda y: _b2_integrand(y, c, eps), 0.0, m + span, points=[m])
            errors["mixed_tail"].append(_rel(mixed_tail_integral(c, eps), numeric))

    for c in np.linspace(0.25, 3.0, size):
        for x in np.linspace(0.1, 3.0, size):
            eps = 0.3
            m = c * (1.0 - eps)
            closed = mixed_partial_integral(x, c, eps)
            numeric = _quad(lambda y: _b2_integrand(y, c, eps), 0.0, x, points=[m])
            errors["mixed_partial"].append(_rel(closed, numeric))
            if closed > mixed_partial_bound(x, eps) * (1.0 + 1e-12):
                report.bound_violations += 1

    n, k = 1000, 900
    root_s = math.sqrt(n - k)
    for g in np.linspace(-3.0 * root_s, 3.0 * root_s, size):
        for lo in np.linspace(0.0, 2.0 * root_s, size):
            s = float(n - k)
            func = lambda y: y * math.exp(-((y + g) ** 2) / (2.0 * s))
            for hi in (lo + root_s, math.inf):
                top = max(lo, -g) + 40.0 * root_s if math.isinf(hi) else hi
                numeric = _quad(func, lo, top, points=[-g])
                errors["shifted_moment"].append(_rel(shifted_moment_integral(lo, hi, g, n, k), numeric))

    report.max_rel_error = {name: float(max(vals)) for name, vals in errors.items()}
    report.evaluations = sum(len(vals) for vals in errors.values())
    LOGGER.info(
        "identity_lattice_checked",
        extra={"max_rel_error": report.max_rel_error, "bound_violations": report.bound_violations},
    )
    return report


def crossover_ratio(eta: float) -> float:
    """sqrt(2/pi) signed_gamma(-eta) / (2 eta): critical over large branch at |g_k| = eta sqrt(n - k)."""
    if eta <= 0:
        raise DomainError(f"eta must be > 0, got {eta}")
    return SQRT_2_OVER_PI * signed_gamma(-eta) / (2.0 * eta)


__all__ = [
    "IdentityReport",
    "LOCAL_DENSITY_REGIMES",
    "RegimeLabel",
    "asymptotic_value",
    "boundary_layer_density",
    "crossover_ratio",
    "far_return_value",
    "gamma_fn",
    "identity_lattice_check",
    "killed_walk_local_density",
    "meander_density_q",
    "mixed_partial_bound",
    "mixed_partial_integral",
    "mixed_tail_integral",
    "near_return_value",
    "normal_tail_integral",
    "rayleigh_tail",
    "shifted_moment_integral",
    "signed_gamma",
    "squared_tail_integral",
    "tau_tail_value",
]
