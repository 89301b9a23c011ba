import csv
import math

import numpy as np
import pytest

from asymptotics import boundary_layer_density, killed_walk_local_density, tau_tail_value
from boundaries import constant, power
from config import GridConfig
from density_kernel import (
    boxed_mass,
    bridge_survival,
    close_to_boundary_bound,
    close_to_boundary_mass,
    export_grid_csv,
    gaussian_reversal_integral,
    kernel_prefactor,
    lattice_offset,
    local_clt_distance_grid,
    propagate_killed,
    unkilled_density,
)
from errors import DomainError, GridResolutionError
from increments import get_model, sparre_andersen
from estimators import estimate_Lg
from walk_sim import estimate_ladder_stats, exact_ladder_stats, simulate_bridge_batch


@pytest.mark.parametrize("level", [-math.inf, -1e9])
@pytest.mark.parametrize("name", ["gaussian", "centered_exponential"])
def test_unreachable_boundary_gives_certain_survival(name, level):
    result = bridge_survival(get_model(name), constant(level), 20, 10)
    assert result.value == pytest.approx(1.0, abs=1e-12)


def test_killed_mass_matches_sparre_andersen():
    grids = propagate_killed(get_model("gaussian"), constant(0.0), 3, snapshots=[1, 2])
    assert sorted(grids) == [1, 2, 3]
    for m, grid in grids.items():
        assert grid.survival_mass == pytest.approx(sparre_andersen(m), abs=1e-3)


def test_constant_boundary_sits_on_a_cell_edge():
    h = GridConfig().spacing
    offset = lattice_offset(constant(-1.3), h, 10)
    edge = (-1.3 - offset) / h + 0.5
    assert edge == pytest.approx(round(edge), abs=1e-9)
    assert lattice_offset(constant(-math.inf), h, 10) == 0.0


def test_coarse_kernel_is_reported():
    with pytest.raises(GridResolutionError):
        bridge_survival(get_model("gaussian"), constant(-1.0), 10, 5, GridConfig(kernel_tail=1e-3))


def test_bridge_survival_is_monotone_in_the_boundary():
    model = get_model("uniform")
    low = bridge_survival(model, constant(-2.0), 60, 30)
    high = bridge_survival(model, constant(-1.0), 60, 30)
    assert low.value >= high.value
    assert 0.0 < high.value < 1.0


def test_bridge_survival_validates_indices():
    with pytest.raises(DomainError):
        bridge_survival(get_model("gaussian"), constant(-1.0), 10, 10)
    with pytest.raises(DomainError):
        bridge_survival(get_model("uniform"), constant(-1.0), 10, 9)


def test_gaussian_bridge_survival_matches_closed_form_reversal():
    model = get_model("gaussian")
    result = bridge_survival(model, constant(-1.0), 50, 25)
    killed = propagate_killed(model, constant(-1.0), 25)
    assert result.value == pytest.approx(gaussian_reversal_integral(killed, 50), rel=1e-4)
    assert result.f_n0 == pytest.approx(1.0 / math.sqrt(2.0 * math.pi * 50.0))


def test_kernel_agrees_with_bridge_simulation():
    boundary = constant(-1.0)
    exact = bridge_survival(get_model("gaussian"), boundary, 40, 20)
    survived, _ = simulate_bridge_batch(40, 20, boundary, 40_000, seed=12)
    mean = survived.mean()
    se = math.sqrt(mean * (1.0 - mean) / survived.size)
    assert abs(exact.value - mean) < 4 * se + 2e-3


def test_boxed_mass_over_full_range_is_survival_mass():
    grid = propagate_killed(get_model("centered_exponential"), power(1.0, 0.25), 12)
    total = boxed_mass(grid, grid.lo - grid.h, grid.hi + grid.h)
    assert total == pytest.approx(grid.survival_mass, rel=1e-12)
    g_k = float(power(1.0, 0.25).g(12))
    assert close_to_boundary_mass(grid, g_k, 1.0) == boxed_mass(grid, g_k, g_k + 1.0)
    with pytest.raises(DomainError):
        boxed_mass(grid, 1.0, 0.0)


def test_exponential_prefactor_uses_memoryless_overshoot():
    # g - S_tau ~ Exp(1), so E(S_k + 1; tau > k) = 2 - P(tau > k) for g = -1.
    grid = propagate_killed(get_model("centered_exponential"), constant(-1.0), 20)
    assert kernel_prefactor(grid, -1.0) == pytest.approx(2.0 - grid.survival_mass, abs=0.02)


def test_propagation_continues_from_an_initial_grid():
    model = get_model("uniform")
    boundary = constant(-0.5)
    direct = propagate_killed(model, boundary, 6)
    partial = propagate_killed(model, boundary, 3)
    resumed = propagate_killed(model, boundary, 6, initial=partial)
    assert resumed.start == direct.start
    assert np.allclose(resumed.values, direct.values, rtol=0, atol=1e-15)
    with pytest.raises(DomainError):
        propagate_killed(model, boundary, 3, initial=direct)


def test_unkilled_density_is_close_to_gaussian_scaling():
    grid = unkilled_density(get_model("gaussian"), 4)
    assert grid.survival_mass == pytest.approx(1.0, abs=1e-6)
    assert local_clt_distance_grid(grid) < 1e-3


def test_export_grid_csv(tmp_path):
    grid = propagate_killed(get_model("gaussian"), constant(-1.0), 4)
    out = export_grid_csv(tmp_path / "grids" / "h4.csv", grid)
    with out.open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["node", "value"]
    assert len(rows) == grid.values.size + 1
    assert float(rows[1][0]) == grid.lo


def test_chapman_kolmogorov_split_for_moving_boundary():
    model = get_model("centered_exponential")
    boundary = power(1.0, 0.25)
    offset = lattice_offset(boundary, GridConfig().spacing, 40)
    direct = propagate_killed(model, boundary, 40, snapshots=[17])
    for j in (1, 17, 39):
        partial = propagate_killed(model, boundary, j, offset=offset)
        resumed = propagate_killed(model, boundary, 40, initial=partial)
        assert resumed.start == direct[40].start
        assert np.max(np.abs(resumed.values - direct[40].values)) <= 1e-8
    partial = propagate_killed(model, boundary, 17, offset=offset)
    assert np.max(np.abs(partial.values - direct[17].values)) <= 1e-8


def test_close_to_boundary_bound_formula():
    assert close_to_boundary_bound(100, 2.0, 1.5, slack=1.0) == pytest.approx(4.0 * 1.5 / (math.sqrt(2.0 * math.pi) * 1000.0))
    assert close_to_boundary_bound(100, 2.0, 1.5) == pytest.approx(1.1 * close_to_boundary_bound(100, 2.0, 1.5, slack=1.0))


K_LARGE = 10_000
# h = 0.05 as in the default grid, over a narrower window
LARGE_K_GRID = GridConfig(nodes=321, width_sd=8.0)


@pytest.fixture(scope="module")
def gaussian_killed_at_large_k():
    return propagate_killed(get_model("gaussian"), constant(-1.0), K_LARGE, LARGE_K_GRID)


@pytest.mark.slow
def test_close_to_boundary_mass_respects_the_quadratic_bound(gaussian_killed_at_large_k):
    grid = gaussian_killed_at_large_k
    L_hat = estimate_Lg(get_model("gaussian"), constant(-1.0), K_LARGE, 20_000, seed=41).primary.value
    # the renewal offset of U adds about 1.17 / x_k to the ratio, so x_k must exceed ~12 for a 10% slack
    x_k = K_LARGE**0.35
    mass = close_to_boundary_mass(grid, -1.0, x_k)
    assert mass <= close_to_boundary_bound(K_LARGE, x_k, L_hat)
    assert mass >= close_to_boundary_bound(K_LARGE, x_k, L_hat, slack=0.9)


@pytest.mark.slow
def test_boundary_layer_density_matches_kernel(gaussian_killed_at_large_k):
    grid = gaussian_killed_at_large_k
    L = kernel_prefactor(grid, -1.0)
    t = K_LARGE**0.3
    target = grid(t)
    large = boundary_layer_density(t, K_LARGE, L, -1.0, None, "large_t")
    small = boundary_layer_density(t, K_LARGE, L, -1.0, exact_ladder_stats(get_model("gaussian"), 20.0), "small_t")
    assert large == pytest.approx(target, rel=0.2)
    assert small == pytest.approx(target, rel=0.2)


@pytest.mark.slow
def test_tau_tail_matches_kernel_survival(gaussian_killed_at_large_k):
    grid = gaussian_killed_at_large_k
    ratio = grid.survival_mass / tau_tail_value(K_LARGE, kernel_prefactor(grid, -1.0))
    assert 0.97 <= ratio <= 1.03


@pytest.mark.slow
def test_small_height_local_density_matches_kernel():
    n, x, y, delta = K_LARGE, 2.0, 3.0, 0.1
    model = get_model("gaussian")
    grid = propagate_killed(model, constant(0.0), n, LARGE_K_GRID, start=x)
    ladder = estimate_ladder_stats(model, 100_000, 10.0, seed=43)
    target = boxed_mass(grid, y, y + delta)
    assert killed_walk_local_density("i", x, y, n, delta, ladder) == pytest.approx(target, rel=0.15)


@pytest.mark.slow
def test_kernel_agrees_with_bridge_simulation_at_scale():
    boundary = constant(-1.0)
    exact = bridge_survival(get_model("gaussian"), boundary, 400, 200)
    survived, _ = simulate_bridge_batch(400, 200, boundary, 1_000_000, seed=44)
    mean = survived.mean()
    se = math.sqrt(mean * (1.0 - mean) / survived.size)
    assert abs(exact.value - mean) < 4 * se
