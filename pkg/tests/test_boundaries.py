import math
from pathlib import Path

import numpy as np
import pytest

from boundaries import (
    BoundarySequence,
    boundary_scale_ratio,
    constant,
    fluctuation_ratio,
    l_infinity_criterion,
    load_table_boundary,
    log_boundary,
    parse_boundary,
    power,
    table,
)
from errors import DomainError


def test_parse_boundary_families():
    assert parse_boundary("const:-1").g(7) == -1.0
    assert parse_boundary("power:1,0.25").g(16) == pytest.approx(-2.0)
    assert parse_boundary("log:1").g(1) == pytest.approx(-math.log(2.0))
    assert parse_boundary("const:-inf").unreachable


@pytest.mark.parametrize("text", ["const", "const:a", "power:1", "wave:1", "power:1,0.6"])
def test_parse_boundary_rejects_bad_text(text):
    with pytest.raises(DomainError):
        parse_boundary(text)


def test_g_accepts_arrays_and_rejects_index_zero():
    b = power(2.0, 0.25)
    values = b.g(np.array([1, 16, 81]))
    assert np.allclose(values, [-2.0, -4.0, -6.0])
    with pytest.raises(DomainError):
        b.g(0)


def test_table_boundary_from_csv_with_header():
    Path("g.csv").write_text("g\n-1\n-1.5\n-2\n")
    b = load_table_boundary("g.csv")
    assert b.max_index == 3
    assert b.g(2) == -1.5
    with pytest.raises(DomainError):
        b.g(4)
    assert parse_boundary("table:g.csv").g(3) == -2.0


def test_table_boundary_rejects_bad_rows():
    Path("bad.csv").write_text("-1\nfoo\n")
    with pytest.raises(DomainError):
        load_table_boundary("bad.csv")
    with pytest.raises(DomainError):
        table([])


def test_shifted_and_negated():
    b = power(1.0, 0.25)
    moved = b.shifted(0.5)
    assert moved.g(16) == pytest.approx(-2.5)
    assert moved.negated().g(16) == pytest.approx(2.5)
    assert constant(-1.0).shifted(1.0).g(3) == -2.0
    assert b.shifted(0.0) is b


def test_non_increasing_flags():
    assert constant(0.0).non_increasing
    assert power(1.0, 0.25).non_increasing
    assert not power(-1.0, 0.25).non_increasing
    assert table([0.0, -1.0, -1.0]).non_increasing
    assert not table([0.0, 1.0]).non_increasing


def test_fluctuation_ratio():
    assert fluctuation_ratio(constant(-1.0), 100, 0.5) == 0.0
    expected = (2.0 - 8.0**0.25) / 2.0
    assert fluctuation_ratio(power(1.0, 0.25), 16, 0.5) == pytest.approx(expected)
    with pytest.raises(DomainError):
        fluctuation_ratio(constant(-1.0), 10, 1.0)


def test_boundary_scale_ratio_decreases_for_admissible_power():
    b = power(1.0, 0.25)
    ratios = [boundary_scale_ratio(b, horizon) for horizon in (100, 1000, 10_000)]
    assert ratios[0] > ratios[1] > ratios[2]
    with pytest.raises(DomainError):
        boundary_scale_ratio(b, 5)


def test_l_infinity_criterion_verdicts():
    assert l_infinity_criterion(constant(-1.0), 1000).criterion == "greenwood"
    report = l_infinity_criterion(power(1.0, 0.25), 5000)
    assert report.verdict == "finite"
    assert report.criterion == "wachtel"
    assert sorted(report.partial_sums) == [100, 1000, 5000]
    first, second = report.partial_sums[5000]
    assert first > 0 and second > 0
    assert l_infinity_criterion(power(-1.0, 0.25), 1000).verdict == "evidence_only"


def test_l_infinity_criterion_rejects_unreachable_and_short_horizon():
    with pytest.raises(DomainError):
        l_infinity_criterion(constant(-math.inf), 1000)
    with pytest.raises(DomainError):
        l_infinity_criterion(constant(-1.0), 999)


def test_boundary_labels():
    assert constant(-1.0).label == "const:-1"
    assert BoundarySequence("power", (1.0, 0.25)).label == "power:1,0.25"


FLUCTUATING = [
    power(1.0, 0.25),
    power(-0.5, 0.4),
    log_boundary(2.0),
    table(np.random.default_rng(3).normal(-2.0, 0.5, size=200)),
]


@pytest.mark.parametrize("b", FLUCTUATING, ids=lambda b: b.label)
def test_fluctuation_ratio_ignores_the_sign_of_the_boundary(b):
    for k in (16, 100, 200):
        for eps in (0.1, 0.5, 0.9):
            assert fluctuation_ratio(b.negated(), k, eps) == pytest.approx(fluctuation_ratio(b, k, eps), rel=1e-12)


@pytest.mark.parametrize("b", FLUCTUATING, ids=lambda b: b.label)
def test_fluctuation_ratio_grows_with_the_window(b):
    ratios = [fluctuation_ratio(b, 200, eps) for eps in np.linspace(0.05, 0.95, 19)]
    assert all(a <= b_ for a, b_ in zip(ratios, ratios[1:]))


@pytest.mark.parametrize(
    "b",
    [
        constant(-1.0),
        constant(0.5),
        power(0.0, 0.25),
        power(1.0, 0.25),
        power(-1.0, 0.25),
        log_boundary(0.0),
        log_boundary(1.0),
        log_boundary(-1.0),
        table([-1.0] * 50),
    ],
    ids=lambda b: b.label,
)
def test_criterion_verdict_follows_analytic_finiteness(b):
    report = l_infinity_criterion(b, 1000)
    assert (report.verdict == "finite") == bool(b.analytic_L_finite)
    assert (report.criterion is None) == (report.verdict == "evidence_only")


def test_flat_power_and_log_boundaries_use_the_constant_criterion():
    assert l_infinity_criterion(power(0.0, 0.25), 1000).criterion == "greenwood"
    assert l_infinity_criterion(log_boundary(0.0), 1000).criterion == "greenwood"
    assert l_infinity_criterion(log_boundary(1.0), 1000).criterion == "wachtel"
