import math

import numpy as np
import pytest

from asymptotics import rayleigh_tail
from boundaries import constant, power
from config import DiagnosticsConfig, GridConfig
from diagnostics import active_governor
from errors import ConfigError, DegenerateEstimateError, DomainError, ModelMismatchError, RegimeMismatchError
from estimators import (
    EstimateRecord,
    SweepConfig,
    convergence_sweep,
    estimate_conditional_survival_bridge,
    estimate_conditional_survival_weighted,
    estimate_conditional_survival_window,
    estimate_Lg,
    estimate_rayleigh_tail,
    estimate_tau_tail,
    parse_k_rule,
    undershoot_values,
)
from increments import get_model, unkilled_lattice
from walk_sim import simulate_killed_batch


def test_bridge_estimator_with_unreachable_boundary():
    record = estimate_conditional_survival_bridge(get_model("gaussian"), constant(-1e9), 30, 15, 2000, seed=1)
    assert record.value == 1.0
    assert record.std_error == 0.0
    assert record.method == "bridge_direct"
    with pytest.raises(ModelMismatchError):
        estimate_conditional_survival_bridge(get_model("uniform"), constant(-1.0), 30, 15, 100, seed=1)


def test_weighted_estimator_is_unbiased_without_killing():
    record = estimate_conditional_survival_weighted(get_model("gaussian"), constant(-math.inf), 20, 10, 20_000, seed=2)
    assert abs(record.value - 1.0) < 4 * record.std_error
    assert record.extra["f_n0"] == pytest.approx(1.0 / math.sqrt(2.0 * math.pi * 20.0))


def test_weighted_estimator_for_skewed_law_without_killing():
    record = estimate_conditional_survival_weighted(
        get_model("centered_exponential"), constant(-math.inf), 20, 10, 20_000, seed=3
    )
    assert abs(record.value - 1.0) < 4 * record.std_error + 5e-3


def test_weighted_estimator_reduces_the_killed_walks_it_weights():
    model = get_model("uniform")
    boundary = constant(-1.0)
    record = estimate_conditional_survival_weighted(model, boundary, 30, 12, 5000, seed=13)
    batch = simulate_killed_batch(model, boundary, 12, 5000, 13, stream="weighted")
    density = unkilled_lattice(model, 18, GridConfig())
    weights = np.where(batch.survived, np.asarray(density(-batch.position)), 0.0) / record.extra["f_n0"]
    assert record.value == pytest.approx(weights.mean(), rel=1e-9)
    assert record.samples == 5000


def test_weighted_estimator_rejects_a_vanishing_normaliser():
    with pytest.raises(DomainError):
        estimate_conditional_survival_weighted(
            get_model("gaussian"), constant(-1.0), 20, 10, 100, seed=2, diagnostics=DiagnosticsConfig(density_floor=1.0)
        )
    assert active_governor().count("error") == 0


def test_weighted_and_bridge_estimators_agree_for_gaussian():
    model = get_model("gaussian")
    boundary = constant(-1.0)
    weighted = estimate_conditional_survival_weighted(model, boundary, 40, 20, 40_000, seed=4)
    direct = estimate_conditional_survival_bridge(model, boundary, 40, 20, 40_000, seed=4)
    joint = math.hypot(weighted.std_error, direct.std_error)
    assert abs(weighted.value - direct.value) < 5 * joint


def test_window_estimator():
    record = estimate_conditional_survival_window(get_model("uniform"), constant(-math.inf), 20, 10, 5000, seed=5)
    assert record.value == 1.0
    assert record.extra["delta"] == 0.1
    assert record.samples > 0
    with pytest.raises(DegenerateEstimateError):
        estimate_conditional_survival_window(get_model("uniform"), constant(-1.0), 20, 10, 100, seed=5, delta=1e-12)
    with pytest.raises(DomainError):
        estimate_conditional_survival_window(get_model("uniform"), constant(-1.0), 20, 10, 100, seed=5, delta=0.0)


def test_lg_matches_memoryless_overshoot():
    # With X = 1 - Exp(1) and g = 1 - theta, -S_tau = theta - 1 + Exp(1) independently of tau.
    theta = 2.0
    model = get_model("centered_exponential")
    boundary = constant(1.0 - theta)
    k, reps, seed = 50, 20_000, 6
    lg = estimate_Lg(model, boundary, k, reps, seed)
    batch = simulate_killed_batch(model, boundary, k, reps, seed, stream="lg")
    undershoot = undershoot_values(batch, k)
    assert lg.primary.value == pytest.approx(undershoot.mean(), rel=1e-12)

    killed = (batch.kill_index > 0).astype(float)
    residual = undershoot - theta * killed
    se = residual.std(ddof=1) / math.sqrt(reps)
    assert abs(residual.mean()) < 5 * se

    survived = batch.survived.astype(float)
    surv_se = survived.std(ddof=1) / math.sqrt(reps)
    # E S_{tau ^ k} = 0, so the two forms differ by g P(tau > k)
    assert abs(lg.difference + survived.mean()) < 5 * lg.difference_se + 5 * surv_se
    assert lg.primary.method == "undershoot"
    assert lg.terminal.method == "terminal_excess"


def test_lg_rejects_bad_input():
    with pytest.raises(DomainError):
        estimate_Lg(get_model("gaussian"), constant(-1.0), 0, 100, seed=0)
    with pytest.raises(DomainError):
        estimate_Lg(get_model("gaussian"), constant(-math.inf), 10, 100, seed=0)


def test_rayleigh_tail_at_zero_is_one():
    record = estimate_rayleigh_tail(
        get_model("gaussian"), constant(-1.0), 50, 0.0, 5000, seed=7, diagnostics=DiagnosticsConfig(min_survivors=100)
    )
    assert record.value == 1.0
    assert record.extra == {"v": 0.0, "reps": 5000}
    with pytest.raises(DomainError):
        estimate_rayleigh_tail(get_model("gaussian"), constant(-1.0), 50, -1.0, 100, seed=7)


def test_rayleigh_tail_flags_degenerate_conditioning():
    with pytest.raises(DegenerateEstimateError):
        estimate_rayleigh_tail(
            get_model("gaussian"),
            constant(-1.0),
            2000,
            1.0,
            200,
            seed=8,
            diagnostics=DiagnosticsConfig(min_survivors=1000),
        )
    assert active_governor().count("error") == 1
    assert active_governor().exit_status() == 3


def test_tau_tail_is_monotone_in_the_boundary():
    model = get_model("uniform")
    near = estimate_tau_tail(model, constant(-0.5), 100, 5000, seed=9)
    far = estimate_tau_tail(model, constant(-3.0), 100, 5000, seed=9)
    assert far.value > near.value
    assert near.k == 100


def test_parse_k_rule():
    assert parse_k_rule("frac:0.5")(400) == 200
    assert parse_k_rule("minus_pow:0.6")(400) == 363
    assert parse_k_rule("fixed:7")(400) == 7
    assert parse_k_rule("frac:0.1")(5) == 1


@pytest.mark.parametrize("rule", ["frac:1.5", "half", "fixed:2.5", "minus_pow:x", "power:0.5"])
def test_parse_k_rule_rejects_bad_rules(rule):
    with pytest.raises(ConfigError):
        parse_k_rule(rule)


def test_estimate_record_row_flattens_extra():
    record = EstimateRecord(0.5, 0.01, 100, "weighted", 3, extra={"f_n0": 0.2})
    row = record.as_row()
    assert row["f_n0"] == 0.2
    assert "extra" not in row
    assert row["method"] == "weighted"


def test_kernel_sweep_rows():
    cfg = SweepConfig(get_model("gaussian"), constant(-1.0), [100, 200], "frac:0.5", "far")
    rows = convergence_sweep(cfg)
    assert [row["n"] for row in rows] == [100, 200]
    assert [row["k"] for row in rows] == [50, 100]
    for row in rows:
        assert 0.0 < row["estimate"] < 1.0
        assert row["se"] == 0.0
        assert row["ratio"] == pytest.approx(row["estimate"] / row["asymptotic"])
        assert row["regime"] == "far"


def test_failing_sweep_row_is_kept():
    cfg = SweepConfig(get_model("gaussian"), constant(-1.0), [2, 100], "minus_pow:0.5", "near_small")
    rows = convergence_sweep(cfg)
    assert rows[0]["estimate"] == ""
    assert rows[0]["n"] == 2
    assert isinstance(rows[1]["estimate"], float)
    assert active_governor().count("warning") == 1


def test_sweep_config_validation():
    model, boundary = get_model("gaussian"), constant(-1.0)
    with pytest.raises(ConfigError):
        SweepConfig(model, boundary, [100], "frac:0.5", "far", method="window")
    with pytest.raises(ConfigError):
        SweepConfig(model, boundary, [], "frac:0.5", "far")
    with pytest.raises(ConfigError):
        SweepConfig(model, boundary, [100], "frac:2", "far")
    with pytest.raises(RegimeMismatchError):
        SweepConfig(model, boundary, [100], "frac:0.5", "nearish")


def _ratio_errors(rows):
    return [abs(row["ratio"] - 1.0) for row in rows]


@pytest.mark.slow
def test_far_regime_converges():
    cfg = SweepConfig(get_model("gaussian"), constant(-1.0), [200, 800, 3200], "frac:0.5", "far")
    errors = _ratio_errors(convergence_sweep(cfg))
    assert all(later <= earlier for earlier, later in zip(errors, errors[1:]))
    assert errors[-1] <= 0.15


@pytest.mark.slow
def test_near_small_regime_converges():
    cfg = SweepConfig(get_model("gaussian"), constant(0.0), [800, 3200], "minus_pow:0.6", "near_small")
    errors = _ratio_errors(convergence_sweep(cfg))
    assert errors[-1] <= 0.15


@pytest.mark.slow
def test_near_large_regime_improves_with_n():
    cfg = SweepConfig(get_model("gaussian"), power(1.0, 0.4), [400, 1600, 6400], "minus_pow:0.5", "near_large")
    errors = _ratio_errors(convergence_sweep(cfg))
    assert errors[0] > errors[1] > errors[2]


@pytest.mark.slow
@pytest.mark.parametrize("v", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("name", ["gaussian", "centered_exponential"])
def test_rayleigh_limit_at_large_n(name, v):
    record = estimate_rayleigh_tail(get_model(name), constant(0.0), 10_000, v, 400_000, seed=11)
    assert abs(record.value - rayleigh_tail(v)) < 5 * record.std_error


@pytest.mark.slow
def test_lg_approaches_theta():
    theta = 1.5
    lg = estimate_Lg(get_model("centered_exponential"), constant(1.0 - theta), 2000, 50_000, seed=12)
    assert abs(lg.primary.value - theta) < 0.1
    assert np.isfinite(lg.terminal.value)
