import math

import numpy as np
import pytest

from plsgd import experiments, problems
from plsgd.experiments import (
    Arm,
    ExperimentConfig,
    ExcessiveFailureError,
    NonPositiveValue,
    cell_seeds,
    fit_loglog_slope,
    resolve_schedules,
    run_arm,
    run_experiment,
    theorem1_envelope,
)
from plsgd.problems import ProblemSpec


def _spec(dim=6, **overrides):
    base = dict(family="linear_realizable", dim=dim, input_scale=math.sqrt(3.0),
                w_star=tuple(np.ones(dim) / math.sqrt(dim)), operating_radius=2.0, seed=1)
    base.update(overrides)
    return ProblemSpec(**base)


def _config(**overrides):
    kwargs = dict(problem=_spec(), n_grid=(32, 64, 128, 256), seeds_per_cell=3,
                  arms=(Arm.ONE_PASS_T1, Arm.MULTI_PASS_T3), master_seed=99)
    kwargs.update(overrides)
    config = ExperimentConfig(**kwargs)
    config.validate()
    return config


# --------------------------------------------------------------------------
# slope fitting


def test_fit_exact_power_laws():
    slope, _, r2 = fit_loglog_slope([(n, 7.0 / n) for n in (10, 100, 1000)])
    assert slope == pytest.approx(-1.0, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)
    slope, _, r2 = fit_loglog_slope([(n, 3.0 / n**2) for n in (10, 100, 1000)])
    assert slope == pytest.approx(-2.0, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_fit_against_independent_least_squares():
    points = [(10, 1.0), (100, 0.05), (1000, 0.002)]
    slope, intercept, _ = fit_loglog_slope(points)
    assert slope == pytest.approx(-1.349, abs=5e-4)
    rng = np.random.default_rng(8)
    for _ in range(100):
        k = rng.integers(3, 12)
        ns = np.unique(rng.integers(2, 10_000, size=k))
        if len(ns) < 3:
            continue
        vals = np.exp(rng.normal(size=len(ns)))
        slope, intercept, _ = fit_loglog_slope(list(zip(ns.tolist(), vals.tolist())))
        # independent normal-equation solve
        x, y = np.log(ns), np.log(vals)
        xbar, ybar = x.mean(), y.mean()
        beta = float(np.sum((x - xbar) * (y - ybar)) / np.sum((x - xbar) ** 2))
        alpha = float(ybar - beta * xbar)
        assert slope == pytest.approx(beta, rel=1e-10, abs=1e-12)
        assert intercept == pytest.approx(alpha, rel=1e-10, abs=1e-12)


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_loglog_slope([(10, 1.0), (20, 0.5)])
    with pytest.raises(ValueError):
        fit_loglog_slope([(10, 1.0), (10, 0.5), (30, 0.1)])
    with pytest.raises(NonPositiveValue):
        fit_loglog_slope([(10, 1.0), (20, 0.0), (30, 0.1)])


# --------------------------------------------------------------------------
# cells and arms


def test_zero_step_override_reports_initial_excess():
    config = _config(zero_step_override=True, seeds_per_cell=3)
    instance = problems.generate_problem(config.problem)
    w0 = experiments.initial_point(config, instance)
    expected = problems.excess_risk(instance, w0)
    for arm in (Arm.ONE_PASS_T1, Arm.MULTI_PASS_T3, Arm.EPOCH_SWEEP):
        cell = run_arm(config, arm, 64, 0, instance)
        assert cell.excess_risk == expected
        assert cell.steps == 0


def test_started_at_minimum_stays_there():
    config = _config(w0_offset=0.0, arms=(Arm.EPOCH_SWEEP,), epoch_sweep_epochs=4)
    instance = problems.generate_problem(config.problem)
    cell = run_arm(config, Arm.EPOCH_SWEEP, 32, 0, instance)
    assert cell.usable
    assert all(excess == 0.0 for _, excess in cell.sweep)


def test_paired_dominance_and_ratio_growth():
    config = _config(seeds_per_cell=4)
    instance = problems.generate_problem(config.problem)
    means = {}
    for arm in config.arms:
        for n in config.n_grid:
            cells = [run_arm(config, arm, n, k, instance) for k in range(4)]
            assert all(c.usable for c in cells)
            means[(arm, n)] = float(np.mean([c.excess_risk for c in cells]))
    ratios = []
    for n in config.n_grid:
        assert means[(Arm.MULTI_PASS_T3, n)] <= means[(Arm.ONE_PASS_T1, n)]
        ratios.append(means[(Arm.ONE_PASS_T1, n)] / means[(Arm.MULTI_PASS_T3, n)])
    inversions = sum(1 for a, b in zip(ratios, ratios[1:]) if b < a)
    assert inversions <= 1


def test_arm_pairing_shares_first_epoch():
    # with the post-epoch stop time forced to zero, the multi-pass arm
    # reduces exactly to the one-pass arm on the same derived seeds
    config = _config()
    instance = problems.generate_problem(config.problem)
    one = run_arm(config, Arm.ONE_PASS_T1, 64, 2, instance)
    seeds = cell_seeds(config.master_seed, 64, 2)
    dataset = problems.generate_dataset(instance, 64, seeds["dataset"])
    w0 = experiments.initial_point(config, instance)
    schedule, trajectory = experiments._first_epoch(config, instance, dataset,
                                                    Arm.MULTI_PASS_T3, seeds, w0)
    assert problems.excess_risk(instance, trajectory.final_w) == one.excess_risk


def test_strongly_convex_arms_run_on_linear():
    config = _config(arms=(Arm.ONE_PASS_T4, Arm.MULTI_PASS_T6), seeds_per_cell=3)
    instance = problems.generate_problem(config.problem)
    c4 = run_arm(config, Arm.ONE_PASS_T4, 128, 0, instance)
    c6 = run_arm(config, Arm.MULTI_PASS_T6, 128, 0, instance)
    assert c4.usable and c6.usable
    assert c6.excess_risk <= c4.excess_risk
    assert "gamma_hat" in c4.schedule_inputs["epoch1"]


def test_strongly_convex_arm_skipped_without_gamma(sine_instance):
    config = ExperimentConfig(problem=sine_instance.spec, n_grid=(32, 64, 128, 256),
                              seeds_per_cell=3, arms=(Arm.ONE_PASS_T4,), master_seed=3)
    cell = run_arm(config, Arm.ONE_PASS_T4, 32, 0, sine_instance)
    assert cell.skipped_reason is not None
    assert "gamma" in cell.skipped_reason


def test_epoch_sweep_series():
    config = _config(arms=(Arm.EPOCH_SWEEP,), epoch_sweep_epochs=6)
    instance = problems.generate_problem(config.problem)
    cell = run_arm(config, Arm.EPOCH_SWEEP, 64, 1, instance)
    assert cell.usable
    epochs = [e for e, _ in cell.sweep]
    assert epochs == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    assert cell.sweep[-1][1] == pytest.approx(cell.excess_risk, rel=1e-12)
    assert cell.sweep[-1][1] < cell.sweep[0][1]


def test_cap_truncates_multi_pass():
    config = _config(cap_steps=400)
    instance = problems.generate_problem(config.problem)
    cell = run_arm(config, Arm.MULTI_PASS_T3, 256, 0, instance)
    assert cell.usable
    assert cell.truncated
    assert cell.steps == 400


def test_certified_constants_make_first_epoch_unconstructible():
    config = _config(constants_mode="certified")
    instance = problems.generate_problem(config.problem)
    cell = run_arm(config, Arm.ONE_PASS_T1, 256, 0, instance)
    assert cell.skipped_reason is not None
    assert "schedule" in cell.skipped_reason


def test_resolve_schedules_matches_run_arm():
    config = _config()
    instance = problems.generate_problem(config.problem)
    resolved = resolve_schedules(config, Arm.MULTI_PASS_T3, 128, 0, instance)
    cell = run_arm(config, Arm.MULTI_PASS_T3, 128, 0, instance)
    assert resolved["epoch1"]["eta"] == cell.schedule_inputs["epoch1"]["eta"]
    assert resolved["post_epoch"]["t"] == cell.schedule_inputs["post_epoch"]["t"]


# --------------------------------------------------------------------------
# experiment orchestration


def test_run_experiment_reports_and_failure_threshold(tmp_path):
    config = _config(seeds_per_cell=3)
    result = run_experiment(config, out_dir=tmp_path / "run", workers=2)
    arms = {r.arm for r in result.reports}
    assert arms == {Arm.ONE_PASS_T1, Arm.MULTI_PASS_T3}
    for report in result.reports:
        assert len(report.points) == 4
        assert math.isfinite(report.slope)
        assert 0.0 <= report.r_squared <= 1.0
    one = next(r for r in result.reports if r.arm is Arm.ONE_PASS_T1)
    multi = next(r for r in result.reports if r.arm is Arm.MULTI_PASS_T3)
    assert multi.slope < one.slope

    with pytest.raises(ExcessiveFailureError) as err:
        run_experiment(_config(constants_mode="certified"), workers=1)
    assert err.value.result is not None


def test_run_experiment_outputs_are_reproducible(tmp_path):
    config = _config(seeds_per_cell=3)
    d1, d2, d3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    run_experiment(config, out_dir=d1, workers=1)
    run_experiment(config, out_dir=d2, workers=1)
    run_experiment(config, out_dir=d3, workers=2)
    for name in ("cells.csv", "rates.csv", "config.json", "curve_OnePassT1.dat"):
        ref = (d1 / name).read_bytes()
        assert (d2 / name).read_bytes() == ref
        assert (d3 / name).read_bytes() == ref


def test_cells_csv_schema(tmp_path):
    config = _config(seeds_per_cell=3)
    run_experiment(config, out_dir=tmp_path, workers=1)
    lines = (tmp_path / "cells.csv").read_text().splitlines()
    assert lines[0] == "arm,n,seed,excess_risk,steps,epochs,skipped_reason"
    assert len(lines) == 1 + 2 * 4 * 3
    rates = (tmp_path / "rates.csv").read_text().splitlines()
    assert rates[0] == "arm,slope,intercept,r2"


def test_theorem1_envelope_shape():
    assert theorem1_envelope(100, 1.0, 2.0, 3.0) == pytest.approx(
        2.0 * 3.0 * math.log(100) / 100)


def test_config_validation():
    with pytest.raises(ValueError, match="n_grid"):
        _config(n_grid=(10, 20, 30))
    with pytest.raises(ValueError, match="n_grid"):
        _config(n_grid=(10, 20, 20, 30))
    with pytest.raises(ValueError, match="seeds_per_cell"):
        _config(seeds_per_cell=2)
    with pytest.raises(ValueError, match="w0_offset"):
        _config(w0_offset=5.0)
    with pytest.raises(ValueError, match="cap_steps"):
        _config(cap_steps=10)
