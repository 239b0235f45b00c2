"""Acceptance suite: every criterion at its stated tolerance, one
pass/fail line per criterion (run with -s to see them as they finish)."""

import math
import os

import numpy as np
import pytest

from plsgd import experiments, gradgap, problems, sgd
from plsgd.experiments import Arm, ExperimentConfig, run_arm, run_experiment, theorem1_envelope
from plsgd.problems import Dataset, ProblemSpec, generate_dataset, generate_problem

WORKERS = min(8, os.cpu_count() or 1)
MASTER_SEED = 20250809


def _report(criterion: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


def _headline_spec(family="linear_realizable", **overrides):
    base = dict(family=family, dim=10, input_scale=math.sqrt(3.0),
                w_star=tuple(np.ones(10) / math.sqrt(10)), operating_radius=2.0, seed=1)
    base.update(overrides)
    return ProblemSpec(**base)


@pytest.fixture(scope="module")
def headline_result():
    config = ExperimentConfig(
        problem=_headline_spec(),
        n_grid=(64, 128, 256, 512, 1024, 2048),
        seeds_per_cell=20,
        arms=(Arm.ONE_PASS_T1, Arm.MULTI_PASS_T3),
        master_seed=MASTER_SEED,
        cap_steps=10**8,
    )
    return run_experiment(config, workers=WORKERS)


def _means(result, arm):
    report = next(r for r in result.reports if r.arm is arm)
    return report, {n: m for n, m, _ in report.points}


def test_criterion_1_rate_separation(headline_result):
    one_report, one = _means(headline_result, Arm.ONE_PASS_T1)
    multi_report, multi = _means(headline_result, Arm.MULTI_PASS_T3)
    grid = headline_result.config.n_grid

    dominance = all(multi[n] <= one[n] for n in grid)
    ratio_64 = one[64] / multi[64]
    ratio_2048 = one[2048] / multi[2048]
    ok = (one_report.slope <= -0.7 and multi_report.slope <= -1.6
          and dominance and ratio_2048 >= 5 * ratio_64)
    _report(
        "1 (rate separation)", ok,
        f"slope(OnePassT1)={one_report.slope:.3f} (<= -0.7), "
        f"slope(MultiPassT3)={multi_report.slope:.3f} (<= -1.6), "
        f"dominance at every n: {dominance}, "
        f"ratio growth {ratio_2048 / ratio_64:.3g}x (>= 5x)",
    )


def test_criterion_2_noisy_control():
    config = ExperimentConfig(
        problem=_headline_spec(family="linear_noisy", noise_std=0.1),
        n_grid=(64, 128, 256, 512, 1024, 2048),
        seeds_per_cell=20,
        arms=(Arm.MULTI_PASS_T3,),
        master_seed=MASTER_SEED + 1,
        cap_steps=10**8,
    )
    result = run_experiment(config, workers=WORKERS)
    report, _ = _means(result, Arm.MULTI_PASS_T3)
    ok = -1.4 <= report.slope <= -0.6
    _report("2 (noisy control)", ok,
            f"slope(MultiPassT3)={report.slope:.3f} must stay in [-1.4, -0.6]: "
            "the realizable-only fast rate must not appear under label noise")


def test_criterion_3_nonconvex_pl_arm():
    spec = ProblemSpec(
        family="sine_link_realizable", dim=5, input_scale=0.8,
        w_star=tuple(0.8 * np.ones(5) / math.sqrt(5)), operating_radius=1.0,
        link_amplitude=0.5, seed=2,
    )
    instance = generate_problem(spec)
    lam_min = float(np.min(instance.sigma_diag))
    measured_mu = problems.verify_pl(instance, 2000, seed=5)

    config = ExperimentConfig(
        problem=spec,
        n_grid=(64, 128, 256, 512, 1024),
        seeds_per_cell=20,
        arms=(Arm.ONE_PASS_T1, Arm.MULTI_PASS_T3),
        master_seed=MASTER_SEED + 2,
        cap_steps=10**8,
    )
    result = run_experiment(config, workers=WORKERS)
    multi_report, multi = _means(result, Arm.MULTI_PASS_T3)

    one_cells = {(c.n, c.seed_index): c for c in result.cells
                 if c.arm is Arm.ONE_PASS_T1 and c.usable}
    pairs = [(c, one_cells[(c.n, c.seed_index)]) for c in result.cells
             if c.arm is Arm.MULTI_PASS_T3 and c.usable and (c.n, c.seed_index) in one_cells]
    dominated = sum(1 for m, o in pairs if m.excess_risk <= o.excess_risk)
    dominance_frac = dominated / len(pairs)

    ok = (measured_mu > 0.1 * lam_min and multi_report.slope <= -1.4
          and dominance_frac >= 0.9)
    _report("3 (non-convex PL arm)", ok,
            f"measured mu={measured_mu:.4f} (> {0.1 * lam_min:.4f}), "
            f"slope(MultiPassT3)={multi_report.slope:.3f} (<= -1.4), "
            f"paired dominance at {dominance_frac:.1%} of cells (>= 90%)")


def test_criterion_4_theorem1_envelope_shape(headline_result):
    report, means = _means(headline_result, Arm.ONE_PASS_T1)
    instance = headline_result.instance
    grid = headline_result.config.n_grid
    ratios = []
    for n in grid:
        inputs = report.schedule_inputs[n]["epoch1"]
        envelope = theorem1_envelope(n, inputs["mu"], inputs["sigma2"], inputs["L"])
        ratios.append(means[n] / envelope)
    finite = all(math.isfinite(r) for r in ratios)
    top_half = ratios[len(grid) // 2:]
    non_increasing = all(b <= a * (1 + 1e-12) for a, b in zip(top_half, top_half[1:]))
    ok = finite and non_increasing
    _report("4 (first-epoch envelope shape)", ok,
            f"ratios={['%.4g' % r for r in ratios]}, finite={finite}, "
            f"non-increasing over top half: {non_increasing}")


def test_criterion_5_gradient_gap_scaling():
    spec = ProblemSpec(family="linear_realizable", dim=5, input_scale=math.sqrt(3.0),
                       w_star=tuple(np.ones(5) / math.sqrt(5)), operating_radius=2.0, seed=3)
    instance = generate_problem(spec)
    recipe = gradgap.RegionRecipe(kind="ball", reference="fixed", offset=1.0,
                                  n_candidates=100_000)
    n_grid = [250, 500, 1000, 2000, 4000]
    result = gradgap.gap_scaling_experiment(instance, n_grid, seeds=20, recipe=recipe,
                                            master_seed=MASTER_SEED + 3)
    slope, _, _ = experiments.fit_loglog_slope(result.medians)

    worst = math.inf
    for cell in result.cells:
        dataset = generate_dataset(instance, cell.n,
                                   gradgap.derive_seed(MASTER_SEED + 3, "gapdata",
                                                       cell.n, cell.seed_index))
        closed = gradgap.ball_gap_closed_form(instance, dataset, 1.0)
        worst = min(worst, cell.report.max_gap / closed)
    ok = -0.7 <= slope <= -0.3 and worst >= 0.95
    _report("5 (gradient-gap scaling)", ok,
            f"median-gap slope={slope:.3f} in [-0.7, -0.3], "
            f"worst search/closed-form ratio={worst:.4f} (>= 0.95)")


def test_criterion_6_saturation_probe():
    n = 256
    spec = ProblemSpec(family="linear_realizable", dim=200, input_scale=math.sqrt(3.0),
                       w_star=tuple(np.ones(200) / math.sqrt(200)), operating_radius=2.0, seed=4)
    config = ExperimentConfig(
        problem=spec, n_grid=(64, 128, 256, 512), seeds_per_cell=20,
        arms=(Arm.EPOCH_SWEEP,), epoch_sweep_epochs=2 * n,
        master_seed=MASTER_SEED + 4, cap_steps=10**8,
    )
    instance = generate_problem(spec)
    at_n, at_2n = [], []
    for seed_index in range(config.seeds_per_cell):
        cell = run_arm(config, Arm.EPOCH_SWEEP, n, seed_index, instance)
        assert cell.usable and not cell.truncated
        series = dict(cell.sweep)
        at_n.append(series[float(n)])
        at_2n.append(series[float(2 * n)])
    mean_n, mean_2n = float(np.mean(at_n)), float(np.mean(at_2n))
    ok = mean_n <= 2.0 * mean_2n
    _report("6 (saturation probe)", ok,
            f"excess(epoch {n})={mean_n:.4g} vs excess(epoch {2 * n})={mean_2n:.4g}, "
            f"ratio={mean_n / mean_2n:.3f} (<= 2)")


def test_criterion_7_schedule_exactness():
    from mpmath import mp

    mp.dps = 60
    rng = np.random.default_rng(MASTER_SEED + 5)

    def draws():
        return (10.0 ** rng.uniform(-2, 2), int(rng.integers(2, 10**6)),
                10.0 ** rng.uniform(-3, 3), 10.0 ** rng.uniform(-3, 3),
                10.0 ** rng.uniform(-2, 2))

    worst = 0.0
    checked = {"lr1": 0, "lr3": 0, "stop3": 0, "lr4": 0, "stop6": 0}
    while min(checked.values()) < 1000:
        mu, n, F0, sigma2, L = draws()
        C = 10.0 ** rng.uniform(-1, 1)
        eta_probe = 10.0 ** rng.uniform(-8, -1)

        if checked["lr3"] < 1000:
            got = sgd.lr_theorem3(n, L)
            ref = min(1 / (mp.mpf(n) * n), 1 / mp.mpf(L))
            worst = max(worst, abs(got - float(ref)) / float(ref))
            checked["lr3"] += 1

        arg1 = n * mu * mu * F0 / (sigma2 * L)
        if checked["lr1"] < 1000 and arg1 > 1 + 1e-9:
            ref = mp.log(mp.mpf(n) * mu * mu * F0 / (mp.mpf(sigma2) * L)) / (mp.mpf(mu) * n)
            if float(ref) * L <= 1.0:
                got = sgd.lr_theorem1(mu, n, F0, sigma2, L)
                worst = max(worst, abs(got - float(ref)) / float(ref))
                checked["lr1"] += 1

        arg3 = mu * F0 / (eta_probe * 1.0 * 1.0 * L)  # G = B = 1
        if checked["stop3"] < 1000 and arg3 > 1 + 1e-9:
            got = sgd.stop_theorem3(eta_probe, mu, F0, 1.0, 1.0, L)
            ref = 2 / (mp.mpf(eta_probe) * mu) * mp.log(
                mp.mpf(mu) * F0 / (mp.mpf(eta_probe) * L))
            worst = max(worst, abs((2 / (eta_probe * mu)) * math.log(arg3) - float(ref))
                        / float(ref))
            assert got == int(mp.ceil(ref))
            checked["stop3"] += 1

        gamma = mu
        arg4 = n * gamma**4 * F0 / (4 * sigma2 * L * L)
        if checked["lr4"] < 1000 and arg4 > 1 + 1e-9:
            ref = (4 * mp.mpf(L) / (mp.mpf(gamma) ** 2 * n)) * mp.log(
                mp.mpf(n) * mp.mpf(gamma) ** 4 * F0 / (4 * mp.mpf(sigma2) * mp.mpf(L) ** 2))
            if float(ref) * L <= 1.0:
                got = sgd.lr_theorem4(gamma, n, F0, sigma2, L)
                worst = max(worst, abs(got - float(ref)) / float(ref))
                checked["lr4"] += 1

        arg6 = gamma * n * n * F0 / (2 * C * C)
        if checked["stop6"] < 1000 and arg6 > 1 + 1e-9:
            got = sgd.stop_theorem6(eta_probe, gamma, n, F0, 1.0, 1.0, C)
            ref = 2 / (mp.mpf(eta_probe) * gamma) * mp.log(
                mp.mpf(gamma) * mp.mpf(n) ** 2 * F0 / (2 * mp.mpf(C) ** 2))
            assert got == int(mp.ceil(ref))
            checked["stop6"] += 1

    # documented error boundaries
    with pytest.raises(sgd.LogArgumentNotAboveOne):
        sgd.lr_theorem1(1.0, 10, 0.1, 1.0, 1.0)
    with pytest.raises(sgd.StepTooLarge):
        sgd.lr_theorem1(0.1, 10, 1000.0, 1.0, 1.0)
    with pytest.raises(sgd.LogArgumentNotAboveOne):
        sgd.stop_theorem3(1e-4, 1.0, 1e-4, 1.0, 1.0, 1.0)
    with pytest.raises(sgd.LogArgumentNotAboveOne):
        sgd.lr_theorem4(1.0, 10, 0.1, 1.0, 1.0)
    with pytest.raises(sgd.LogArgumentNotAboveOne):
        sgd.stop_theorem6(1e-4, 1.0, 10, 2e-2 / 100, 1.0, 1.0, 1.0)

    ok = worst <= 1e-12
    _report("7 (schedule exactness)", ok,
            f"worst relative error vs 60-digit evaluation: {worst:.3e} (<= 1e-12), "
            f"{sum(checked.values())} samples, all boundary errors raised")


def test_criterion_8_oracle_suite(tmp_path):
    # (a) empirical gradients vs central finite differences, 20 w per family
    specs = {
        "linear": _headline_spec(dim=5, w_star=tuple(np.ones(5) / math.sqrt(5))),
        "noisy": _headline_spec(family="linear_noisy", noise_std=0.1, dim=5,
                                w_star=tuple(np.ones(5) / math.sqrt(5))),
        "sine": ProblemSpec(family="sine_link_realizable", dim=5, input_scale=0.8,
                            w_star=tuple(0.8 * np.ones(5) / math.sqrt(5)),
                            operating_radius=1.0, link_amplitude=0.5, seed=6,
                            m_oracle=200_000, pl_probes=400, pl_oracle_samples=40_000),
    }
    h = 1e-6
    fd_worst = 0.0
    for name, spec in specs.items():
        inst = generate_problem(spec)
        ds = generate_dataset(inst, 50, seed=7)
        rng = np.random.default_rng(8)
        for _ in range(20):
            w = inst.w_star() + 0.3 * rng.standard_normal(5)
            _, grad = problems.empirical_risk_and_gradient(ds, inst, w)
            fd = np.empty(5)
            for j in range(5):
                e = np.zeros(5)
                e[j] = h
                fd[j] = (problems.empirical_risk_and_gradient(ds, inst, w + e)[0]
                         - problems.empirical_risk_and_gradient(ds, inst, w - e)[0]) / (2 * h)
            scale = max(float(np.linalg.norm(grad)), 1e-12)
            fd_worst = max(fd_worst, float(np.linalg.norm(grad - fd)) / scale)
    fd_ok = fd_worst <= 1e-6

    # (b) linear population closed forms vs 1e6-sample Monte Carlo, 3 SE
    inst = generate_problem(specs["noisy"])
    m = 1_000_000
    rng = np.random.default_rng(9)
    X = rng.uniform(-1.0, 1.0, size=(m, 5)) * inst.spec.scale_vector()
    eps = np.clip(rng.normal(0, 0.1, size=m), -0.4, 0.4)
    y = X @ inst.w_star() + eps
    mc_ok = True
    wrng = np.random.default_rng(10)
    for _ in range(10):
        w = inst.w_star() + 0.5 * wrng.standard_normal(5)
        resid = X @ w - y
        losses = 0.5 * resid**2
        se = float(np.std(losses) / math.sqrt(m))
        mc_ok &= abs(problems.population_risk(inst, w) - float(np.mean(losses))) <= 3 * se
        grads = X * resid[:, None]
        se_g = grads.std(axis=0) / math.sqrt(m)
        mc_ok &= bool(np.all(np.abs(problems.population_gradient(inst, w)
                                    - grads.mean(axis=0)) <= 3 * se_g))

    # (c) effective-sparsity hand values
    sparsity_ok = (
        gradgap.effective_sparsity(np.full(7, 2.0)) == pytest.approx(7.0, rel=1e-12)
        and gradgap.effective_sparsity(np.array([0.0, 5.0, 0.0])) == pytest.approx(1.0, rel=1e-12)
        and gradgap.effective_sparsity(np.array([3.0, 4.0, 0, 0, 0])) == pytest.approx(1.96, rel=1e-12)
    )

    # (d) permutation sampling over 100 epochs: with X = I every epoch
    # rescales each coordinate exactly once
    d = n = 32
    inst_perm = generate_problem(ProblemSpec(family="linear_realizable", dim=d,
                                             input_scale=1.0, w_star=tuple(np.zeros(d)),
                                             operating_radius=10.0))
    ds_perm = Dataset(inputs=np.eye(d), labels=np.zeros(d), n=n, seed=0)
    traj = sgd.run_sgd(inst_perm, ds_perm, np.ones(d), sgd.manual_schedule(0.5, 100 * n),
                       sgd.SamplingMode.WITHOUT_REPLACEMENT, seed=11)
    perm_ok = bool(np.allclose(traj.final_w, 0.5**100 * np.ones(d), rtol=1e-9))

    # (e) bit-identical reruns under fixed seeds and varying worker counts
    config = ExperimentConfig(problem=specs["linear"], n_grid=(32, 64, 128, 256),
                              seeds_per_cell=3, arms=(Arm.ONE_PASS_T1, Arm.MULTI_PASS_T3),
                              master_seed=MASTER_SEED + 6)
    outs = []
    for tag, workers in (("w1", 1), ("w1b", 1), ("w4", 4)):
        out = tmp_path / tag
        run_experiment(config, out_dir=out, workers=workers)
        outs.append((out / "cells.csv").read_bytes())
    rerun_ok = outs[0] == outs[1] == outs[2]

    ok = fd_ok and mc_ok and sparsity_ok and perm_ok and rerun_ok
    _report("8 (oracle suite)", ok,
            f"finite-difference worst rel err={fd_worst:.2e} (<= 1e-6), "
            f"Monte-Carlo 3SE agreement={mc_ok}, sparsity hand values={sparsity_ok}, "
            f"permutation epochs exact={perm_ok}, worker-count reruns identical={rerun_ok}")
