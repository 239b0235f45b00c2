"""Excess-risk rate experiments over an n-grid.

Arms:

- OnePassT1:   one epoch, sampled without replacement, at the
  PL closed-form rate; reports F(w_n) - F*.
- MultiPassT3: the same first epoch, then t further steps at
  eta = min(1/n^2, 1/L) with t from the PL stopping rule.
- OnePassT4 / MultiPassT6: strongly convex analogues (gamma > 0 only).
- EpochSweep:  fixed eta = min(1/n^2, 1/L) for a set number of epochs,
  recording excess risk at every epoch boundary (saturation probe).

Schedule constants are plugged per ``constants_mode``:

- "anchored" (default): sigma^2 is the measured stochastic-gradient
  variance at w0 and the G*B product in stopping rules is the largest
  per-example loss-gradient norm at the end-of-epoch-1 iterate. These
  are the quantities the certified constants upper-bound; the certified
  worst-case values make the closed forms vacuous at laboratory n.
- "certified": the instance's ball-certified constants.

Every cell derives its randomness from hashes of (master seed, n, seed
index), shared across arms so that paired comparisons see identical
datasets and first epochs, and results are independent of worker count.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import problems, sgd
from ._seeding import derive_seed
from .problems import ProblemInstance, ProblemSpec
from .sgd import SamplingMode, Schedule


class NonPositiveValue(ValueError):
    """A log-log fit received a value <= 0."""


class ExcessiveFailureError(RuntimeError):
    """More than the tolerated fraction of cells in an arm was unusable."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class Arm(str, Enum):
    ONE_PASS_T1 = "OnePassT1"
    MULTI_PASS_T3 = "MultiPassT3"
    ONE_PASS_T4 = "OnePassT4"
    MULTI_PASS_T6 = "MultiPassT6"
    EPOCH_SWEEP = "EpochSweep"


MAX_UNUSABLE_FRACTION = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    n_grid: tuple
    seeds_per_cell: int
    arms: tuple
    C: float = 1.0
    w0_offset: Optional[float] = None  # default: operating_radius / 2
    checkpoint_every: int = 0
    master_seed: int = 0
    cap_steps: int = 10**8
    constants_mode: str = "anchored"
    post_epoch_sampling: SamplingMode = SamplingMode.WITH_REPLACEMENT
    epoch_sweep_epochs: Optional[int] = None  # default: 2n
    fit_floor: Optional[float] = None  # None: drop non-positive means
    zero_step_override: bool = False  # report F(w0) - F* without stepping

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "arms", tuple(Arm(a) for a in self.arms))
        object.__setattr__(self, "post_epoch_sampling", SamplingMode(self.post_epoch_sampling))

    def validate(self) -> None:
        self.problem.validate()
        if len(self.n_grid) < 4 or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be strictly increasing with at least 4 points")
        if self.n_grid[0] < 1:
            raise ValueError("n_grid entries must be positive")
        if self.seeds_per_cell < 3:
            raise ValueError("seeds_per_cell must be at least 3")
        if not self.arms:
            raise ValueError("at least one arm is required")
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.constants_mode not in ("anchored", "certified"):
            raise ValueError("constants_mode must be 'anchored' or 'certified'")
        offset = self.w0_offset
        if offset is not None and not (0 <= offset <= self.problem.operating_radius):
            raise ValueError("w0_offset must lie in [0, operating_radius]")
        if self.cap_steps < max(self.n_grid):
            raise ValueError("cap_steps must allow at least one epoch at the largest n")
        if self.fit_floor is not None and self.fit_floor <= 0:
            raise ValueError("fit_floor must be positive when given")

    def offset(self) -> float:
        return self.w0_offset if self.w0_offset is not None else self.problem.operating_radius / 2.0


@dataclass
class CellResult:
    arm: Arm
    n: int
    seed_index: int
    excess_risk: float = math.nan
    steps: int = 0
    epochs: float = 0.0
    skipped_reason: Optional[str] = None
    ball_exit: bool = False
    diverged: bool = False
    truncated: bool = False
    schedule_inputs: dict = field(default_factory=dict)
    sweep: Optional[List[tuple]] = None  # (epoch, excess) for EpochSweep

    @property
    def usable(self) -> bool:
        return self.skipped_reason is None and not self.ball_exit and not self.diverged


@dataclass
class RateReport:
    arm: Arm
    points: List[tuple]  # (n, mean excess, standard error)
    slope: float
    intercept: float
    r_squared: float
    schedule_inputs: Dict[int, dict]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    instance: ProblemInstance
    cells: List[CellResult]
    reports: List[RateReport]
    unusable_fraction: Dict[Arm, float]


def initial_point(config: ExperimentConfig, instance: ProblemInstance) -> np.ndarray:
    """w* plus the configured offset along the fixed direction (1,..,1)/sqrt(d)."""
    d = instance.dim
    return instance.w_star() + config.offset() * np.ones(d) / math.sqrt(d)


def cell_seeds(master_seed: int, n: int, seed_index: int) -> dict:
    """Dataset / first-epoch / continuation seeds, shared across arms so
    paired comparisons at one (n, seed index) see identical runs."""
    return {
        "dataset": derive_seed(master_seed, "data", n, seed_index),
        "epoch1": derive_seed(master_seed, "epoch1", n, seed_index),
        "continue": derive_seed(master_seed, "continue", n, seed_index),
    }


def _schedule_sigma2(config, instance, w0) -> float:
    if config.constants_mode == "anchored":
        return problems.stochastic_gradient_variance(instance, w0)
    return instance.constants.sigma2


def _schedule_gb(config, instance, dataset, w1) -> tuple:
    """(G, B) to plug into stopping rules; anchored mode keeps the certified
    G and shrinks B so that G*B equals the largest per-example
    loss-gradient norm at the anchor iterate."""
    G = instance.constants.G
    if config.constants_mode == "anchored":
        nu = float(np.max(problems.per_example_gradient_norms(dataset, instance, w1)))
        return G, max(nu, 1e-300) / G
    return G, instance.constants.B


def _first_epoch(config, instance, dataset, arm, seeds, w0):
    """Build the first-epoch schedule for the arm and run it."""
    n = dataset.n
    c = instance.constants
    F0 = problems.population_risk(instance, w0)
    sigma2 = _schedule_sigma2(config, instance, w0)
    if arm in (Arm.ONE_PASS_T4, Arm.MULTI_PASS_T6):
        if c.gamma <= 0:
            raise sgd.LogArgumentNotAboveOne("gamma is not certified for this family")
        schedule = sgd.theorem4_schedule(c.gamma, n, F0, sigma2, c.L)
    else:
        schedule = sgd.theorem1_schedule(c.mu, n, F0, sigma2, c.L)
    trajectory = sgd.run_sgd(instance, dataset, w0, schedule,
                             SamplingMode.WITHOUT_REPLACEMENT, seeds["epoch1"],
                             checkpoint_every=config.checkpoint_every)
    return schedule, trajectory


def run_arm(config: ExperimentConfig, arm: Arm, n: int, seed_index: int,
            instance: Optional[ProblemInstance] = None) -> CellResult:
    """Execute one (arm, n, seed) cell and report its excess risk.

    Unconstructible schedules, divergence and ball exit are recorded on
    the cell rather than raised.
    """
    arm = Arm(arm)
    if instance is None:
        instance = problems.generate_problem(config.problem)
    cell = CellResult(arm=arm, n=n, seed_index=seed_index)
    seeds = cell_seeds(config.master_seed, n, seed_index)
    dataset = problems.generate_dataset(instance, n, seeds["dataset"])
    w0 = initial_point(config, instance)
    c = instance.constants

    if config.zero_step_override:
        cell.excess_risk = problems.excess_risk(instance, w0)
        cell.schedule_inputs["override"] = {"zero_step": True}
        return cell

    try:
        if arm is Arm.EPOCH_SWEEP:
            return _run_epoch_sweep(config, instance, dataset, cell, seeds, w0)
        schedule1, traj1 = _first_epoch(config, instance, dataset, arm, seeds, w0)
        cell.schedule_inputs["epoch1"] = dict(schedule1.inputs_used, eta=schedule1.eta,
                                              source=schedule1.source.value)
        cell.ball_exit |= traj1.ball_exit_flag
        cell.steps = n
        w = traj1.final_w

        if arm in (Arm.MULTI_PASS_T3, Arm.MULTI_PASS_T6):
            F1 = problems.population_risk(instance, w)
            G_eff, B_eff = _schedule_gb(config, instance, dataset, w)
            eta3 = sgd.lr_theorem3(n, c.L)
            try:
                if arm is Arm.MULTI_PASS_T3:
                    t = sgd.stop_theorem3(eta3, c.mu, F1, G_eff, B_eff, c.L)
                    inputs = {"mu": c.mu, "n": n, "F1": F1, "G": G_eff, "B": B_eff, "L": c.L}
                else:
                    t = sgd.stop_theorem6(eta3, c.gamma, n, F1, G_eff, B_eff, config.C)
                    inputs = {"gamma": c.gamma, "n": n, "F1": F1, "G": G_eff, "B": B_eff,
                              "C": config.C, "L": c.L}
            except sgd.LogArgumentNotAboveOne:
                t = 0  # first-epoch risk already under the floor: no extra steps
                inputs = {"n": n, "F1": F1, "G": G_eff, "B": B_eff, "L": c.L, "t": 0}
            allowed = config.cap_steps - n
            if t > allowed:
                t = allowed
                cell.truncated = True
            inputs.update(eta=eta3, t=t, constants_mode=config.constants_mode,
                          truncated=cell.truncated)
            cell.schedule_inputs["post_epoch"] = inputs
            if t >= 1:
                source = (sgd.ScheduleSource.THEOREM3 if arm is Arm.MULTI_PASS_T3
                          else sgd.ScheduleSource.THEOREM6)
                schedule2 = Schedule(eta3, t, source, inputs)
                traj2 = sgd.run_sgd(instance, dataset, w, schedule2,
                                    config.post_epoch_sampling, seeds["continue"],
                                    checkpoint_every=config.checkpoint_every)
                cell.ball_exit |= traj2.ball_exit_flag
                cell.steps += t
                w = traj2.final_w

        cell.excess_risk = problems.excess_risk(instance, w)
        cell.epochs = cell.steps / n
    except sgd.LogArgumentNotAboveOne as exc:
        cell.skipped_reason = f"schedule: {exc}"
    except sgd.StepTooLarge as exc:
        cell.skipped_reason = f"schedule: {exc}"
    except sgd.DivergenceError as exc:
        cell.diverged = True
        cell.skipped_reason = f"diverged: step {exc.iteration}"
    if cell.ball_exit and cell.skipped_reason is None:
        cell.skipped_reason = "ball_exit"
    return cell


def _run_epoch_sweep(config, instance, dataset, cell, seeds, w0):
    n = dataset.n
    eta = sgd.lr_theorem3(n, instance.constants.L)
    epochs_total = config.epoch_sweep_epochs if config.epoch_sweep_epochs is not None else 2 * n
    steps_total = min(epochs_total * n, config.cap_steps)
    cell.truncated = steps_total < epochs_total * n
    cell.schedule_inputs["sweep"] = {"eta": eta, "epochs": epochs_total, "L": instance.constants.L,
                                     "truncated": cell.truncated}
    sweep: List[tuple] = [(0.0, problems.excess_risk(instance, w0))]
    if steps_total == 0:
        cell.sweep = sweep
        cell.excess_risk = sweep[0][1]
        return cell

    first = min(n, steps_total)
    schedule1 = Schedule(eta, first, sgd.ScheduleSource.THEOREM3, {"eta": eta, "n": n})
    traj1 = sgd.run_sgd(instance, dataset, w0, schedule1,
                        SamplingMode.WITHOUT_REPLACEMENT, seeds["epoch1"],
                        checkpoint_every=n)
    cell.ball_exit |= traj1.ball_exit_flag
    sweep.append((first / n, problems.excess_risk(instance, traj1.final_w)))
    w = traj1.final_w
    remaining = steps_total - first
    if remaining > 0:
        schedule2 = Schedule(eta, remaining, sgd.ScheduleSource.THEOREM3, {"eta": eta})
        traj2 = sgd.run_sgd(instance, dataset, w, schedule2,
                            config.post_epoch_sampling, seeds["continue"],
                            checkpoint_every=n)
        cell.ball_exit |= traj2.ball_exit_flag
        for ckpt in traj2.checkpoints[1:]:
            if ckpt.iteration % n == 0:
                sweep.append((1.0 + ckpt.iteration / n, ckpt.f_pop - instance.f_star))
        w = traj2.final_w
    cell.sweep = sweep
    cell.steps = steps_total
    cell.epochs = steps_total / n
    cell.excess_risk = problems.excess_risk(instance, w)
    if cell.ball_exit:
        cell.skipped_reason = "ball_exit"
    return cell


def resolve_schedules(config: ExperimentConfig, arm: Arm, n: int, seed_index: int = 0,
                      instance: Optional[ProblemInstance] = None) -> dict:
    """The schedules a cell would use, without the post-epoch steps.

    Stopping rules need the end-of-epoch-1 iterate, so the first epoch
    (n steps) is executed; the t continuation steps are not.
    """
    arm = Arm(arm)
    if instance is None:
        instance = problems.generate_problem(config.problem)
    c = instance.constants
    if arm is Arm.EPOCH_SWEEP:
        epochs = config.epoch_sweep_epochs if config.epoch_sweep_epochs is not None else 2 * n
        return {"sweep": {"eta": sgd.lr_theorem3(n, c.L), "epochs": epochs}}
    seeds = cell_seeds(config.master_seed, n, seed_index)
    dataset = problems.generate_dataset(instance, n, seeds["dataset"])
    w0 = initial_point(config, instance)
    try:
        schedule1, traj1 = _first_epoch(config, instance, dataset, arm, seeds, w0)
    except (sgd.LogArgumentNotAboveOne, sgd.StepTooLarge) as exc:
        return {"skipped": f"schedule: {exc}"}
    out = {"epoch1": dict(schedule1.inputs_used, eta=schedule1.eta,
                          source=schedule1.source.value)}
    if arm in (Arm.MULTI_PASS_T3, Arm.MULTI_PASS_T6):
        F1 = problems.population_risk(instance, traj1.final_w)
        G_eff, B_eff = _schedule_gb(config, instance, dataset, traj1.final_w)
        eta3 = sgd.lr_theorem3(n, c.L)
        try:
            if arm is Arm.MULTI_PASS_T3:
                t = sgd.stop_theorem3(eta3, c.mu, F1, G_eff, B_eff, c.L)
            else:
                t = sgd.stop_theorem6(eta3, c.gamma, n, F1, G_eff, B_eff, config.C)
        except sgd.LogArgumentNotAboveOne:
            t = 0
        out["post_epoch"] = {"eta": eta3, "t": min(t, config.cap_steps - n), "F1": F1,
                             "G": G_eff, "B": B_eff, "L": c.L,
                             "constants_mode": config.constants_mode}
    return out


def fit_loglog_slope(points: Sequence[tuple]) -> tuple:
    """Ordinary least squares of ln(value) on ln(n).

    Returns (slope, intercept, r_squared). Requires at least 3 points
    with distinct n and strictly positive values.
    """
    if len(points) < 3:
        raise ValueError("need at least 3 points")
    ns = np.asarray([p[0] for p in points], dtype=float)
    vals = np.asarray([p[1] for p in points], dtype=float)
    if len(set(ns.tolist())) != len(ns):
        raise ValueError("n values must be distinct")
    if np.any(vals <= 0):
        raise NonPositiveValue("all values must be positive for a log-log fit")
    x = np.log(ns)
    y = np.log(vals)
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r_squared


def theorem1_envelope(n: int, mu: float, sigma2: float, L: float) -> float:
    """First-epoch excess-risk envelope shape sigma^2 L log(n) / (mu^2 n)."""
    return sigma2 * L * math.log(n) / (mu * mu * n)


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int = 1) -> ExperimentResult:
    """Run every (arm, n, seed) cell, aggregate, fit slopes, write outputs.

    Raises ExcessiveFailureError (with the partial result attached) if
    more than 20% of cells in any arm are unusable. Outputs are
    byte-stable across reruns and worker counts.
    """
    config.validate()
    instance = problems.generate_problem(config.problem)
    jobs = [(arm, n, idx)
            for arm in config.arms
            for n in config.n_grid
            for idx in range(config.seeds_per_cell)]

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(lambda j: run_arm(config, j[0], j[1], j[2], instance), jobs))
    else:
        cells = [run_arm(config, arm, n, idx, instance) for arm, n, idx in jobs]
    cells.sort(key=lambda c: (c.arm.value, c.n, c.seed_index))

    reports: List[RateReport] = []
    unusable: Dict[Arm, float] = {}
    for arm in config.arms:
        arm_cells = [c for c in cells if c.arm is arm]
        unusable[arm] = sum(1 for c in arm_cells if not c.usable) / max(len(arm_cells), 1)
        points = []
        inputs_echo: Dict[int, dict] = {}
        for n in config.n_grid:
            usable = [c for c in arm_cells if c.n == n and c.usable]
            if not usable:
                continue
            values = np.asarray([c.excess_risk for c in usable])
            mean = float(np.mean(values))
            se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
            points.append((n, mean, se))
            inputs_echo[n] = usable[0].schedule_inputs
        fit_points = _fit_points(points, config.fit_floor)
        if len(fit_points) >= 3:
            slope, intercept, r2 = fit_loglog_slope(fit_points)
            reports.append(RateReport(arm=arm, points=points, slope=slope,
                                      intercept=intercept, r_squared=r2,
                                      schedule_inputs=inputs_echo))

    result = ExperimentResult(config=config, instance=instance, cells=cells,
                              reports=reports, unusable_fraction=unusable)
    if out_dir is not None:
        write_experiment_outputs(result, out_dir)
    bad = {arm.value: frac for arm, frac in unusable.items() if frac > MAX_UNUSABLE_FRACTION}
    if bad:
        raise ExcessiveFailureError(f"unusable cell fraction above threshold: {bad}", result)
    return result


def _fit_points(points, floor):
    if floor is None:
        return [(n, m) for n, m, _ in points if m > 0]
    return [(n, max(m, floor)) for n, m, _ in points]


def config_to_dict(config: ExperimentConfig) -> dict:
    return {
        "problem": problems.spec_to_dict(config.problem),
        "experiment": {
            "n_grid": list(config.n_grid),
            "seeds_per_cell": config.seeds_per_cell,
            "arms": [a.value for a in config.arms],
            "C": config.C,
            "w0_offset": config.w0_offset,
            "checkpoint_every": config.checkpoint_every,
            "master_seed": config.master_seed,
            "cap_steps": config.cap_steps,
            "constants_mode": config.constants_mode,
            "post_epoch_sampling": config.post_epoch_sampling.value,
            "epoch_sweep_epochs": config.epoch_sweep_epochs,
            "fit_floor": config.fit_floor,
        },
    }


def write_experiment_outputs(result: ExperimentResult, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []

    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(config_to_dict(result.config), indent=2, sort_keys=True) + "\n")
    files.append(config_path)

    cells_path = out_dir / "cells.csv"
    with open(cells_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "n", "seed", "excess_risk", "steps", "epochs", "skipped_reason"])
        for c in result.cells:
            writer.writerow([
                c.arm.value, c.n, c.seed_index,
                "" if math.isnan(c.excess_risk) else repr(c.excess_risk),
                c.steps, repr(c.epochs), c.skipped_reason or "",
            ])
    files.append(cells_path)

    rates_path = out_dir / "rates.csv"
    with open(rates_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "slope", "intercept", "r2"])
        for report in result.reports:
            writer.writerow([report.arm.value, repr(report.slope),
                             repr(report.intercept), repr(report.r_squared)])
    files.append(rates_path)

    for report in result.reports:
        dat_path = out_dir / f"curve_{report.arm.value}.dat"
        lines = ["# n mean_excess_risk stderr"]
        lines += [f"{n} {mean!r} {se!r}" for n, mean, se in report.points]
        dat_path.write_text("\n".join(lines) + "\n")
        files.append(dat_path)

    sweep_cells = [c for c in result.cells if c.arm is Arm.EPOCH_SWEEP and c.sweep and c.usable]
    for n in sorted({c.n for c in sweep_cells}):
        series = [dict(c.sweep) for c in sweep_cells if c.n == n]
        epochs = sorted({e for s in series for e in s})
        lines = ["# epoch mean_excess_risk stderr"]
        for e in epochs:
            vals = np.asarray([s[e] for s in series if e in s])
            se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            lines.append(f"{e!r} {float(np.mean(vals))!r} {se!r}")
        dat_path = out_dir / f"sweep_n{n}.dat"
        dat_path.write_text("\n".join(lines) + "\n")
        files.append(dat_path)
    return files
