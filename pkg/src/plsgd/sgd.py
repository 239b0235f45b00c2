"""Single-sample SGD with theorem-derived learning rates and stop times.

The update is w <- w - eta * (f(w; x_i) - y_i) * grad f(w; x_i) with i
drawn uniformly, either without replacement (a fresh permutation per
epoch) or with replacement. Learning rates and stopping iterations come
from closed forms in the constants (mu or gamma, n, initial risk,
sigma^2, L, G, B, C); each constructed schedule records exactly which
values were plugged in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from . import kernels, problems

INDEX_CHUNK = 1 << 20


class LogArgumentNotAboveOne(ValueError):
    """The schedule's log argument is <= 1, so the closed form is undefined."""


class StepTooLarge(ValueError):
    """The closed-form learning rate violates eta * L <= 1."""


class DivergenceError(RuntimeError):
    """An iterate became non-finite."""

    def __init__(self, iteration: int):
        super().__init__(f"iterate became non-finite at step {iteration}")
        self.iteration = iteration


class ScheduleSource(str, Enum):
    THEOREM1 = "Theorem1"
    THEOREM3 = "Theorem3"
    THEOREM4 = "Theorem4"
    THEOREM6 = "Theorem6"
    MANUAL = "Manual"


class SamplingMode(str, Enum):
    WITHOUT_REPLACEMENT = "without_replacement"
    WITH_REPLACEMENT = "with_replacement"


def lr_theorem1(mu: float, n: int, F0: float, sigma2: float, L: float) -> float:
    """eta = log(n mu^2 F0 / (sigma^2 L)) / (mu n)."""
    _require_positive(mu=mu, n=n, F0=F0, sigma2=sigma2, L=L)
    arg = n * mu * mu * F0 / (sigma2 * L)
    if arg <= 1.0:
        raise LogArgumentNotAboveOne(
            f"n*mu^2*F0/(sigma2*L) = {arg:.6g} <= 1; increase n or F0"
        )
    eta = math.log(arg) / (mu * n)
    if eta * L > 1.0:
        raise StepTooLarge(f"eta*L = {eta * L:.6g} > 1")
    return eta


def lr_theorem3(n: int, L: float) -> float:
    """eta = min(1/n^2, 1/L)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if L <= 0:
        raise ValueError("L must be positive")
    return min(1.0 / (n * n), 1.0 / L)


def stop_theorem3(eta: float, mu: float, F1: float, G: float, B: float, L: float) -> int:
    """t = ceil((2/(eta mu)) log(mu F1 / (eta G^2 B^2 L)))."""
    _require_positive(eta=eta, mu=mu, F1=F1, G=G, B=B, L=L)
    arg = mu * F1 / (eta * G * G * B * B * L)
    if arg <= 1.0:
        raise LogArgumentNotAboveOne(
            f"mu*F1/(eta*G^2*B^2*L) = {arg:.6g} <= 1; first-epoch risk is already "
            "below the floor, no additional iterations are prescribed"
        )
    return math.ceil(2.0 / (eta * mu) * math.log(arg))


def lr_theorem4(gamma: float, n: int, F0: float, sigma2: float, L: float) -> float:
    """eta = (4L/(gamma^2 n)) log(n gamma^4 F0 / (4 sigma^2 L^2))."""
    _require_positive(gamma=gamma, n=n, F0=F0, sigma2=sigma2, L=L)
    arg = n * gamma**4 * F0 / (4.0 * sigma2 * L * L)
    if arg <= 1.0:
        raise LogArgumentNotAboveOne(
            f"n*gamma^4*F0/(4*sigma2*L^2) = {arg:.6g} <= 1; increase n or F0"
        )
    eta = 4.0 * L / (gamma * gamma * n) * math.log(arg)
    if eta * L > 1.0:
        raise StepTooLarge(f"eta*L = {eta * L:.6g} > 1")
    return eta


def stop_theorem6(eta: float, gamma: float, n: int, F1: float, G: float, B: float, C: float) -> int:
    """t = ceil((2/(eta gamma)) log(gamma n^2 F1 / (2 C^2 G^2 B^2)))."""
    _require_positive(eta=eta, gamma=gamma, n=n, F1=F1, G=G, B=B, C=C)
    arg = gamma * n * n * F1 / (2.0 * C * C * G * G * B * B)
    if arg <= 1.0:
        raise LogArgumentNotAboveOne(
            f"gamma*n^2*F1/(2*C^2*G^2*B^2) = {arg:.6g} <= 1"
        )
    return math.ceil(2.0 / (eta * gamma) * math.log(arg))


def _require_positive(**values) -> None:
    for name, value in values.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class Schedule:
    """A learning rate plus stop iteration, tagged with its origin."""

    eta: float
    stop_iter: int
    source: ScheduleSource
    inputs_used: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.stop_iter < 1:
            raise ValueError("stop_iter must be >= 1")


def theorem1_schedule(mu, n, F0, sigma2, L) -> Schedule:
    eta = lr_theorem1(mu, n, F0, sigma2, L)
    return Schedule(eta, n, ScheduleSource.THEOREM1,
                    {"mu": mu, "n": n, "F0": F0, "sigma2": sigma2, "L": L})


def theorem3_schedule(n, L, mu, F1, G, B) -> Schedule:
    eta = lr_theorem3(n, L)
    t = stop_theorem3(eta, mu, F1, G, B, L)
    return Schedule(eta, t, ScheduleSource.THEOREM3,
                    {"mu": mu, "n": n, "F1": F1, "G": G, "B": B, "L": L})


def theorem4_schedule(gamma, n, F0, sigma2, L) -> Schedule:
    eta = lr_theorem4(gamma, n, F0, sigma2, L)
    return Schedule(eta, n, ScheduleSource.THEOREM4,
                    {"gamma": gamma, "gamma_hat": gamma * gamma / (4.0 * L),
                     "n": n, "F0": F0, "sigma2": sigma2, "L": L})


def theorem6_schedule(n, L, gamma, F1, G, B, C) -> Schedule:
    eta = lr_theorem3(n, L)
    t = stop_theorem6(eta, gamma, n, F1, G, B, C)
    return Schedule(eta, t, ScheduleSource.THEOREM6,
                    {"gamma": gamma, "n": n, "F1": F1, "G": G, "B": B, "C": C, "L": L})


def manual_schedule(eta: float, stop_iter: int) -> Schedule:
    return Schedule(eta, stop_iter, ScheduleSource.MANUAL, {"eta": eta, "stop_iter": stop_iter})


@dataclass
class Checkpoint:
    iteration: int
    epoch: float
    f_pop: float
    f_emp: float
    grad_norm_pop: float
    in_ball: bool


@dataclass
class Trajectory:
    sampling_mode: SamplingMode
    seed: int
    checkpoints: List[Checkpoint]
    final_w: np.ndarray
    epochs_completed: float
    ball_exit_flag: bool
    steps: int


def run_sgd(
    instance: problems.ProblemInstance,
    dataset: problems.Dataset,
    w0: np.ndarray,
    schedule: Schedule,
    sampling_mode: SamplingMode = SamplingMode.WITHOUT_REPLACEMENT,
    seed: int = 0,
    checkpoint_every: int = 0,
) -> Trajectory:
    """Execute schedule.stop_iter updates from w0.

    Without-replacement sampling draws a fresh uniform permutation for
    each epoch of n steps; with-replacement draws every index uniformly.
    Deterministic given (dataset, w0, schedule, mode, seed, backend).
    Raises DivergenceError if an iterate becomes non-finite; leaving the
    operating ball only sets ``ball_exit_flag``.
    """
    sampling_mode = SamplingMode(sampling_mode)
    w0 = np.asarray(w0, dtype=float)
    if not instance.in_ball(w0):
        raise ValueError("w0 must lie inside the operating ball")
    spec = instance.spec
    X = np.ascontiguousarray(dataset.inputs)
    y = np.ascontiguousarray(dataset.labels)
    w_star = instance.w_star()
    w = w0.copy()
    r2_cap = spec.operating_radius**2
    rng = np.random.default_rng(seed)
    n = dataset.n
    total = schedule.stop_iter
    eta = schedule.eta
    sine = spec.family is problems.Family.SINE_LINK_REALIZABLE
    amp = spec.link_amplitude

    checkpoints: List[Checkpoint] = []

    def record(iteration: int) -> None:
        f_emp, _ = problems.empirical_risk_and_gradient(dataset, instance, w)
        checkpoints.append(
            Checkpoint(
                iteration=iteration,
                epoch=iteration / n,
                f_pop=problems.population_risk(instance, w),
                f_emp=f_emp,
                grad_norm_pop=float(np.linalg.norm(problems.population_gradient(instance, w))),
                in_ball=instance.in_ball(w),
            )
        )

    record(0)
    done = 0
    ball_exit = False
    perm: Optional[np.ndarray] = None
    perm_pos = 0

    while done < total:
        limit = min(total - done, INDEX_CHUNK)
        if checkpoint_every > 0:
            to_checkpoint = checkpoint_every - (done % checkpoint_every)
            limit = min(limit, to_checkpoint)
        if sampling_mode is SamplingMode.WITHOUT_REPLACEMENT:
            if perm is None or perm_pos >= n:
                perm = rng.permutation(n).astype(np.int64)
                perm_pos = 0
            idx = perm[perm_pos:perm_pos + min(limit, n - perm_pos)]
            perm_pos += idx.shape[0]
        else:
            idx = rng.integers(0, n, size=limit).astype(np.int64)
        if sine:
            exited, diverged_at = kernels.sine_steps(X, y, w, w_star, eta, amp, idx, r2_cap)
        else:
            exited, diverged_at = kernels.linear_steps(X, y, w, w_star, eta, idx, r2_cap)
        ball_exit = ball_exit or exited
        if diverged_at >= 0:
            raise DivergenceError(done + diverged_at)
        done += idx.shape[0]
        if done >= total or (checkpoint_every > 0 and done % checkpoint_every == 0):
            record(done)

    if checkpoints[-1].iteration != total:
        record(total)
    return Trajectory(
        sampling_mode=sampling_mode,
        seed=seed,
        checkpoints=checkpoints,
        final_w=w,
        epochs_completed=total / n,
        ball_exit_flag=ball_exit,
        steps=total,
    )


def trajectory_to_csv(trajectory: Trajectory, path) -> None:
    """Checkpoint export: iter, epoch, F_pop, F_emp, grad_norm_pop, in_ball."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "epoch", "F_pop", "F_emp", "grad_norm_pop", "in_ball"])
        for c in trajectory.checkpoints:
            writer.writerow(
                [c.iteration, repr(c.epoch), repr(c.f_pop), repr(c.f_emp),
                 repr(c.grad_norm_pop), int(c.in_ball)]
            )
