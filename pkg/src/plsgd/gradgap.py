"""Uniform gradient deviation between population and empirical risk.

Measures max ||grad F(w) - grad F_S(w)|| over two region types:

- a residual-constrained set around an anchor iterate: RMS residual at
  most the anchor's RMS r_hat, and mean absolute residual at most
  sqrt(s/n) * r_hat (an effective-sparsity constraint);
- a Euclidean ball of radius r around w*.

The maximization is randomized search, which lower-bounds the true
supremum; for linear families the ball maximum also has the closed form
r * ||Sigma - Sigma_hat||_2, used as an oracle. Proposal streams are
generated counter-deterministically from a Philox key, so results do
not depend on evaluation order or worker count, and prefixes of a
stream are stable as the candidate budget grows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import problems, sgd
from ._seeding import derive_seed

MEMBERSHIP_SLACK = 1.0 + 1e-12
RADII_LADDER_STEPS = 6
MIN_ACCEPT_FRACTION = 0.01


class RegionTooThinError(RuntimeError):
    """Too few random proposals satisfied the region constraints."""


def effective_sparsity(residuals: np.ndarray) -> float:
    """Smallest s for which the vector meets the mean-abs constraint at its own RMS.

    s_eff = n * (mean |r|)^2 / (mean r^2); 0 for the all-zero vector by
    convention. Cauchy-Schwarz puts s_eff in [1, n] otherwise.
    """
    r = np.asarray(residuals, dtype=float)
    mean_sq = float(np.mean(r * r))
    if mean_sq == 0.0:
        return 0.0
    mean_abs = float(np.mean(np.abs(r)))
    return r.shape[0] * mean_abs * mean_abs / mean_sq


def residuals_at(instance: problems.ProblemInstance, dataset: problems.Dataset, w) -> np.ndarray:
    return problems._predict(instance, np.asarray(w, dtype=float), dataset.inputs) - dataset.labels


@dataclass(frozen=True)
class ResidualRegion:
    """Parameters whose residual vector is no larger or denser than the anchor's."""

    r_hat: float
    s: float
    anchor_w: np.ndarray


def residual_region_from_anchor(
    instance: problems.ProblemInstance,
    dataset: problems.Dataset,
    anchor_w,
    s: Optional[float] = None,
) -> ResidualRegion:
    """Build the region at the anchor's RMS residual; s defaults to the
    anchor's own effective sparsity (the smallest feasible choice)."""
    anchor_w = np.asarray(anchor_w, dtype=float)
    resid = residuals_at(instance, dataset, anchor_w)
    r_hat = float(np.sqrt(np.mean(resid * resid)))
    s_min = effective_sparsity(resid)
    if s is None:
        s = max(s_min, 1.0)
    return ResidualRegion(r_hat=r_hat, s=float(s), anchor_w=anchor_w)


@dataclass(frozen=True)
class BallRegion:
    r: float
    center: np.ndarray


@dataclass
class GapReport:
    region_kind: str
    region_params: dict
    n: int
    candidates_evaluated: int
    candidates_accepted: int
    max_gap: float
    argmax_w: np.ndarray
    oracle_stderr: float
    argmax_sparsity: float


def gap_at(instance: problems.ProblemInstance, dataset: problems.Dataset, w) -> float:
    """||grad F(w) - grad F_S(w)||."""
    w = np.asarray(w, dtype=float)
    _, emp_grad = problems.empirical_risk_and_gradient(dataset, instance, w)
    return float(np.linalg.norm(problems.population_gradient(instance, w) - emp_grad))


def _moment_error_terms(instance, dataset):
    """(M, b) with grad F - grad F_S = M (w - w*) + b for linear families."""
    X = dataset.inputs
    n = dataset.n
    sigma_hat = X.T @ X / n
    M = np.diag(instance.sigma_diag) - sigma_hat
    noise = dataset.labels - X @ instance.w_star()
    b = X.T @ noise / n
    return M, b


def _gaps_batch(instance, dataset, W: np.ndarray) -> np.ndarray:
    """gap_at for each row of W, vectorized where the family allows."""
    if instance.spec.family.linear:
        M, b = _moment_error_terms(instance, dataset)
        E = W - instance.w_star()
        return np.linalg.norm(E @ M.T + b, axis=1)
    out = np.empty(W.shape[0])
    for i in range(W.shape[0]):
        out[i] = gap_at(instance, dataset, W[i])
    return out


def _oracle_stderr(instance, w) -> float:
    return problems.population_risk_stderr(instance, w)[1]


def max_gap_over_residual_region(
    instance: problems.ProblemInstance,
    dataset: problems.Dataset,
    region: ResidualRegion,
    n_candidates: int,
    seed: int,
) -> GapReport:
    """Randomized lower bound on the supremum over the residual region.

    Candidate 0 is the anchor itself; the rest are Gaussian-direction
    perturbations of the anchor at a geometric ladder of radii up to the
    operating radius, kept only if they satisfy both region constraints.
    Fails if fewer than 1% of proposals are members.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    anchor = np.asarray(region.anchor_w, dtype=float)
    anchor_resid = residuals_at(instance, dataset, anchor)
    rms = float(np.sqrt(np.mean(anchor_resid * anchor_resid)))
    if rms > region.r_hat * MEMBERSHIP_SLACK or effective_sparsity(anchor_resid) > region.s * MEMBERSHIP_SLACK:
        raise ValueError("region anchor is not a member of its own region")

    rng = np.random.Generator(np.random.Philox(key=seed))
    ladder = instance.spec.operating_radius * 0.5 ** np.arange(RADII_LADDER_STEPS)
    abs_cap = math.sqrt(region.s / dataset.n) * region.r_hat * MEMBERSHIP_SLACK
    rms_cap = region.r_hat * MEMBERSHIP_SLACK

    best_gap = gap_at(instance, dataset, anchor)  # candidate 0 is the anchor
    best_w = anchor
    accepted = 0
    n_proposals = n_candidates - 1
    chunk = 512
    # each block is generated at full chunk size and sliced, so prefixes of
    # the proposal stream are identical for any larger candidate budget
    for start in range(0, n_proposals, chunk):
        block = _perturbations(rng, anchor, ladder, chunk, start)
        W = block[: min(chunk, n_proposals - start)]
        Z = problems._predict_batch(instance, W, dataset.inputs)
        resid = Z - dataset.labels[None, :]
        rms_all = np.sqrt(np.mean(resid * resid, axis=1))
        abs_all = np.mean(np.abs(resid), axis=1)
        member = (rms_all <= rms_cap) & (abs_all <= abs_cap)
        accepted += int(np.count_nonzero(member))
        if np.any(member):
            gaps = _gaps_batch(instance, dataset, W[member])
            i = int(np.argmax(gaps))
            if gaps[i] > best_gap:
                best_gap = float(gaps[i])
                best_w = W[member][i]

    if n_proposals >= 200 and accepted < MIN_ACCEPT_FRACTION * n_proposals:
        raise RegionTooThinError(
            f"only {accepted}/{n_proposals} proposals were members; widen s or the radii"
        )
    return GapReport(
        region_kind="residual",
        region_params={"r_hat": region.r_hat, "s": region.s},
        n=dataset.n,
        candidates_evaluated=n_candidates,
        candidates_accepted=accepted + 1,
        max_gap=best_gap,
        argmax_w=best_w,
        oracle_stderr=_oracle_stderr(instance, best_w),
        argmax_sparsity=effective_sparsity(residuals_at(instance, dataset, best_w)),
    )


def _perturbations(rng, anchor, ladder, count, offset):
    d = anchor.shape[0]
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    scales = ladder[(offset + np.arange(count)) % ladder.shape[0]]
    u = rng.uniform(0.0, 1.0, size=count)
    return anchor + (scales * u)[:, None] * g


def max_gap_over_ball(
    instance: problems.ProblemInstance,
    dataset: problems.Dataset,
    region: BallRegion,
    n_candidates: int,
    seed: int,
) -> GapReport:
    """Randomized lower bound on the supremum over ||w - w*|| <= r.

    Proposals are uniform in the ball (candidate 0 is the center), so
    membership is exact and no proposal is rejected.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    center = np.asarray(region.center, dtype=float)
    rng = np.random.Generator(np.random.Philox(key=seed))
    best_gap = gap_at(instance, dataset, center)  # candidate 0 is the center
    best_w = center
    n_proposals = n_candidates - 1
    chunk = 8192
    for start in range(0, n_proposals, chunk):
        block = _ball_samples(rng, center, region.r, chunk)
        W = block[: min(chunk, n_proposals - start)]
        gaps = _gaps_batch(instance, dataset, W)
        i = int(np.argmax(gaps))
        if gaps[i] > best_gap:
            best_gap = float(gaps[i])
            best_w = W[i]
    return GapReport(
        region_kind="ball",
        region_params={"r": region.r},
        n=dataset.n,
        candidates_evaluated=n_candidates,
        candidates_accepted=n_candidates,
        max_gap=best_gap,
        argmax_w=best_w,
        oracle_stderr=_oracle_stderr(instance, best_w),
        argmax_sparsity=effective_sparsity(residuals_at(instance, dataset, best_w)),
    )


def _ball_samples(rng, center, r, count):
    d = center.shape[0]
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rho = r * rng.uniform(0.0, 1.0, size=count) ** (1.0 / d)
    return center + rho[:, None] * g


def ball_gap_closed_form(instance: problems.ProblemInstance, dataset: problems.Dataset, r: float) -> float:
    """max over the ball for realizable linear data: r * ||Sigma - Sigma_hat||_2."""
    if not (instance.spec.family.linear and instance.spec.family.realizable):
        raise ValueError("closed form requires a realizable linear family")
    M, _ = _moment_error_terms(instance, dataset)
    return r * float(np.linalg.norm(M, 2))


def measure_nu(instance: problems.ProblemInstance, dataset: problems.Dataset) -> float:
    """max over the dataset of the per-example loss-gradient norm at w*."""
    return float(np.max(problems.per_example_gradient_norms(dataset, instance, instance.w_star())))


def residual_region_envelope(n: int, r_hat: float, s: float, G: float, B: float,
                             delta: float, C: float) -> float:
    """Deviation envelope for the residual region at confidence 1 - 3*delta,
    reading the covering dimension as n."""
    log_term = math.log(1.0 / delta)
    sparse = math.sqrt(s / n * math.log(2.0 * n / s)) * (1.0 + math.log(n))
    return C * (G * B * log_term / n + G * r_hat * (math.sqrt(log_term / n) + sparse))


def ball_envelope(n: int, r: float, G: float, d: int, delta: float, C: float) -> float:
    """Deviation envelope for the ball region at confidence 1 - 3*delta."""
    return C * (G * r / n + G * r * math.sqrt((math.log(1.0 / delta) + d * math.log(n)) / n))


@dataclass(frozen=True)
class RegionRecipe:
    """How gap_scaling_experiment builds its region at each (n, seed) cell."""

    kind: str = "ball"  # "ball" or "residual"
    reference: str = "fixed"  # "fixed" offset from w*, or "epoch1" iterate
    offset: float = 1.0
    s: Optional[float] = None
    n_candidates: int = 100_000
    delta: float = 0.05
    C: float = 1.0

    def validate(self):
        if self.kind not in ("ball", "residual"):
            raise ValueError("recipe kind must be 'ball' or 'residual'")
        if self.reference not in ("fixed", "epoch1"):
            raise ValueError("recipe reference must be 'fixed' or 'epoch1'")
        if self.offset < 0 or self.n_candidates < 1:
            raise ValueError("offset must be non-negative and n_candidates positive")


@dataclass
class GapCell:
    n: int
    seed_index: int
    report: Optional[GapReport]
    envelope: float
    failure: Optional[str] = None


@dataclass
class GapScalingResult:
    recipe: RegionRecipe
    cells: List[GapCell]
    medians: List[tuple]  # (n, median max_gap)


def gap_scaling_experiment(
    instance: problems.ProblemInstance,
    n_grid: Sequence[int],
    seeds: int,
    recipe: RegionRecipe,
    master_seed: int = 0,
) -> GapScalingResult:
    """Median max-gap across datasets for each n in the grid.

    Regenerates the dataset per (n, seed), builds the region per the
    recipe, and random-searches the gap. Region-too-thin failures are
    recorded per cell instead of aborting the grid.
    """
    n_grid = list(n_grid)
    if len(n_grid) < 4 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing with at least 4 points")
    recipe.validate()
    cells: List[GapCell] = []
    direction = np.ones(instance.dim) / math.sqrt(instance.dim)
    for n in n_grid:
        for seed_index in range(seeds):
            data_seed = derive_seed(master_seed, "gapdata", n, seed_index)
            search_seed = derive_seed(master_seed, "gapsearch", n, seed_index)
            dataset = problems.generate_dataset(instance, n, data_seed)
            anchor = _recipe_anchor(instance, dataset, recipe, direction,
                                    derive_seed(master_seed, "gapanchor", n, seed_index))
            try:
                if recipe.kind == "ball":
                    r = float(np.linalg.norm(anchor - instance.w_star()))
                    report = max_gap_over_ball(instance, dataset, BallRegion(r, instance.w_star()),
                                               recipe.n_candidates, search_seed)
                    env = ball_envelope(n, r, instance.constants.G, instance.dim,
                                        recipe.delta, recipe.C)
                else:
                    region = residual_region_from_anchor(instance, dataset, anchor, recipe.s)
                    report = max_gap_over_residual_region(instance, dataset, region,
                                                          recipe.n_candidates, search_seed)
                    env = residual_region_envelope(n, region.r_hat, region.s,
                                                   instance.constants.G, instance.constants.B,
                                                   recipe.delta, recipe.C)
                cells.append(GapCell(n=n, seed_index=seed_index, report=report, envelope=env))
            except RegionTooThinError as exc:
                cells.append(GapCell(n=n, seed_index=seed_index, report=None,
                                     envelope=math.nan, failure=str(exc)))
    medians = []
    for n in n_grid:
        gaps = [c.report.max_gap for c in cells if c.n == n and c.report is not None]
        if gaps:
            medians.append((n, float(np.median(gaps))))
    return GapScalingResult(recipe=recipe, cells=cells, medians=medians)


def _recipe_anchor(instance, dataset, recipe, direction, sgd_seed):
    w_ref = instance.w_star() + recipe.offset * direction
    if recipe.reference == "fixed":
        return w_ref
    schedule = sgd.manual_schedule(sgd.lr_theorem3(dataset.n, instance.constants.L), dataset.n)
    trajectory = sgd.run_sgd(instance, dataset, w_ref, schedule,
                             sgd.SamplingMode.WITHOUT_REPLACEMENT, sgd_seed)
    return trajectory.final_w


def write_gap_outputs(result: GapScalingResult, out_dir) -> List[Path]:
    """gaps.csv (one row per cell) and summary.json with medians and envelopes."""
    out_dir = Path(out_dir)
    csv_path = out_dir / "gaps.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "n", "seed", "max_gap", "candidates", "accepted",
                         "region_size", "s", "argmax_sparsity", "oracle_stderr",
                         "envelope", "delta", "C", "failure"])
        for c in result.cells:
            if c.report is None:
                writer.writerow([result.recipe.kind, c.n, c.seed_index, "", 0, 0, "",
                                 "", "", "", "", repr(result.recipe.delta),
                                 repr(result.recipe.C), c.failure])
                continue
            size = c.report.region_params.get("r", c.report.region_params.get("r_hat"))
            writer.writerow([
                c.report.region_kind, c.n, c.seed_index, repr(c.report.max_gap),
                c.report.candidates_evaluated, c.report.candidates_accepted,
                repr(float(size)), repr(float(c.report.region_params.get("s", math.nan))),
                repr(c.report.argmax_sparsity), repr(c.report.oracle_stderr),
                repr(c.envelope), repr(result.recipe.delta), repr(result.recipe.C), "",
            ])
    summary = {
        "recipe": {
            "kind": result.recipe.kind,
            "reference": result.recipe.reference,
            "offset": result.recipe.offset,
            "s": result.recipe.s,
            "n_candidates": result.recipe.n_candidates,
            "delta": result.recipe.delta,
            "C": result.recipe.C,
        },
        "medians": [{"n": n, "median_max_gap": g} for n, g in result.medians],
        "failures": sum(1 for c in result.cells if c.report is None),
    }
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [csv_path, json_path]
