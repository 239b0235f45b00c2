"""Command-line entry point.

Subcommands: ``gen`` (problem + dataset + constants report), ``run``
(a single SGD run exported as a trajectory CSV), ``gradgap`` (gap
scaling study) and ``rates`` (the full rate experiment).

One JSON config document drives everything, with top-level sections
``problem``, ``dataset``, ``schedule``, ``experiment`` and ``gradgap``;
unknown keys anywhere are errors. Exit codes: 0 success, 2 config
error, 3 certification failure, 4 aggregate cell failure, 5 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, experiments, gradgap, problems, sgd

WORKERS_ENV = "PLSGD_WORKERS"


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"config error at {field}: {message}")
        self.field = field


@dataclass
class RunManifest:
    tool: str
    version: str
    master_seed: Optional[int]
    config_sha256: str
    started: str
    finished: str
    wall_seconds: float
    files: List[dict]


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(out_dir: Path, master_seed, config_path: Path, files: List[Path],
                   started: str, wall_seconds: float, extra: Optional[dict] = None) -> Path:
    manifest = RunManifest(
        tool="plsgd",
        version=__version__,
        master_seed=master_seed,
        config_sha256=hashlib.sha256(config_path.read_bytes()).hexdigest(),
        started=started,
        finished=_utc_now(),
        wall_seconds=wall_seconds,
        files=[{"name": p.name, "bytes": p.stat().st_size} for p in sorted(set(files))],
    )
    doc = dataclasses.asdict(manifest)
    if extra:
        doc.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# config parsing (fail closed: unknown keys are errors)


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError("config", f"file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    unknown = set(doc) - {"problem", "dataset", "schedule", "experiment", "gradgap"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level section")
    return doc


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}", "unknown field")


def _require(doc: dict, key: str) -> dict:
    if key not in doc:
        raise ConfigError(key, "section is required for this command")
    if not isinstance(doc[key], dict):
        raise ConfigError(key, "section must be a JSON object")
    return doc[key]


def _problem_spec(doc: dict) -> problems.ProblemSpec:
    section = _require(doc, "problem")
    try:
        spec = problems.spec_from_dict(section)
        spec.validate()
    except (ValueError, TypeError) as exc:
        field = _guess_field(str(exc))
        raise ConfigError(f"problem.{field}" if field else "problem", str(exc))
    return spec


def _guess_field(message: str) -> Optional[str]:
    for name in ("family", "dim", "input_scale", "w_star", "operating_radius",
                 "link_amplitude", "noise_std", "seed", "m_oracle", "pl_probes",
                 "pl_oracle_samples"):
        if name in message:
            return name
    return None


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise ConfigError("out", f"{out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise ConfigError("out", f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir: Path, resolved: dict) -> Path:
    path = out_dir / "config.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return path


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get(WORKERS_ENV, "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("workers", f"{WORKERS_ENV} must be an integer, got {env!r}")
    return 1


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    doc = _load_config(args.config)
    spec = _problem_spec(doc)
    meta = doc.get("dataset", {})
    _check_keys(meta, {"n", "seed", "binary_dump", "pl_probes", "pl_seed"}, "dataset")
    n = int(meta.get("n", 0))
    if n < 1:
        raise ConfigError("dataset.n", "a positive dataset size is required")
    data_seed = int(meta.get("seed", spec.seed))
    pl_probes = int(meta.get("pl_probes", spec.pl_probes))
    pl_seed = int(meta.get("pl_seed", spec.seed + 1))

    out = _prepare_out_dir(args.out, args.force)
    started = _utc_now()
    t0 = time.perf_counter()

    instance = problems.generate_problem(spec)
    dataset = problems.generate_dataset(instance, n, data_seed)
    measured_mu = problems.verify_pl(instance, pl_probes, pl_seed)

    files = []
    problem_path = out / "problem.json"
    problems.save_problem_json(problem_path, instance, dataset)
    files.append(problem_path)
    if meta.get("binary_dump", False):
        bin_path = out / "dataset.bin"
        problems.save_dataset_binary(bin_path, dataset)
        files.append(bin_path)
    c = instance.constants
    constants_path = out / "constants.json"
    constants_path.write_text(json.dumps({
        "mu": c.mu, "gamma": c.gamma, "L": c.L, "G": c.G, "B": c.B, "sigma2": c.sigma2,
        "measured_mu": measured_mu, "pl_probes": pl_probes, "pl_seed": pl_seed,
    }, indent=2, sort_keys=True) + "\n")
    files.append(constants_path)
    config_path = _echo_config(out, {"problem": problems.spec_to_dict(spec),
                                     "dataset": {"n": n, "seed": data_seed,
                                                 "binary_dump": bool(meta.get("binary_dump", False)),
                                                 "pl_probes": pl_probes, "pl_seed": pl_seed}})
    files.append(config_path)
    files.append(write_manifest(out, spec.seed, config_path, files, started,
                                time.perf_counter() - t0))
    print(f"wrote {out} (mu={c.mu:.6g}, measured_mu={measured_mu:.6g})")
    return 0


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    doc = _load_config(args.config)
    spec = _problem_spec(doc)
    section = _require(doc, "schedule")
    allowed = {"source", "n", "dataset_seed", "sgd_seed", "eta", "stop_iter",
               "sampling_mode", "checkpoint_every", "w0_offset", "constants_mode"}
    _check_keys(section, allowed, "schedule")
    source = section.get("source", "manual")
    if source not in ("manual", "theorem1", "theorem3"):
        raise ConfigError("schedule.source", f"unsupported source {source!r}")
    n = int(section.get("n", 0))
    if n < 1:
        raise ConfigError("schedule.n", "a positive dataset size is required")
    mode = section.get("sampling_mode", "without_replacement")
    try:
        mode = sgd.SamplingMode(mode)
    except ValueError:
        raise ConfigError("schedule.sampling_mode", f"unknown mode {mode!r}")
    constants_mode = section.get("constants_mode", "anchored")
    if constants_mode not in ("anchored", "certified"):
        raise ConfigError("schedule.constants_mode", "must be 'anchored' or 'certified'")

    out = _prepare_out_dir(args.out, args.force)
    started = _utc_now()
    t0 = time.perf_counter()
    instance = problems.generate_problem(spec)
    dataset = problems.generate_dataset(instance, n, int(section.get("dataset_seed", spec.seed)))
    offset = section.get("w0_offset")
    offset = float(offset) if offset is not None else spec.operating_radius / 2.0
    w0 = instance.w_star() + offset * np.ones(spec.dim) / math.sqrt(spec.dim)

    c = instance.constants
    if source == "manual":
        if "eta" not in section or "stop_iter" not in section:
            raise ConfigError("schedule.eta", "manual schedules need eta and stop_iter")
        schedule = sgd.manual_schedule(float(section["eta"]), int(section["stop_iter"]))
    elif source == "theorem1":
        F0 = problems.population_risk(instance, w0)
        sigma2 = (problems.stochastic_gradient_variance(instance, w0)
                  if constants_mode == "anchored" else c.sigma2)
        try:
            schedule = sgd.theorem1_schedule(c.mu, n, F0, sigma2, c.L)
        except (sgd.LogArgumentNotAboveOne, sgd.StepTooLarge) as exc:
            raise ConfigError("schedule.source", f"schedule not constructible: {exc}")
    else:
        if "stop_iter" not in section:
            raise ConfigError("schedule.stop_iter", "theorem3 runs need an explicit stop_iter")
        schedule = sgd.Schedule(sgd.lr_theorem3(n, c.L), int(section["stop_iter"]),
                                sgd.ScheduleSource.THEOREM3, {"n": n, "L": c.L})

    if args.dry_run:
        print(json.dumps({"eta": schedule.eta, "stop_iter": schedule.stop_iter,
                          "source": schedule.source.value,
                          "inputs_used": schedule.inputs_used}, indent=2, sort_keys=True))
        return 0

    trajectory = sgd.run_sgd(instance, dataset, w0, schedule, mode,
                             int(section.get("sgd_seed", 0)),
                             checkpoint_every=int(section.get("checkpoint_every", 0)))

    files = []
    traj_path = out / "trajectory.csv"
    sgd.trajectory_to_csv(trajectory, traj_path)
    files.append(traj_path)
    config_path = _echo_config(out, {"problem": problems.spec_to_dict(spec),
                                     "schedule": dict(section)})
    files.append(config_path)
    files.append(write_manifest(out, spec.seed, config_path, files, started,
                                time.perf_counter() - t0,
                                extra={"ball_exit": trajectory.ball_exit_flag,
                                       "steps": trajectory.steps}))
    print(f"wrote {out} (steps={trajectory.steps}, ball_exit={trajectory.ball_exit_flag})")
    return 0


# ---------------------------------------------------------------------------
# gradgap


def cmd_gradgap(args) -> int:
    doc = _load_config(args.config)
    spec = _problem_spec(doc)
    section = _require(doc, "gradgap")
    allowed = {"n_grid", "seeds", "region", "reference", "offset", "s",
               "n_candidates", "delta", "C", "master_seed"}
    _check_keys(section, allowed, "gradgap")
    try:
        recipe = gradgap.RegionRecipe(
            kind=section.get("region", "ball"),
            reference=section.get("reference", "fixed"),
            offset=float(section.get("offset", 1.0)),
            s=section.get("s"),
            n_candidates=int(section.get("n_candidates", 100_000)),
            delta=float(section.get("delta", 0.05)),
            C=float(section.get("C", 1.0)),
        )
        recipe.validate()
    except ValueError as exc:
        raise ConfigError("gradgap", str(exc))
    n_grid = section.get("n_grid")
    if not isinstance(n_grid, list) or len(n_grid) < 4:
        raise ConfigError("gradgap.n_grid", "an increasing list of at least 4 sizes is required")
    seeds = int(section.get("seeds", 20))
    master_seed = int(section.get("master_seed", 0))
    if args.seed is not None:
        master_seed = args.seed

    out = _prepare_out_dir(args.out, args.force)
    started = _utc_now()
    t0 = time.perf_counter()
    instance = problems.generate_problem(spec)
    try:
        result = gradgap.gap_scaling_experiment(instance, n_grid, seeds, recipe, master_seed)
    except ValueError as exc:
        raise ConfigError("gradgap", str(exc))
    files = gradgap.write_gap_outputs(result, out)
    config_path = _echo_config(out, {"problem": problems.spec_to_dict(spec),
                                     "gradgap": dict(section, master_seed=master_seed)})
    files.append(config_path)
    failures = sum(1 for c in result.cells if c.report is None)
    files.append(write_manifest(out, master_seed, config_path, files, started,
                                time.perf_counter() - t0,
                                extra={"cells_total": len(result.cells),
                                       "cells_failed": failures}))
    print(f"wrote {out} ({len(result.cells)} cells, {failures} failed)")
    if failures > experiments.MAX_UNUSABLE_FRACTION * len(result.cells):
        print("error: too many region failures", file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------
# rates


def _experiment_config(doc: dict, args) -> experiments.ExperimentConfig:
    spec = _problem_spec(doc)
    section = _require(doc, "experiment")
    allowed = {"n_grid", "seeds_per_cell", "arms", "C", "w0_offset", "checkpoint_every",
               "master_seed", "cap_steps", "constants_mode", "post_epoch_sampling",
               "epoch_sweep_epochs", "fit_floor"}
    _check_keys(section, allowed, "experiment")
    kwargs = dict(section)
    if args.seed is not None:
        kwargs["master_seed"] = args.seed
    if args.cap_steps is not None:
        kwargs["cap_steps"] = args.cap_steps
    try:
        config = experiments.ExperimentConfig(problem=spec, **kwargs)
        config.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError("experiment", str(exc))
    return config


def _print_dry_run(config: experiments.ExperimentConfig) -> None:
    """Resolve and print the schedules the experiment would use (seed 0)."""
    instance = problems.generate_problem(config.problem)
    c = instance.constants
    print(f"constants: mu={c.mu!r} gamma={c.gamma!r} L={c.L!r} G={c.G!r} B={c.B!r} "
          f"sigma2={c.sigma2!r} mode={config.constants_mode}")
    for arm in config.arms:
        print(f"arm {arm.value}:")
        for n in config.n_grid:
            resolved = experiments.resolve_schedules(config, arm, n, 0, instance)
            if "skipped" in resolved:
                print(f"  n={n}: skipped ({resolved['skipped']})")
                continue
            if "sweep" in resolved:
                sweep = resolved["sweep"]
                print(f"  n={n}: eta={sweep['eta']!r} epochs={sweep['epochs']}")
                continue
            epoch1 = resolved["epoch1"]
            line = f"  n={n}: eta1={epoch1.get('eta')!r} inputs={_fmt(epoch1)}"
            if "post_epoch" in resolved:
                post = resolved["post_epoch"]
                line += f" | eta={post.get('eta')!r} t={post.get('t')} inputs={_fmt(post)}"
            print(line)


def _fmt(inputs: dict) -> str:
    keep = {k: v for k, v in inputs.items() if k not in ("eta", "source")}
    return json.dumps(keep, sort_keys=True, default=repr)


def cmd_rates(args) -> int:
    doc = _load_config(args.config)
    config = _experiment_config(doc, args)
    if args.dry_run:
        _print_dry_run(config)
        return 0
    out = _prepare_out_dir(args.out, args.force)
    started = _utc_now()
    t0 = time.perf_counter()
    code = 0
    try:
        result = experiments.run_experiment(config, out_dir=out, workers=_workers(args))
    except experiments.ExcessiveFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        result = exc.result
        code = 4
    files = [p for p in out.iterdir() if p.is_file()]
    config_path = out / "config.json"
    unusable = {arm.value: frac for arm, frac in result.unusable_fraction.items()}
    files.append(write_manifest(out, config.master_seed, config_path, files, started,
                                time.perf_counter() - t0,
                                extra={"cells_total": len(result.cells),
                                       "unusable_fraction": unusable,
                                       "truncated": sum(1 for c in result.cells if c.truncated)}))
    for report in result.reports:
        print(f"{report.arm.value}: slope={report.slope:.4f} r2={report.r_squared:.4f}")
    print(f"wrote {out}")
    return code


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plsgd",
                                     description="SGD excess-risk laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, needs_out in (("gen", cmd_gen, True), ("run", cmd_run, True),
                                  ("gradgap", cmd_gradgap, True), ("rates", cmd_rates, True)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=needs_out, help="output directory")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker threads (default ${WORKERS_ENV} or 1)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--force", action="store_true", help="allow non-empty output dir")
        p.add_argument("--dry-run", action="store_true",
                       help="print resolved schedules and exit")
        p.add_argument("--cap-steps", type=int, default=None, help="step cap override")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except problems.CertificationError as exc:
        print(f"error: certification failed: {exc}", file=sys.stderr)
        return 3
    except sgd.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
