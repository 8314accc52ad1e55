# Command-line front end
# ======================

# Commands
#     gen       discretize a density and write the system manifest
#     solve     run one method over several seeded trials
#     cmg       cascadic multigrid chain
#     oracle    1-D reference optimum (obj*, v*, co-motion maps)
#     plotdata  OT-map point files and SCE potential of a finished run
#     bench     KLALM vs S-KLALM timings over K with fitted exponents

# A run is configured by a flat JSON file carrying "schema_version"; every flag
# given on the command line overrides the file value.


from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy

from eralm.core import (
    DomainError,
    EralmError,
    FArray,
    InfeasibleSubproblemError,
    NumericalError,
    ResourceLimitError,
    read_plan,
    write_marginal,
    write_plan,
)
from eralm.methods import (
    METHOD_KINDS,
    MethodConfig,
    RunRecord,
    StepRule,
    random_initial_plans,
    run_method,
)
from eralm.mmot import (
    NORMALIZATIONS,
    STYLES,
    Density,
    DiscreteSystem,
    Mesh,
    OracleReference,
    build_mesh,
    discretize,
    error_metrics,
    get_system,
    mmot_oracle,
    ot_map,
    reference_for,
    sce_potential,
)
from eralm.multigrid import LevelConfig, run_cmg
from eralm.sinkhorn import SinkhornConfig

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "ERALM_OUTPUT_ROOT"
ORACLE_MODES = ("auto", "seidl", "discrete", "none")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4

AGGREGATE_SCHEMA = "# eralm aggregate schema 1"
CMG_SCHEMA = "# eralm cmg schema 1"
BENCH_SCHEMA = "# eralm bench schema 1"

CONFIG_DEFAULTS: dict[str, Any] = {
    "system": 1,
    "density": None,
    "K": None,
    "style": None,
    "threshold": 1e-3,
    "beta": 1.0,
    "normalization": "unit",
    "method": "klalm",
    "sigma": 1.0,
    "gamma": 0.99,
    "n_samples": None,
    "t_hat": 0,
    "tol": 5e-3,
    "t_max": 10_000,
    "step_rule": "power_decay",
    "step_exponent": 0.75,
    "step_value": None,
    "s_max": 20,
    "feas_tol": 1e-6,
    "fixed_parameter": None,
    "accelerated_sampling": False,
    "seed": 0,
    "trials": 1,
    "workers": 1,
    "oracle": "auto",
    "save_plans": False,
    "omit_timing": False,
    "output": None,
    "levels": 1,
    "tol_base": None,
    "cheap_method": "s-klalm",
    "max_dense_entries": None,
    "Ks": [90, 180, 360],
    "bench_iterations": 10,
}

# commands that discretize exactly one mesh and therefore need K
_NEEDS_K = ("gen", "solve", "oracle")


def _banner(text: str) -> None:
    print(f"========={text}===========")


def _save_json(path: Path, payload: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _load_json(path: Path, what: str) -> Any:
    if not path.is_file():
        raise DomainError(f"{what}: no file at {path}")
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise DomainError(f"{what}: {path} is not valid JSON ({exc})") from exc


def _checksum(cost: FArray) -> str:
    return hashlib.sha256(numpy.ascontiguousarray(cost, dtype=numpy.float64).tobytes()).hexdigest()


def _mean(values: Sequence[float]) -> float:
    finite = [v for v in values if numpy.isfinite(v)]
    return float(sum(finite) / len(finite)) if finite else float("nan")


# Configuration
# -------------


def load_config(path: Path | str) -> dict[str, Any]:
    """
    Purpose: read a flat JSON experiment configuration
    Output:
        -- the configured keys without "schema_version"; unknown keys and other versions are rejected
    """
    data = _load_json(Path(path), "config")
    if not isinstance(data, dict):
        raise DomainError("config: expected a JSON object")
    version = data.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise DomainError(f"schema_version: expected {CONFIG_SCHEMA_VERSION}, got {version!r}")
    for key in data:
        if key not in CONFIG_DEFAULTS:
            raise DomainError(f"{key}: unknown configuration key")
    return data


def apply_cli_overrides(values: Mapping[str, Any], args: argparse.Namespace) -> dict[str, Any]:
    """defaults <- file values <- flags that were given"""
    out = dict(CONFIG_DEFAULTS)
    out.update(values)
    for key in CONFIG_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    return out


def _resolve_density(values: Mapping[str, Any]) -> tuple[Density, str | None, int | None, int | None]:
    """(density, default style, default K, system number)"""
    source = values["density"]
    if source is None:
        spec = get_system(int(values["system"]))
        return spec.density, spec.style, spec.K0, int(values["system"])
    data = source if isinstance(source, Mapping) else _load_json(Path(source), "density")
    if not isinstance(data, Mapping):
        raise DomainError("density: expected a JSON object")
    if "density" in data and isinstance(data["density"], Mapping):
        data = data["density"]
    density = Density.from_dict(data)
    return density, "equimass" if density.dim == 1 else "equisize", None, None


@dataclass(frozen=True)
class ExperimentConfig:
    """
    density:           electron density (a catalog system or a custom manifest)
    K, style:          discretization; K None means the catalog K0
    threshold, beta, normalization: discretization settings
    method:            method of solve (the accurate level-0 method of cmg)
    trials, base_seed: trial k runs with seed base_seed + k
    output:            output directory
    """

    density: Density
    K: int | None
    style: str
    method: MethodConfig
    output: Path
    threshold: float = 1e-3
    beta: float = 1.0
    normalization: str = "unit"
    trials: int = 1
    base_seed: int = 0
    workers: int = 1
    oracle: str = "auto"
    save_plans: bool = False
    omit_timing: bool = False
    system: int | None = None
    levels: int = 1
    tol_base: float | None = None
    cheap_method: str = "s-klalm"
    max_dense_entries: int | None = None
    Ks: tuple[int, ...] = (90, 180, 360)
    bench_iterations: int = 10

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise DomainError("trials: at least one trial is required")
        if self.workers < 1:
            raise DomainError("workers: at least one worker is required")
        if self.style not in STYLES:
            raise DomainError(f"style: choose from {STYLES}")
        if self.normalization not in NORMALIZATIONS:
            raise DomainError(f"normalization: choose from {NORMALIZATIONS}")
        if self.oracle not in ORACLE_MODES:
            raise DomainError(f"oracle: choose from {ORACLE_MODES}")
        if self.cheap_method not in METHOD_KINDS:
            raise DomainError(f"cheap_method: choose from {METHOD_KINDS}")
        if self.K is not None and self.K < 2:
            raise DomainError("K: a mesh needs at least 2 cells")
        if self.levels < 1 or self.bench_iterations < 1:
            raise DomainError("levels and bench_iterations must be at least 1")
        if self.base_seed < 0:
            raise DomainError("seed: must be nonnegative")

    def discretize(self, K: int | None = None) -> DiscreteSystem:
        size = K if K is not None else self.K
        if size is None:
            raise DomainError("K: no mesh size configured")
        mesh = build_mesh(self.density, size, self.style)
        return discretize(self.density, mesh, self.threshold, self.beta, self.normalization)

    def trial_method(self, trial: int) -> MethodConfig:
        return dataclasses.replace(self.method, seed=self.base_seed + trial)


def experiment_config(values: Mapping[str, Any], command: str = "solve") -> ExperimentConfig:
    """Build and validate an ExperimentConfig from merged configuration values."""
    density, style, K0, system = _resolve_density(values)
    step = StepRule(
        kind=str(values["step_rule"]),
        exponent=float(values["step_exponent"]),
        value=None if values["step_value"] is None else float(values["step_value"]),
    )
    method = MethodConfig(
        kind=str(values["method"]),
        sigma=float(values["sigma"]),
        gamma=float(values["gamma"]),
        n_samples=None if values["n_samples"] is None else int(values["n_samples"]),
        t_hat=int(values["t_hat"]),
        tol=float(values["tol"]),
        t_max=int(values["t_max"]),
        step_rule=step,
        sinkhorn=SinkhornConfig(s_max=int(values["s_max"]), feas_tol=float(values["feas_tol"])),
        seed=int(values["seed"]),
        fixed_parameter=None if values["fixed_parameter"] is None else float(values["fixed_parameter"]),
        accelerated_sampling=bool(values["accelerated_sampling"]),
    )
    K = values["K"]
    if K is None and command == "cmg":
        K = K0
    output = values["output"]
    if output is None:
        output = Path(os.environ.get(OUTPUT_ROOT_ENV, "eralm_output")) / command
    return ExperimentConfig(
        density=density,
        K=None if K is None else int(K),
        style=str(values["style"] or style),
        method=method,
        output=Path(output),
        threshold=float(values["threshold"]),
        beta=float(values["beta"]),
        normalization=str(values["normalization"]),
        trials=int(values["trials"]),
        base_seed=int(values["seed"]),
        workers=int(values["workers"]),
        oracle=str(values["oracle"]),
        save_plans=bool(values["save_plans"]),
        omit_timing=bool(values["omit_timing"]),
        system=system,
        levels=int(values["levels"]),
        tol_base=None if values["tol_base"] is None else float(values["tol_base"]),
        cheap_method=str(values["cheap_method"]),
        max_dense_entries=None if values["max_dense_entries"] is None else int(values["max_dense_entries"]),
        Ks=tuple(int(k) for k in values["Ks"]),
        bench_iterations=int(values["bench_iterations"]),
    )


# System manifests
# ----------------


def write_system(directory: Path, system: DiscreteSystem) -> dict[str, Any]:
    """
    Purpose: serialize a discrete system
    Output:
        -- system.json (density, discretization, K_trunc, cost checksum) plus
           cells.txt, masses.txt, barycenters.txt and kept.txt in `directory`
    """
    directory.mkdir(parents=True, exist_ok=True)
    mesh = system.mesh
    numpy.savetxt(directory / "cells.txt", numpy.hstack([mesh.lower, mesh.upper]), fmt="%.17g")
    write_marginal(directory / "masses.txt", system.rho)
    numpy.savetxt(directory / "barycenters.txt", system.barycenters, fmt="%.17g")
    numpy.savetxt(directory / "kept.txt", system.kept, fmt="%d")
    manifest = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "density": mesh.density.to_dict(),
        "style": mesh.style,
        "K": mesh.K,
        "K_trunc": system.K,
        "threshold": system.threshold,
        "beta": system.beta,
        "normalization": system.normalization,
        "n_electrons": system.n_electrons,
        "cost_sha256": _checksum(system.cost),
        "files": {
            "cells": "cells.txt",
            "masses": "masses.txt",
            "barycenters": "barycenters.txt",
            "kept": "kept.txt",
        },
    }
    _save_json(directory / "system.json", manifest)
    return manifest


def read_system(directory: Path) -> DiscreteSystem:
    """Rebuild the system of a manifest and verify the cost checksum."""
    manifest = _load_json(directory / "system.json", "system manifest")
    if manifest.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise DomainError(f"schema_version: unsupported system manifest in {directory}")
    density = Density.from_dict(manifest["density"])
    cells = numpy.loadtxt(directory / manifest["files"]["cells"], ndmin=2)
    d = density.dim
    if cells.shape != (int(manifest["K"]), 2 * d):
        raise DomainError(f"cells: expected {manifest['K']} rows of {2 * d} bounds, got {cells.shape}")
    mesh = Mesh(density, cells[:, :d], cells[:, d:], str(manifest["style"]))
    system = discretize(
        density, mesh, float(manifest["threshold"]), float(manifest["beta"]), str(manifest["normalization"])
    )
    if _checksum(system.cost) != manifest["cost_sha256"]:
        raise DomainError(f"cost_sha256: the rebuilt system does not match the manifest in {directory}")
    return system


# Runs
# ----


def write_run(directory: Path, record: RunRecord, system: DiscreteSystem, save_plans: bool, omit_timing: bool) -> None:
    """trace.csv and potential.txt; block_<i>.txt and support_<i>.txt with save_plans"""
    directory.mkdir(parents=True, exist_ok=True)
    record.to_csv(directory / "trace.csv", include_timing=not omit_timing)
    if record.dual_v:
        v = sce_potential(record.dual_v)
        numpy.savetxt(directory / "potential.txt", numpy.column_stack([system.barycenters, v]), fmt="%.17g")
    if save_plans:
        for i, plan in enumerate(record.plans):
            write_plan(directory / f"block_{i}.txt", plan)
        for i, support in enumerate(record.supports):
            if support is not None:
                support.write(directory / f"support_{i}.txt")


@dataclass(frozen=True)
class TrialJob:
    trial: int
    system: DiscreteSystem
    cfg: MethodConfig
    directory: Path
    save_plans: bool = False
    omit_timing: bool = False


@dataclass
class TrialOutcome:
    trial: int
    seed: int
    record: RunRecord
    seconds: float


def solve_trial(job: TrialJob) -> TrialOutcome:
    """One seeded trial from a random feasible start; runs inside a pool worker."""
    system = job.system
    start = time.perf_counter()
    try:
        initial = random_initial_plans(system.marginals(), job.cfg.seed)
        record = run_method(mmot_oracle(system), system.marginals(), job.cfg, initial, weights=system.lambda_inv)
    except EralmError as exc:
        raise type(exc)(f"trial {job.trial} (seed {job.cfg.seed}): {exc}") from exc
    seconds = time.perf_counter() - start
    write_run(job.directory, record, system, job.save_plans, job.omit_timing)
    logger.info("trial %d finished: %s after %d iterations", job.trial, record.stop_reason, len(record.iterations))
    return TrialOutcome(job.trial, job.cfg.seed, record, seconds)


def _reference(system: DiscreteSystem, mode: str) -> OracleReference | None:
    if mode == "none" or system.mesh.dim != 1:
        return None
    return reference_for(system, mode)


def _metrics(record: RunRecord, reference: OracleReference | None) -> tuple[float, float]:
    if reference is None:
        return float("nan"), float("nan")
    return error_metrics(record, reference)


# Commands
# --------


def cmd_gen(exp: ExperimentConfig) -> int:
    system = exp.discretize()
    manifest = write_system(exp.output, system)
    _banner(f"System {exp.density.name}: K={manifest['K']}, K_trunc={manifest['K_trunc']} written")
    return EXIT_OK


def cmd_solve(exp: ExperimentConfig) -> int:
    system = exp.discretize()
    write_system(exp.output, system)
    jobs = [
        TrialJob(k, system, exp.trial_method(k), exp.output / f"trial_{k:03d}", exp.save_plans, exp.omit_timing)
        for k in range(exp.trials)
    ]
    if exp.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as pool:
            outcomes = list(pool.map(solve_trial, jobs))
    else:
        outcomes = [solve_trial(job) for job in jobs]

    reference = _reference(system, exp.oracle)
    rows = []
    for out in outcomes:
        err_obj, err_sce = _metrics(out.record, reference)
        seconds = 0.0 if exp.omit_timing else out.seconds
        rows.append((out, err_obj, err_sce, seconds))
        _banner(f"Trial {out.trial} (seed {out.seed}) done: obj={out.record.final_objective:.10g}, err_obj={err_obj:.3e}")

    with open(exp.output / "aggregate.csv", "w", newline="", encoding="utf-8") as handle:
        handle.write(AGGREGATE_SCHEMA + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["trial", "seed", "iterations", "stop_reason", "resamples", "objective", "err_obj", "err_sce", "time_s"]
        )
        for out, err_obj, err_sce, seconds in rows:
            rec = out.record
            writer.writerow(
                [out.trial, out.seed, len(rec.iterations), rec.stop_reason, rec.resamples]
                + [repr(rec.final_objective), repr(err_obj), repr(err_sce), f"{seconds:.3f}"]
            )
        writer.writerow(
            ["mean", "", _mean([len(out.record.iterations) for out, *_ in rows]), "", ""]
            + [
                repr(_mean([out.record.final_objective for out, *_ in rows])),
                repr(_mean([row[1] for row in rows])),
                repr(_mean([row[2] for row in rows])),
                f"{_mean([row[3] for row in rows]):.3f}",
            ]
        )
    return EXIT_OK


def cmd_cmg(exp: ExperimentConfig) -> int:
    if exp.K is None:
        raise DomainError("K: a custom density needs an initial K for the multigrid chain")
    levels = LevelConfig(n_levels=exp.levels, tol0=exp.method.tol, tol_base=exp.tol_base)
    cheap = dataclasses.replace(exp.method, kind=exp.cheap_method, t_hat=0)
    start = time.perf_counter()
    result = run_cmg(
        exp.density,
        levels,
        cfg0=exp.method,
        cfg_cheap=cheap,
        K0=exp.K,
        style=exp.style,
        threshold=exp.threshold,
        beta=exp.beta,
        normalization=exp.normalization,
        max_dense_entries=exp.max_dense_entries,
    )
    seconds = 0.0 if exp.omit_timing else time.perf_counter() - start
    final = result.hierarchy.levels - 1
    write_system(exp.output, result.hierarchy.system(final))

    with open(exp.output / "cmg_summary.csv", "w", newline="", encoding="utf-8") as handle:
        handle.write(CMG_SCHEMA + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["level", "K", "K_trunc", "objective", "iterations", "stop_reason", "err_obj"])
        for (level, K, K_trunc, obj), record in zip(result.summary(), result.records):
            system = result.hierarchy.system(level)
            write_system(exp.output / f"level_{level}", system)
            write_run(
                exp.output / f"level_{level}", record, system, exp.save_plans or level == final, exp.omit_timing
            )
            err_obj, _ = _metrics(record, _reference(system, exp.oracle))
            writer.writerow([level, K, K_trunc, repr(obj), len(record.iterations), record.stop_reason, repr(err_obj)])
            _banner(f"Level {level}: K={K}, K_trunc={K_trunc}, obj={obj:.10g}")
    _banner(f"Multigrid chain of {exp.levels} levels finished in {seconds:.1f} s")
    return EXIT_OK


def cmd_oracle(exp: ExperimentConfig) -> int:
    if exp.density.dim != 1:
        raise DomainError("oracle: reference optima are only available in one dimension")
    system = exp.discretize()
    reference = reference_for(system, "auto" if exp.oracle == "none" else exp.oracle)
    exp.output.mkdir(parents=True, exist_ok=True)
    _save_json(
        exp.output / "oracle.json",
        {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "source": reference.source,
            "obj_star": reference.obj_star,
            "K": system.mesh.K,
            "K_trunc": system.K,
            "n_electrons": system.n_electrons,
        },
    )
    if reference.v_star is not None and reference.grid is not None:
        numpy.savetxt(exp.output / "v_star.txt", numpy.column_stack([reference.grid, reference.v_star]), fmt="%.17g")
    if reference.maps is not None:
        x = system.barycenters[:, 0]
        numpy.savetxt(exp.output / "comotion.txt", numpy.column_stack([x, reference.maps(x).T]), fmt="%.17g")
    _banner(f"Reference optimum ({reference.source}): obj*={reference.obj_star:.10g}")
    return EXIT_OK


def _source_directory(run_dir: Path, source: str | None) -> Path:
    if source is not None:
        return run_dir / source
    if (run_dir / "trial_000").is_dir():
        return run_dir / "trial_000"
    levels = sorted(run_dir.glob("level_*"), key=lambda p: int(p.name.split("_")[1]))
    if not levels:
        raise DomainError(f"plotdata: {run_dir} holds no trial or level directory")
    return levels[-1]


def cmd_plotdata(
    run_dir: Path,
    source: str | None = None,
    omega_lower: Sequence[float] | None = None,
    omega_upper: Sequence[float] | None = None,
) -> int:
    """
    Purpose: coordinate files of the barycentric OT maps and the SCE potential
    Output:
        -- plotdata/<source>/map_block_<i>.txt: x_src then x_img per atom whose source lies in omega
        -- plotdata/<source>/sce_potential.txt: barycenters and v
    """
    src = _source_directory(run_dir, source)
    # cmg levels carry their own system; trials share the one of the run
    system = read_system(src if (src / "system.json").is_file() else run_dir)
    plan_files = sorted(src.glob("block_*.txt"), key=lambda p: int(p.stem.split("_")[1]))
    if not plan_files:
        raise DomainError(f"plotdata: no saved plans in {src}")
    d = system.mesh.dim
    lo = numpy.full(d, -numpy.inf) if omega_lower is None else numpy.asarray(omega_lower, dtype=numpy.float64)
    hi = numpy.full(d, numpy.inf) if omega_upper is None else numpy.asarray(omega_upper, dtype=numpy.float64)
    if lo.size != d or hi.size != d:
        raise DomainError(f"omega: the box needs {d} lower and {d} upper bounds")
    target = run_dir / "plotdata" / src.name
    target.mkdir(parents=True, exist_ok=True)
    marginal = system.marginal()
    for path in plan_files:
        tmap = ot_map(read_plan(path, marginal, marginal), system)
        inside = numpy.all((tmap.points >= lo) & (tmap.points <= hi), axis=1)
        if not numpy.any(inside):
            logger.warning("%s: no source atom inside omega; writing an empty map file", path.name)
        table = numpy.hstack([tmap.points[inside], tmap.images[inside]])
        numpy.savetxt(target / f"map_{path.stem}.txt", table.reshape(-1, 2 * d), fmt="%.17g")
    potential = src / "potential.txt"
    if potential.is_file():
        numpy.savetxt(target / "sce_potential.txt", numpy.loadtxt(potential, ndmin=2), fmt="%.17g")
    else:
        logger.warning("%s has no potential.txt; skipping the SCE potential", src)
    _banner(f"Plot data of {len(plan_files)} blocks written to {target}")
    return EXIT_OK


def fit_exponent(Ks: Sequence[int], seconds: Sequence[float]) -> float:
    """slope of log T against log K"""
    if len(Ks) < 2:
        raise DomainError("bench: fitting an exponent needs at least two values of K")
    slope, _ = numpy.polyfit(numpy.log(numpy.asarray(Ks, dtype=numpy.float64)), numpy.log(seconds), 1)
    return float(slope)


def cmd_bench(exp: ExperimentConfig) -> int:
    exp.output.mkdir(parents=True, exist_ok=True)
    kinds = ("klalm", "s-klalm")
    timings: dict[str, list[float]] = {kind: [] for kind in kinds}
    with open(exp.output / "bench.csv", "w", newline="", encoding="utf-8") as handle:
        handle.write(BENCH_SCHEMA + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["K", "K_trunc", "method", "iterations", "seconds"])
        for K in exp.Ks:
            system = exp.discretize(K)
            initial = random_initial_plans(system.marginals(), exp.base_seed)
            for kind in kinds:
                cfg = dataclasses.replace(
                    exp.method, kind=kind, tol=0.0, t_max=exp.bench_iterations, record_objective=False, t_hat=0
                )
                start = time.perf_counter()
                record = run_method(mmot_oracle(system), system.marginals(), cfg, initial, weights=system.lambda_inv)
                seconds = time.perf_counter() - start
                timings[kind].append(seconds)
                writer.writerow([K, system.K, kind, len(record.iterations), f"{seconds:.6f}"])
                _banner(f"{kind} at K={K}: {seconds:.3f} s for {len(record.iterations)} iterations")
    exponents = {kind: fit_exponent(exp.Ks, timings[kind]) for kind in kinds}
    with open(exp.output / "bench_fit.csv", "w", newline="", encoding="utf-8") as handle:
        handle.write(BENCH_SCHEMA + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["method", "exponent"])
        for kind in kinds:
            writer.writerow([kind, f"{exponents[kind]:.4f}"])
    _banner("Fitted exponents: " + ", ".join(f"{k} T~K^{e:.2f}" for k, e in exponents.items()))
    return EXIT_OK


# Argument parsing
# ----------------


def _add_system_flags(p: argparse.ArgumentParser, with_K: bool = True) -> None:
    p.add_argument("--system", type=int, help="catalog system number (1-8)")
    p.add_argument("--density", help="JSON density manifest replacing the catalog system")
    if with_K:
        p.add_argument("--K", type=int, help="number of mesh cells")
    p.add_argument("--style", choices=STYLES, help="discretization (catalog default if omitted)")
    p.add_argument("--threshold", type=float, help="truncation threshold relative to the largest cell mass")
    p.add_argument("--beta", type=float, help="penalty of the diagonal terms")
    p.add_argument("--normalization", choices=NORMALIZATIONS, help="total of the discrete masses")


def _add_method_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHOD_KINDS, help="solver (the accurate level-0 solver for cmg)")
    p.add_argument("--sigma", type=float, help="scale of the adaptive regularization parameter")
    p.add_argument("--gamma", type=float, help="interpolation factor of the sampling mixture")
    p.add_argument("--n-samples", dest="n_samples", type=int, help="sample size parameter per block")
    p.add_argument("--t-hat", dest="t_hat", type=int, help="iteration at which s-klalm freezes its support")
    p.add_argument("--tol", type=float, help="stopping tolerance on Delta (level-0 tolerance for cmg)")
    p.add_argument("--t-max", dest="t_max", type=int, help="outer iteration cap")
    p.add_argument("--step-rule", dest="step_rule", choices=("power_decay", "constant"), help="eralm step sizes")
    p.add_argument("--step-exponent", dest="step_exponent", type=float, help="exponent of the power-decay rule")
    p.add_argument("--step-value", dest="step_value", type=float, help="value of the constant rule")
    p.add_argument("--s-max", dest="s_max", type=int, help="Sinkhorn sweep cap per subproblem")
    p.add_argument("--feas-tol", dest="feas_tol", type=float, help="Sinkhorn marginal tolerance")
    p.add_argument("--fixed-parameter", dest="fixed_parameter", type=float, help="constant lambda/mu")
    p.add_argument(
        "--accelerated-sampling",
        dest="accelerated_sampling",
        action="store_true",
        default=None,
        help="sample without the dense probability grid",
    )
    p.add_argument("--seed", type=int, help="base seed; trial k uses seed + k")
    p.add_argument(
        "--omit-timing", dest="omit_timing", action="store_true", default=None, help="write 0 in timing columns"
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON configuration with schema_version")
    common.add_argument("--output", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="INFO, or DEBUG when repeated")
    common.add_argument("-q", "--quiet", action="store_true", help="errors only")

    parser = argparse.ArgumentParser(
        prog="eralm", description="Sampling-based block coordinate descent over transport polytopes."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="discretize a density and write the system manifest")
    _add_system_flags(gen)

    solve = sub.add_parser("solve", parents=[common], help="run seeded trials of one method")
    _add_system_flags(solve)
    _add_method_flags(solve)
    solve.add_argument("--trials", type=int, help="number of trials")
    solve.add_argument("--workers", type=int, help="worker processes for the trials")
    solve.add_argument("--oracle", choices=ORACLE_MODES, help="reference optimum of the error metrics")
    solve.add_argument("--save-plans", dest="save_plans", action="store_true", default=None, help="dump plans")

    cmg = sub.add_parser("cmg", parents=[common], help="cascadic multigrid chain")
    _add_system_flags(cmg)
    _add_method_flags(cmg)
    cmg.add_argument("--levels", type=int, help="number of levels")
    cmg.add_argument("--tol-base", dest="tol_base", type=float, help="base of the level tolerance rule")
    cmg.add_argument("--cheap-method", dest="cheap_method", choices=METHOD_KINDS, help="solver above level 0")
    cmg.add_argument(
        "--max-dense-entries", dest="max_dense_entries", type=int, help="abort a level needing more dense entries"
    )
    cmg.add_argument("--oracle", choices=ORACLE_MODES, help="reference optimum of the error metrics")
    cmg.add_argument("--save-plans", dest="save_plans", action="store_true", default=None, help="dump every level")

    oracle = sub.add_parser("oracle", parents=[common], help="1-D reference optimum")
    _add_system_flags(oracle)
    oracle.add_argument("--oracle", choices=ORACLE_MODES, help="reference kind")

    plot = sub.add_parser("plotdata", parents=[common], help="OT-map and SCE potential files of a finished run")
    plot.add_argument("run_dir", help="output directory of solve or cmg")
    plot.add_argument("--source", help="trial or level directory (trial_000 or the finest level by default)")
    plot.add_argument("--omega-lower", dest="omega_lower", type=float, nargs="+", help="lower corner of omega")
    plot.add_argument("--omega-upper", dest="omega_upper", type=float, nargs="+", help="upper corner of omega")

    bench = sub.add_parser("bench", parents=[common], help="KLALM vs S-KLALM timings over K")
    _add_system_flags(bench, with_K=False)
    _add_method_flags(bench)
    bench.add_argument("--Ks", type=int, nargs="+", help="mesh sizes")
    bench.add_argument("--iterations", dest="bench_iterations", type=int, help="iterations per timed run")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


_COMMANDS: dict[str, Callable[[ExperimentConfig], int]] = {
    "gen": cmd_gen,
    "solve": cmd_solve,
    "cmg": cmd_cmg,
    "oracle": cmd_oracle,
    "bench": cmd_bench,
}


def main(argv: Sequence[str] | None = None) -> int:
    """
    Purpose: entry point of the eralm command
    Output:
        -- 0 on success, 2 on invalid input, 3 on numerical or resource failure,
           4 on an infeasible sampled subproblem; argparse exits with 2 on usage errors
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        if args.command == "plotdata":
            return cmd_plotdata(Path(args.run_dir), args.source, args.omega_lower, args.omega_upper)
        values = apply_cli_overrides(load_config(args.config) if args.config else {}, args)
        if args.command in _NEEDS_K and values["K"] is None:
            parser.error(f"{args.command}: --K is required")
        exp = experiment_config(values, args.command)
        return _COMMANDS[args.command](exp)
    except InfeasibleSubproblemError as exc:
        logger.error("infeasible subproblem: %s", exc)
        return EXIT_INFEASIBLE
    except (NumericalError, ResourceLimitError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERICAL
    except DomainError as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
