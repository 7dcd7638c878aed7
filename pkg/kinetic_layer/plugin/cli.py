"""
CLI plugin interface for the kinetic layer solver
"""

import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np
from dotenv import load_dotenv

from .. import __version__
from ..config import RunConfig, get_default_config_path, load_config
from ..core.cache import OperatorCache
from ..core.linear_solver import LinearSolution, TruncatedSolver, extract_macro
from ..core.nonlinear_solver import NonlinearProblem, PicardSolver
from ..core.operator import OperatorAssembler, OperatorSet
from ..core.problems import build_problem
from ..core.velocity_grid import VelocityGrid, build_grid
from ..diagnostics.identities import (
    DERIVED,
    IdentityReport,
    conservation_suite,
    moment_identity_suite,
    operator_suite,
    stored_field_suite,
)
from ..diagnostics.norms import weighted_norms
from ..diagnostics.sequence import history_summary
from ..io.artifacts import (
    PROFILE_COLUMNS,
    RunArtifacts,
    read_profiles,
    read_report,
    read_snapshot,
    write_profiles,
    write_report,
    write_snapshot,
)
from ..utils.exceptions import (
    ArtifactError,
    CauchyError,
    CompatibilityError,
    ConfigurationError,
    ContractionError,
    KineticLayerError,
    ValidationError,
)
from ..utils.logger import get_logger, run_context, setup_logging

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

PROFILES_NAME = "profiles.csv"
SNAPSHOT_NAME = "field.klf"
REPORT_NAME = "report.json"
VERIFY_NAME = "verify.json"

logger = get_logger(__name__)


@click.group()
@click.option(
    "--config",
    "-c",
    type=click.Path(path_type=Path),
    help="Path to YAML run configuration (default: ./klayer.yaml when present)",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    help="Output directory for profiles, snapshot and report (env: KLAYER_OUT_DIR)",
)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    help="Worker threads for operator assembly and collision batches (env: KLAYER_THREADS)",
)
@click.option(
    "--cache",
    type=click.Path(file_okay=False, path_type=Path),
    help="Operator cache directory (env: KLAYER_CACHE_DIR)",
)
@click.option(
    "--log-level",
    default=None,
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]),
    help="Logging verbosity level (default: from config, WARNING for clean output)",
)
@click.version_option(version=__version__, prog_name="klayer")
@click.pass_context
def main(
    ctx: click.Context,
    config: Optional[Path],
    out: Optional[Path],
    threads: Optional[int],
    cache: Optional[Path],
    log_level: Optional[str],
) -> None:
    """
    🌊 Kinetic Layer Solver

    Steady Boltzmann boundary layer of a hard-sphere gas on a half-space
    with specular reflection.

    \b
    SUBCOMMANDS:
      • operator  - assemble and cache the collision operator, run the identity suite
      • linear    - decaying solution of the linearized layer problem
      • nonlinear - Picard iteration for the full problem
      • verify    - re-check stored artifacts

    \b
    QUICK START:
      klayer --config klayer.yaml operator
      klayer --config klayer.yaml --out runs/a linear
      klayer --config klayer.yaml --out runs/a verify
    """

    load_dotenv()

    if config is None:
        default = get_default_config_path()
        config = default if default.exists() else None

    try:
        cfg = load_config(config)
    except ConfigurationError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(EXIT_CONFIG)

    # flags > environment > file
    if out is not None:
        cfg.outputs.directory = str(out)
    if cache is not None:
        cfg.outputs.cache_dir = str(cache)
    if threads is not None:
        cfg.performance.threads = threads

    setup_logging(
        log_level or cfg.logging.level,
        format_string=cfg.logging.format,
        log_file=cfg.logging.file,
        max_size_mb=cfg.logging.max_size_mb,
        backup_count=cfg.logging.backup_count,
        verbose=cfg.performance.verbose_logging or log_level is not None,
    )
    ctx.with_resource(run_context(f"{ctx.invoked_subcommand or 'klayer'}:{Path(cfg.outputs.directory).name}"))

    ctx.ensure_object(dict)
    ctx.obj["config"] = cfg
    ctx.obj["config_path"] = config


# -- shared steps -------------------------------------------------------------


def _prepare_operator(cfg: RunConfig) -> Tuple[VelocityGrid, OperatorSet, Optional[Path]]:
    """Build the grid and fetch the operator from the cache, assembling on a miss."""

    grid = build_grid(cfg.grid)
    threads = cfg.performance.threads
    angular = tuple(cfg.solver.angular_rule)

    operator_cache = OperatorCache(Path(cfg.outputs.cache_dir)) if cfg.performance.enable_caching else None
    operator = None
    if operator_cache is not None:
        try:
            operator = operator_cache.get(grid, cfg.weight, threads=threads)
        except ArtifactError as e:
            logger.warning(f"Ignoring cached operator: {e}")

    if operator is None:
        assembler = OperatorAssembler(threads=threads, batch_size=cfg.performance.batch_size, angular=angular)
        operator = assembler.assemble(grid, cfg.weight)
        if operator_cache is not None:
            operator_cache.set(operator)
    else:
        operator.angular = angular

    cache_path = operator_cache.path_for(grid, cfg.weight) if operator_cache is not None else None
    return grid, operator, cache_path


def _base_report(command: str, cfg: RunConfig, operator: OperatorSet, identities: List[IdentityReport]) -> Dict[str, Any]:
    grid = operator.grid
    return {
        "command": command,
        "version": __version__,
        "config": cfg.model_dump(mode="json"),
        "grid": {
            "digest": grid.digest,
            "size": grid.size,
            "rule": grid.spec.rule,
            "max_radius": grid.max_radius,
        },
        "operator": {
            **operator.header(),
            "cbar0": operator.cbar0,
            "null_eigenvalues": operator.null_eigenvalues,
        },
        "identities": [r.to_dict() for r in identities],
    }


def _sequence_section(solution: LinearSolution, extra: Optional[List[List[float]]] = None) -> List[Dict[str, Any]]:
    histories = [step["differences"] for step in solution.report.sections.get("lambda", {}).get("steps", [])]
    return history_summary(histories + list(extra or []))


def _emit_solution(
    command: str,
    cfg: RunConfig,
    operator: OperatorSet,
    solution: LinearSolution,
    identities: List[IdentityReport],
    cache_path: Optional[Path],
    extra: Optional[Dict[str, Any]] = None,
    histories: Optional[List[List[float]]] = None,
) -> bool:
    """Run the conservation checks, write every artifact and return the verdict."""

    sigma = cfg.solver.decay_sigma
    conservation = conservation_suite(solution, operator, tol=cfg.solver.cauchy_tol, sigma=sigma)
    norms = weighted_norms(operator, solution.field, sigma=sigma)

    directory = Path(cfg.outputs.directory)
    artifacts = RunArtifacts(directory=directory, operator_cache=cache_path)
    if cfg.outputs.write_profiles:
        artifacts.profiles = write_profiles(directory / PROFILES_NAME, solution.macro, norms)
    if cfg.outputs.write_snapshot:
        artifacts.snapshot = write_snapshot(directory / SNAPSHOT_NAME, operator.grid.digest, solution.field)
    if cfg.outputs.write_report:
        artifacts.report = directory / REPORT_NAME

    passed = all(r.passed for r in identities) and all(r.passed for r in conservation)
    report = _base_report(command, cfg, operator, identities)
    report["conservation"] = [r.to_dict() for r in conservation]
    report["solve"] = {
        **solution.report.to_dict(),
        "phi": solution.phi,
        "sigma_fit": solution.sigma_fit.to_dict(),
        "norms": {"sup": norms.sup_norm, "l2": norms.l2_norm, "sigma": sigma},
        "sequences": _sequence_section(solution, histories),
        **(extra or {}),
    }
    report["artifacts"] = artifacts.to_dict()
    report["passed"] = passed
    if artifacts.report is not None:
        write_report(artifacts.report, report)

    _print_checks(conservation)
    for message in solution.report.flags:
        click.echo(f"⚠️  {message}")
    return passed


def _print_checks(reports: List[IdentityReport]) -> None:
    for r in reports:
        mark = "✅" if r.passed else "❌"
        click.echo(f"  {mark} [{r.provenance}] {r.name}: {r.computed:.6g} (target {r.target:g}, tol {r.tolerance:.1e})")


def _fail(error: KineticLayerError) -> None:
    """Report a solver failure with its history and exit 1."""

    click.echo(f"❌ {error}", err=True)
    if isinstance(error, CompatibilityError):
        for name, value in zip(("v3 sqrt(mu)", "v3 (v1-u1) sqrt(mu)", "v3 (v2-u2) sqrt(mu)", "v3 |v-u|^2 sqrt(mu)"), error.moments):
            click.echo(f"   {name}: {value:.6e}", err=True)
    elif isinstance(error, ContractionError) and error.ratios:
        click.echo(f"   ratios: {', '.join(f'{r:.4f}' for r in error.ratios)}", err=True)
    elif isinstance(error, CauchyError):
        for name, values in error.history.items():
            click.echo(f"   {name}: {values}", err=True)
    sys.exit(EXIT_FAILED)


def _build_problem(operator: OperatorSet, cfg: RunConfig):
    try:
        return build_problem(operator, cfg)
    except ValidationError as e:
        click.echo(f"❌ Invalid problem data: {e}", err=True)
        sys.exit(EXIT_CONFIG)


# -- subcommands ----------------------------------------------------------------


@main.command()
@click.pass_context
def operator(ctx: click.Context) -> None:
    """
    🧮 Assemble the collision operator and run the identity suite

    Builds the velocity grid, fetches the operator from the cache (or
    assembles and caches it) and checks the Gaussian moment identities and
    the structure of L. Exit 0 iff every check passes.

    \b
    # 🚀 Reference grid
    klayer --config klayer.yaml operator
    """

    cfg: RunConfig = ctx.obj["config"]
    try:
        grid, op, cache_path = _prepare_operator(cfg)
    except KineticLayerError as e:
        _fail(e)

    identities = moment_identity_suite(grid) + operator_suite(op)
    passed = all(r.passed for r in identities)

    click.echo(f"🧮 Operator on {grid.size} nodes ({grid.spec.rule} rule), digest {grid.digest[:12]}")
    click.echo(f"   c0 = {op.c0:.6g}  kappa1 = {op.kappa1:.6g}  kappa2 = {op.kappa2:.6g}  nu0 = {op.nu0:.4g}  nu1 = {op.nu1:.4g}")
    _print_checks(identities)

    if cfg.outputs.write_report:
        directory = Path(cfg.outputs.directory)
        artifacts = RunArtifacts(directory=directory, report=directory / REPORT_NAME, operator_cache=cache_path)
        report = _base_report("operator", cfg, op, identities)
        report["artifacts"] = artifacts.to_dict()
        report["passed"] = passed
        write_report(artifacts.report, report)

    if cache_path is not None:
        click.echo(f"💾 Operator cache: {cache_path}")
    sys.exit(EXIT_OK if passed else EXIT_FAILED)


@main.command()
@click.pass_context
def linear(ctx: click.Context) -> None:
    """
    📈 Solve the linearized boundary-layer problem

    Lifts the boundary data, takes the damping and penalty limits, fixes the
    far-end conditions and doubles the slab along the configured schedule.
    Writes profiles.csv, field.klf and report.json.

    \b
    # 🎯 Compatible data, default schedules
    klayer --config klayer.yaml --out runs/linear linear
    """

    cfg: RunConfig = ctx.obj["config"]
    show_progress = cfg.performance.show_progress
    try:
        grid, op, cache_path = _prepare_operator(cfg)
        problem = _build_problem(op, cfg)
        solution = TruncatedSolver(op, cfg.solver, show_progress=show_progress).extend_domain(problem)
        identities = moment_identity_suite(grid)
        passed = _emit_solution("linear", cfg, op, solution, identities, cache_path)
    except KineticLayerError as e:
        _fail(e)

    click.echo(f"📈 Linear solution on d = {solution.field.d:g}, fitted decay {solution.sigma_fit.sigma}")
    sys.exit(EXIT_OK if passed else EXIT_FAILED)


@main.command()
@click.pass_context
def nonlinear(ctx: click.Context) -> None:
    """
    🔁 Solve the nonlinear problem by Picard iteration

    Each iterate is a linear solve with source Gamma(f, f) + S on the largest
    slab of the schedule. Incompatible boundary data is rejected with its
    flux moments.

    \b
    # 🔁 Small data
    klayer --config klayer.yaml --out runs/nonlinear nonlinear
    """

    cfg: RunConfig = ctx.obj["config"]
    show_progress = cfg.performance.show_progress
    try:
        grid, op, cache_path = _prepare_operator(cfg)
        problem = NonlinearProblem.from_linear(_build_problem(op, cfg))
        result = PicardSolver(op, cfg.solver, show_progress=show_progress).solve(problem)
        identities = moment_identity_suite(grid)
        passed = _emit_solution(
            "nonlinear",
            cfg,
            op,
            result.solution,
            identities,
            cache_path,
            histories=[result.differences],
        )
    except KineticLayerError as e:
        _fail(e)

    click.echo(
        f"🔁 Picard: {result.iterations} iterates, delta = {result.smallness.delta:.3e}, "
        f"residual {result.residual:.3e}, boundary defect {result.boundary_defect:.3e}"
    )
    sys.exit(EXIT_OK if passed else EXIT_FAILED)


def _verify_checks(cfg: RunConfig, directory: Path) -> Tuple[OperatorSet, List[IdentityReport], List[IdentityReport]]:
    document = read_report(directory / REPORT_NAME)
    frame = read_profiles(directory / PROFILES_NAME)
    digest, field_ = read_snapshot(directory / SNAPSHOT_NAME)

    grid, op, _ = _prepare_operator(cfg)
    identities = moment_identity_suite(grid)

    tol = cfg.solver.cauchy_tol
    checks = [
        IdentityReport("artifacts: report digest matches grid", float(document["grid"]["digest"] == grid.digest), 1.0, DERIVED, 0.0),
        IdentityReport("artifacts: snapshot digest matches grid", float(digest == grid.digest), 1.0, DERIVED, 0.0),
        IdentityReport("artifacts: snapshot velocity count", float(field_.values.shape[1]), float(grid.size), DERIVED, 0.0),
    ]
    if digest != grid.digest or field_.values.shape[1] != grid.size:
        return op, identities, checks

    macro = extract_macro(op, field_).as_columns()
    x_match = frame["x"].size == field_.x.size and np.array_equal(frame["x"].to_numpy(), field_.x)
    checks.append(IdentityReport("artifacts: profile nodes match snapshot", float(x_match), 1.0, DERIVED, 0.0))
    if x_match:
        gap = max(float(np.max(np.abs(frame[name].to_numpy() - macro[name]))) for name in PROFILE_COLUMNS[1:6])
        checks.append(IdentityReport("artifacts: profiles match snapshot moments", gap, 0.0, DERIVED, 1e-12))

    boundary = _build_problem(op, cfg).boundary
    checks.extend(stored_field_suite(op, field_.values, boundary, tol=tol))
    return op, identities, checks


@main.command()
@click.pass_context
def verify(ctx: click.Context) -> None:
    """
    🔎 Re-check stored artifacts

    Reads profiles.csv, field.klf and report.json from the output directory,
    checks them against the configured grid, recomputes the identity suite
    and the conservation checks of the stored field. Exit 0 iff all pass.

    \b
    # 🔎 After a linear run
    klayer --config klayer.yaml --out runs/linear verify
    """

    cfg: RunConfig = ctx.obj["config"]
    directory = Path(cfg.outputs.directory)
    try:
        op, identities, checks = _verify_checks(cfg, directory)
    except KineticLayerError as e:
        _fail(e)

    passed = all(r.passed for r in identities) and all(r.passed for r in checks)
    click.echo(f"🔎 Verifying artifacts in {directory}")
    _print_checks(identities + checks)

    if cfg.outputs.write_report:
        report = _base_report("verify", cfg, op, identities)
        report["conservation"] = [r.to_dict() for r in checks]
        report["artifacts"] = {"directory": str(directory)}
        report["passed"] = passed
        write_report(directory / VERIFY_NAME, report)

    sys.exit(EXIT_OK if passed else EXIT_FAILED)


if __name__ == "__main__":
    main()
