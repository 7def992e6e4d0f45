"""CLI entry point for edge-offload-tool.

This CLI tool simulates multi-device edge-inference offloading: devices
degrade and upload images, the edge server allocates bandwidth and runs the
detector. Commands run the LAB controller and its baselines, sweep system
parameters, export figure data, solve single bandwidth instances and run the
numerical self-checks.
"""

import csv
import json
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any, NoReturn

import click
import numpy as np

from edge_offload_tool import __version__
from edge_offload_tool.bandwidth import AllocationProblem, oracle_allocation, solve_allocation
from edge_offload_tool.completion import completion_command
from edge_offload_tool.config import apply_override, config_to_dict, load_config, parse_value
from edge_offload_tool.core import (
    ConfigError,
    DomainError,
    FloatArray,
    NumericalError,
    SystemConfig,
    dbm_per_hz_to_w,
)
from edge_offload_tool.logging_config import get_logger, setup_logging
from edge_offload_tool.orchestrator import PolicyKind, RunResult, run_seeds
from edge_offload_tool.reporting import (
    FIGURES,
    MANIFEST_FILE,
    SUMMARY_FILE,
    ResultsError,
    RunManifest,
    build_summary,
    figure_rows,
    load_results,
    slots_file,
    summarize_point,
    write_figure,
    write_json,
    write_slots_csv,
)
from edge_offload_tool.selftest import SelftestScale, run_selftest

logger = get_logger(__name__)

POLICY_CHOICES = [str(p) for p in PolicyKind]
DEVICE_COLUMNS = ("d", "h", "p", "w")


def parse_seeds(text: str) -> tuple[int, ...]:
    """Parse "3", "0-9" (inclusive) or "1,4,7" into seeds.

    Example:
        >>> parse_seeds("0-2"), parse_seeds("5,1")
        ((0, 1, 2), (5, 1))
    """
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        first, sep, last = part.partition("-")
        try:
            if sep and first:
                lo, hi = int(first), int(last)
                if hi < lo:
                    raise ValueError(f"empty seed range {part!r}")
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError as e:
            raise ValueError(f"invalid seed list {text!r}: {e}") from e
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in {text!r}")
    return tuple(seeds)


def parse_assignment(text: str) -> tuple[str, Any]:
    """Split "section.key=value" and parse the value as a TOML literal."""
    key, sep, value = text.partition("=")
    if not sep or "." not in key:
        raise ValueError(f"expected section.key=value, got {text!r}")
    return key.strip(), parse_value(value.strip())


def parse_sweep(text: str) -> tuple[str, list[Any]]:
    """Split "section.key=v1,v2,..." into the key and its values.

    Example:
        >>> parse_sweep("system.latency_weight=0,0.5,1")
        ('system.latency_weight', [0, 0.5, 1])
    """
    key, sep, values = text.partition("=")
    if not sep or "." not in key or not values.strip():
        raise ValueError(f"expected section.key=v1,v2,..., got {text!r}")
    parsed = parse_value(f"[{values}]")
    if not isinstance(parsed, list):
        raise ValueError(f"cannot parse sweep values {values!r}")
    return key.strip(), parsed


def read_device_rows(path: Path) -> FloatArray:
    """Read d,h,p,w rows; blank lines, '#' comments and a header row are skipped.

    Raises:
        ValueError: Naming the line of the first malformed row
    """
    rows: list[list[float]] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for line, fields in enumerate(csv.reader(fh), start=1):
            if not fields or not "".join(fields).strip() or fields[0].lstrip().startswith("#"):
                continue
            cells = [f.strip() for f in fields]
            if not rows and tuple(c.lower() for c in cells) == DEVICE_COLUMNS:
                continue
            if len(cells) != len(DEVICE_COLUMNS):
                raise ValueError(f"line {line}: expected 4 values d,h,p,w, got {len(cells)}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as e:
                raise ValueError(f"line {line}: {e}") from e
    if not rows:
        raise ValueError("no device rows found")
    return np.array(rows)


def _fail(ctx: click.Context, error: str, fix: str) -> NoReturn:
    click.echo(f"Error: {error}", err=True)
    click.echo(f"Fix: {fix}", err=True)
    ctx.exit(1)


def _resolve_config(
    ctx: click.Context, config_path: Path | None, overrides: Sequence[str]
) -> SystemConfig:
    try:
        cfg = load_config(config_path)
        for item in overrides:
            key, value = parse_assignment(item)
            cfg = apply_override(cfg, key, value)
    except ConfigError as e:
        _fail(ctx, str(e), "Correct the configuration key and value")
    except ValueError as e:
        _fail(ctx, str(e), "Use --set section.key=value, e.g. --set system.n_devices=4")
    return cfg


def _resolve_seeds(ctx: click.Context, seed: int, seeds: str | None) -> tuple[int, ...]:
    if seeds is None:
        return (seed,)
    try:
        return parse_seeds(seeds)
    except ValueError as e:
        _fail(ctx, str(e), "Use --seeds 0-9 or --seeds 1,2,3")


def _prepare_output(ctx: click.Context, out: Path, manifest: RunManifest) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / MANIFEST_FILE, manifest.to_dict())
    except OSError as e:
        _fail(ctx, f"cannot write to {out}: {e.strerror}", "Pass a writable --out directory")
    logger.info("Manifest %s written to %s", manifest.hash, out)


def _run_point(
    cfg: SystemConfig,
    policies: Sequence[str],
    seeds: Sequence[int],
    jobs: int,
    checkpoint_dir: Path | None = None,
) -> list[RunResult]:
    results: list[RunResult] = []
    for policy in policies:
        save = checkpoint_dir if policy == PolicyKind.LAB else None
        results.extend(run_seeds(cfg, policy, seeds, jobs, save))
    return results


def _echo_point(results: Sequence[RunResult], label: str = "") -> None:
    for result in results:
        agg = result.aggregates
        click.echo(
            f"{label}{result.policy:<10} seed {result.seed:<4} U={agg.mean_utility:.4f}  "
            f"latency={agg.mean_latency:.4f}s  alpha={agg.mean_confidence:.4f}  "
            f"acc={agg.mean_accuracy:.4f}  K={agg.mean_candidates:.2f}"
        )


@click.group(invoke_without_command=True)
@click.option(
    "-v",
    "--verbose",
    count=True,
    help="Enable verbose output (use -v for INFO, -vv for DEBUG, -vvv for TRACE)",
)
@click.option("-q", "--quiet", is_flag=True, help="Suppress all output except errors")
@click.version_option(version=__version__)
@click.pass_context
def main(ctx: click.Context, verbose: int, quiet: bool) -> None:
    """Edge-inference offloading simulator with the LAB controller.

    Runs the learned-actor / Bayesian-critic controller and its baselines on
    a simulated multi-device edge system and exports per-slot results.

    Examples:

    \b
        # One LAB run with the default system
        edge-offload-tool run --out results/lab

    \b
        # Latency-weight sweep over all policies, ten seeds
        edge-offload-tool bench --seeds 0-9 --sweep system.latency_weight=0,0.5,1,2,3

    \b
        # Figure data from a sweep
        edge-offload-tool figures results/bench --figure tradeoff
    """
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    ctx.obj["quiet"] = quiet

    if quiet:
        setup_logging(-1)
    else:
        setup_logging(verbose)

    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


config_option = click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(path_type=Path, dir_okay=False),
    help="TOML configuration file",
)
seed_option = click.option("--seed", default=0, show_default=True, help="Master seed")
seeds_option = click.option("--seeds", help="Seed list or range, e.g. 0-9 or 1,2,3")
jobs_option = click.option(
    "--jobs", default=1, show_default=True, help="Worker processes across seeds"
)
timing_option = click.option(
    "--timing", is_flag=True, help="Record wall-clock decision times (not reproducible)"
)
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    help="Override a configuration value: section.key=value (can repeat)",
)


@main.command("run")
@config_option
@seed_option
@seeds_option
@click.option(
    "-p",
    "--policy",
    type=click.Choice(POLICY_CHOICES, case_sensitive=False),
    default="lab",
    show_default=True,
    help="Controller to run",
)
@click.option(
    "-o",
    "--out",
    type=click.Path(path_type=Path, file_okay=False),
    default=Path("results"),
    show_default=True,
    help="Output directory",
)
@jobs_option
@timing_option
@set_option
@click.option(
    "--save-actor",
    type=click.Path(path_type=Path, file_okay=False),
    help="Directory for trained actor checkpoints (LAB only)",
)
@click.pass_context
def run_cmd(
    ctx: click.Context,
    config_path: Path | None,
    seed: int,
    seeds: str | None,
    policy: str,
    out: Path,
    jobs: int,
    timing: bool,
    overrides: tuple[str, ...],
    save_actor: Path | None,
) -> None:
    """Run one policy for every seed and export per-slot records.

    Writes manifest.json before the runs start, then slots.csv and
    summary.json. Without --timing the outputs of a re-run are byte-identical.

    Examples:

    \b
        # LAB with the default system, seed 0
        edge-offload-tool run --out results/lab

    \b
        # Exhaustive IDEAL baseline over ten seeds on four workers
        edge-offload-tool run --policy ideal --seeds 0-9 --jobs 4 --out results/ideal

    \b
        # Heavier latency weight, shorter horizon
        edge-offload-tool run --set system.latency_weight=2 --set system.horizon=500

    \b
    Output Format (slots.csv):
        seed,t,policy,a_1..a_N,b_1..,alpha_1..,c_1..,tau_d_1..,tau_o_1..,tau_c_1..,
        u_1..,U,K_t,k_star,decision_ms,manifest
    """
    quiet = ctx.obj.get("quiet", False)
    cfg = _resolve_config(ctx, config_path, overrides)
    seed_list = _resolve_seeds(ctx, seed, seeds)
    policy = policy.lower()

    manifest = RunManifest(
        config=config_to_dict(cfg),
        seeds=seed_list,
        policies=(policy,),
        outputs=(MANIFEST_FILE, slots_file(None), SUMMARY_FILE),
    )
    _prepare_output(ctx, out, manifest)
    if save_actor is not None:
        try:
            save_actor.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            _fail(ctx, f"cannot create {save_actor}: {e.strerror}", "Pass a writable directory")

    try:
        results = _run_point(cfg, [policy], seed_list, jobs, save_actor)
    except ConfigError as e:
        _fail(ctx, str(e), "Reduce n_devices or n_levels, or raise the cap")
    except (DomainError, NumericalError) as e:
        _fail(ctx, str(e), "Check the configuration; rerun with -vv for details")

    write_slots_csv(out / slots_file(None), results, manifest.hash, timing)
    summary = build_summary(manifest, [summarize_point(results, timing)])
    write_json(out / SUMMARY_FILE, summary)

    if not quiet:
        _echo_point(results)
        click.echo(f"Results in {out} (manifest {manifest.hash})")


@main.command("bench")
@config_option
@seed_option
@seeds_option
@click.option(
    "-p",
    "--policy",
    "policies",
    type=click.Choice(POLICY_CHOICES, case_sensitive=False),
    multiple=True,
    help="Controller to include (can repeat; default: all)",
)
@click.option("-s", "--sweep", help="Sweep one key over values: section.key=v1,v2,...")
@click.option(
    "-o",
    "--out",
    type=click.Path(path_type=Path, file_okay=False),
    default=Path("bench"),
    show_default=True,
    help="Output directory",
)
@jobs_option
@timing_option
@set_option
@click.pass_context
def bench_cmd(
    ctx: click.Context,
    config_path: Path | None,
    seed: int,
    seeds: str | None,
    policies: tuple[str, ...],
    sweep: str | None,
    out: Path,
    jobs: int,
    timing: bool,
    overrides: tuple[str, ...],
) -> None:
    """Run several policies on paired seeds, optionally over a parameter sweep.

    Every policy sees the same channel and content realizations for a given
    seed. One CSV is written per sweep point (slots-pNN.csv).

    Examples:

    \b
        # All policies, ten seeds
        edge-offload-tool bench --seeds 0-9 --out results/bench

    \b
        # Trade-off sweep over the latency weight
        edge-offload-tool bench --seeds 0-9 --sweep system.latency_weight=0,0.5,1,2,3

    \b
        # Candidate scaling: LAB against FullBO for growing N
        edge-offload-tool bench -p lab -p full_bo --timing --sweep system.n_devices=1,2,3,4,5
    """
    quiet = ctx.obj.get("quiet", False)
    cfg = _resolve_config(ctx, config_path, overrides)
    seed_list = _resolve_seeds(ctx, seed, seeds)
    chosen = tuple(dict.fromkeys(p.lower() for p in policies)) or tuple(POLICY_CHOICES)

    sweep_key: str | None = None
    sweep_values: list[Any] = []
    point_configs = [cfg]
    if sweep:
        try:
            sweep_key, sweep_values = parse_sweep(sweep)
            point_configs = [apply_override(cfg, sweep_key, v) for v in sweep_values]
        except ConfigError as e:
            _fail(ctx, str(e), "Sweep an existing key with valid values")
        except ValueError as e:
            _fail(ctx, str(e), "Use --sweep section.key=v1,v2, e.g. system.latency_weight=0,1")

    csv_names = [slots_file(i if sweep_key else None) for i in range(len(point_configs))]
    manifest = RunManifest(
        config=config_to_dict(cfg),
        seeds=seed_list,
        policies=chosen,
        sweep_key=sweep_key,
        sweep_values=tuple(sweep_values),
        outputs=(MANIFEST_FILE, *csv_names, SUMMARY_FILE),
    )
    _prepare_output(ctx, out, manifest)

    points: list[dict[str, Any]] = []
    for index, (point_cfg, name) in enumerate(zip(point_configs, csv_names, strict=True)):
        label = f"[{sweep_key}={sweep_values[index]}] " if sweep_key else ""
        try:
            results = _run_point(point_cfg, chosen, seed_list, jobs)
        except ConfigError as e:
            _fail(ctx, f"{label}{e}", "Drop ideal/full_bo or raise the cap")
        except (DomainError, NumericalError) as e:
            _fail(ctx, f"{label}{e}", "Check the configuration; rerun with -vv for details")
        write_slots_csv(out / name, results, manifest.hash, timing)
        points.append(summarize_point(results, timing))
        if not quiet:
            _echo_point(results, label)

    write_json(out / SUMMARY_FILE, build_summary(manifest, points))
    if not quiet:
        click.echo(f"Results in {out} (manifest {manifest.hash})")


@main.command("figures")
@click.argument("results_dir", type=click.Path(path_type=Path, file_okay=False))
@click.option(
    "-f",
    "--figure",
    "figures",
    type=click.Choice(FIGURES, case_sensitive=False),
    multiple=True,
    help="Figure to export (can repeat; default: all)",
)
@click.option(
    "-o",
    "--out",
    type=click.Path(path_type=Path, file_okay=False),
    help="Output directory (default: RESULTS_DIR)",
)
@click.pass_context
def figures_cmd(
    ctx: click.Context, results_dir: Path, figures: tuple[str, ...], out: Path | None
) -> None:
    """Export tidy figure data (figure, x, series, y, stderr) from results.

    Nothing is written unless every requested figure can be built.

    Examples:

    \b
        # Trade-off curves from a latency-weight sweep
        edge-offload-tool figures results/tradeoff --figure tradeoff

    \b
        # Optimality gap of LAB against IDEAL
        edge-offload-tool figures results/bench --figure optgap --out figs
    """
    quiet = ctx.obj.get("quiet", False)
    chosen = tuple(dict.fromkeys(f.lower() for f in figures)) or FIGURES
    try:
        bundle = load_results(results_dir)
        tables = {name: figure_rows(bundle, name) for name in chosen}
    except ResultsError as e:
        _fail(ctx, str(e), "Run the missing policies/sweeps with `bench`, or pick --figure")

    target = out or results_dir
    try:
        target.mkdir(parents=True, exist_ok=True)
        for name, rows in tables.items():
            path = target / f"fig-{name}.csv"
            write_figure(path, rows)
            if not quiet:
                click.echo(f"{name}: {len(rows)} rows -> {path}")
    except OSError as e:
        _fail(ctx, f"cannot write to {target}: {e.strerror}", "Pass a writable --out directory")


@main.command("bandwidth")
@click.argument("devices_csv", type=click.Path(path_type=Path, dir_okay=False))
@click.option(
    "--bandwidth-hz", default=5e6, show_default=True, help="System bandwidth W in Hz"
)
@click.option(
    "--noise-dbm",
    default=-174.0,
    show_default=True,
    help="Noise power spectral density in dBm/Hz",
)
@click.option("-j", "--json-output", is_flag=True, help="Output results as JSON")
@click.pass_context
def bandwidth_cmd(
    ctx: click.Context,
    devices_csv: Path,
    bandwidth_hz: float,
    noise_dbm: float,
    json_output: bool,
) -> None:
    """Solve one bandwidth-allocation instance and cross-check it.

    DEVICES_CSV holds one row per device: data bits d, channel gain h,
    transmit power p (W) and latency weight w. An optional header row
    d,h,p,w is skipped.

    Examples:

    \b
        # Solve and print shares, offload times and duals
        edge-offload-tool bandwidth devices.csv

    \b
        # Narrower band, JSON output
        edge-offload-tool bandwidth devices.csv --bandwidth-hz 1e6 --json-output

    \b
    Output Format (JSON):
        {"fractions": [...], "offload_times": [...], "eta": 1.2, "phi": [...],
         "objective": 0.3, "solve_ms": 0.2, "oracle_objective_gap": 1e-12,
         "oracle_max_fraction_delta": 1e-10}
    """
    try:
        rows = read_device_rows(devices_csv)
        problem = AllocationProblem(
            data_bits=rows[:, 0],
            gains=rows[:, 1],
            powers=rows[:, 2],
            weights=rows[:, 3],
            bandwidth_hz=bandwidth_hz,
            noise_psd=dbm_per_hz_to_w(noise_dbm),
        )
    except OSError as e:
        _fail(ctx, f"cannot read {devices_csv}: {e.strerror}", "Pass an existing CSV file")
    except DomainError as e:
        _fail(ctx, str(e), "Gains and powers must be > 0, data sizes >= 0")
    except ValueError as e:
        _fail(ctx, f"{devices_csv}: {e}", "Each row needs four numbers: d,h,p,w")

    start = time.perf_counter()
    try:
        allocation = solve_allocation(problem)
    except NumericalError as e:
        _fail(ctx, str(e), "Check that the instance is well scaled")
    solve_ms = (time.perf_counter() - start) * 1e3
    reference = oracle_allocation(problem)
    scale = max(abs(reference.objective), 1e-300)
    gap = abs(allocation.objective - reference.objective) / scale
    delta = float(np.max(np.abs(allocation.fractions - reference.fractions)))

    if json_output:
        output = {
            "fractions": allocation.fractions.tolist(),
            "offload_times": allocation.offload_times.tolist(),
            "eta": allocation.eta,
            "phi": allocation.phi.tolist(),
            "objective": allocation.objective,
            "solve_ms": solve_ms,
            "oracle_objective_gap": gap,
            "oracle_max_fraction_delta": delta,
        }
        click.echo(json.dumps(output, indent=2))
        return

    click.echo(f"{'device':>6}  {'b':>14}  {'tau_o [s]':>14}  {'phi':>14}")
    for n in range(problem.n_devices):
        click.echo(
            f"{n + 1:>6}  {allocation.fractions[n]:>14.10f}  "
            f"{allocation.offload_times[n]:>14.8g}  {allocation.phi[n]:>14.8g}"
        )
    click.echo(f"eta:        {allocation.eta:.10g}")
    click.echo(f"objective:  {allocation.objective:.10g}")
    click.echo(f"solve time: {solve_ms:.3f} ms")
    click.echo(f"oracle:     objective gap {gap:.2e}, max |db| {delta:.2e}")


@main.command("selftest")
@click.option("--quick", is_flag=True, help="Smaller instance counts for a fast check")
@click.option("--seed", default=0, show_default=True, help="Seed of the random instances")
@click.pass_context
def selftest_cmd(ctx: click.Context, quick: bool, seed: int) -> None:
    """Run the numerical verification suites and print PASS/FAIL per check.

    Suites: bandwidth solver against the bisection oracle, Lambert-W
    residuals, GP posterior and likelihood against dense algebra, Gram
    positivity, likelihood and BCE gradients against finite differences.
    Exits with status 1 if any check fails.

    Examples:

    \b
        # Full scale (1000 bandwidth instances, 10^6 Lambert-W points)
        edge-offload-tool selftest

    \b
        # Quick smoke check
        edge-offload-tool selftest --quick
    """
    scale = SelftestScale.quick() if quick else SelftestScale()
    checks = run_selftest(scale, seed)
    for check in checks:
        click.echo(check.describe())
    failed = [c for c in checks if not c.passed]
    if failed:
        click.echo(f"{len(failed)} of {len(checks)} checks failed", err=True)
        ctx.exit(1)
    click.echo(f"All {len(checks)} checks passed")


main.add_command(completion_command)


if __name__ == "__main__":
    main()
