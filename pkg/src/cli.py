"""Command-line entry point: one command per experiment, artifacts under ``output_dir``."""

import csv
import json
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated

import numpy as np
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .blocks import BlockKind
from .config import EvalConfig, LandscapeConfig, OdeConfig, RunConfigFile, Settings, StabilityConfig, SweepConfig, load_settings
from .data import Dataset, load_splits
from .ensemble import ensemble_eval
from .errors import ArtifactError, ConfigError, DomainError, DonetError, IncompatibleModelsError, TrainingFailed
from .evaluate import CLEAN, NOISE_MEAN, MetricSummary, evaluate, single_run_table, write_metrics_table
from .landscape import landscape_scan
from .network import Network, coefficient_report, load_parameters, save_parameters
from .ode import RhoKind, ode_check
from .perturb import AttackKind, noise
from .seeding import named_seed
from .stability import DYNAMICS, analyze, parse_matrix_spec, spectrum_report
from .sweep import compare_variants, init_sweep, interval_label, paired_comparison, run_once
from .train import RunRecord

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, no_args_is_help=True, help="Damped-ODE interpolation lab.")
console = Console()

PARAMS_FILE = "params.bin"
RECORD_FILE = "run.json"

ConfigOption = Annotated[Path | None, typer.Option("--config", help="Run configuration JSON.")]
SeedOption = Annotated[int | None, typer.Option("--seed-override", min=0, help="Replace the config seed.")]
OutputOption = Annotated[Path | None, typer.Option("--output", help="Replace the config output_dir.")]
QuietOption = Annotated[bool, typer.Option("--quiet", help="Only log warnings and errors.")]
RunOption = Annotated[Path | None, typer.Option("--run", help="run.json of a trained run (default: output_dir/seed<N>/run.json).")]
LambdaOption = Annotated[float | None, typer.Option("--lambda", min=0.0, help="Damping coefficient λ.")]
RhoOption = Annotated[RhoKind | None, typer.Option("--rho", help="Forcing scale ρ.")]


def setup_logging(quiet: bool, settings: Settings | None) -> None:
    level = "WARNING" if quiet else (settings.log_level if settings and settings.log_level else "INFO")
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@contextmanager
def guarded() -> Iterator[None]:
    """Map library errors onto the stable exit codes."""
    try:
        yield
    except DonetError as e:
        logger.error("%s", e)
        raise typer.Exit(int(e.exit_code)) from e


def _context(config: Path | None, seed: int | None, output: Path | None, quiet: bool) -> tuple[RunConfigFile, Settings]:
    settings = None
    try:
        settings = load_settings()
    finally:
        setup_logging(quiet, settings)
    cfg = RunConfigFile.load(config) if config else RunConfigFile(seed=0, output_dir=Path("runs"))
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if output is not None:
        cfg = cfg.model_copy(update={"output_dir": output})
    return cfg, settings


def _load_run(path: Path) -> tuple[RunRecord, Network]:
    record = RunRecord.load(path)
    if record.parameters is None:
        raise ArtifactError(f"{path}: run has no parameter file")
    return record, load_parameters(path.parent / record.parameters)


def _run_path(cfg: RunConfigFile, run: Path | None) -> Path:
    return run if run is not None else cfg.run_dir / RECORD_FILE


def _test_split(record: RunRecord) -> Dataset:
    return load_splits(record.train.dataset, record.train.test_fraction)[1]


def _print_metrics(title: str, rows: list[MetricSummary]) -> None:
    table = Table(title=title)
    for column in ("metric", "mean", "sd", "runs", "failed"):
        table.add_column(column, justify="left" if column == "metric" else "right")
    for row in rows:
        mean = "-" if row.mean is None else f"{row.mean:.2f}"
        sd = "-" if row.sd is None else f"{row.sd:.2f}"
        table.add_row(row.metric, mean, sd, str(row.n_runs), str(row.n_failed))
    console.print(table)


def _write_loss_curve(path: Path, record: RunRecord) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy", "lr"])
        for epoch, values in enumerate(zip(record.loss_curve, record.accuracy_curve, record.lr_curve, strict=True)):
            writer.writerow([epoch, *(repr(v) for v in values)])
    logger.info("wrote %s", path)


@app.command()
def train(config: ConfigOption = None, seed_override: SeedOption = None, output: OutputOption = None, quiet: QuietOption = False):
    """Train one run, evaluate it on the test split and write its artifacts."""
    with guarded():
        cfg, settings = _context(config, seed_override, output, quiet)
        model_cfg, train_cfg = cfg.require("model"), cfg.require("train")
        eval_cfg = cfg.eval or EvalConfig(noise=[], attacks=[])
        splits = load_splits(train_cfg.dataset, train_cfg.test_fraction)

        outcome = run_once(model_cfg, train_cfg, eval_cfg, cfg.seed, splits=splits, threads=settings.threads)
        run_dir = cfg.run_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        network, record = outcome.run.network, outcome.record

        save_parameters(network, run_dir / PARAMS_FILE)
        record.parameters = PARAMS_FILE
        _write_loss_curve(run_dir / "loss_curve.csv", record)
        probe = splits[1].inputs[: eval_cfg.chunk_size] if model_cfg.kind.gated else None
        coefficient_report(network, probe).write_csv(run_dir / "coefficients.csv")
        if outcome.evaluation is not None:
            write_metrics_table(run_dir / "metrics.csv", single_run_table(record.metrics))
            outcome.evaluation.write_predictions_csv(run_dir / "predictions.csv")
            _print_metrics(f"seed {cfg.seed}", single_run_table(record.metrics))
        record.save(run_dir / RECORD_FILE)

        if record.failed:
            raise TrainingFailed(f"run seed={cfg.seed} FAILED: {record.failure_reason}")


def _evaluate_run(cfg: RunConfigFile, settings: Settings, run: Path | None, eval_cfg: EvalConfig, name: str) -> None:
    path = _run_path(cfg, run)
    record, network = _load_run(path)
    data = _test_split(record).head(eval_cfg.max_samples)
    evaluation = evaluate(
        network,
        data,
        eval_cfg.noise_configs(record.seed),
        eval_cfg.attack_configs(record.seed),
        chunk_size=eval_cfg.chunk_size,
        threads=settings.threads,
    )
    rows = single_run_table(evaluation.metrics)
    write_metrics_table(path.parent / f"{name}_metrics.csv", rows)
    evaluation.write_predictions_csv(path.parent / f"{name}_predictions.csv")
    _print_metrics(name, rows)


@app.command("eval")
def eval_command(
    config: ConfigOption = None,
    seed_override: SeedOption = None,
    output: OutputOption = None,
    quiet: QuietOption = False,
    run: RunOption = None,
):
    """Clean, noise and attack accuracy of a trained run."""
    with guarded():
        cfg, settings = _context(config, seed_override, output, quiet)
        _evaluate_run(cfg, settings, run, cfg.eval or EvalConfig(), "eval")


@app.command()
def attack(
    config: ConfigOption = None,
    seed_override: SeedOption = None,
    output: OutputOption = None,
    quiet: QuietOption = False,
    run: RunOption = None,
    kind: Annotated[list[AttackKind] | None, typer.Option("--kind", help="Restrict to these attacks.")] = None,
):
    """Adversarial accuracy only, per attack and radius."""
    with guarded():
        cfg, settings = _context(config, seed_override, output, quiet)
        base = cfg.eval or EvalConfig()
        sweeps = [s for s in base.attacks if not kind or s.kind in kind]
        _evaluate_run(cfg, settings, run, base.model_copy(update={"noise": [], "attacks": sweeps}), "attack")


@app.command()
def landscape(
    config: ConfigOption = None,
    seed_override: SeedOption = None,
    output: OutputOption = None,
    quiet: QuietOption = False,
    run: RunOption = None,
):
    """Loss and prediction grid around one test sample."""
    with guarded():
        cfg, settings = _context(config, seed_override, output, quiet)
        scan: LandscapeConfig = cfg.landscape or LandscapeConfig()
        path = _run_path(cfg, run)
        record, network = _load_run(path)
        data = _test_split(record)
        if scan.sample_index >= len(data):
            raise DomainError(f"sample_index {scan.sample_index} outside the test split of {len(data)} samples")
        x, y = data.inputs[scan.sample_index], int(data.labels[scan.sample_index])
        out_dir = path.parent / "landscape"
        if scan.noise is not None:
            noise_cfg = scan.noise
            if noise_cfg.seed is None:
                noise_cfg = noise_cfg.model_copy(update={"seed": named_seed(record.seed, noise_cfg.label)})
            x = noise(x[None], noise_cfg, indices=data.indices[[scan.sample_index]])[0]
            out_dir = path.parent / f"landscape_{noise_cfg.kind.value}"
        grid = landscape_scan(network, x, y, scan.G, scan.step, named_seed(record.seed, "landscape"), threads=settings.threads)
        grid.write(out_dir)


@app.command()
def stability(
    config: ConfigOption = None,
    seed_override: SeedOption = None,
    output: OutputOption = None,
    quiet: QuietOption = False,
    matrix: Annotated[str | None, typer.Option("--matrix", help="companion:<poly>, diag:a,b,... or file:<json>.")] = None,
    lam: LambdaOption = None,
    rho: RhoOption = None,
):
    """Equilibrium, Jacobian and raw/damped spectra of a dynamics, or the spectra of a given matrix."""
    with guarded():
        cfg, _ = _context(config, seed_override, output, quiet)
        section: StabilityConfig = cfg.stability or StabilityConfig()
        lam = section.lam if lam is None else lam
        rho = rho or section.rho
        if matrix is not None:
            report = spectrum_report(parse_matrix_spec(matrix), lam, rho)
        else:
            if section.dynamics not in DYNAMICS:
                raise ConfigError(f"unknown dynamics {section.dynamics!r}; choose from {sorted(DYNAMICS)}", section="stability")
            report = analyze(DYNAMICS[section.dynamics], np.asarray(section.start), lam, rho)

        table = Table(title=f"spectrum (λ={lam:g}, ρ={rho.value})")
        table.add_column("raw", justify="right")
        table.add_column("damped", justify="right")
        for raw, damped in zip(report.raw_spectrum, report.damped_spectrum, strict=True):
            table.add_row(f"{raw:.6g}", f"{damped:.6g}")
        console.print(table)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        report.write_json(cfg.output_dir / "stability.json")


@app.command("ode-check")
def ode_check_command(
    config: ConfigOption = None,
    seed_override: SeedOption = None,
    output: OutputOption = None,
    quiet: QuietOption = False,
    lam: LambdaOption = None,
    rho: RhoOption = None,
):
    """Integral-form residual, interpolation limits, convergence orders and the Euler stability window."""
    with guarded():
        cfg, _ = _context(config, seed_override, output, quiet)
        section: OdeConfig = cfg.ode or OdeConfig()
        report = ode_check(section.lam if lam is None else lam, rho or section.rho, section.dt, section.T)

        out_dir = cfg.output_dir / "ode_check"
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        for study in report.convergence:
            study.write_csv(out_dir / f"convergence_{study.scheme.value}.csv")
        logger.info("wrote %s", out_dir)

        table = Table(title="ode check")
        table.add_column("check")
        table.add_column("value", justify="right")
        table.add_row("integral-form residual", f"{report.integral_residual:.3e}")
        table.add_row("residual limit gap", f"{report.res_limit_gap:.3e}")
        table.add_row("non-residual limit gap", f"{report.nonres_limit_gap:.3e}")
        for study in report.convergence:
            table.add_row(f"{study.scheme.value} slope", f"{study.slope:.4f}")
        for product, verdict in report.probes.items():
            table.add_row(f"euler probe λΔt={product:g}", verdict.value)
        console.print(table)


@app.command()
def ensemble(
    config: ConfigOption = None,
    seed_override: SeedOption = None,
    output: OutputOption = None,
    quiet: QuietOption = False,
    runs: Annotated[list[Path] | None, typer.Option("--runs", help="run.json of each member; repeat the flag.")] = None,
):
    """Mean-softmax ensemble of trained runs and its gain over the single-run mean."""
    with guarded():
        cfg, settings = _context(config, seed_override, output, quiet)
        if not runs or len(runs) < 2:
            raise ConfigError("an ensemble needs at least two --runs", section="ensemble")
        loaded = [_load_run(path) for path in runs]
        datasets = {record.train.dataset.model_dump_json() for record, _ in loaded}
        if len(datasets) > 1:
            raise IncompatibleModelsError("ensemble members were trained on different datasets")
        eval_cfg = cfg.eval or EvalConfig()
        data = _test_split(loaded[0][0]).head(eval_cfg.max_samples)
        # perturbations are drawn from the first member's training seed, as eval does per run
        seed = loaded[0][0].seed
        result = ensemble_eval(
            [network for _, network in loaded],
            data,
            eval_cfg.noise_configs(seed),
            eval_cfg.attack_configs(seed),
            chunk_size=eval_cfg.chunk_size,
            threads=settings.threads,
        )
        out_dir = cfg.output_dir / "ensemble"
        out_dir.mkdir(parents=True, exist_ok=True)
        result.write_csv(out_dir / "ensemble.csv")
        result.write_members_csv(out_dir / "members.csv")

        table = Table(title=f"ensemble of {len(loaded)}")
        for column in ("metric", "ensemble", "single mean", "improvement"):
            table.add_column(column, justify="left" if column == "metric" else "right")
        mean, gain = result.single_mean, result.improvement
        for name, value in result.metrics.items():
            table.add_row(name, f"{value:.2f}", f"{mean[name]:.2f}", f"{gain[name]:+.2f}")
        console.print(table)


@app.command()
def sweep(config: ConfigOption = None, seed_override: SeedOption = None, output: OutputOption = None, quiet: QuietOption = False):
    """Initialization sweep: every interval × seed for the configured block kind."""
    with guarded():
        cfg, settings = _context(config, seed_override, output, quiet)
        model_cfg, train_cfg = cfg.require("model"), cfg.require("train")
        grid: SweepConfig = cfg.sweep or SweepConfig()
        table = init_sweep(model_cfg, train_cfg, cfg.eval or EvalConfig(), grid.intervals, grid.seeds, threads=settings.threads)
        table.write(cfg.output_dir / "sweep")
        for group, rows in table.summary().items():
            _print_metrics(group, rows)


@app.command()
def compare(config: ConfigOption = None, seed_override: SeedOption = None, output: OutputOption = None, quiet: QuietOption = False):
    """Tune the initialization interval per block kind and compare the winners seed by seed."""
    with guarded():
        cfg, settings = _context(config, seed_override, output, quiet)
        model_cfg, train_cfg = cfg.require("model"), cfg.require("train")
        grid: SweepConfig = cfg.sweep or SweepConfig()
        best, table = compare_variants(
            model_cfg, train_cfg, cfg.eval or EvalConfig(), grid.kinds, grid.intervals, grid.seeds, threads=settings.threads
        )
        out_dir = cfg.output_dir / "compare"
        table.write(out_dir)

        runs_by_cell: dict[tuple, list[RunRecord]] = {}
        for e in table.entries:
            runs_by_cell.setdefault((e.kind, e.interval), []).append(e.record)
        baseline = next((v for v in best if v.kind is BlockKind.RESIDUAL), None)
        selected = []
        for variant in best:
            entry = {"kind": variant.kind.value, "interval": list(variant.interval), "score": variant.score}
            if baseline is not None and variant is not baseline:
                mine = runs_by_cell[(variant.kind, variant.interval)]
                theirs = runs_by_cell[(baseline.kind, baseline.interval)]
                entry["vs_residual"] = [paired_comparison(mine, theirs, m).to_dict() for m in (CLEAN, NOISE_MEAN)]
            selected.append(entry)
            _print_metrics(f"{variant.kind.value} {interval_label(variant.interval)}", variant.summary)
        (out_dir / "selected.json").write_text(json.dumps(selected, indent=2))
        logger.info("wrote %s", out_dir / "selected.json")


if __name__ == "__main__":
    app()
