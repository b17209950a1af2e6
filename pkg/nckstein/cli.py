"""Command line interface for the nckstein experiments."""

from pathlib import Path
from typing import Callable, List, Optional

import typer
import yaml
from pydantic import ValidationError

from .config import IMAGE_SCHEDULE, ExperimentConfig, MethodName, load_config
from .errors import NckSteinError
from .experiments import (
    METRIC_COLUMNS,
    evaluate,
    prepare_output,
    run_beta_sweep,
    run_dimension_sweep,
    run_median_diagnostic,
    run_plot_data,
    run_sample,
    run_training,
    run_weight_recovery,
)
from .log import configure_logging
from .networks import FeedforwardNet
from .samplers import LearnedScore
from .score_learning import Objective
from .utils import csv_text, load_particles, write_csv

app = typer.Typer(help="Noise-conditional kernel SVGD experiments", no_args_is_help=True)

ConfigOption = typer.Option(None, "--config", exists=True, dir_okay=False, help="YAML config")
SetOption = typer.Option(None, "--set", help="Override a config value, e.g. kernel.family=imq")
SeedOption = typer.Option(None, "--seed", help="Run a single seed")
OutputOption = typer.Option(None, "--output", help="Output directory")
OverwriteOption = typer.Option(False, "--overwrite", help="Reuse a non-empty output directory")
ImageOption = typer.Option(False, "--image-schedule", help="Use the image noise schedule")
LogLevelOption = typer.Option("WARNING", "--log-level", help="Package log level")


def fail(exc: Exception) -> None:
    """Report ``exc`` on one line and exit with status 1."""
    if isinstance(exc, ValidationError):
        details = "; ".join(
            f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}"
            for error in exc.errors()
        )
        message = f"invalid configuration: {details}"
    else:
        message = " ".join(str(exc).split())
    typer.echo(f"error: {message}", err=True)
    raise typer.Exit(code=1)


def guarded(action: Callable[[], None]) -> None:
    """Run ``action``, turning library errors into one ``error:`` line and exit 1."""
    try:
        action()
    except (NckSteinError, ValidationError, yaml.YAMLError, OSError) as exc:
        fail(exc)


def build_config(
    config: Optional[Path],
    overrides: Optional[List[str]],
    seed: Optional[int],
    image_schedule: bool,
    log_level: str,
) -> ExperimentConfig:
    """Load the config file and apply command line adjustments."""
    configure_logging(log_level)
    cfg = load_config(config, overrides or ())
    update = {}
    if seed is not None:
        update["seeds"] = [seed]
        update["training"] = cfg.training.model_copy(update={"seed": seed})
    if image_schedule:
        update["schedule"] = IMAGE_SCHEDULE
    return cfg.model_copy(update=update)


def report(record) -> None:
    """Echo the path of every table a run wrote."""
    for name, path in record.tables.items():
        typer.echo(f"{name}: {path}")


@app.command("sweep-dim")
def sweep_dim(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    seed: Optional[int] = SeedOption,
    method: Optional[List[MethodName]] = typer.Option(None, "--method"),
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    image_schedule: bool = ImageOption,
    log_level: str = LogLevelOption,
) -> None:
    """MMD^2 against real samples across dimensions for every method."""

    def action() -> None:
        cfg = build_config(config, overrides, seed, image_schedule, log_level)
        if method:
            cfg = cfg.model_copy(update={"methods": list(method)})
        report(run_dimension_sweep(cfg, output, overwrite))

    guarded(action)


@app.command("median-diag")
def median_diag(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    seed: Optional[int] = SeedOption,
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    image_schedule: bool = ImageOption,
    log_level: str = LogLevelOption,
) -> None:
    """Median pairwise distance per dimension and noise level."""

    def action() -> None:
        cfg = build_config(config, overrides, seed, image_schedule, log_level)
        record = run_median_diagnostic(cfg, output, overwrite)
        report(record)
        for d, ratio in record.summary["ratio"].items():
            typer.echo(f"d={d} median ratio={ratio:.3f}")

    guarded(action)


@app.command("weight-recovery")
def weight_recovery(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    seed: Optional[int] = SeedOption,
    score: Optional[Path] = typer.Option(None, "--score", help="Score network checkpoint"),
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    image_schedule: bool = ImageOption,
    log_level: str = LogLevelOption,
) -> None:
    """Mode occupancy of SVGD and NCK-SVGD on the imbalanced target."""

    def action() -> None:
        cfg = build_config(config, overrides, seed, image_schedule, log_level)
        report(run_weight_recovery(cfg, output, overwrite, score_path=score))

    guarded(action)


@app.command("beta-sweep")
def beta_sweep(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    seed: Optional[int] = SeedOption,
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    image_schedule: bool = ImageOption,
    log_level: str = LogLevelOption,
) -> None:
    """Precision, recall and occupancy across entropy regularisers."""

    def action() -> None:
        cfg = build_config(config, overrides, seed, image_schedule, log_level)
        report(run_beta_sweep(cfg, output, overwrite))

    guarded(action)


@app.command("plot-data")
def plot_data(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    log_level: str = LogLevelOption,
) -> None:
    """Tempered density grids for contour plots."""

    def action() -> None:
        cfg = build_config(config, overrides, None, False, log_level)
        report(run_plot_data(cfg, output, overwrite))

    guarded(action)


@app.command("sample")
def sample_cmd(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    seed: int = typer.Option(0, "--seed"),
    method: MethodName = typer.Option(MethodName.NCK_SVGD, "--method"),
    score: Optional[Path] = typer.Option(None, "--score", help="Score network checkpoint"),
    encoder: Optional[Path] = typer.Option(None, "--encoder", help="Encoder checkpoint"),
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    image_schedule: bool = ImageOption,
    log_level: str = LogLevelOption,
) -> None:
    """Run one sampler and write particles.bin and metrics.csv."""

    def action() -> None:
        cfg = build_config(config, overrides, seed, image_schedule, log_level)
        report(run_sample(cfg, method, seed, output, overwrite, score, encoder))

    guarded(action)


@app.command("train-score")
def train_score(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    seed: Optional[int] = SeedOption,
    objective: Objective = typer.Option(Objective.NCSN, "--objective"),
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    image_schedule: bool = ImageOption,
    log_level: str = LogLevelOption,
) -> None:
    """Fit a score network on samples of the configured target."""

    def action() -> None:
        if objective is Objective.NCAE:
            raise NckSteinError("use train-kernel for the autoencoder objective")
        cfg = build_config(config, overrides, seed, image_schedule, log_level)
        report(run_training(cfg, objective, output, overwrite))

    guarded(action)


@app.command("train-kernel")
def train_kernel(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    seed: Optional[int] = SeedOption,
    output: Optional[Path] = OutputOption,
    overwrite: bool = OverwriteOption,
    image_schedule: bool = ImageOption,
    log_level: str = LogLevelOption,
) -> None:
    """Fit the noise-conditional autoencoder whose encoder defines code-space kernels."""

    def action() -> None:
        cfg = build_config(config, overrides, seed, image_schedule, log_level)
        report(run_training(cfg, Objective.NCAE, output, overwrite))

    guarded(action)


@app.command("eval")
def eval_cmd(
    real: Path = typer.Option(..., "--real", exists=True, dir_okay=False),
    gen: Path = typer.Option(..., "--gen", exists=True, dir_okay=False),
    metric: Optional[List[str]] = typer.Option(None, "--metric"),
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    score: Optional[Path] = typer.Option(None, "--score", help="Score network checkpoint"),
    output: Optional[Path] = typer.Option(None, "--output", help="Write metrics.csv here"),
    overwrite: bool = OverwriteOption,
    log_level: str = LogLevelOption,
) -> None:
    """Compare two particle files; prints metrics.csv rows."""

    def action() -> None:
        cfg = build_config(config, overrides, None, False, log_level)
        source = LearnedScore(FeedforwardNet.load(score)) if score else None
        metrics = list(metric) if metric else ["mmd", "precision_recall"]
        reports = evaluate(
            cfg, load_particles(real), load_particles(gen), metrics, score=source
        )
        rows = [row for item in reports for row in item.csv_rows()]
        if output is None:
            typer.echo(csv_text(METRIC_COLUMNS, rows), nl=False)
            return
        prepare_output(output, overwrite)
        write_csv(output / "metrics.csv", METRIC_COLUMNS, rows)
        typer.echo(f"metrics.csv: {output / 'metrics.csv'}")

    guarded(action)


if __name__ == "__main__":
    app()
