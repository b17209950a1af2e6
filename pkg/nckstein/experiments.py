"""Experiment runner reproducing the toy studies and emitting plot-ready data."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from .config import ExperimentConfig, MethodName, output_root
from .distributions import (
    GaussianMixture,
    four_mode_mixture,
    imbalanced_mixture,
    perturb,
    sample,
    tempered_density_grid,
)
from .errors import ConfigError, NckSteinError, OutputExistsError
from .kernels import KernelSpec, condition, median_pairwise
from .log import attach_log_file
from .metrics import MetricReport, improved_pr, ksd_squared, mmd_squared, mode_occupancy
from .networks import FeedforwardNet
from .samplers import (
    AnalyticScore,
    AnnealResult,
    LearnedScore,
    NoiseSchedule,
    ReferenceSampler,
    SamplerLoop,
    ScoreSource,
    anneal,
    init_particles,
)
from .score_learning import Objective, array_source, train
from .utils import load_particles, save_particles, write_csv, write_json

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("method", "d", "seed", "mmd2", "status")
MEDIAN_COLUMNS = ("d", "level", "sigma", "seed", "median")
OCCUPANCY_COLUMNS = ("method", "seed", "component", "weight", "occupancy")
BETA_COLUMNS = ("beta", "seed", "precision", "recall", "low_mode_occupancy")
BETA_OCCUPANCY_COLUMNS = ("beta", "seed", "component", "weight", "occupancy")
DENSITY_COLUMNS = ("beta", "x", "y", "density")
METRIC_COLUMNS = ("metric", "value", "params")


@dataclass(frozen=True)
class MethodPlan:
    loop: SamplerLoop
    annealed: bool
    fixed_kernel: bool = False


METHOD_PLANS = {
    MethodName.SGLD: MethodPlan(SamplerLoop.SGLD, annealed=False),
    MethodName.SVGD: MethodPlan(SamplerLoop.SVGD, annealed=False),
    MethodName.A_SGLD: MethodPlan(SamplerLoop.SGLD, annealed=True),
    MethodName.A_SVGD: MethodPlan(SamplerLoop.SVGD, annealed=True, fixed_kernel=True),
    MethodName.NCK_SVGD: MethodPlan(SamplerLoop.SVGD, annealed=True),
}


class CellStatus(str, Enum):
    """Enumerated states of one (method, dimension, seed) cell."""

    PENDING = "pending"
    RUNNING = "running"
    COMPLETE = "complete"
    FAILED = "failed"


@dataclass
class Cell:
    method: MethodName
    d: int
    seed: int
    status: CellStatus = CellStatus.PENDING
    error: str | None = None


class RunRecord(BaseModel):
    """Config echo plus every artifact a run produced."""

    command: str
    config: dict[str, Any]
    tables: dict[str, str] = Field(default_factory=dict)
    snapshots: list[str] = Field(default_factory=list)
    summary: dict[str, Any] = Field(default_factory=dict)
    cells: list[dict[str, Any]] = Field(default_factory=list)
    timings: dict[str, float] = Field(default_factory=dict)


class ExperimentRunner:
    """Run samplers for one configuration and persist their artifacts."""

    def __init__(
        self,
        config: ExperimentConfig,
        command: str,
        output_dir: Path | None = None,
        overwrite: bool = False,
    ) -> None:
        """Bind the runner to ``config`` and claim its output directory."""
        self.config = config
        self.output_dir = resolve_output(config, command, output_dir)
        prepare_output(self.output_dir, overwrite)
        attach_log_file(self.output_dir / "run.log")
        self.record = RunRecord(command=command, config=config.model_dump(mode="json"))

    # ------------------------------------------------------------------
    def run_method(
        self,
        method: MethodName,
        init: np.ndarray,
        seed: int,
        *,
        mixture: GaussianMixture | None,
        score: ScoreSource | None = None,
        encoder: FeedforwardNet | None = None,
        beta: float | None = None,
        kernel: KernelSpec | None = None,
        perturbed: bool | None = None,
    ) -> AnnealResult:
        """Run ``method`` from ``init``; analytic scores come from ``mixture``.

        ``perturbed`` overrides whether the analytic score and kernel reference
        follow the noise level; by default only annealed methods do.
        """
        plan = METHOD_PLANS[method]
        if perturbed is None:
            perturbed = plan.annealed
        update: dict[str, Any] = {"seed": seed}
        if beta is not None:
            update["beta"] = beta
        sampler_cfg = self.config.sampler(method).model_copy(update=update)
        schedule = (
            self.config.schedule.build()
            if plan.annealed
            else NoiseSchedule((self.config.schedule.sigma_min,))
        )
        if score is None:
            if mixture is None:
                raise ConfigError("a dataset target needs a learned score checkpoint")
            score = AnalyticScore(mixture, perturb=perturbed)
        reference = None
        if self.config.reference_mode == "target" and mixture is not None:
            reference = ReferenceSampler(
                mixture, self.config.reference_size, seed, perturb=perturbed
            )
        started = time.perf_counter()
        result = anneal(
            plan.loop,
            schedule,
            sampler_cfg,
            (kernel or self.config.kernel) if plan.loop is SamplerLoop.SVGD else None,
            score,
            init,
            reference=reference,
            encoder=encoder,
            fixed_kernel=plan.fixed_kernel,
            keep_snapshots=self.config.keep_level_snapshots,
        )
        self.record.timings[f"{method.value}/d{init.shape[1]}/seed{seed}"] = (
            time.perf_counter() - started
        )
        return result

    def write_table(self, name: str, columns: tuple[str, ...], rows: list) -> Path:
        """Write a CSV into the run directory and list it in the record."""
        path = self.output_dir / name
        write_csv(path, columns, rows)
        self.record.tables[name] = str(path)
        return path

    def save_snapshot(self, name: str, particles: np.ndarray, level: int, sigma: float) -> Path:
        """Write one particle file and list it in the record."""
        path = self.output_dir / name
        save_particles(path, particles, level=level, sigma=sigma)
        self.record.snapshots.append(str(path))
        return path

    def save_result(self, stem: str, result: AnnealResult) -> Path:
        """Write ``<stem>.bin`` and, when levels were kept, ``<stem>_level<l>.bin``."""
        for record in result.levels:
            if record.snapshot is not None:
                self.save_snapshot(
                    f"{stem}_level{record.level}.bin", record.snapshot, record.level, record.sigma
                )
        last = result.levels[-1]
        return self.save_snapshot(f"{stem}.bin", result.particles, last.level, last.sigma)

    def finish(self) -> RunRecord:
        """Persist ``record.json`` and return the record."""
        write_json(self.output_dir / "record.json", self.record.model_dump(mode="json"))
        return self.record


def resolve_output(config: ExperimentConfig, command: str, output_dir: Path | None) -> Path:
    """``--output``, then ``config.output_dir``, then the per-command default."""
    return output_dir or config.output_dir or output_root() / command


def prepare_output(path: Path, overwrite: bool) -> None:
    """Create ``path``; refuse to reuse a non-empty directory unless ``overwrite``."""
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise OutputExistsError(f"output directory {path} is not empty (use --overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _sweep_mixture(config: ExperimentConfig, d: int) -> GaussianMixture:
    return imbalanced_mixture(d, config.sweep_weights, placement=config.placement)


def _real_seed(seed: int) -> int:
    return 10_000 + seed


# ----------------------------------------------------------------------
# Studies
def run_dimension_sweep(
    config: ExperimentConfig, output_dir: Path | None = None, overwrite: bool = False
) -> RunRecord:
    """MMD^2 against real samples for every method, dimension and seed.

    With ``sweep_reference="final_level"`` every method follows the score
    perturbed at the smallest noise level and the real and null sets are
    drawn from that perturbed target; ``"data"`` compares against the
    unperturbed mixture.
    """
    runner = ExperimentRunner(config, "sweep-dim", output_dir, overwrite)
    final_level = config.sweep_reference == "final_level"
    kernel = config.sweep_kernel or config.kernel
    results: dict[tuple[int, int, MethodName], tuple[float, CellStatus]] = {}
    null: dict[int, list[float]] = {}
    for d in config.dims:
        mixture = _sweep_mixture(config, d)
        truth = perturb(mixture, config.schedule.sigma_min) if final_level else mixture
        for seed in config.seeds:
            real = sample(truth, config.n_real, _real_seed(seed))
            second = sample(truth, config.n_real, _real_seed(seed) + 5_000)
            null.setdefault(d, []).append(
                mmd_squared(second, real, unbiased=config.mmd_unbiased)
            )
            init = init_particles(config.init, config.n_particles, d, seed)
            for method in config.methods:
                cell = Cell(method, d, seed, CellStatus.RUNNING)
                try:
                    final = runner.run_method(
                        method,
                        init,
                        seed,
                        mixture=mixture,
                        kernel=kernel,
                        perturbed=True if final_level else None,
                    ).particles
                    value = mmd_squared(final, real, unbiased=config.mmd_unbiased)
                    cell.status = CellStatus.COMPLETE
                except NckSteinError as exc:
                    logger.warning(
                        "cell failed",
                        extra={"method": method.value, "d": d, "seed": seed, "error": str(exc)},
                    )
                    value, cell.status, cell.error = float("nan"), CellStatus.FAILED, str(exc)
                results[(d, seed, method)] = (value, cell.status)
                runner.record.cells.append(
                    {
                        "method": method.value,
                        "d": d,
                        "seed": seed,
                        "status": cell.status.value,
                        "error": cell.error,
                    }
                )
    order = {method: i for i, method in enumerate(config.methods)}
    rows = [
        (method.value, d, seed, value, status.value)
        for (d, seed, method), (value, status) in sorted(
            results.items(), key=lambda item: (item[0][0], item[0][1], order[item[0][2]])
        )
    ]
    runner.write_table("sweep_dim.csv", SWEEP_COLUMNS, rows)
    runner.record.summary["mean_mmd2"] = {
        f"{method.value}/d{d}": float(
            np.nanmean([results[(d, s, method)][0] for s in config.seeds])
        )
        for d in config.dims
        for method in config.methods
        if any(np.isfinite(results[(d, s, method)][0]) for s in config.seeds)
    }
    runner.record.summary["null_mmd2"] = {
        f"d{d}": float(np.mean(values)) for d, values in null.items()
    }
    return runner.finish()


def non_increasing(values: np.ndarray) -> bool:
    """True when ``values`` never rise; ties count as non-increasing."""
    return bool(np.all(np.diff(values) <= 0))


def run_median_diagnostic(
    config: ExperimentConfig, output_dir: Path | None = None, overwrite: bool = False
) -> RunRecord:
    """Median pairwise distance of perturbed targets per dimension and level."""
    runner = ExperimentRunner(config, "median-diag", output_dir, overwrite)
    schedule = config.schedule.build()
    rows = []
    medians: dict[int, np.ndarray] = {}
    for d in config.dims:
        mixture = _sweep_mixture(config, d)
        table = np.empty((schedule.levels, len(config.seeds)))
        for level, sigma in enumerate(schedule.sigmas):
            noisy = perturb(mixture, sigma)
            for j, seed in enumerate(config.seeds):
                value = median_pairwise(sample(noisy, config.n_real, seed * 100 + level))
                table[level, j] = value
                rows.append((d, level, sigma, seed, value))
        medians[d] = np.median(table, axis=1)
    runner.write_table("median_diag.csv", MEDIAN_COLUMNS, rows)
    runner.record.summary["ratio"] = {
        str(d): float(values[0] / values[-1]) for d, values in medians.items()
    }
    runner.record.summary["monotone"] = {
        str(d): non_increasing(values) for d, values in medians.items()
    }
    return runner.finish()


def run_weight_recovery(
    config: ExperimentConfig,
    output_dir: Path | None = None,
    overwrite: bool = False,
    score_path: Path | None = None,
) -> RunRecord:
    """Mode occupancy of plain SVGD and NCK-SVGD from one shared initialisation.

    ``score_path`` swaps the analytic score for a trained score network.
    """
    runner = ExperimentRunner(config, "weight-recovery", output_dir, overwrite)
    mixture = config.target.mixture()
    score = LearnedScore(FeedforwardNet.load(score_path)) if score_path else None
    rows = []
    for seed in config.seeds:
        init = init_particles(config.init, config.n_particles, mixture.dim, seed)
        for method in (MethodName.SVGD, MethodName.NCK_SVGD):
            result = runner.run_method(method, init, seed, mixture=mixture, score=score)
            runner.save_result(f"particles_{method.value}_seed{seed}", result)
            final = result.particles
            occupancy = mode_occupancy(final, mixture)
            for component, (weight, frac) in enumerate(
                zip(mixture.normalized_weights, occupancy)
            ):
                rows.append((method.value, seed, component, weight, frac))
    runner.write_table("weight_recovery.csv", OCCUPANCY_COLUMNS, rows)
    runner.record.summary["raw_weights"] = mixture.weights.tolist()
    return runner.finish()


def beta_mixture(config: ExperimentConfig) -> GaussianMixture:
    """Target of the beta sweep: the four-mode mixture or the configured one."""
    return four_mode_mixture() if config.beta_target == "four_mode" else config.target.mixture()


def density_rows(mixture: GaussianMixture, betas: list[float], grid) -> list[tuple]:
    """``(beta, x, y, density)`` rows of the tempered target on the grid."""
    rows = []
    for beta in betas:
        xs, ys, density = tempered_density_grid(
            mixture, beta, grid.low, grid.high, grid.resolution
        )
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                rows.append((beta, x, y, density[i, j]))
    return rows


def run_beta_sweep(
    config: ExperimentConfig, output_dir: Path | None = None, overwrite: bool = False
) -> RunRecord:
    """NCK-SVGD across entropy regularisers: precision, recall and occupancy."""
    runner = ExperimentRunner(config, "beta-sweep", output_dir, overwrite)
    mixture = beta_mixture(config)
    low_mode = int(np.argmin(mixture.normalized_weights))
    rows, occupancy_rows = [], []
    for seed in config.seeds:
        real = sample(mixture, config.n_real, _real_seed(seed))
        init = init_particles(config.init, config.n_particles, mixture.dim, seed)
        for beta in config.betas:
            final = runner.run_method(
                MethodName.NCK_SVGD, init, seed, mixture=mixture, beta=beta
            ).particles
            precision, recall = improved_pr(real, final, config.k_neighbors)
            occupancy = mode_occupancy(final, mixture)
            rows.append((beta, seed, precision, recall, occupancy[low_mode]))
            for component, (weight, frac) in enumerate(
                zip(mixture.normalized_weights, occupancy)
            ):
                occupancy_rows.append((beta, seed, component, weight, frac))
    runner.write_table("beta_sweep.csv", BETA_COLUMNS, rows)
    runner.write_table("beta_occupancy.csv", BETA_OCCUPANCY_COLUMNS, occupancy_rows)
    if mixture.dim == 2:
        runner.write_table(
            "density.csv", DENSITY_COLUMNS, density_rows(mixture, config.betas, config.grid)
        )
    runner.record.summary["raw_weights"] = mixture.weights.tolist()
    return runner.finish()


def run_plot_data(
    config: ExperimentConfig, output_dir: Path | None = None, overwrite: bool = False
) -> RunRecord:
    """Tempered density grids of the beta-sweep target."""
    runner = ExperimentRunner(config, "plot-data", output_dir, overwrite)
    mixture = beta_mixture(config)
    runner.write_table(
        "density.csv", DENSITY_COLUMNS, density_rows(mixture, config.betas, config.grid)
    )
    return runner.finish()


# ----------------------------------------------------------------------
# Single runs
def target_samples(config: ExperimentConfig, n: int, seed: int) -> np.ndarray:
    """Samples of the configured target, from the mixture or the dataset file."""
    if config.target.analytic:
        return sample(config.target.mixture(), n, seed)
    return load_particles(config.target.dataset)


def evaluate(
    config: ExperimentConfig,
    real: np.ndarray,
    gen: np.ndarray,
    metrics: list[str],
    *,
    seed: int | None = None,
    score: ScoreSource | None = None,
) -> list[MetricReport]:
    """Metric reports of ``gen`` against ``real`` for each requested metric."""
    mixture = config.target.mixture() if config.target.analytic else None
    sizes = {"n_real": int(real.shape[0]), "n_gen": int(gen.shape[0])}
    reports = []
    for name in metrics:
        if name == "mmd":
            reports.append(
                MetricReport(
                    name="mmd2",
                    values={"mmd2": mmd_squared(real, gen, unbiased=config.mmd_unbiased)},
                    params={"bandwidth": "median", "unbiased": config.mmd_unbiased},
                    sample_sizes=sizes,
                    seed=seed,
                )
            )
        elif name == "precision_recall":
            precision, recall = improved_pr(real, gen, config.k_neighbors)
            reports.append(
                MetricReport(
                    name="improved_pr",
                    values={"precision": precision, "recall": recall},
                    params={"k": config.k_neighbors},
                    sample_sizes=sizes,
                    seed=seed,
                )
            )
        elif name == "occupancy":
            if mixture is None:
                raise ConfigError("occupancy needs an analytic mixture target")
            occupancy = mode_occupancy(gen, mixture)
            reports.append(
                MetricReport(
                    name="occupancy",
                    values={f"occupancy_{i}": float(v) for i, v in enumerate(occupancy)},
                    sample_sizes=sizes,
                    seed=seed,
                )
            )
        elif name == "ksd":
            source = score or (AnalyticScore(mixture, perturb=False) if mixture else None)
            if source is None:
                raise ConfigError("ksd needs an analytic target or a learned score")
            sigma = config.schedule.sigma_min
            kernel = condition(config.kernel, sigma, real)
            reports.append(
                MetricReport(
                    name="ksd2",
                    values={"ksd2": ksd_squared(gen, source, sigma, kernel)},
                    params={
                        "family": config.kernel.family.value,
                        "gamma": kernel.gamma,
                        "tau": kernel.tau,
                    },
                    sample_sizes={"n_gen": int(gen.shape[0])},
                    seed=seed,
                )
            )
        else:
            raise ConfigError(f"unknown metric {name!r}")
    return reports


def run_sample(
    config: ExperimentConfig,
    method: MethodName,
    seed: int,
    output_dir: Path | None = None,
    overwrite: bool = False,
    score_path: Path | None = None,
    encoder_path: Path | None = None,
) -> RunRecord:
    """One sampler run on the configured target: ``particles.bin`` + ``metrics.csv``."""
    runner = ExperimentRunner(config, "sample", output_dir, overwrite)
    mixture = config.target.mixture() if config.target.analytic else None
    real = target_samples(config, config.n_real, _real_seed(seed))
    score = LearnedScore(FeedforwardNet.load(score_path)) if score_path else None
    encoder = FeedforwardNet.load(encoder_path) if encoder_path else None
    init = init_particles(config.init, config.n_particles, real.shape[1], seed)
    result = runner.run_method(
        method, init, seed, mixture=mixture, score=score, encoder=encoder
    )
    runner.save_result("particles", result)
    metrics = [m for m in config.metrics if mixture is not None or m != "occupancy"]
    reports = evaluate(config, real, result.particles, metrics, seed=seed, score=score)
    rows = [row for report in reports for row in report.csv_rows()]
    runner.write_table("metrics.csv", METRIC_COLUMNS, rows)
    runner.record.summary["method"] = method.value
    runner.record.summary["seed"] = seed
    return runner.finish()


def run_training(
    config: ExperimentConfig,
    objective: Objective,
    output_dir: Path | None = None,
    overwrite: bool = False,
) -> RunRecord:
    """Fit a score network (NCSN) or kernel autoencoder (NCAE) on target samples."""
    command = "train-kernel" if objective is Objective.NCAE else "train-score"
    runner = ExperimentRunner(config, command, output_dir, overwrite)
    train_cfg = config.train_config()
    data = target_samples(config, config.train_samples, train_cfg.seed)
    result = train(objective, array_source(data), train_cfg, checkpoint_dir=runner.output_dir)
    result.write_loss_curve(runner.output_dir / "loss.csv")
    runner.record.tables["loss.csv"] = str(runner.output_dir / "loss.csv")
    runner.record.snapshots.extend(
        str(runner.output_dir / f"{role}.ckpt") for role in result.nets
    )
    runner.record.summary["final_loss"] = result.losses[-1]
    return runner.finish()
