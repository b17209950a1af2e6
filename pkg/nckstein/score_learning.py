"""Score matching objectives, the noise-conditional autoencoder and training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .errors import DimensionError, TrainingError
from .networks import (
    FeedforwardNet,
    NoiseConditioning,
    derivative,
    make_optimizer,
    second_derivative,
)
from .samplers import NoiseSchedule
from .utils import write_csv

logger = logging.getLogger(__name__)

Grads = list[np.ndarray]
DataSource = Callable[[np.random.Generator, int], np.ndarray]


class Objective(str, Enum):
    SM = "sm"
    DSM = "dsm"
    NCSN = "ncsn"
    NCAE = "ncae"


class TrainConfig(BaseModel):
    """Optimisation settings shared by every objective."""

    batch_size: int = Field(128, ge=1)
    steps: int = Field(5000, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    seed: int = 0
    sigma_max: float = Field(20.0, gt=0)
    sigma_min: float = Field(1.0, gt=0)
    levels: int = Field(10, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    bottleneck: int | None = None
    output_scale: Literal["none", "inverse_sigma", "denoiser"] = "denoiser"
    data_scale: float = Field(1.0, gt=0)
    # (fraction of steps, learning-rate multiplier), applied from that step on
    lr_decay: list[tuple[float, float]] = Field(
        default_factory=lambda: [(0.5, 0.3), (0.75, 0.1)]
    )
    log_every: int = Field(500, ge=1)
    checkpoint_every: int | None = None

    @field_validator("lr_decay")
    @classmethod
    def _sorted_decay(cls, value: list[tuple[float, float]]) -> list[tuple[float, float]]:
        fractions = [fraction for fraction, _ in value]
        if fractions != sorted(fractions) or any(not 0 <= f <= 1 for f in fractions):
            raise ValueError("lr_decay fractions must be sorted and within [0, 1]")
        if any(factor <= 0 for _, factor in value):
            raise ValueError("lr_decay multipliers must be positive")
        return value

    def learning_rate_at(self, step: int) -> float:
        """Step-decayed learning rate for zero-based ``step``."""
        rate = self.learning_rate
        for fraction, factor in self.lr_decay:
            if step >= fraction * self.steps:
                rate = self.learning_rate * factor
        return rate

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.geometric(self.sigma_max, self.sigma_min, self.levels)


def _batch(batch: np.ndarray) -> np.ndarray:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] < 1:
        raise DimensionError("empty batch")
    return batch


# ----------------------------------------------------------------------
# Objectives
def dsm_loss(
    net: FeedforwardNet, batch: np.ndarray, sigma: float, rng: np.random.Generator
) -> tuple[float, Grads]:
    """``1/2 mean |s(x~, sigma) - (x - x~)/sigma^2|^2`` with ``x~ = x + sigma z``."""
    x = _batch(batch)
    z = rng.standard_normal(x.shape)
    noisy = x + sigma * z
    target = -z / sigma
    diff = net.forward_conditioned(noisy, sigma) - target
    n = x.shape[0]
    loss = 0.5 * float(np.sum(diff**2)) / n
    _, grads = net.backward_conditioned(noisy, sigma, diff / n)
    return loss, grads


def ncsn_loss(
    net: FeedforwardNet,
    batch: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, Grads]:
    """Multi-level DSM weighted by ``sigma_l^2``, one random level per example."""
    x = _batch(batch)
    n = x.shape[0]
    z = rng.standard_normal(x.shape)
    levels = rng.integers(schedule.levels, size=n)
    sig = np.asarray(schedule.sigmas)[levels]
    noisy = x + sig[:, None] * z
    target = -z / sig[:, None]
    diff = net.forward_conditioned(noisy, sig) - target
    weights = sig**2
    loss = 0.5 * float(np.sum(weights * np.sum(diff**2, axis=1))) / n
    _, grads = net.backward_conditioned(noisy, sig, weights[:, None] * diff / n)
    return loss, grads


def ncsn_level_losses(
    net: FeedforwardNet,
    batch: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-level ``sigma_l^2``-weighted DSM losses on the full batch."""
    x = _batch(batch)
    losses = np.empty(schedule.levels)
    for level, sigma in enumerate(schedule.sigmas):
        z = rng.standard_normal(x.shape)
        diff = net.forward_conditioned(x + sigma * z, sigma) + z / sigma
        losses[level] = 0.5 * sigma**2 * float(np.sum(diff**2)) / x.shape[0]
    return losses


def ncae_loss(
    enc: FeedforwardNet,
    dec: FeedforwardNet,
    batch: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, Grads, Grads]:
    """Denoising reconstruction ``1/2 mean sigma_l^-2 |D(E(x~), sigma) - x|^2``."""
    x = _batch(batch)
    if enc.output_dim != dec.data_dim:
        raise DimensionError(
            f"encoder width {enc.output_dim} does not feed decoder input {dec.data_dim}"
        )
    if dec.output_dim != x.shape[1]:
        raise DimensionError(f"decoder output {dec.output_dim} != data dim {x.shape[1]}")
    n = x.shape[0]
    z = rng.standard_normal(x.shape)
    levels = rng.integers(schedule.levels, size=n)
    sig = np.asarray(schedule.sigmas)[levels]
    noisy = x + sig[:, None] * z
    code = enc.forward_conditioned(noisy, sig)
    diff = dec.forward_conditioned(code, sig) - x
    weights = 1.0 / sig**2
    loss = 0.5 * float(np.sum(weights * np.sum(diff**2, axis=1))) / n
    grad_code, dec_grads = dec.backward_conditioned(code, sig, weights[:, None] * diff / n)
    _, enc_grads = enc.backward_conditioned(noisy, sig, grad_code)
    return loss, enc_grads, dec_grads


def score_matching_loss(net: FeedforwardNet, batch: np.ndarray) -> tuple[float, Grads]:
    """``mean[tr(grad_x s(x)) + 1/2 |s(x)|^2]`` with exact parameter gradients.

    The trace is assembled from ``d`` forward-mode tangents, each
    differentiated in reverse, so the cost grows linearly with ``d``.
    """
    x = _batch(batch)
    n, d = x.shape
    if net.input_dim != d or net.output_dim != d:
        raise DimensionError("score matching needs a d -> d network without noise input")
    cache = net._forward_cache(x)
    out = cache.output
    loss = 0.5 * float(np.sum(out**2)) / n
    _, grads = net.backward(x, out / n)

    trace = np.zeros(n)
    for k in range(d):
        tangents = [np.zeros_like(x)]
        tangents[0][:, k] = 1.0
        dots = []
        for layer, z in zip(net.layers, cache.preacts):
            dot = tangents[-1] @ layer.weight.T
            dots.append(dot)
            tangents.append(derivative(layer.activation, z) * dot)
        trace += tangents[-1][:, k]

        bar_t = np.zeros_like(out)
        bar_t[:, k] = 1.0 / n
        bar_a = np.zeros_like(out)
        for idx in range(len(net.layers) - 1, -1, -1):
            layer = net.layers[idx]
            z, dot = cache.preacts[idx], dots[idx]
            bar_dot = derivative(layer.activation, z) * bar_t
            bar_z = second_derivative(layer.activation, z) * dot * bar_t
            bar_z += derivative(layer.activation, z) * bar_a
            grads[2 * idx] += bar_dot.T @ tangents[idx] + bar_z.T @ cache.inputs[idx]
            grads[2 * idx + 1] += bar_z.sum(axis=0)
            bar_t = bar_dot @ layer.weight
            bar_a = bar_z @ layer.weight
    loss += float(np.sum(trace)) / n
    return loss, grads


# ----------------------------------------------------------------------
# Training
@dataclass
class TrainResult:
    """Trained networks keyed by role plus the per-step loss curve."""

    nets: dict[str, FeedforwardNet]
    losses: list[float] = field(default_factory=list)

    def write_loss_curve(self, path: Path) -> None:
        """Write ``step,loss`` rows."""
        write_csv(path, ("step", "loss"), enumerate(self.losses))


def array_source(data: np.ndarray) -> DataSource:
    """Minibatches drawn with replacement from ``data``; the full set when the batch covers it."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))

    def draw(rng: np.random.Generator, batch_size: int) -> np.ndarray:
        if batch_size >= data.shape[0]:
            return data
        return data[rng.integers(data.shape[0], size=batch_size)]

    return draw


def build_networks(objective: Objective, d: int, cfg: TrainConfig) -> dict[str, FeedforwardNet]:
    """Freshly initialised networks for ``objective`` on ``d``-dimensional data."""
    if objective is Objective.SM:
        return {"score": FeedforwardNet.create([d, *cfg.hidden, d], cfg.seed)}
    conditioning = NoiseConditioning(
        method="concat_log_sigma",
        output_scale=cfg.output_scale,
        data_scale=cfg.data_scale,
    )
    if objective in (Objective.DSM, Objective.NCSN):
        net = FeedforwardNet.create([d + 1, *cfg.hidden, d], cfg.seed, conditioning=conditioning)
        return {"score": net}
    h = cfg.bottleneck or int(np.ceil(d / 4))
    if h > d:
        raise DimensionError(f"bottleneck {h} wider than data dimension {d}")
    plain = NoiseConditioning(method="concat_log_sigma")
    return {
        "encoder": FeedforwardNet.create([d + 1, *cfg.hidden, h], cfg.seed, conditioning=plain),
        "decoder": FeedforwardNet.create(
            [h + 1, *reversed(cfg.hidden), d], cfg.seed + 1, conditioning=plain
        ),
    }


def train(
    objective: Objective,
    data: DataSource,
    cfg: TrainConfig,
    nets: dict[str, FeedforwardNet] | None = None,
    checkpoint_dir: Path | None = None,
) -> TrainResult:
    """Optimise ``objective`` for ``cfg.steps`` steps; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    if nets is None:
        first = np.atleast_2d(data(np.random.default_rng(cfg.seed), 1))
        nets = build_networks(objective, first.shape[1], cfg)
    roles = list(nets)
    optimizers = {role: make_optimizer(cfg.optimizer, cfg.learning_rate) for role in roles}
    schedule = cfg.schedule
    result = TrainResult(nets)

    for step in range(cfg.steps):
        batch = data(rng, cfg.batch_size)
        if objective is Objective.SM:
            loss, grads = score_matching_loss(nets["score"], batch)
            per_role = {"score": grads}
        elif objective is Objective.DSM:
            loss, grads = dsm_loss(nets["score"], batch, schedule.sigma_min, rng)
            per_role = {"score": grads}
        elif objective is Objective.NCSN:
            loss, grads = ncsn_loss(nets["score"], batch, schedule, rng)
            per_role = {"score": grads}
        else:
            loss, enc_grads, dec_grads = ncae_loss(
                nets["encoder"], nets["decoder"], batch, schedule, rng
            )
            per_role = {"encoder": enc_grads, "decoder": dec_grads}
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite {objective.value} loss", step=step)
        result.losses.append(loss)
        rate = cfg.learning_rate_at(step)
        for role, grads in per_role.items():
            net = nets[role]
            optimizers[role].learning_rate = rate
            net.set_flat(optimizers[role].step(net.get_flat(), net.flatten(grads)))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(
                "training step",
                extra={"objective": objective.value, "step": step, "loss": loss},
            )
        if (
            checkpoint_dir is not None
            and cfg.checkpoint_every
            and (step + 1) % cfg.checkpoint_every == 0
        ):
            save_networks(nets, checkpoint_dir, suffix=f"-{step + 1}")
    if checkpoint_dir is not None:
        save_networks(nets, checkpoint_dir)
    return result


def save_networks(
    nets: dict[str, FeedforwardNet], directory: Path, suffix: str = ""
) -> dict[str, Path]:
    """Checkpoint each network as ``<role><suffix>.ckpt``."""
    paths = {}
    for role, net in nets.items():
        path = directory / f"{role}{suffix}.ckpt"
        net.save(path)
        paths[role] = path
    return paths

