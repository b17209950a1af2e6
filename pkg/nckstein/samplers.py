"""Particle samplers: (entropy-regularised) SVGD, SGLD and their annealing loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Literal, Protocol

import numpy as np
from pydantic import BaseModel, Field

from .distributions import GaussianMixture, perturb, sample, score as mixture_score
from .errors import DegenerateInputError, DimensionError, DivergenceError, NonFiniteError
from .kernels import ConditionedKernel, KernelSpec, condition
from .networks import FeedforwardNet
from .utils import load_particles, read_particle_header

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing noise levels ``sigma_1 > ... > sigma_L``."""

    sigmas: tuple[float, ...]

    def __post_init__(self) -> None:
        sigmas = tuple(float(s) for s in self.sigmas)
        if not sigmas:
            raise DegenerateInputError("a schedule needs at least one level")
        if any(not np.isfinite(s) or s <= 0 for s in sigmas):
            raise DegenerateInputError("noise levels must be finite and > 0")
        if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
            raise DegenerateInputError("noise levels must be strictly decreasing")
        object.__setattr__(self, "sigmas", sigmas)

    @classmethod
    def geometric(cls, sigma_max: float, sigma_min: float, levels: int) -> "NoiseSchedule":
        """Levels spaced geometrically from ``sigma_max`` down to ``sigma_min``."""
        if levels == 1:
            return cls((float(sigma_min),))
        return cls(tuple(np.geomspace(sigma_max, sigma_min, levels)))

    @property
    def levels(self) -> int:
        return len(self.sigmas)

    @property
    def sigma_min(self) -> float:
        return self.sigmas[-1]

    def step_size(self, epsilon: float, level: int) -> float:
        """``eta_l = epsilon * (sigma_l / sigma_L)^2``."""
        return epsilon * (self.sigmas[level] / self.sigmas[-1]) ** 2


class SamplerConfig(BaseModel):
    """Step-size, budget and regulariser settings of one sampler run."""

    epsilon: float = Field(0.5, gt=0)
    steps: int = Field(100, ge=1)
    beta: float = Field(1.0, ge=0)
    alpha: float = Field(1.0, ge=0)
    n: int = Field(1024, ge=1)
    seed: int = Field(0, ge=0)
    switch_level: int = Field(0, ge=0)


class ScoreSource(Protocol):
    """Callable ``s(x, sigma)`` returning scores of shape ``(n, d)``."""

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray: ...


@dataclass(frozen=True)
class AnalyticScore:
    """Ground-truth score of a mixture, perturbed at ``sigma`` when ``perturb``."""

    mixture: GaussianMixture
    perturb: bool = True

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray:
        target = perturb(self.mixture, sigma) if self.perturb and sigma > 0 else self.mixture
        return mixture_score(target, np.atleast_2d(x))


@dataclass(frozen=True)
class LearnedScore:
    """Score network evaluated as ``net(x, sigma)``."""

    net: FeedforwardNet

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray:
        return self.net.forward_conditioned(np.atleast_2d(x), sigma)


@dataclass(frozen=True)
class ScaledScore:
    """``factor * s(x, sigma)``; a factor of ``1/beta`` targets ``p^(1/beta)``."""

    source: ScoreSource
    factor: float

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray:
        return self.factor * self.source(x, sigma)


@dataclass(frozen=True)
class ReferenceSampler:
    """Fresh samples from the (perturbed) target for kernel conditioning."""

    mixture: GaussianMixture
    size: int = 1024
    seed: int = 0
    perturb: bool = True

    def __call__(self, sigma: float, level: int = 0) -> np.ndarray:
        target = perturb(self.mixture, sigma) if self.perturb and sigma > 0 else self.mixture
        return sample(target, self.size, seed=self.seed * 1000 + level)


ReferenceSource = Callable[[float, int], np.ndarray]


class SamplerLoop(str, Enum):
    SVGD = "svgd"
    SGLD = "sgld"


# ----------------------------------------------------------------------
# Steps
def checked_scores(s: ScoreSource, particles: np.ndarray, sigma: float) -> np.ndarray:
    """Scores at ``particles``; raises :class:`NonFiniteError` on the first bad row."""
    scores = np.asarray(s(particles, sigma), dtype=np.float64)
    if scores.shape != particles.shape:
        raise DimensionError(
            f"score source returned shape {scores.shape}, expected {particles.shape}"
        )
    bad = ~np.all(np.isfinite(scores), axis=1)
    if bad.any():
        raise NonFiniteError("score is not finite", index=int(np.argmax(bad)))
    return scores


def stein_direction(
    particles: np.ndarray,
    k: ConditionedKernel,
    s: ScoreSource,
    sigma: float,
    beta: float,
    at: int,
) -> np.ndarray:
    """``(1/n) sum_j [k(x_j, x_at) s(x_j) + beta grad_{x_j} k(x_j, x_at)]``."""
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    n = particles.shape[0]
    if not 0 <= at < n:
        raise IndexError(f"particle index {at} out of range for {n} particles")
    target = particles[at : at + 1]
    scores = checked_scores(s, particles, sigma)
    gram, repulsion = k.stein_terms(particles, target)
    attraction = gram[:, 0] @ scores
    repulsion = repulsion[0]
    return (attraction + beta * repulsion) / n


def stein_field(
    particles: np.ndarray,
    k: ConditionedKernel,
    s: ScoreSource,
    sigma: float,
    beta: float,
) -> np.ndarray:
    """:func:`stein_direction` for every particle at once, shape ``(n, d)``."""
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    scores = checked_scores(s, particles, sigma)
    gram, repulsion = k.stein_terms(particles, particles)
    attraction = gram.T @ scores
    return (attraction + beta * repulsion) / particles.shape[0]


def svgd_step(
    particles: np.ndarray,
    k: ConditionedKernel,
    s: ScoreSource,
    sigma: float,
    beta: float,
    eta: float,
) -> np.ndarray:
    """Synchronous update ``x_i + eta * phi(x_i)`` from the pre-update set."""
    if eta <= 0:
        raise DegenerateInputError(f"step size must be > 0, got {eta}")
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    return particles + eta * stein_field(particles, k, s, sigma, beta)


class ParticleStreams:
    """One normal stream per particle, keyed by its initial coordinates.

    A particle's identity is the bit pattern of its starting row plus the
    number of identical rows before it, so reordering ``init`` reorders
    the draws with it.
    """

    def __init__(self, seed: int, init: np.ndarray) -> None:
        init = np.ascontiguousarray(np.atleast_2d(init), dtype=np.float64)
        seen: dict[bytes, int] = {}
        self._generators = []
        for row in init:
            key = row.tobytes()
            occurrence = seen.get(key, 0)
            seen[key] = occurrence + 1
            words = np.frombuffer(key, dtype=np.uint32).tolist()
            entropy = [seed, occurrence, *words]
            self._generators.append(np.random.default_rng(np.random.SeedSequence(entropy)))
        self.shape = init.shape

    def standard_normal(self, shape: tuple[int, ...]) -> np.ndarray:
        """One row per particle, each from its own stream."""
        if tuple(shape) != self.shape:
            raise DimensionError(f"streams cover shape {self.shape}, asked for {shape}")
        return np.stack([g.standard_normal(self.shape[1]) for g in self._generators])


def sgld_step(
    particles: np.ndarray,
    s: ScoreSource,
    sigma: float,
    eta: float,
    alpha: float,
    rng: np.random.Generator | ParticleStreams,
) -> np.ndarray:
    """``x + (eta/2) s(x, sigma) + alpha sqrt(eta) z`` with fresh ``z``.

    With :class:`ParticleStreams` each row draws from its own stream, so the
    update commutes with reordering the particles.
    """
    if eta <= 0:
        raise DegenerateInputError(f"step size must be > 0, got {eta}")
    if alpha < 0:
        raise DegenerateInputError(f"alpha must be >= 0, got {alpha}")
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    scores = checked_scores(s, particles, sigma)
    noise = rng.standard_normal(particles.shape)
    return particles + 0.5 * eta * scores + alpha * np.sqrt(eta) * noise


# ----------------------------------------------------------------------
# Annealing
@dataclass
class LevelRecord:
    """Summary of one annealing level."""

    level: int
    sigma: float
    eta: float
    loop: SamplerLoop
    gamma: float | None
    snapshot: np.ndarray | None = None


@dataclass
class AnnealResult:
    particles: np.ndarray
    levels: list[LevelRecord] = field(default_factory=list)


def anneal(
    loop: SamplerLoop,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    k_spec: KernelSpec | None,
    s: ScoreSource,
    init: np.ndarray,
    *,
    reference: ReferenceSource | None = None,
    encoder: FeedforwardNet | None = None,
    fixed_kernel: bool = False,
    keep_snapshots: bool = False,
) -> AnnealResult:
    """Run ``cfg.steps`` sampler steps at every level of ``schedule``.

    Levels below ``cfg.switch_level`` use SGLD whatever ``loop`` says. The
    kernel is conditioned once per level on ``reference(sigma, level)``, or
    on the current particles when no reference is given; ``fixed_kernel``
    conditions once at the smallest noise level and keeps that kernel.
    """
    particles = np.array(init, dtype=np.float64, copy=True)
    if particles.ndim != 2 or particles.shape[0] != cfg.n:
        raise DimensionError(
            f"init must hold {cfg.n} particles, got shape {particles.shape}"
        )
    needs_kernel = loop is SamplerLoop.SVGD and cfg.switch_level < schedule.levels
    if needs_kernel and k_spec is None:
        raise DegenerateInputError("the SVGD loop requires a kernel spec")
    rng = ParticleStreams(cfg.seed, particles)
    result = AnnealResult(particles)

    fixed: ConditionedKernel | None = None
    if needs_kernel and fixed_kernel:
        last = schedule.levels - 1
        ref = reference(schedule.sigma_min, last) if reference else particles
        fixed = condition(k_spec, schedule.sigma_min, ref, encoder)

    for level, sigma in enumerate(schedule.sigmas):
        eta = schedule.step_size(cfg.epsilon, level)
        level_loop = SamplerLoop.SGLD if level < cfg.switch_level else loop
        kernel: ConditionedKernel | None = None
        if level_loop is SamplerLoop.SVGD:
            if fixed is not None:
                kernel = fixed
            else:
                ref = reference(sigma, level) if reference else particles
                kernel = condition(k_spec, sigma, ref, encoder)
        for step in range(cfg.steps):
            try:
                if kernel is not None:
                    particles = svgd_step(particles, kernel, s, sigma, cfg.beta, eta)
                else:
                    particles = sgld_step(particles, s, sigma, eta, cfg.alpha, rng)
            except NonFiniteError as exc:
                raise NonFiniteError(
                    exc.detail, index=exc.index, level=level, step=step
                ) from exc
            _guard(particles, level, step)
        logger.info(
            "level complete",
            extra={
                "level_index": level,
                "sigma": sigma,
                "eta": eta,
                "loop": level_loop.value,
                "gamma": kernel.gamma if kernel else None,
            },
        )
        result.levels.append(
            LevelRecord(
                level=level,
                sigma=sigma,
                eta=eta,
                loop=level_loop,
                gamma=kernel.gamma if kernel else None,
                snapshot=particles.copy() if keep_snapshots else None,
            )
        )
    result.particles = particles
    return result


def _guard(particles: np.ndarray, level: int, step: int) -> None:
    finite = np.all(np.isfinite(particles), axis=1)
    if not finite.all():
        raise NonFiniteError(
            "particle became non-finite",
            index=int(np.argmin(finite)),
            level=level,
            step=step,
        )
    norms = np.linalg.norm(particles, axis=1)
    if norms.max() > DIVERGENCE_NORM:
        raise DivergenceError(
            f"particle norm {norms.max():.3g} exceeds {DIVERGENCE_NORM:g}",
            index=int(np.argmax(norms)),
            level=level,
            step=step,
        )


# ----------------------------------------------------------------------
# Initialisation
class InitConfig(BaseModel):
    """Initial particle placement."""

    mode: Literal["uniform_box", "gaussian", "from_file"] = "uniform_box"
    low: float = -8.0
    high: float = 8.0
    scale: float = Field(1.0, ge=0)
    path: Path | None = None


def init_particles(init: InitConfig, n: int, d: int, seed: int) -> np.ndarray:
    """Deterministic initial particle set of shape ``(n, d)``."""
    rng = np.random.default_rng(seed)
    if init.mode == "uniform_box":
        if init.high <= init.low:
            raise DegenerateInputError("uniform box needs high > low")
        return rng.uniform(init.low, init.high, size=(n, d))
    if init.mode == "gaussian":
        return init.scale * rng.standard_normal((n, d))
    if init.path is None:
        raise DegenerateInputError("from_file initialisation needs a path")
    header = read_particle_header(init.path)
    if (header["n"], header["d"]) != (n, d):
        raise DimensionError(
            f"{init.path} holds shape {(header['n'], header['d'])}, expected {(n, d)}"
        )
    return load_particles(init.path)
