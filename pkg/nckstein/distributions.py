"""Analytic Gaussian mixture targets with exact densities and scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DegenerateInputError, DimensionError

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic Gaussians ``sum_i w_i N(mean_i, variance_i I)``.

    ``weights`` keeps the raw values it was built with; every evaluation
    uses ``normalized_weights``.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    normalized_weights: np.ndarray = field(init=False, repr=False)
    log_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if weights.size == 0:
            raise DegenerateInputError("a mixture needs at least one component")
        if not (weights.size == means.shape[0] == variances.size):
            raise DimensionError(
                f"component count mismatch: {weights.size} weights, "
                f"{means.shape[0]} means, {variances.size} variances"
            )
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise DegenerateInputError("mixture weights must be finite and >= 0")
        if weights.sum() <= 0:
            raise DegenerateInputError("mixture weights must not all be zero")
        if not np.all(np.isfinite(variances)) or np.any(variances <= 0):
            raise DegenerateInputError("component variances must be > 0")
        if not np.all(np.isfinite(means)):
            raise DegenerateInputError("component means must be finite")
        normalized = weights / weights.sum()
        for name, value in (
            ("weights", weights),
            ("means", means),
            ("variances", variances),
            ("normalized_weights", normalized),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        with np.errstate(divide="ignore"):
            log_weights = np.log(normalized)
        log_weights.setflags(write=False)
        object.__setattr__(self, "log_weights", log_weights)

    @classmethod
    def from_components(
        cls, components: Sequence[tuple[float, Sequence[float], float]]
    ) -> "GaussianMixture":
        """Build from ``(weight, mean, variance)`` triples."""
        weights = [c[0] for c in components]
        means = [list(c[1]) for c in components]
        variances = [c[2] for c in components]
        return cls(np.array(weights), np.array(means), np.array(variances))

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    def component_log_densities(self, x: np.ndarray) -> np.ndarray:
        """Return ``log w_i + log N(x; mean_i, v_i I)`` with shape ``(n, K)``."""
        points = self._check_points(x)
        sq = np.sum((points[:, None, :] - self.means[None, :, :]) ** 2, axis=2)
        return (
            self.log_weights[None, :]
            - 0.5 * sq / self.variances[None, :]
            - 0.5 * self.dim * (_LOG_2PI + np.log(self.variances))[None, :]
        )

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        """Posterior component probabilities, shape ``(n, K)``."""
        return softmax(self.component_log_densities(x), axis=1)

    def _check_points(self, x: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise DimensionError(
                f"expected points of dimension {self.dim}, got shape {np.shape(x)}"
            )
        if not np.all(np.isfinite(points)):
            raise DegenerateInputError("points must be finite")
        return points


def log_density(gm: GaussianMixture, x: np.ndarray) -> np.ndarray | float:
    """Log density of ``gm`` at a point ``(d,)`` or a batch ``(n, d)``."""
    values = logsumexp(gm.component_log_densities(x), axis=1)
    return float(values[0]) if np.ndim(x) == 1 else values


def score(gm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Exact ``grad_x log p(x)`` through posterior responsibilities."""
    points = gm._check_points(x)
    resp = gm.responsibilities(points)
    weighted = resp / gm.variances[None, :]
    grads = weighted @ gm.means - weighted.sum(axis=1, keepdims=True) * points
    return grads[0] if np.ndim(x) == 1 else grads


def perturb(gm: GaussianMixture, sigma: float) -> GaussianMixture:
    """Convolve ``gm`` with ``N(0, sigma^2 I)`` noise."""
    if not np.isfinite(sigma) or sigma <= 0:
        raise DegenerateInputError(f"sigma must be > 0, got {sigma}")
    return GaussianMixture(gm.weights, gm.means, gm.variances + float(sigma) ** 2)


def sample(gm: GaussianMixture, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` i.i.d. points; identical seeds give identical arrays."""
    if n < 1:
        raise DegenerateInputError(f"sample size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.choice(gm.n_components, size=n, p=gm.normalized_weights)
    noise = rng.standard_normal((n, gm.dim))
    return gm.means[labels] + np.sqrt(gm.variances[labels])[:, None] * noise


def tempered_density_grid(
    gm: GaussianMixture,
    beta: float,
    low: float,
    high: float,
    resolution: int,
    *,
    normalize: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate ``p(x)^(1/beta)`` on a square grid over the first two axes.

    Returns ``(xs, ys, density)`` where ``density[i, j]`` is taken at
    ``(xs[j], ys[i])``. Mixtures with ``d > 2`` are sliced at zero in the
    remaining coordinates.
    """
    if beta <= 0:
        raise DegenerateInputError(f"beta must be > 0, got {beta}")
    if gm.dim < 2:
        raise DimensionError("density grids need a mixture of dimension >= 2")
    xs = np.linspace(low, high, resolution)
    ys = np.linspace(low, high, resolution)
    grid_x, grid_y = np.meshgrid(xs, ys)
    points = np.zeros((grid_x.size, gm.dim))
    points[:, 0] = grid_x.ravel()
    points[:, 1] = grid_y.ravel()
    density = np.exp(log_density(gm, points) / beta).reshape(grid_x.shape)
    if normalize:
        density = density / density.sum()
    return xs, ys, density


def imbalanced_mixture(
    d: int,
    weights: Sequence[float] = (0.2, 0.8),
    offset: float = 5.0,
    placement: str = "literal",
) -> GaussianMixture:
    """Two-mode mixture at ``-offset * 1_d`` and ``+offset * 1_d``.

    ``placement="scaled"`` divides the means by ``sqrt(d / 2)`` so the mode
    separation stays that of the planar case.
    """
    if placement not in ("literal", "scaled"):
        raise DegenerateInputError(f"unknown placement {placement!r}")
    scale = 1.0 if placement == "literal" else 1.0 / np.sqrt(d / 2.0)
    ones = np.ones(d) * offset * scale
    return GaussianMixture(np.asarray(weights), np.stack([-ones, ones]), np.ones(2))


def four_mode_mixture() -> GaussianMixture:
    """The imbalanced four-mode planar mixture used for tempering studies."""
    return GaussianMixture.from_components(
        [
            (0.8, (5.0, 5.0), 1.0),
            (0.2, (-5.0, -5.0), 1.0),
            (0.6, (5.0, -5.0), 1.0),
            (0.4, (-5.0, 5.0), 1.0),
        ]
    )
