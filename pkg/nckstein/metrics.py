"""Sample-quality metrics: MMD, KSD, improved precision/recall, mode occupancy."""

from __future__ import annotations

import logging
import warnings
from typing import Any

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial.distance import cdist, pdist

from .distributions import GaussianMixture
from .errors import DegenerateInputError, DimensionError
from .kernels import ConditionedKernel, median_pairwise
from .samplers import ScoreSource, checked_scores
from .utils import format_value

logger = logging.getLogger(__name__)


class MetricReport(BaseModel):
    """A metric value together with everything needed to recompute it."""

    name: str
    values: dict[str, float]
    params: dict[str, Any] = Field(default_factory=dict)
    sample_sizes: dict[str, int] = Field(default_factory=dict)
    seed: int | None = None

    def csv_rows(self) -> list[tuple[str, str, str]]:
        """Rows ``(metric, value, params)`` for the ``metrics.csv`` schema."""
        params = ";".join(
            f"{key}={format_value(value)}"
            for key, value in sorted({**self.params, **self.sample_sizes}.items())
        )
        return [
            (key if len(self.values) > 1 else self.name, format_value(value), params)
            for key, value in self.values.items()
        ]


def _points(x: np.ndarray, minimum: int, name: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] < minimum:
        raise DegenerateInputError(f"{name} needs at least {minimum} points")
    return x


def median_gamma(x: np.ndarray, y: np.ndarray) -> float:
    """RBF ``gamma = 1 / (2 med^2)`` from the pooled sample."""
    med = median_pairwise(np.vstack([x, y]))
    return 1.0 / (2.0 * med**2)


def mmd_squared(
    x: np.ndarray,
    y: np.ndarray,
    gamma: float | None = None,
    *,
    unbiased: bool = True,
) -> float:
    """Squared MMD with ``k = exp(-gamma |x - y|^2)``.

    ``gamma=None`` applies the median heuristic on ``x`` and ``y`` pooled.
    The default U-statistic drops the self-similarity terms.
    """
    x = _points(x, 2, "mmd_squared")
    y = _points(y, 2, "mmd_squared")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if gamma is None:
        gamma = median_gamma(x, y)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    m, n = x.shape[0], y.shape[0]
    if unbiased:
        term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        term_x = kxx.sum() / m**2
        term_y = kyy.sum() / n**2
    return float(term_x + term_y - 2.0 * kxy.mean())


def stein_kernel_matrix(
    x: np.ndarray, s: ScoreSource, sigma: float, k: ConditionedKernel
) -> np.ndarray:
    """``U[i, j] = u_p(x_i, x_j)``, the Stein kernel between all particle pairs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    scores = checked_scores(s, x, sigma)
    gram = k.gram(x, x)
    trace = k.stein_trace(x, x)
    if k.code_space:
        grads = k.pairwise_grad_x(x, x)
        # grad_y k(x_i, x_j) = grad_x k(x_j, x_i) by symmetry
        sx_grad_y = np.einsum("id,jid->ij", scores, grads)
        sy_grad_x = np.einsum("jd,ijd->ij", scores, grads)
    else:
        r2 = cdist(x, x, "sqeuclidean")
        c = k.profile(r2, order=1)[1]
        sx = scores @ x.T
        own = np.sum(scores * x, axis=1)
        sx_grad_y = -2.0 * c * (own[:, None] - sx)
        sy_grad_x = 2.0 * c * (sx.T - own[None, :])
    return gram * (scores @ scores.T) + sx_grad_y + sy_grad_x + trace


def ksd_squared(
    x: np.ndarray, s: ScoreSource, sigma: float, k: ConditionedKernel
) -> float:
    """U-statistic estimate of the squared kernel Stein discrepancy."""
    x = _points(x, 2, "ksd_squared")
    u = stein_kernel_matrix(x, s, sigma, k)
    n = x.shape[0]
    return float((u.sum() - np.trace(u)) / (n * (n - 1)))


def knn_radii(x: np.ndarray, k_neighbors: int) -> np.ndarray:
    """Distance from each row to its ``k``-th nearest other row."""
    dist = cdist(x, x)
    np.fill_diagonal(dist, np.inf)
    return np.partition(dist, k_neighbors - 1, axis=1)[:, k_neighbors - 1]


def manifold_coverage(points: np.ndarray, manifold: np.ndarray, k_neighbors: int) -> float:
    """Fraction of ``points`` inside the kNN-ball manifold of ``manifold``.

    A point on a ball's boundary counts as inside.
    """
    radii = knn_radii(manifold, k_neighbors)
    inside = (cdist(points, manifold) <= radii[None, :]).any(axis=1)
    return float(inside.mean())


def improved_pr(
    real: np.ndarray, gen: np.ndarray, k_neighbors: int = 3
) -> tuple[float, float]:
    """``(precision, recall)`` of ``gen`` against ``real``."""
    if k_neighbors < 1:
        raise DegenerateInputError("k_neighbors must be >= 1")
    real = _points(real, k_neighbors + 1, "improved_pr")
    gen = _points(gen, k_neighbors + 1, "improved_pr")
    if real.shape[1] != gen.shape[1]:
        raise DimensionError(f"dimension mismatch: {real.shape[1]} vs {gen.shape[1]}")
    precision = manifold_coverage(gen, real, k_neighbors)
    recall = manifold_coverage(real, gen, k_neighbors)
    return precision, recall


def mode_occupancy(x: np.ndarray, gm: GaussianMixture) -> np.ndarray:
    """Fraction of particles whose nearest component mean is each component's."""
    x = _points(x, 1, "mode_occupancy")
    if x.shape[1] != gm.dim:
        raise DimensionError(f"expected dimension {gm.dim}, got {x.shape[1]}")
    if gm.n_components > 1:
        separation = pdist(gm.means).min()
        if separation <= 6.0 * np.sqrt(gm.variances.max()):
            warnings.warn(
                f"mixture modes are not well separated (min distance {separation:.3g})",
                RuntimeWarning,
                stacklevel=2,
            )
    labels = np.argmin(cdist(x, gm.means, "sqeuclidean"), axis=1)
    return np.bincount(labels, minlength=gm.n_components) / x.shape[0]
