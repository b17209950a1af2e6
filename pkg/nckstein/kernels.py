"""Noise-conditional RBF, IMQ and mixed kernels in data or code space.

All kernels are radial in their feature space: ``k(u, v) = f(r2)`` with
``r2 = |u - v|^2``. Each family supplies ``f``, ``c = df/dr2`` and
``c' = d2f/dr2^2``; gradients and Stein traces follow from those three.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, DegenerateInputError, DimensionError
from .networks import FeedforwardNet

logger = logging.getLogger(__name__)


class KernelFamily(str, Enum):
    RBF = "rbf"
    IMQ = "imq"
    MIXED = "mixed"


class KernelSpace(str, Enum):
    DATA = "data"
    CODE = "code"


class BandwidthRule(str, Enum):
    """How the median pairwise distance sets ``gamma``."""

    MEDIAN = "median"  # gamma0 / med
    MEDIAN_SQUARED = "median_squared"  # gamma0 / med^2


class KernelSpec(BaseModel):
    """Serializable kernel description, resolved per noise level by :func:`condition`."""

    family: KernelFamily = KernelFamily.RBF
    gamma0: float = Field(1.0, gt=0)
    tau0: float = Field(-0.5, lt=0)
    space: KernelSpace = KernelSpace.DATA
    bandwidth: BandwidthRule = BandwidthRule.MEDIAN
    encoder_path: Path | None = None
    tau_overrides: list[tuple[float, float]] = Field(default_factory=list)
    imq_rescale: bool = False
    code_median: bool = False

    @field_validator("tau_overrides")
    @classmethod
    def _negative_taus(cls, value: list[tuple[float, float]]) -> list[tuple[float, float]]:
        for sigma, tau in value:
            if sigma <= 0 or tau >= 0:
                raise ValueError(f"override ({sigma}, {tau}) needs sigma > 0 and tau < 0")
        return value

    @model_validator(mode="after")
    def _code_flags(self) -> "KernelSpec":
        if self.code_median and self.space is not KernelSpace.CODE:
            raise ValueError("code_median only applies to CODE-space kernels")
        return self

    def tau_for(self, sigma: float) -> float:
        """IMQ exponent at ``sigma``, honouring overrides."""
        for level_sigma, tau in self.tau_overrides:
            if np.isclose(level_sigma, sigma, rtol=1e-9, atol=0.0):
                return tau
        return self.tau0


def median_pairwise(points: np.ndarray) -> float:
    """Median of the ``n(n-1)/2`` Euclidean distances between rows."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] < 2:
        raise DegenerateInputError("median_pairwise needs at least two points")
    med = float(np.median(pdist(points)))
    if med <= 0.0:
        raise DegenerateInputError("median pairwise distance is zero")
    return med


@dataclass(frozen=True)
class ConditionedKernel:
    """A kernel with its bandwidth and exponent resolved at one noise level."""

    spec: KernelSpec
    sigma: float
    gamma: float
    tau: float
    encoder: FeedforwardNet | None = None

    @property
    def code_space(self) -> bool:
        return self.spec.space is KernelSpace.CODE

    # ------------------------------------------------------------------
    # Radial profile
    def profile(
        self, r2: np.ndarray, order: int = 2
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Return ``(f, df/dr2, d2f/dr2^2)`` elementwise.

        ``order=1`` skips the second derivative and returns ``None`` in its place.
        """
        value = np.zeros_like(r2)
        first = np.zeros_like(r2)
        second = np.zeros_like(r2) if order > 1 else None
        family = self.spec.family
        if family in (KernelFamily.RBF, KernelFamily.MIXED):
            k = np.exp(-self.gamma * r2)
            value += k
            first += -self.gamma * k
            if second is not None:
                second += self.gamma**2 * k
        if family in (KernelFamily.IMQ, KernelFamily.MIXED):
            rho = self.gamma if self.spec.imq_rescale else 1.0
            base = 1.0 + rho * r2
            tau = self.tau
            value += base**tau
            first += rho * tau * base ** (tau - 1.0)
            if second is not None:
                second += rho**2 * tau * (tau - 1.0) * base ** (tau - 2.0)
        return value, first, second

    # ------------------------------------------------------------------
    # Feature map
    def features(self, x: np.ndarray) -> np.ndarray:
        """Rows of ``x`` mapped into the kernel's space (identity for DATA)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not self.code_space:
            return x
        assert self.encoder is not None
        if x.shape[1] != self.encoder.data_dim:
            raise DimensionError(
                f"encoder expects dimension {self.encoder.data_dim}, got {x.shape[1]}"
            )
        return self.encoder.forward_conditioned(x, self.sigma)

    def _jacobian(self, x: np.ndarray) -> np.ndarray:
        assert self.encoder is not None
        return self.encoder.jacobian_conditioned(x, self.sigma)

    # ------------------------------------------------------------------
    # Pointwise API
    def eval(self, x: np.ndarray, y: np.ndarray) -> float:
        """``k(x, y)`` for two vectors."""
        x, y = _pair(x, y)
        return float(self.gram(x[None, :], y[None, :])[0, 0])

    def grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Gradient of ``k(x, y)`` with respect to ``x``."""
        x, y = _pair(x, y)
        return self.pairwise_grad_x(x[None, :], y[None, :])[0, 0]

    # ------------------------------------------------------------------
    # Batched API
    def gram(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``K[i, j] = k(x_i, y_j)``."""
        u, v = self.features(x), self.features(y)
        if u.shape[1] != v.shape[1]:
            raise DimensionError(f"dimension mismatch: {u.shape[1]} vs {v.shape[1]}")
        return self.profile(cdist(u, v, "sqeuclidean"), order=1)[0]

    def pairwise_grad_x(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``G[i, j] = grad_{x_i} k(x_i, y_j)`` with shape ``(n, m, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u, v = self.features(x), self.features(y)
        if u.shape[1] != v.shape[1]:
            raise DimensionError(f"dimension mismatch: {u.shape[1]} vs {v.shape[1]}")
        diff = u[:, None, :] - v[None, :, :]
        _, c, _ = self.profile(np.sum(diff**2, axis=2), order=1)
        grad_u = 2.0 * c[:, :, None] * diff
        if not self.code_space:
            return grad_u
        return np.einsum("ihd,ijh->ijd", self._jacobian(x), grad_u)

    def repulsion(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``R[j] = sum_i grad_{x_i} k(x_i, y_j)``, shape ``(m, d)``.

        Avoids materialising the ``(n, m, d)`` gradient tensor.
        """
        return self.stein_terms(x, y)[1]

    def stein_terms(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(gram(x, y), repulsion(x, y))`` from a single distance pass.

        Squared distances come from one matrix product, which is what the
        samplers evaluate every step.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        u, v = self.features(x), self.features(y)
        if u.shape[1] != v.shape[1]:
            raise DimensionError(f"dimension mismatch: {u.shape[1]} vs {v.shape[1]}")
        r2 = np.sum(u**2, axis=1)[:, None] + np.sum(v**2, axis=1)[None, :] - 2.0 * (u @ v.T)
        np.maximum(r2, 0.0, out=r2)
        value, c, _ = self.profile(r2, order=1)
        if not self.code_space:
            return value, 2.0 * (c.T @ u - c.sum(axis=0)[:, None] * v)
        jac = self._jacobian(x)
        pulled = np.einsum("ihd,ih->id", jac, u)
        out = c.T @ pulled
        for h in range(u.shape[1]):
            out -= v[:, h : h + 1] * (c.T @ jac[:, h, :])
        return value, 2.0 * out

    def stein_trace(self, x: np.ndarray, y: np.ndarray, step: float = 1e-4) -> np.ndarray:
        """``T[i, j] = trace(grad_x grad_y k(x_i, y_j))``.

        Closed form in data space; central differences of ``grad_x`` in
        ``y`` for code space.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if not self.code_space:
            r2 = cdist(x, y, "sqeuclidean")
            _, c, c2 = self.profile(r2)
            return -2.0 * c * x.shape[1] - 4.0 * c2 * r2
        d = x.shape[1]
        trace = np.zeros((x.shape[0], y.shape[0]))
        for k in range(d):
            shift = np.zeros(d)
            shift[k] = step
            plus = self.pairwise_grad_x(x, y + shift)[:, :, k]
            minus = self.pairwise_grad_x(x, y - shift)[:, :, k]
            trace += (plus - minus) / (2.0 * step)
        return trace


def _pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateInputError("kernel inputs must be finite")
    return x, y


def condition(
    spec: KernelSpec,
    sigma: float,
    reference: np.ndarray,
    encoder: FeedforwardNet | None = None,
) -> ConditionedKernel:
    """Resolve ``gamma`` from the median of ``reference`` and ``tau`` at ``sigma``.

    The default rule is ``gamma0 / median``; ``MEDIAN_SQUARED`` divides by
    the squared median.

    ``reference`` should hold samples of the target perturbed at ``sigma``.
    CODE-space kernels load ``spec.encoder_path`` when no encoder is given.
    """
    if spec.space is KernelSpace.CODE and encoder is None:
        if spec.encoder_path is None:
            raise ConfigError("CODE-space kernels need an encoder")
        encoder = FeedforwardNet.load(spec.encoder_path)
    if spec.space is KernelSpace.DATA:
        encoder = None
    kernel = ConditionedKernel(spec, float(sigma), 1.0, spec.tau_for(sigma), encoder)
    points = reference
    if spec.code_median:
        points = kernel.features(reference)
    med = median_pairwise(points)
    gamma = spec.gamma0 / med
    if spec.bandwidth is BandwidthRule.MEDIAN_SQUARED:
        gamma /= med
    logger.debug(
        "kernel conditioned",
        extra={"sigma": float(sigma), "median": med, "gamma": gamma},
    )
    return ConditionedKernel(spec, float(sigma), gamma, kernel.tau, encoder)
