"""Small dense networks with exact reverse-mode gradients.

Networks act on row batches: inputs ``(n, input_dim)``, outputs
``(n, output_dim)``. Parameters are ordered ``W1, b1, W2, b2, ...`` in
every list and flat view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import expit

from .errors import DegenerateInputError, DimensionError

CHECKPOINT_FORMAT = "nckstein-net"


class Activation(str, Enum):
    """Smooth elementwise nonlinearities."""

    IDENTITY = "identity"
    SOFTPLUS = "softplus"
    TANH = "tanh"


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    """Apply ``kind`` elementwise."""
    if kind is Activation.SOFTPLUS:
        return np.logaddexp(0.0, z)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def derivative(kind: Activation, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative of ``kind`` at ``z``."""
    if kind is Activation.SOFTPLUS:
        return expit(z)
    if kind is Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def second_derivative(kind: Activation, z: np.ndarray) -> np.ndarray:
    """Elementwise second derivative of the activation."""
    if kind is Activation.SOFTPLUS:
        s = expit(z)
        return s * (1.0 - s)
    if kind is Activation.TANH:
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t**2)
    return np.zeros_like(z)


class NoiseConditioning(BaseModel):
    """How a network sees the noise level.

    ``concat_log_sigma`` appends ``log sigma`` as a final input column;
    ``inverse_sigma`` divides the output by sigma. ``denoiser`` feeds
    ``x / v`` and returns ``(out - x) / v`` with ``v = data_scale^2 + sigma^2``,
    so the network predicts the clean point.
    """

    method: str = "none"
    output_scale: str = "none"
    data_scale: float = Field(1.0, gt=0)

    @property
    def denoiser(self) -> bool:
        return self.output_scale == "denoiser"

    @property
    def concat(self) -> bool:
        return self.method == "concat_log_sigma"


@dataclass
class Layer:
    """Affine map followed by an activation: ``a = f(x W^T + b)``."""

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


class FeedforwardNet:
    """Dense network used as score model, encoder or decoder."""

    def __init__(
        self, layers: list[Layer], conditioning: NoiseConditioning | None = None
    ) -> None:
        if not layers:
            raise DimensionError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise DimensionError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        for layer in layers:
            if layer.bias.shape != (layer.weight.shape[0],):
                raise DimensionError(f"bias shape {layer.bias.shape} mismatches weight")
        self.layers = layers
        self.conditioning = conditioning or NoiseConditioning()
        if self.conditioning.denoiser and self.output_dim != self.data_dim:
            raise DimensionError("a denoiser network must map the data space to itself")

    @classmethod
    def create(
        cls,
        sizes: Sequence[int],
        seed: int,
        *,
        hidden_activation: Activation = Activation.SOFTPLUS,
        output_activation: Activation = Activation.IDENTITY,
        conditioning: NoiseConditioning | None = None,
    ) -> "FeedforwardNet":
        """Glorot-normal initialised network with ``sizes`` = ``[in, h..., out]``."""
        if len(sizes) < 2:
            raise DimensionError("sizes needs at least input and output widths")
        rng = np.random.default_rng(seed)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(
                Layer(rng.normal(0.0, std, size=(fan_out, fan_in)), np.zeros(fan_out), act)
            )
        return cls(layers, conditioning)

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weight.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1].weight.shape[0])

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [int(layer.weight.shape[0]) for layer in self.layers]

    @property
    def data_dim(self) -> int:
        """Input width excluding the noise column."""
        return self.input_dim - (1 if self.conditioning.concat else 0)

    # ------------------------------------------------------------------
    # Parameters
    def parameters(self) -> list[np.ndarray]:
        """Weights and biases, layer by layer."""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        """All parameters as one vector."""
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        """Load parameters from a vector produced by :meth:`get_flat`."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise DimensionError(f"expected {self.n_params} parameters, got {flat.size}")
        offset = 0
        for layer in self.layers:
            for name in ("weight", "bias"):
                current = getattr(layer, name)
                size = current.size
                setattr(layer, name, flat[offset : offset + size].reshape(current.shape).copy())
                offset += size

    @staticmethod
    def flatten(grads: Sequence[np.ndarray]) -> np.ndarray:
        """Concatenate per-layer gradients in :meth:`get_flat` order."""
        return np.concatenate([g.ravel() for g in grads])

    def copy(self) -> "FeedforwardNet":
        """Deep copy of the layers, sharing nothing."""
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return FeedforwardNet(layers, self.conditioning.model_copy())

    # ------------------------------------------------------------------
    # Plain passes
    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise DimensionError(
                f"network expects input width {self.input_dim}, got {x.shape[1]}"
            )
        return x

    def _forward_cache(self, x: np.ndarray) -> ForwardCache:
        a = self._check_input(x)
        inputs, preacts = [], []
        for layer in self.layers:
            inputs.append(a)
            z = a @ layer.weight.T + layer.bias
            preacts.append(z)
            a = activate(layer.activation, z)
        return ForwardCache(inputs, preacts, a)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Network output for a batch ``(n, input_dim)``."""
        return self._forward_cache(x).output

    def backward(
        self, x: np.ndarray, upstream: np.ndarray
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Gradients of ``sum <forward(x), upstream>`` w.r.t. input and parameters."""
        cache = self._forward_cache(x)
        upstream = np.asarray(upstream, dtype=np.float64).reshape(cache.output.shape)
        grad_a = upstream
        grads: list[np.ndarray] = []
        for layer, a_in, z in zip(
            reversed(self.layers), reversed(cache.inputs), reversed(cache.preacts)
        ):
            grad_z = derivative(layer.activation, z) * grad_a
            grads.append(grad_z.sum(axis=0))
            grads.append(grad_z.T @ a_in)
            grad_a = grad_z @ layer.weight
        grads.reverse()
        return grad_a, grads

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Input Jacobians, shape ``(n, output_dim, input_dim)``."""
        x = self._check_input(x)
        jac = np.empty((x.shape[0], self.output_dim, self.input_dim))
        for k in range(self.output_dim):
            upstream = np.zeros((x.shape[0], self.output_dim))
            upstream[:, k] = 1.0
            jac[:, k, :] = self.backward(x, upstream)[0]
        return jac

    # ------------------------------------------------------------------
    # Noise-conditioned passes
    def condition_input(self, x: np.ndarray, sigma: float | np.ndarray) -> np.ndarray:
        """Network input for ``x`` at ``sigma``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.conditioning.denoiser:
            x = x * self._output_scale(x.shape[0], sigma)
        if not self.conditioning.concat:
            return x
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        if np.any(sig <= 0):
            raise DegenerateInputError("noise levels must be > 0")
        return np.hstack([x, np.log(sig)[:, None]])

    def _output_scale(self, n: int, sigma: float | np.ndarray) -> np.ndarray | None:
        mode = self.conditioning.output_scale
        if mode == "none":
            return None
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        if mode == "inverse_sigma":
            return (1.0 / sig)[:, None]
        return (1.0 / (self.conditioning.data_scale**2 + sig**2))[:, None]

    def forward_conditioned(self, x: np.ndarray, sigma: float | np.ndarray) -> np.ndarray:
        """``net(x, sigma)`` under the network's noise conditioning."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = self.forward(self.condition_input(x, sigma))
        scale = self._output_scale(out.shape[0], sigma)
        if scale is None:
            return out
        if self.conditioning.denoiser:
            return scale * (out - x)
        return out * scale

    def backward_conditioned(
        self, x: np.ndarray, sigma: float | np.ndarray, upstream: np.ndarray
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """As :meth:`backward` for :meth:`forward_conditioned`; input grad excludes sigma."""
        inputs = self.condition_input(x, sigma)
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        scale = self._output_scale(inputs.shape[0], sigma)
        if scale is not None:
            upstream = upstream * scale
        grad_in, grads = self.backward(inputs, upstream)
        grad_x = grad_in[:, : self.data_dim]
        if self.conditioning.denoiser:
            grad_x = grad_x * scale - upstream
        return grad_x, grads

    def jacobian_conditioned(self, x: np.ndarray, sigma: float) -> np.ndarray:
        """Jacobian of :meth:`forward_conditioned` w.r.t. the data columns."""
        inputs = self.condition_input(x, sigma)
        jac = self.jacobian(inputs)[:, :, : self.data_dim]
        scale = self._output_scale(inputs.shape[0], sigma)
        if scale is None:
            return jac
        factor = scale[:, :, None]
        if self.conditioning.denoiser:
            return factor**2 * jac - factor * np.eye(self.data_dim)
        return jac * factor

    # ------------------------------------------------------------------
    # Persistence
    def save(self, path: Path) -> None:
        """Write a JSON header line followed by the float64 parameter block."""
        header = {
            "format": CHECKPOINT_FORMAT,
            "sizes": self.sizes,
            "activations": [layer.activation.value for layer in self.layers],
            "conditioning": self.conditioning.method,
            "output_scale": self.conditioning.output_scale,
            "data_scale": self.conditioning.data_scale,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as f:
            f.write((json.dumps(header) + "\n").encode("utf-8"))
            f.write(self.get_flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path: Path) -> "FeedforwardNet":
        """Read a checkpoint written by :meth:`save`."""
        with path.open("rb") as f:
            header = json.loads(f.readline().decode("utf-8"))
            payload = f.read()
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DegenerateInputError(f"{path}: not a network checkpoint")
        sizes = header["sizes"]
        layers = [
            Layer(np.zeros((fan_out, fan_in)), np.zeros(fan_out), Activation(act))
            for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], header["activations"])
        ]
        net = cls(
            layers,
            NoiseConditioning(
                method=header["conditioning"],
                output_scale=header["output_scale"],
                data_scale=header.get("data_scale", 1.0),
            ),
        )
        net.set_flat(np.frombuffer(payload, dtype="<f8"))
        return net


class SGD:
    """Plain gradient descent on a flat parameter vector."""

    def __init__(self, learning_rate: float) -> None:
        self.learning_rate = learning_rate

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Parameters after one step at the current ``learning_rate``."""
        return params - self.learning_rate * grad


class Adam:
    """Adaptive-moment optimizer on a flat parameter vector."""

    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Parameters after one bias-corrected step at the current ``learning_rate``."""
        if self.m is None or self.v is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, learning_rate: float) -> SGD | Adam:
    """Optimizer by name: ``sgd`` or ``adam``."""
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adam":
        return Adam(learning_rate)
    raise DegenerateInputError(f"unknown optimizer {name!r}")
