"""Small feed-forward network engine with explicit backprop and Adam.

All arrays are float64. Batches are row-major ``[B, features]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh")


class ShapeError(ValueError):
    """Input or parameter dimensions do not line up."""


class StateError(RuntimeError):
    """An operation was called without the state it depends on."""


class NumericError(FloatingPointError):
    """A non-finite value showed up where finiteness is required."""


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, out: np.ndarray, kind: str, upstream: np.ndarray) -> np.ndarray:
    if kind == "linear":
        return upstream
    if kind == "relu":
        return upstream * (z > 0.0)
    return upstream * (1.0 - out * out)


@dataclass
class DenseLayer:
    weights: np.ndarray  # [in_dim, out_dim]
    bias: np.ndarray  # [out_dim]
    activation: str = "linear"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        a = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-a, a, size=(in_dim, out_dim)), np.zeros(out_dim), activation)


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the shapes needed to rebuild each tensor.

    ``layout`` lists the shape of every tensor in order (W0, b0, W1, b1, ...).
    """

    values: np.ndarray
    layout: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        expected = sum(math.prod(s) for s in self.layout)
        if self.values.shape != (expected,):
            raise ShapeError(f"flat vector has {self.values.size} entries, layout needs {expected}")

    @property
    def offsets(self) -> list[int]:
        out = [0]
        for s in self.layout:
            out.append(out[-1] + math.prod(s))
        return out

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(np.asarray(values, dtype=np.float64).copy(), self.layout)

    def tensors(self) -> list[np.ndarray]:
        offs = self.offsets
        return [self.values[offs[i]:offs[i + 1]].reshape(s) for i, s in enumerate(self.layout)]

    @staticmethod
    def concat(parts: Sequence["ModelParams"]) -> "ModelParams":
        values = np.concatenate([p.values for p in parts]) if parts else np.zeros(0)
        layout = tuple(s for p in parts for s in p.layout)
        return ModelParams(values, layout)


class Network:
    """Ordered stack of dense layers.

    ``forward`` caches the activations of its last call so ``backward`` can
    run without recomputation. The cache does not affect outputs.
    """

    def __init__(self, layers: Sequence[DenseLayer], role: str = "encoder"):
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = list(layers)
        self.role = role
        self._cache: tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]] | None = None

    @classmethod
    def mlp(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "linear",
        role: str = "encoder",
    ) -> "Network":
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer.init(a, b, act, rng))
        return cls(layers, role)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def copy(self) -> "Network":
        return Network(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers], self.role
        )

    @property
    def layout(self) -> tuple[tuple[int, ...], ...]:
        return tuple(s for l in self.layers for s in (l.weights.shape, l.bias.shape))

    def get_params(self) -> ModelParams:
        tensors = [t for l in self.layers for t in (l.weights.ravel(), l.bias)]
        return ModelParams(np.concatenate(tensors).astype(np.float64), self.layout)

    def set_params(self, params: ModelParams) -> None:
        if params.layout != self.layout:
            raise ShapeError("parameter layout does not match this network")
        ts = params.tensors()
        for i, l in enumerate(self.layers):
            l.weights = ts[2 * i].copy()
            l.bias = ts[2 * i + 1].copy()
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input [B, {self.in_dim}], got {list(x.shape)}")
        trace = []
        h = x
        for l in self.layers:
            z = h @ l.weights + l.bias
            h = _activate(z, l.activation)
            trace.append((z, h))
        self._cache = (x, trace)
        return h

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> tuple[ModelParams, np.ndarray]:
        """Gradients of ``sum(upstream * forward(x))`` w.r.t. params and input."""
        if self._cache is None:
            raise StateError("backward called before forward")
        cached_x, trace = self._cache
        x = np.asarray(x, dtype=np.float64)
        if cached_x.shape != x.shape or not np.array_equal(cached_x, x):
            raise StateError("backward input differs from the cached forward input")
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != trace[-1][1].shape:
            raise ShapeError(f"upstream grad shape {g.shape} != output shape {trace[-1][1].shape}")
        grads: list[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            z, out = trace[i]
            g = _activation_grad(z, out, l.activation, g)
            h_in = trace[i - 1][1] if i > 0 else cached_x
            grads.append(g.sum(axis=0))
            grads.append((h_in.T @ g).ravel())
            g = g @ l.weights.T
        grads.reverse()
        return ModelParams(np.concatenate(grads), self.layout), g


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: Network, x: np.ndarray, upstream: np.ndarray) -> tuple[ModelParams, np.ndarray]:
    return net.backward(x, upstream)


def finite_diff_gradient(
    loss_fn: Callable[[ModelParams], float], params: ModelParams, eps: float = 1e-5
) -> ModelParams:
    """Central-difference gradient, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = params.values.astype(np.float64)
    grad = np.empty_like(base)
    for i in range(base.size):
        probe = base.copy()
        probe[i] = base[i] + eps
        f_plus = float(loss_fn(params.with_values(probe)))
        probe[i] = base[i] - eps
        f_minus = float(loss_fn(params.with_values(probe)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return params.with_values(grad)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not pair up")
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


@dataclass
class AdamState:
    size: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(state: AdamState, params: ModelParams, grads: ModelParams) -> ModelParams:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    if len(params) != state.size or len(grads) != state.size:
        raise ShapeError(f"Adam state has {state.size} slots, got {len(params)} params / {len(grads)} grads")
    g = grads.values
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to Adam")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params.with_values(params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
