"""Dense feed-forward networks in plain numpy.

The same substrate backs the autoencoder reward oracle and the Q-network.
All parameters of a model live in one contiguous float64 vector; per-layer
weight matrices and bias vectors are views into it. The flat layout is::

    layer 0 weights (output_dim x input_dim, row-major), layer 0 biases,
    layer 1 weights, layer 1 biases, ...

which makes ``flatten`` a copy and lets Adam update every parameter in one
fused pass.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError, UsageError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
_GELU_C = math.sqrt(2.0 / math.pi)
RMSE_EPS = 1e-12


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    SELU = "selu"
    GELU = "gelu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    ELU = "elu"


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.IDENTITY:
        return z
    if kind is Activation.SELU:
        return SELU_LAMBDA * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
    if kind is Activation.GELU:
        return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * (z * z * z))))
    if kind is Activation.SIGMOID:
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.ELU:
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    raise ConfigurationError(f"unknown activation {kind!r}")


def activation_derivative(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise d activate(z) / dz, reusing the forward output ``a`` where cheap."""
    if kind is Activation.IDENTITY:
        return np.ones_like(z)
    if kind is Activation.SELU:
        return np.where(z > 0, SELU_LAMBDA, a + SELU_LAMBDA * SELU_ALPHA)
    if kind is Activation.GELU:
        z2 = z * z
        t = np.tanh(_GELU_C * (z + 0.044715 * z2 * z))
        du = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
    if kind is Activation.SIGMOID:
        return a * (1.0 - a)
    if kind is Activation.TANH:
        return 1.0 - a * a
    if kind is Activation.RELU:
        return (z > 0).astype(z.dtype)
    if kind is Activation.ELU:
        return np.where(z > 0, 1.0, a + 1.0)
    raise ConfigurationError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigurationError(f"layer dims must be positive, got {self.input_dim}->{self.output_dim}")
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_params(self) -> int:
        return self.output_dim * self.input_dim + self.output_dim


def check_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ConfigurationError("a model needs at least one layer")
    for i in range(len(specs) - 1):
        if specs[i].output_dim != specs[i + 1].input_dim:
            raise ConfigurationError(
                f"layer {i} output_dim {specs[i].output_dim} != layer {i + 1} input_dim {specs[i + 1].input_dim}"
            )


def dense_stack(dims: Sequence[int], hidden: Activation, output: Activation = Activation.IDENTITY) -> list[LayerSpec]:
    """Specs for ``dims[0] -> dims[1] -> ... -> dims[-1]`` with one hidden activation."""
    specs = []
    for i in range(len(dims) - 1):
        act = output if i == len(dims) - 2 else hidden
        specs.append(LayerSpec(dims[i], dims[i + 1], act))
    return specs


class MlpModel:
    """Parameters of a dense network. ``weights[i]`` and ``biases[i]`` are views of ``params``."""

    def __init__(self, specs: Sequence[LayerSpec], params: np.ndarray | None = None):
        specs = tuple(specs)
        check_chain(specs)
        self.specs = specs
        n = sum(s.n_params for s in specs)
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ShapeError(f"expected {n} parameters, got shape {params.shape}")
            self.params = params.copy()
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        mask = np.zeros(n, dtype=bool)
        offset = 0
        for s in specs:
            nw = s.output_dim * s.input_dim
            self.weights.append(self.params[offset : offset + nw].reshape(s.output_dim, s.input_dim))
            mask[offset : offset + nw] = True
            offset += nw
            self.biases.append(self.params[offset : offset + s.output_dim])
            offset += s.output_dim
        self.weight_mask = mask
        # bumped on every in-place parameter change; forward caches record it
        self.version = 0

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise ShapeError(f"expected {self.params.size} parameters, got shape {values.shape}")
        self.params[...] = values
        self.version += 1

    def copy(self) -> "MlpModel":
        return MlpModel(self.specs, self.params)

    def __repr__(self):
        dims = " -> ".join([str(self.specs[0].input_dim)] + [str(s.output_dim) for s in self.specs])
        return f"MlpModel({dims}, {self.n_params} params)"


def param_count(specs: Sequence[LayerSpec]) -> int:
    check_chain(specs)
    return sum(s.n_params for s in specs)


def mlp_init(specs: Sequence[LayerSpec], seed: int) -> MlpModel:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    model = MlpModel(specs)
    rng = np.random.default_rng(seed)
    for s, w in zip(model.specs, model.weights):
        bound = math.sqrt(6.0 / (s.input_dim + s.output_dim))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return model


class ForwardCache(NamedTuple):
    model_id: int
    version: int
    inputs: list  # input to each layer
    pre: list  # pre-activations
    post: list  # post-activations


def mlp_forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass for a single vector ``(input_dim,)`` or a batch ``(n, input_dim)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim {model.input_dim}")
    inputs, pre, post = [], [], []
    h = x
    for s, w, b in zip(model.specs, model.weights, model.biases):
        inputs.append(h)
        z = h @ w.T + b
        a = activate(s.activation, z)
        pre.append(z)
        post.append(a)
        h = a
    return h, ForwardCache(id(model), model.version, inputs, pre, post)


def mlp_predict(model: MlpModel, x: np.ndarray) -> np.ndarray:
    return mlp_forward(model, x)[0]


def mlp_backward(model: MlpModel, cache: ForwardCache, output_gradient: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector.

    ``output_gradient`` is dLoss/dOutput with the same shape as the forward
    output. For batched input the per-sample gradients are summed.
    """
    if cache.model_id != id(model) or cache.version != model.version:
        raise UsageError("forward cache does not belong to the current model parameters")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != output shape {cache.post[-1].shape}")
    grads = np.empty(model.n_params)
    offsets = _layer_offsets(model.specs)
    for i in range(len(model.specs) - 1, -1, -1):
        s = model.specs[i]
        dz = g * activation_derivative(s.activation, cache.pre[i], cache.post[i])
        x = cache.inputs[i]
        start = offsets[i]
        nw = s.output_dim * s.input_dim
        if dz.ndim == 1:
            grads[start : start + nw].reshape(s.output_dim, s.input_dim)[...] = dz[:, None] * x
            grads[start + nw : start + nw + s.output_dim] = dz
        else:
            grads[start : start + nw] = (dz.T @ x).ravel()
            grads[start + nw : start + nw + s.output_dim] = dz.sum(axis=0)
        if i:
            g = dz @ model.weights[i]
    return grads


def input_gradient(model: MlpModel, cache: ForwardCache, output_gradient: np.ndarray) -> np.ndarray:
    """dLoss/dInput; used when a network is one stage of a larger computation."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise UsageError("forward cache does not belong to the current model parameters")
    g = np.asarray(output_gradient, dtype=np.float64)
    for i in range(len(model.specs) - 1, -1, -1):
        s = model.specs[i]
        g = (g * activation_derivative(s.activation, cache.pre[i], cache.post[i])) @ model.weights[i]
    return g


def _layer_offsets(specs) -> list[int]:
    out, offset = [], 0
    for s in specs:
        out.append(offset)
        offset += s.n_params
    return out


def rmse_loss(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``sqrt(mean((y - t)^2) + 1e-12)`` and its gradient w.r.t. ``y``."""
    diff = np.asarray(y, dtype=np.float64) - target
    loss = math.sqrt(float(np.mean(diff * diff)) + RMSE_EPS)
    return loss, diff / (diff.size * loss)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    l2_coefficient: float = 0.0
    step_count: int = 0
    first_moment: np.ndarray | None = field(default=None, repr=False)
    second_moment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.l2_coefficient < 0:
            raise ConfigurationError("l2_coefficient must be >= 0")

    @classmethod
    def for_model(cls, model: MlpModel, **kwargs) -> "AdamState":
        return cls(first_moment=np.zeros(model.n_params), second_moment=np.zeros(model.n_params), **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(
            self.learning_rate, self.beta1, self.beta2, self.eps_hat, self.l2_coefficient, self.step_count,
            None if self.first_moment is None else self.first_moment.copy(),
            None if self.second_moment is None else self.second_moment.copy(),
        )


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, decay, beta1, beta2, alpha, eps):
    for i in range(p.size):
        gi = g[i] + decay[i] * p[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        p[i] -= alpha * m[i] / (math.sqrt(v[i]) + eps)


def adam_step(state: AdamState, model: MlpModel, gradients: np.ndarray) -> tuple[AdamState, MlpModel]:
    """One bias-corrected Adam update, applied in place.

    L2 regularisation enters the gradient (``g + l2 * w``) before the moment
    update and covers weight entries only, never biases. Returns the same
    ``(state, model)`` objects for chaining.
    """
    g = np.asarray(gradients, dtype=np.float64)
    if g.shape != model.params.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {model.params.shape}")
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient passed to adam_step")
    if state.first_moment is None:
        state.first_moment = np.zeros_like(model.params)
        state.second_moment = np.zeros_like(model.params)
    elif state.first_moment.shape != model.params.shape:
        raise ShapeError("optimizer moments do not match the model")
    state.step_count += 1
    t = state.step_count
    # lr * m_hat / (sqrt(v_hat) + eps) with both bias corrections folded into scalars
    c2 = math.sqrt(1.0 - state.beta2**t)
    alpha = state.learning_rate * c2 / (1.0 - state.beta1**t)
    eps = state.eps_hat * c2
    decay = _decay_vector(model, state.l2_coefficient)
    _adam_kernel(model.params, g, state.first_moment, state.second_moment, decay,
                 state.beta1, state.beta2, alpha, eps)
    model.version += 1
    return state, model


def _decay_vector(model: MlpModel, l2: float) -> np.ndarray:
    cached = getattr(model, "_decay", None)
    if cached is None or cached[0] != l2:
        cached = (l2, model.weight_mask * float(l2))
        model._decay = cached
    return cached[1]


def flatten(model: MlpModel) -> np.ndarray:
    return model.params.copy()


def unflatten(values: np.ndarray, specs: Sequence[LayerSpec]) -> MlpModel:
    values = np.asarray(values, dtype=np.float64)
    n = param_count(specs)
    if values.ndim != 1 or values.size != n:
        raise ShapeError(f"flat vector of length {values.size} does not fit {n} parameters")
    return MlpModel(specs, values)
