"""Fully-connected network: initialization, forward pass and backprop.

Weights are stored ``out x in`` so a layer computes ``Z = A @ W.T + b``.
Hidden layers share one activation and may use inverted dropout in train
mode; the output layer is always affine with an identity activation, the
loss module owns the link function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, ShapeMismatch, StaleCache

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

ACTIVATIONS = ("selu", "relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_dim: int
    hidden: tuple = (50, 50)
    activation: str = "selu"
    bias: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigInvalid(f"hidden layer widths must be >= 1, got {self.hidden}")
        if self.activation not in ACTIVATIONS:
            raise ConfigInvalid(
                f"activation must be one of {ACTIVATIONS}, got {self.activation!r}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigInvalid(f"dropout must be in [0, 1), got {self.dropout}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigInvalid("input_dim and output_dim must be >= 1")

    @property
    def layer_dims(self) -> list:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[1:], dims[:-1]))  # (out, in) per layer


@dataclass
class Network:
    config: NetworkConfig
    weights: list
    biases: list  # None where a hidden layer has no bias

    def __post_init__(self):
        dims = self.config.layer_dims
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise ShapeMismatch("layer count does not match the configuration")
        for i, (W, b, shape) in enumerate(zip(self.weights, self.biases, dims)):
            if W.shape != shape:
                raise ShapeMismatch(f"layer {i}: weight shape {W.shape}, expected {shape}")
            if b is not None and b.shape != (shape[0],):
                raise ShapeMismatch(f"layer {i}: bias shape {b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list:
        """Flat list of parameter arrays, in layer order (W, then b if present)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            if b is not None:
                out.append(b)
        return out

    def set_parameters(self, arrays) -> None:
        it = iter(arrays)
        for i in range(self.n_layers):
            self.weights[i] = np.array(next(it), dtype=np.float64)
            if self.biases[i] is not None:
                self.biases[i] = np.array(next(it), dtype=np.float64)

    def copy(self) -> "Network":
        return Network(
            self.config,
            [W.copy() for W in self.weights],
            [None if b is None else b.copy() for b in self.biases],
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)        # input to each layer
    pre: list = field(default_factory=list)           # pre-activations, hidden layers
    masks: list = field(default_factory=list)         # dropout masks or None


def init_network(config: NetworkConfig, rng: np.random.Generator) -> Network:
    """LeCun-normal weights (variance 1/fan_in), zero biases."""
    weights, biases = [], []
    n_hidden = len(config.hidden)
    for i, (fan_out, fan_in) in enumerate(config.layer_dims):
        weights.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in)))
        has_bias = config.bias or i == n_hidden
        biases.append(np.zeros(fan_out) if has_bias else None)
    return Network(config, weights, biases)


def activation_eval(kind: str, x):
    """Return ``(value, derivative)`` of a hidden-layer activation at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "selu":
        pos = x >= 0
        ex = np.exp(np.minimum(x, 0.0))
        value = np.where(pos, SELU_LAMBDA * x, SELU_LAMBDA * SELU_ALPHA * (ex - 1.0))
        deriv = np.where(pos, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * ex)
    elif kind == "relu":
        value = np.maximum(x, 0.0)
        deriv = (x > 0).astype(np.float64)
    elif kind == "tanh":
        value = np.tanh(x)
        deriv = 1.0 - value * value
    elif kind == "sigmoid":
        value = _sigmoid(x)
        deriv = value * (1.0 - value)
    else:
        raise ConfigInvalid(f"unknown activation {kind!r}")
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(kind, z):
    if kind == "selu":
        return np.where(z >= 0, SELU_LAMBDA * z,
                        SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return _sigmoid(z)


def _activation_grad(kind, z, a):
    # a is the activation output (pre-dropout) for z
    if kind == "selu":
        return np.where(z >= 0, SELU_LAMBDA, a + SELU_LAMBDA * SELU_ALPHA)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def forward(net: Network, X, mode: str = "eval", rng=None, masks=None):
    """Run the network on a batch.

    In ``"train"`` mode with dropout > 0, each hidden activation is multiplied
    by a fresh inverted-dropout mask drawn from ``rng`` (or by ``masks`` when
    given, to replay a previous pass). Returns ``(output, cache)``.
    """
    X = np.asarray(X, dtype=np.float64)
    cfg = net.config
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ShapeMismatch(f"expected input of width {cfg.input_dim}, got shape {X.shape}")
    p = cfg.dropout
    use_dropout = mode == "train" and (p > 0 or masks is not None)
    if use_dropout and masks is None and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    cache = ForwardCache()
    a = X
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(a)
        z = a @ W.T
        if b is not None:
            z += b
        if i == last:
            return z, cache
        cache.pre.append(z)
        a = _activate(cfg.activation, z)
        mask = None
        if use_dropout:
            if masks is not None:
                mask = masks[i]
            else:
                keep = 1.0 - p
                mask = (rng.random(a.shape) < keep) / keep
            if mask is not None:
                a = a * mask
        cache.masks.append(mask)
    raise AssertionError("unreachable")


def backward(net: Network, cache: ForwardCache, grad_output) -> list:
    """Reverse-mode gradients for every layer as ``[(dW, db), ...]``.

    ``db`` is None for layers without bias. Gradients are summed over the
    batch; scale ``grad_output`` to get a mean.
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if len(cache.inputs) != net.n_layers or len(cache.pre) != net.n_layers - 1:
        raise StaleCache("cache does not belong to this network")
    out_shape = (cache.inputs[-1].shape[0], net.config.output_dim)
    if g.shape != out_shape:
        raise ShapeMismatch(f"grad_output shape {g.shape}, expected {out_shape}")
    kind = net.config.activation
    grads = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        W, b = net.weights[i], net.biases[i]
        a_in = cache.inputs[i]
        if a_in.shape[1] != W.shape[1]:
            raise StaleCache(f"layer {i}: cached input width does not match weights")
        dW = g.T @ a_in
        db = g.sum(axis=0) if b is not None else None
        grads[i] = (dW, db)
        if i == 0:
            break
        g = g @ W
        mask = cache.masks[i - 1]
        if mask is not None:
            g = g * mask
        z = cache.pre[i - 1]
        # a_in is post-dropout; recover the raw activation when masked
        a = _activate(kind, z) if mask is not None else a_in
        g = g * _activation_grad(kind, z, a)
    return grads


def flatten_grads(net: Network, grads) -> list:
    out = []
    for (dW, db), b in zip(grads, net.biases):
        out.append(dW)
        if b is not None:
            out.append(db)
    return out
