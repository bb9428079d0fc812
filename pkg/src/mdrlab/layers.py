"""Network layers with explicit train/eval semantics."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import core
from .core import ShapeError, Tensor


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


Train = Mode.TRAIN
Eval = Mode.EVAL


def _check_mode(mode) -> Mode:
    if not isinstance(mode, Mode):
        raise TypeError(f"expected a Mode, got {mode!r}")
    return mode


class Layer:
    """Base class. ``mode_dependent`` layers compute differently per Mode."""

    mode_dependent = False

    def __init__(self):
        self.mode = Train

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def spec(self) -> dict:
        return {"type": type(self).__name__}


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 init: str = "he_uniform", scale: float = 1.0):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        if init == "zeros":
            w = np.zeros((in_features, out_features))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = np.sqrt(6.0 / in_features)
            w = rng.uniform(-bound, bound, size=(in_features, out_features)) * scale
        # stored (in, out) so forward is x @ W; "weight rows" = out_features of the affine map
        self.weight = Tensor(w, requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name="bias")

    def forward(self, x: Tensor, mode: Mode = Train) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (batch, {self.in_features}), got {x.shape}")
        return core.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]

    def spec(self):
        return {"type": "Linear", "in": self.in_features, "out": self.out_features}


def linear_forward(x, layer: Linear) -> Tensor:
    return layer.forward(core.as_tensor(x))


class Tanh(Layer):
    def forward(self, x, mode=Train):
        return core.tanh(x)


class ReLU(Layer):
    def forward(self, x, mode=Train):
        return core.relu(x)


@dataclass
class BatchStats:
    mu_B: np.ndarray
    var_B: np.ndarray


class BatchNorm(Layer):
    """1-D batch normalisation over the batch axis.

    Train mode normalises with the biased batch statistics and folds them into
    the running statistics with momentum ``M``; Eval mode uses the running
    statistics and leaves them untouched.
    """

    mode_dependent = True

    def __init__(self, num_features: int, momentum: float = 0.1, eta: float = 1e-5):
        super().__init__()
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if eta <= 0:
            raise ValueError("eta must be positive")
        self.num_features = num_features
        self.momentum = momentum
        self.eta = eta
        self.gamma = Tensor(np.ones(num_features), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(num_features), requires_grad=True, name="beta")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.last_stats: BatchStats | None = None

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return batchnorm_forward(x, self, mode)[0]

    def normalize(self, x: Tensor, mode: Mode) -> Tensor:
        """Pre-affine output x_hat (updates running stats in Train mode)."""
        return _batchnorm(x, self, mode, affine=False)[0]

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self):
        return {"type": "BatchNorm", "features": self.num_features, "momentum": self.momentum,
                "eta": self.eta}


def _batchnorm(x: Tensor, layer: BatchNorm, mode: Mode, affine: bool):
    mode = _check_mode(mode)
    x = core.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.num_features:
        raise ShapeError(f"BatchNorm expects (batch, {layer.num_features}), got {x.shape}")
    if mode is Train:
        m = x.shape[0]
        if m < 2:
            raise ValueError("BatchNorm in Train mode needs a batch of at least 2")
        mu = core.mean(x, axis=0, keepdims=True)
        var = core.variance(x, axis=0, keepdims=True)
        xhat = (x - mu) / core.sqrt(var, eps=layer.eta)
        stats = BatchStats(mu.data.reshape(-1).copy(), var.data.reshape(-1).copy())
        M = layer.momentum
        layer.running_mean = (1.0 - M) * layer.running_mean + M * stats.mu_B
        layer.running_var = (1.0 - M) * layer.running_var + M * stats.var_B
        layer.last_stats = stats
    else:
        mu = layer.running_mean
        denom = np.sqrt(layer.running_var + layer.eta)
        xhat = (x - mu) / denom
        stats = BatchStats(layer.running_mean.copy(), layer.running_var.copy())
    if affine:
        return xhat * layer.gamma + layer.beta, stats
    return xhat, stats


def batchnorm_forward(x, layer: BatchNorm, mode: Mode) -> tuple[Tensor, BatchStats]:
    return _batchnorm(core.as_tensor(x), layer, mode, affine=True)


class Dropout(Layer):
    """Inverted dropout; the mask stream is private to the layer and seeded."""

    mode_dependent = True

    def __init__(self, p: float = 0.1, seed: int = 0):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return dropout_forward(x, self, mode)

    def spec(self):
        return {"type": "Dropout", "p": self.p}


def dropout_forward(x, layer: Dropout, mode: Mode) -> Tensor:
    mode = _check_mode(mode)
    x = core.as_tensor(x)
    if mode is Eval or layer.p == 0:
        return x
    keep = layer.rng.random(x.shape) >= layer.p
    return x * (keep / (1.0 - layer.p))


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def modules(self):
        for layer in self.layers:
            if isinstance(layer, Sequential):
                yield from layer.modules()
            else:
                yield layer


def set_mode(network, mode: Mode):
    """Put every layer of ``network`` into ``mode`` and return the network."""
    mode = _check_mode(mode)
    network.mode = mode
    for layer in network.modules():
        layer.mode = mode
    return network
