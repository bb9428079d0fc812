"""Actor-critic network with a shared backbone and categorical policy."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .core import ShapeError, Tensor
from .layers import (
    BatchNorm,
    Dropout,
    Eval,
    Layer,
    Linear,
    Mode,
    ReLU,
    Sequential,
    Tanh,
    Train,
    set_mode,
)

CHECKPOINT_VERSION = 1


@dataclass
class CategoricalDistribution:
    """Batch of categorical distributions parameterised by logits."""

    logits: Tensor
    log_probs: Tensor

    @classmethod
    def from_logits(cls, logits) -> "CategoricalDistribution":
        logits = core.as_tensor(logits)
        if logits.ndim == 1:
            logits = core.reshape(logits, (1, logits.shape[0]))
        return cls(logits, core.log_softmax(logits, axis=-1))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    @property
    def n_actions(self) -> int:
        return self.logits.shape[-1]

    def __len__(self) -> int:
        return self.logits.shape[0]


def sample(dist: CategoricalDistribution, rng: np.random.Generator) -> np.ndarray:
    """Draw one action per row by inverse-CDF sampling."""
    cdf = np.cumsum(dist.probs, axis=-1)
    u = rng.random((len(dist), 1)) * cdf[:, -1:]
    actions = (u >= cdf).sum(axis=-1)
    return np.minimum(actions, dist.n_actions - 1)


def log_prob(dist: CategoricalDistribution, actions) -> Tensor:
    actions = np.atleast_1d(np.asarray(actions))
    if actions.shape[0] != len(dist):
        raise ShapeError("one action per distribution row is required")
    if np.any(actions < 0) or np.any(actions >= dist.n_actions) or not np.issubdtype(actions.dtype, np.integer):
        raise IndexError(f"action out of range [0, {dist.n_actions})")
    onehot = np.zeros(dist.log_probs.shape)
    onehot[np.arange(len(actions)), actions] = 1.0
    return core.sum_(dist.log_probs * onehot, axis=-1)


def entropy(dist: CategoricalDistribution) -> Tensor:
    p = core.exp(dist.log_probs)
    return core.neg(core.sum_(p * dist.log_probs, axis=-1))


class ActorCritic:
    """Shared backbone feeding a linear actor head and a linear value head.

    Actor and critic share every backbone layer, including BatchNorm running
    statistics.
    """

    def __init__(self, backbone: Sequential, actor_head: Linear, value_head: Linear,
                 obs_dim: int, n_actions: int, config: dict | None = None):
        self.backbone = backbone
        self.actor_head = actor_head
        self.value_head = value_head
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.config = dict(config or {})
        self.mode = Train

    def modules(self):
        yield from self.backbone.modules()
        yield self.actor_head
        yield self.value_head

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.actor_head.parameters() + self.value_head.parameters()

    def mode_dependent_layers(self) -> list[Layer]:
        return [m for m in self.modules() if m.mode_dependent]

    @property
    def has_mode_dependent_layers(self) -> bool:
        return bool(self.mode_dependent_layers())

    def forward(self, obs, mode: Mode) -> tuple[CategoricalDistribution, Tensor]:
        arr = np.asarray(obs.data if isinstance(obs, Tensor) else obs, dtype=np.float64)
        x = Tensor(arr.reshape(arr.shape[0], -1))
        if x.shape[1] != self.obs_dim:
            raise ShapeError(f"observation has {x.shape[1]} features, network expects {self.obs_dim}")
        h = self.backbone.forward(x, mode)
        logits = self.actor_head.forward(h, mode)
        values = core.reshape(self.value_head.forward(h, mode), (x.shape[0],))
        return CategoricalDistribution.from_logits(logits), values

    def __call__(self, obs):
        return self.forward(obs, self.mode)

    # --- state ---------------------------------------------------------

    def snapshot(self) -> dict:
        """Copy of all mutable non-parameter state (running stats, dropout RNG)."""
        state = {}
        for i, m in enumerate(self.modules()):
            if isinstance(m, BatchNorm):
                state[i] = ("bn", m.running_mean.copy(), m.running_var.copy())
            elif isinstance(m, Dropout):
                state[i] = ("dropout", m.rng.bit_generator.state)
        return state

    def restore(self, state: dict) -> None:
        for i, m in enumerate(self.modules()):
            if i not in state:
                continue
            entry = state[i]
            if entry[0] == "bn":
                m.running_mean = entry[1].copy()
                m.running_var = entry[2].copy()
            else:
                m.rng.bit_generator.state = entry[1]

    def buffers_hash(self) -> str:
        h = hashlib.sha256()
        for m in self.modules():
            for name, arr in sorted(m.buffers().items()):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy_params(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_params(self, arrays) -> None:
        for p, a in zip(self.parameters(), arrays, strict=True):
            p.data = np.array(a, dtype=np.float64)

    # --- checkpoint ----------------------------------------------------

    def save(self, path) -> None:
        arrays = {f"param_{i}": p.data for i, p in enumerate(self.parameters())}
        for i, m in enumerate(self.modules()):
            for name, arr in m.buffers().items():
                arrays[f"buffer_{i}_{name}"] = arr
        rng_state = {str(i): m.rng.bit_generator.state for i, m in enumerate(self.modules())
                     if isinstance(m, Dropout)}
        meta = {
            "version": CHECKPOINT_VERSION,
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "config": self.config,
            "topology": [m.spec() for m in self.modules()],
            "dropout_rng": rng_state,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ActorCritic":
        with np.load(Path(path)) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            net = build_network(meta["obs_dim"], meta["n_actions"], **meta["config"])
            if [m.spec() for m in net.modules()] != meta["topology"]:
                raise ValueError("checkpoint topology does not match its config")
            net.load_params([z[f"param_{i}"] for i in range(len(net.parameters()))])
            for i, m in enumerate(net.modules()):
                if isinstance(m, BatchNorm):
                    m.running_mean = z[f"buffer_{i}_running_mean"].copy()
                    m.running_var = z[f"buffer_{i}_running_var"].copy()
                elif isinstance(m, Dropout):
                    m.rng.bit_generator.state = meta["dropout_rng"][str(i)]
        return net


def forward(net: ActorCritic, obs, mode: Mode):
    return net.forward(obs, mode)


def build_network(
    obs_dim: int,
    n_actions: int,
    hidden: tuple[int, ...] | list[int] = (64, 64),
    batchnorm: bool = False,
    dropout: float = 0.0,
    momentum: float = 0.1,
    activation: str = "tanh",
    seed: int = 0,
    actor_scale: float = 0.01,
    value_scale: float = 0.1,
) -> ActorCritic:
    """Linear -> [BatchNorm] -> act -> [Dropout] per hidden layer, then two heads."""
    rng = np.random.default_rng(seed)
    act = {"tanh": Tanh, "relu": ReLU}[activation]
    layers: list[Layer] = []
    width = obs_dim
    for i, h in enumerate(hidden):
        layers.append(Linear(width, h, rng))
        if batchnorm:
            layers.append(BatchNorm(h, momentum=momentum))
        layers.append(act())
        if dropout > 0:
            layers.append(Dropout(dropout, seed=int(rng.integers(2**31))))
        width = h
    actor = Linear(width, n_actions, rng, scale=actor_scale)
    value = Linear(width, 1, rng, scale=value_scale)
    config = dict(hidden=list(hidden), batchnorm=batchnorm, dropout=dropout, momentum=momentum,
                  activation=activation, seed=seed, actor_scale=actor_scale, value_scale=value_scale)
    net = ActorCritic(Sequential(*layers), actor, value, obs_dim, n_actions, config)
    return set_mode(net, Eval)
