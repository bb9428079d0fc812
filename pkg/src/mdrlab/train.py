"""PPO objective and the two-phase (standard / rectification) update loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .agent import ActorCritic, entropy, log_prob
from .core import AdamState, NonFiniteError, Tape
from .layers import Eval, Mode, Train, set_mode
from .rollout import RolloutBuffer, recompute_targets

LOG_RATIO_CLAMP = 20.0


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    vf_coef: float = 1.0
    ent_coef: float = 1e-4
    minibatch_size: int = 128
    epochs: int = 3
    lr: float = 3e-4
    weight_decay: float = 1e-4
    gamma: float = 0.99
    lam: float = 0.95
    max_grad_norm: float = 1.0
    recompute_period: int = 3

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.vf_coef < 0 or self.ent_coef < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.minibatch_size < 2:
            raise ValueError("minibatch_size must be at least 2")
        if self.recompute_period < 1:
            raise ValueError("recompute_period must be at least 1")


@dataclass(frozen=True)
class MdrSchedule:
    """``alpha1`` epochs in Train mode then ``alpha2`` epochs in Eval mode, ``rounds`` times."""

    alpha1: float
    alpha2: float
    rounds: int = 1

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("phase coefficients must be non-negative")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")

    @classmethod
    def standard(cls, epochs: float) -> "MdrSchedule":
        return cls(epochs, 0)

    @classmethod
    def eval_only(cls, epochs: float) -> "MdrSchedule":
        return cls(0, epochs)

    @classmethod
    def split(cls, epochs: int, alpha1: int, alpha2: int) -> "MdrSchedule":
        """Split ``epochs`` into whole rounds of (alpha1, alpha2)."""
        per_round = alpha1 + alpha2
        if per_round <= 0 or epochs % per_round:
            raise ValueError(f"{epochs} epochs cannot be split into rounds of MDR({alpha1},{alpha2})")
        return cls(alpha1, alpha2, epochs // per_round)

    @property
    def uses_train_mode(self) -> bool:
        return self.alpha1 > 0

    @property
    def total_epochs(self) -> float:
        return self.rounds * (self.alpha1 + self.alpha2)

    def update_plan(self, dataset_size: int, minibatch_size: int) -> list[tuple[Mode, int]]:
        per_epoch = dataset_size // minibatch_size
        plan = []
        for _ in range(self.rounds):
            plan.append((Train, int(math.floor(self.alpha1 * per_epoch))))
            plan.append((Eval, int(math.floor(self.alpha2 * per_epoch))))
        return plan

    def __str__(self) -> str:
        return f"MDR({self.alpha1:g},{self.alpha2:g})x{self.rounds}"


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    recomputes: int = 0

    def count(self, phase: str) -> int:
        return sum(1 for e in self.entries if e["phase"] == phase)

    def mean(self, key: str, phase: str | None = None) -> float:
        vals = [e[key] for e in self.entries if phase is None or e["phase"] == phase]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def phases(self) -> list[str]:
        return [e["phase"] for e in self.entries]


class TrainingError(RuntimeError):
    def __init__(self, phase: str, update: int, cause: Exception):
        self.phase, self.update, self.cause = phase, update, cause
        super().__init__(f"{phase} phase, update {update}: {cause}")


def clipped_surrogate(ratio, advantages, eps: float) -> core.Tensor:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio = core.as_tensor(ratio)
    adv = core.as_tensor(advantages)
    return core.minimum(ratio * adv, core.clamp(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_loss(mb: dict, net: ActorCritic, config: PpoConfig, mode: Mode):
    """Total loss ``-L_clip + c1 L_vf - c2 S`` and its components.

    The ratio is taken against the stored eval-mode log-probabilities, so a
    Train-mode call sees the perturbed ratio and an Eval-mode call the plain one.
    """
    for key in ("advantages", "targets", "log_probs_old"):
        if mb.get(key) is None:
            raise ValueError(f"minibatch is missing {key!r}")
    dist, values = net.forward(mb["obs"], mode)
    logp = log_prob(dist, mb["actions"])
    log_ratio = core.clamp(logp - mb["log_probs_old"], -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    ratio = core.exp(log_ratio)
    clip_obj = core.mean(clipped_surrogate(ratio, mb["advantages"], config.clip_eps))
    value_loss = core.mean(core.square(values - mb["targets"]))
    ent = core.mean(entropy(dist))
    total = core.neg(clip_obj) + config.vf_coef * value_loss - config.ent_coef * ent
    r = ratio.data
    components = {
        "loss": float(total.data),
        "clip_objective": float(clip_obj.data),
        "value_loss": float(value_loss.data),
        "entropy": float(ent.data),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > config.clip_eps)),
        "ratio_mean": float(r.mean()),
        "approx_kl": float(np.mean((r - 1.0) - np.log(r))),
    }
    return total, components


def make_optimizer(config: PpoConfig) -> AdamState:
    return AdamState(lr=config.lr, weight_decay=config.weight_decay)


def update(mb: dict, net: ActorCritic, config: PpoConfig, mode: Mode, opt: AdamState) -> dict:
    params = net.parameters()
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss, comps = ppo_loss(mb, net, config, mode)
    core.backward(tape, loss)
    grads = [p.grad for p in params]
    comps["grad_norm"] = core.global_norm(grads)
    grads = core.clip_grad_global_norm(grads, config.max_grad_norm)
    core.adam_step(params, grads, opt)
    return comps


def train_step(buf: RolloutBuffer, net: ActorCritic, config: PpoConfig, schedule: MdrSchedule,
               opt: AdamState, rng: np.random.Generator) -> TrainLog:
    """Run the schedule's Train-mode then Eval-mode updates over ``buf``.

    Minibatches come from a stream of per-epoch permutations (partial batch
    dropped). Advantages and targets are recomputed every
    ``config.recompute_period`` epochs' worth of updates, counted across phases.
    The network is left in Eval mode.
    """
    if buf.advantages is None:
        raise ValueError("buffer has no advantages; run compute_gae first")
    m = config.minibatch_size
    per_epoch = buf.size // m
    if per_epoch == 0:
        raise ValueError(f"buffer of {buf.size} transitions is smaller than one minibatch of {m}")
    log = TrainLog()
    perm = None
    u = 0
    recompute_every = config.recompute_period * per_epoch
    for mode, n_updates in schedule.update_plan(buf.size, m):
        if n_updates == 0:
            continue
        set_mode(net, mode)
        phase = "standard" if mode is Train else "rectification"
        for _ in range(n_updates):
            if u > 0 and u % recompute_every == 0:
                recompute_targets(buf, net, config.gamma, config.lam)
                log.recomputes += 1
            slot = u % per_epoch
            if slot == 0:
                perm = rng.permutation(buf.size)
            idx = perm[slot * m:(slot + 1) * m]
            try:
                comps = update(buf.minibatch(idx), net, config, mode, opt)
            except NonFiniteError as exc:
                set_mode(net, Eval)
                raise TrainingError(phase, u, exc) from exc
            comps["phase"] = phase
            comps["update"] = u
            log.entries.append(comps)
            u += 1
    set_mode(net, Eval)
    return log


def random_minibatch(rng: np.random.Generator, n: int, obs_dim: int, n_actions: int) -> dict:
    """Synthetic minibatch with valid old log-probabilities, for gradient checks."""
    old = rng.dirichlet(np.ones(n_actions), n)
    actions = rng.integers(0, n_actions, n)
    return {
        "obs": rng.normal(size=(n, obs_dim)),
        "actions": actions,
        "log_probs_old": np.log(old[np.arange(n), actions]),
        "advantages": rng.normal(size=n),
        "targets": rng.normal(size=n),
    }


def ppo_gradcheck_suite(n_cases: int = 20, seed: int = 0, h: float = 1e-4, rtol: float = 1e-4,
                        atol: float = 1e-6) -> list[tuple[dict, core.GradcheckResult]]:
    """Finite-difference check of ``ppo_loss`` on small random actor-critics.

    Cases cycle through plain, BatchNorm and dropout backbones, each in Train
    mode with running statistics and dropout streams restored before every
    loss evaluation.
    """
    from .agent import build_network

    rng = np.random.default_rng(seed)
    kinds = ("plain", "batchnorm", "dropout")
    out = []
    for i in range(n_cases):
        kind = kinds[i % len(kinds)]
        obs_dim = int(rng.integers(2, 6))
        n_actions = int(rng.integers(2, 5))
        hidden = tuple(int(w) for w in rng.integers(2, 6, size=int(rng.integers(1, 3))))
        net = build_network(obs_dim, n_actions, hidden=hidden, batchnorm=kind == "batchnorm",
                            dropout=0.25 if kind == "dropout" else 0.0, seed=int(rng.integers(2**31)),
                            activation="tanh", actor_scale=1.0, value_scale=1.0)
        mb = random_minibatch(rng, int(rng.integers(4, 9)), obs_dim, n_actions)
        config = PpoConfig(clip_eps=float(rng.uniform(0.1, 0.3)), ent_coef=0.01)
        snap = net.snapshot()
        res = core.gradcheck(lambda: ppo_loss(mb, net, config, Train)[0], net.parameters(), h=h,
                             rtol=rtol, atol=atol, before_eval=lambda: net.restore(snap))
        out.append(({"case": i, "kind": kind, "hidden": hidden, "obs_dim": obs_dim,
                     "n_actions": n_actions}, res))
    return out
