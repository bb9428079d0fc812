"""Trajectory collection under the eval-mode policy, GAE, and value targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Protocol

import numpy as np

from .agent import ActorCritic, sample
from .layers import Eval


class ModeError(RuntimeError):
    """Network was in the wrong Mode for the requested operation."""


class Environment(Protocol):
    n_actions: int

    @property
    def observation_shape(self) -> tuple[int, ...]: ...

    def reset(self, seed: int | None = None): ...

    def step(self, action: int): ...


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    log_prob_old: float
    reward: float
    value_old: float
    done: bool


@dataclass
class RolloutBuffer:
    """One step-k dataset, stored time-major as ``(T, n_envs, ...)``.

    ``next_values`` holds V of the true successor state (zero after a
    terminal state, V of the final observation after a truncation).
    """

    obs: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    dones: np.ndarray
    terminals: np.ndarray
    last_obs: np.ndarray
    truncated_obs: dict = field(default_factory=dict)
    step: int = 0
    episode_returns: list = field(default_factory=list)
    episode_infos: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    targets: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.actions.size

    def __len__(self) -> int:
        return self.size

    @property
    def flat_obs(self) -> np.ndarray:
        return self.obs.reshape(self.size, -1)

    def flat(self, name: str) -> np.ndarray:
        return getattr(self, name).reshape(self.size)

    def transitions(self) -> Iterator[Transition]:
        T, N = self.actions.shape
        for t in range(T):
            for n in range(N):
                yield Transition(self.obs[t, n], int(self.actions[t, n]), float(self.log_probs_old[t, n]),
                                 float(self.rewards[t, n]), float(self.values[t, n]), bool(self.dones[t, n]))

    def minibatch(self, idx: np.ndarray) -> dict:
        if self.advantages is None:
            raise ValueError("advantages have not been computed for this buffer")
        return {
            "obs": self.flat_obs[idx],
            "actions": self.flat("actions")[idx],
            "log_probs_old": self.flat("log_probs_old")[idx],
            "advantages": self.flat("advantages")[idx],
            "targets": self.flat("targets")[idx],
        }


class EnvPool:
    """Fixed set of environments stepped in env-index order."""

    def __init__(self, envs: list, seed: int = 0):
        if not envs:
            raise ValueError("an environment pool needs at least one environment")
        self.envs = list(envs)
        self.rng = np.random.default_rng([seed, 0x706F6F6C])
        seeds = self.rng.integers(2**62, size=len(envs))
        self.obs = np.stack([np.asarray(e.reset(int(s)), dtype=np.float64) for e, s in zip(self.envs, seeds)])
        self.running_returns = np.zeros(len(envs))
        self.total_steps = 0

    def __len__(self) -> int:
        return len(self.envs)

    @property
    def n_actions(self) -> int:
        return self.envs[0].n_actions


def collect(pool: EnvPool, net: ActorCritic, steps_per_env: int, step: int = 0) -> RolloutBuffer:
    """Run the eval-mode policy for ``steps_per_env`` steps in every env."""
    if net.mode is not Eval:
        raise ModeError("rollouts must be collected with the network in Eval mode")
    T, N = steps_per_env, len(pool)
    obs_shape = pool.obs.shape[1:]
    obs = np.empty((T, N) + obs_shape)
    actions = np.empty((T, N), dtype=np.int64)
    logp = np.empty((T, N))
    rewards = np.empty((T, N))
    values = np.empty((T, N))
    dones = np.zeros((T, N), dtype=bool)
    terminals = np.zeros((T, N), dtype=bool)
    truncated_obs = {}
    returns, infos = [], []
    cur = pool.obs
    for t in range(T):
        dist, v = net.forward(cur, Eval)
        a = sample(dist, pool.rng)
        obs[t] = cur
        actions[t] = a
        logp[t] = dist.log_probs.data[np.arange(N), a]
        values[t] = v.data
        nxt = np.empty_like(cur)
        for n, env in enumerate(pool.envs):
            o, r, d, info = env.step(int(a[n]))
            rewards[t, n] = r
            pool.running_returns[n] += r
            if d:
                dones[t, n] = True
                truncated = bool(info.get("truncated", False))
                terminals[t, n] = not truncated
                if truncated:
                    truncated_obs[(t, n)] = np.asarray(o, dtype=np.float64)
                returns.append(float(pool.running_returns[n]))
                infos.append(info)
                pool.running_returns[n] = 0.0
                o = env.reset(int(pool.rng.integers(2**62)))
            nxt[n] = o
        cur = nxt
        pool.total_steps += N
    pool.obs = cur
    buf = RolloutBuffer(obs, actions, logp, rewards, values, np.zeros((T, N)), dones, terminals,
                        cur.copy(), truncated_obs, step, returns, infos)
    _refresh_next_values(buf, net)
    return buf


def _eval_values(net: ActorCritic, obs: np.ndarray, chunk: int = 1024) -> np.ndarray:
    flat = obs.reshape(len(obs), -1)
    out = [net.forward(flat[i:i + chunk], Eval)[1].data for i in range(0, len(flat), chunk)]
    return np.concatenate(out) if out else np.empty(0)


def _refresh_next_values(buf: RolloutBuffer, net: ActorCritic) -> None:
    T, N = buf.actions.shape
    nv = np.empty((T, N))
    nv[:-1] = buf.values[1:]
    nv[-1] = _eval_values(net, buf.last_obs)
    if buf.truncated_obs:
        keys = sorted(buf.truncated_obs)
        tv = _eval_values(net, np.stack([buf.truncated_obs[k] for k in keys]))
        for (t, n), v in zip(keys, tv):
            nv[t, n] = v
    nv[buf.terminals] = 0.0
    buf.next_values = nv


def gae_from_next_values(rewards, values, next_values, dones, gamma: float, lam: float) -> np.ndarray:
    """Backward GAE recursion over time axis 0; ``dones`` cut the sum."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == next_values.shape == dones.shape):
        raise ValueError("rewards, values, next_values, dones must share one shape")
    if not (0 <= gamma <= 1 and 0 <= lam <= 1):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    delta = rewards + gamma * next_values - values
    adv = np.zeros_like(delta)
    running = np.zeros_like(delta[0]) if delta.ndim > 1 else 0.0
    for t in range(len(delta) - 1, -1, -1):
        running = delta[t] + gamma * lam * (1.0 - dones[t]) * running
        adv[t] = running
    return adv


def gae(rewards, values, dones, gamma: float, lam: float, bootstrap=0.0) -> tuple[np.ndarray, np.ndarray]:
    """GAE for a single trajectory where ``done`` marks a true terminal.

    ``values`` has one entry per step; ``bootstrap`` is V of the state after
    the last step. Returns (advantages, value targets).
    """
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if len(values) != len(np.asarray(rewards)) or len(dones) != len(values):
        raise ValueError("length mismatch between rewards, values and dones")
    nxt = np.append(values[1:], bootstrap).astype(np.float64)
    nxt = np.where(dones, 0.0, nxt)
    adv = gae_from_next_values(rewards, values, nxt, dones, gamma, lam)
    return adv, adv + values


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    adv = gae_from_next_values(buf.rewards, buf.values, buf.next_values, buf.dones, gamma, lam)
    buf.advantages = adv
    buf.targets = adv + buf.values
    return buf


def normalize(x: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / max(x.std(), floor)


def normalize_advantages(buf: RolloutBuffer) -> RolloutBuffer:
    if buf.advantages is None:
        raise ValueError("compute_gae must run before normalize_advantages")
    buf.advantages = normalize(buf.advantages)
    return buf


def recompute_targets(buf: RolloutBuffer, net: ActorCritic, gamma: float, lam: float,
                      normalize_adv: bool = True) -> RolloutBuffer:
    """Re-evaluate values under current weights (Eval mode) and redo GAE.

    ``log_probs_old`` is left untouched: it stays the ratio anchor.
    """
    T, N = buf.actions.shape
    buf.values = _eval_values(net, buf.flat_obs).reshape(T, N)
    _refresh_next_values(buf, net)
    compute_gae(buf, gamma, lam)
    if normalize_adv:
        normalize_advantages(buf)
    return buf
