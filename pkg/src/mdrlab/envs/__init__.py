"""Desk-scale environments and a state-distribution probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gridgame import GridGameEnv, Level, generate_level
from .patchloc import PatchLocEnv, scripted_action


class ConstantEnv:
    """Control environment: the observation never changes."""

    n_actions = 2

    def __init__(self, obs_dim: int = 4, episode_length: int = 10, value: float = 0.5, seed: int = 0):
        self.obs_dim = obs_dim
        self.episode_length = episode_length
        self.value = value
        self.t = 0

    @property
    def observation_shape(self):
        return (self.obs_dim,)

    def reset(self, seed: int | None = None):
        self.t = 0
        return np.full(self.obs_dim, self.value)

    def step(self, action: int):
        if not (0 <= int(action) < self.n_actions):
            raise ValueError(f"invalid action {action!r}")
        self.t += 1
        done = self.t >= self.episode_length
        return np.full(self.obs_dim, self.value), float(action == 1), done, {"truncated": False}


ENV_REGISTRY: dict[str, Callable] = {
    "patchloc": PatchLocEnv,
    "gridgame": GridGameEnv,
    "constant": ConstantEnv,
}


def make_env(env_id: str, **overrides):
    try:
        cls = ENV_REGISTRY[env_id]
    except KeyError:
        raise ValueError(f"unknown env id {env_id!r}; known: {sorted(ENV_REGISTRY)}") from None
    return cls(**overrides)


@dataclass
class ProbeSummary:
    mean: np.ndarray
    var: np.ndarray
    n_states: int
    episode_means: np.ndarray  # (episodes, features), for clustered standard errors

    def drift_z(self, other: "ProbeSummary") -> float:
        """RMS over features of the mean difference in units of its standard error.

        Standard errors are computed from per-episode means, so within-episode
        correlation does not inflate the statistic. Near 1 under no drift.
        """
        se2 = (self.episode_means.var(axis=0, ddof=1) / len(self.episode_means)
               + other.episode_means.var(axis=0, ddof=1) / len(other.episode_means))
        diff2 = (self.mean - other.mean) ** 2
        ok = se2 > 0
        if not ok.any():
            return 0.0 if np.allclose(diff2, 0) else float("inf")
        return float(np.sqrt(np.mean(diff2[ok] / se2[ok])))


def distribution_probe(env, policy: Callable, seeds, n_states: int) -> ProbeSummary:
    """Roll ``policy(obs, env, rng) -> action`` over episodes seeded by ``seeds``.

    Episodes are drawn from ``seeds`` in order (cycling) until ``n_states``
    observations are recorded.
    """
    seeds = list(seeds)
    rows = []
    ep_means = []
    i = 0
    while len(rows) < n_states:
        seed = int(seeds[i % len(seeds)])
        rng = np.random.default_rng([seed, i])
        obs = env.reset(seed)
        ep = []
        done = False
        while not done and len(rows) + len(ep) < n_states:
            flat = np.asarray(obs, dtype=np.float64).reshape(-1)
            ep.append(flat)
            obs, _, done, _ = env.step(policy(obs, env, rng))
        rows.extend(ep)
        ep_means.append(np.mean(ep, axis=0))
        i += 1
    X = np.asarray(rows)
    return ProbeSummary(X.mean(axis=0), X.var(axis=0), len(X), np.asarray(ep_means))


def random_policy(obs, env, rng) -> int:
    return int(rng.integers(env.n_actions))


__all__ = [
    "ConstantEnv",
    "ENV_REGISTRY",
    "GridGameEnv",
    "Level",
    "PatchLocEnv",
    "ProbeSummary",
    "distribution_probe",
    "generate_level",
    "make_env",
    "random_policy",
    "scripted_action",
]
