"""Procedurally generated side-scrolling corridor with gaps and a goal coin."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

LEFT, RIGHT, JUMP, NOOP = range(4)
VIEW_BEHIND = 2
VIEW_AHEAD = 7
AIR_TIME = 2


@dataclass(frozen=True)
class Level:
    seed: int
    ground: np.ndarray  # bool per cell; False = gap
    background: np.ndarray

    @property
    def length(self) -> int:
        return len(self.ground)

    def layout_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.length).tobytes())
        h.update(self.ground.astype(np.uint8).tobytes())
        h.update(self.background.tobytes())
        return h.hexdigest()


def generate_level(seed: int, min_length: int = 20, max_length: int = 32, max_gaps: int = 4,
                   n_background: int = 8, gaps: bool = True) -> Level:
    """Pure function of ``seed``: gap layout plus a per-level background code."""
    rng = np.random.default_rng([seed, 0x6C65])
    length = int(rng.integers(min_length, max_length + 1))
    ground = np.ones(length, dtype=bool)
    if gaps:
        pos = 4
        for _ in range(int(rng.integers(1, max_gaps + 1))):
            pos += int(rng.integers(2, 7))
            width = int(rng.integers(1, AIR_TIME + 1))
            if pos + width >= length - 2:
                break
            ground[pos:pos + width] = False
            pos += width
    background = rng.uniform(-1, 1, size=n_background)
    return Level(seed, ground, background)


class GridGameEnv:
    """Four actions: left, right, jump, no-op (keeps current velocity).

    Falling into a gap ends the episode with no further reward; reaching the
    last cell pays 1. Every newly reached cell pays a small shaping bonus.
    """

    n_actions = 4

    def __init__(self, horizon: int = 1000, progress_bonus: float = 0.01,
                 levels: list[int] | None = None, seed: int = 0, gaps: bool = True,
                 n_background: int = 8):
        self.horizon = horizon
        self.progress_bonus = progress_bonus
        self.levels = list(levels) if levels is not None else None
        self.gaps = gaps
        self.n_background = n_background
        self._seeds = np.random.default_rng(seed)
        self.level: Level | None = None

    @property
    def observation_shape(self) -> tuple[int]:
        return (2 * (VIEW_BEHIND + VIEW_AHEAD + 1) + (AIR_TIME + 1) + 3 + self.n_background,)

    def reset(self, seed: int | None = None):
        if seed is None:
            if self.levels:
                seed = int(self.levels[int(self._seeds.integers(len(self.levels)))])
            else:
                seed = int(self._seeds.integers(2**31))
        self.level = generate_level(seed, gaps=self.gaps, n_background=self.n_background)
        self.x = 0
        self.vx = 0
        self.air = 0
        self.best = 0
        self.t = 0
        self.done = False
        return self._obs()

    def _obs(self) -> np.ndarray:
        L = self.level.length
        offsets = np.arange(self.x - VIEW_BEHIND, self.x + VIEW_AHEAD + 1)
        inside = (offsets >= 0) & (offsets < L)
        gap = np.zeros(len(offsets))
        gap[inside] = ~self.level.ground[offsets[inside]]
        goal = (offsets == L - 1).astype(float)
        air = np.zeros(AIR_TIME + 1)
        air[self.air] = 1.0
        vel = np.zeros(3)
        vel[self.vx + 1] = 1.0
        return np.concatenate([gap, goal, air, vel, self.level.background])

    def step(self, action: int):
        if self.level is None or self.done:
            raise RuntimeError("step() called before reset() or after episode end")
        if not (0 <= int(action) < self.n_actions) or int(action) != action:
            raise ValueError(f"invalid action {action!r}")
        action = int(action)
        self.t += 1
        if action == LEFT:
            self.vx = -1
        elif action == RIGHT:
            self.vx = 1
        elif action == JUMP and self.air == 0:
            self.air = AIR_TIME + 1
        L = self.level.length
        self.x = int(min(max(self.x + self.vx, 0), L - 1))
        reward = 0.0
        if self.air > 0:
            self.air -= 1
        fell = self.air == 0 and not self.level.ground[self.x]
        if self.x > self.best:
            reward += self.progress_bonus * (self.x - self.best)
            self.best = self.x
        info = {"truncated": False, "fell": fell, "success": False}
        if fell:
            self.done = True
        elif self.x == L - 1:
            reward += 1.0
            self.done = True
            info["success"] = True
        elif self.t >= self.horizon:
            self.done = True
            info["truncated"] = True
        return self._obs(), reward, self.done, info
