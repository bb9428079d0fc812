"""Seeded training runs: collect, estimate advantages, update, measure, record."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diagnostics
from .agent import ActorCritic, build_network, sample
from .config import ExperimentConfig
from .envs import make_env
from .layers import Eval
from .rollout import EnvPool, collect, compute_gae, normalize_advantages
from .train import TrainLog, make_optimizer, train_step

SCHEMA_VERSION = "mdrlab.runrecord/1"
COLUMNS = (
    "mode", "seed", "step", "env_steps", "episodes",
    "reward_mean", "reward_std", "reward_pct_optimal",
    "eval_train_reward", "eval_test_reward",
    "delta_pi_minus", "delta_pi_plus", "mean_abs_delta_r", "max_abs_delta_r", "delta_eps",
    "clip_fraction", "entropy", "loss", "clip_objective", "value_loss",
    "updates_standard", "updates_rectification", "recomputes", "status",
)


class RunFailed(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step, self.cause = step, cause
        super().__init__(f"run failed at step {step}: {cause}")


@dataclass
class RunResult:
    config: ExperimentConfig
    seed: int
    records: list[dict] = field(default_factory=list)
    train_logs: list[TrainLog] = field(default_factory=list)
    net: ActorCritic | None = None
    wall_clock: list[float] = field(default_factory=list)

    def series(self, column: str) -> np.ndarray:
        return np.array([r[column] for r in self.records], dtype=np.float64)


def _env_factory(cfg: ExperimentConfig, levels: list[int] | None = None):
    def make(seed: int):
        kw = dict(cfg.env_overrides)
        if levels is not None:
            kw["levels"] = levels
        return make_env(cfg.env, seed=seed, **kw)

    return make


def train_levels(cfg: ExperimentConfig) -> list[int] | None:
    return list(range(cfg.train_levels)) if cfg.train_levels > 0 else None


def test_levels(cfg: ExperimentConfig) -> list[int]:
    return list(range(cfg.test_level_offset, cfg.test_level_offset + cfg.test_levels))


def evaluate(net: ActorCritic, make: Callable[[int], object], level_seeds: list[int], episodes: int,
             seed: int) -> float:
    """Mean episode return of the Eval-mode policy over ``episodes`` episodes.

    Episodes cycle through ``level_seeds``; action sampling is seeded.
    """
    rng = np.random.default_rng([seed, 0x6576])
    env = make(seed)
    total = 0.0
    for i in range(episodes):
        obs = env.reset(int(level_seeds[i % len(level_seeds)]))
        done = False
        ret = 0.0
        while not done:
            dist, _ = net.forward(np.asarray(obs)[None], Eval)
            obs, r, done, _ = env.step(int(sample(dist, rng)[0]))
            ret += r
        total += ret
    return total / episodes


def run_training(cfg: ExperimentConfig, seed: int, on_record: Callable[[dict], None] | None = None,
                 checkpoint_dir: Path | None = None) -> RunResult:
    """Collect (Eval) -> GAE -> train_step -> diagnostics, for k = 1..steps."""
    ss = np.random.SeedSequence(seed)
    net_seed, pool_seed, train_seed, measure_seed, eval_seed = (
        int(s.generate_state(1)[0]) for s in ss.spawn(5))
    make = _env_factory(cfg, train_levels(cfg))
    env_seeds = np.random.default_rng(pool_seed).integers(2**31, size=cfg.n_envs)
    pool = EnvPool([make(int(s)) for s in env_seeds], seed=pool_seed)
    obs_dim = int(np.prod(pool.obs.shape[1:]))
    net = build_network(obs_dim, pool.n_actions, seed=net_seed, **cfg.network_kwargs())
    ppo = cfg.ppo()
    schedule = cfg.schedule()
    opt = make_optimizer(ppo)
    train_rng = np.random.default_rng(train_seed)
    optimal = getattr(pool.envs[0], "optimal_return", None)
    result = RunResult(cfg, seed, net=net)
    t0 = time.perf_counter()
    for k in range(1, cfg.steps + 1):
        try:
            row = _one_step(cfg, k, seed, pool, net, ppo, schedule, opt, train_rng, measure_seed,
                            eval_seed, optimal, result)
        except Exception as exc:
            raise RunFailed(k, exc) from exc
        result.records.append(row)
        result.wall_clock.append(time.perf_counter() - t0)
        if on_record:
            on_record(row)
        if checkpoint_dir is not None and cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
            net.save(Path(checkpoint_dir) / f"{cfg.mode}_seed{seed}_step{k}.npz")
    return result


def _one_step(cfg, k, seed, pool, net, ppo, schedule, opt, train_rng, measure_seed, eval_seed,
              optimal, result) -> dict:
    buf = collect(pool, net, cfg.steps_per_env, step=k)
    compute_gae(buf, ppo.gamma, ppo.lam)
    normalize_advantages(buf)
    # the optimised policy is the eval policy when no update runs in Train mode,
    # so the mismatch is zero by construction
    measure = cfg.measure and net.has_mode_dependent_layers and schedule.uses_train_mode
    m = ppo.minibatch_size
    if measure:
        pre = diagnostics.policy_mismatch(buf, net, m, np.random.default_rng([measure_seed, k, 0]))
    log = train_step(buf, net, ppo, schedule, opt, train_rng)
    result.train_logs.append(log)
    if measure:
        pair = diagnostics.mode_pair(buf, net, m, np.random.default_rng([measure_seed, k, 1]))
        post = diagnostics.policy_mismatch(buf, net, m, pair=pair)
        rp = diagnostics.ratio_perturbation(buf, net, ppo.clip_eps, m, pair=pair)
        dpm, dpp = pre.mean, post.mean
        mad, mxd, deps = rp.mean_abs, rp.max_abs, rp.delta_eps
    else:
        dpm = dpp = mad = mxd = deps = 0.0
    rets = np.asarray(buf.episode_returns, dtype=np.float64)
    rmean = float(rets.mean()) if len(rets) else math.nan
    row = {
        "mode": cfg.mode,
        "seed": seed,
        "step": k,
        "env_steps": pool.total_steps,
        "episodes": len(rets),
        "reward_mean": rmean,
        "reward_std": float(rets.std()) if len(rets) else math.nan,
        "reward_pct_optimal": 100.0 * rmean / optimal if optimal else math.nan,
        "eval_train_reward": math.nan,
        "eval_test_reward": math.nan,
        "delta_pi_minus": dpm,
        "delta_pi_plus": dpp,
        "mean_abs_delta_r": mad,
        "max_abs_delta_r": mxd,
        "delta_eps": deps,
        "clip_fraction": log.mean("clip_fraction"),
        "entropy": log.mean("entropy"),
        "loss": log.mean("loss"),
        "clip_objective": log.mean("clip_objective"),
        "value_loss": log.mean("value_loss"),
        "updates_standard": log.count("standard"),
        "updates_rectification": log.count("rectification"),
        "recomputes": log.recomputes,
        "status": "ok",
    }
    if cfg.eval_every and cfg.test_levels and (k % cfg.eval_every == 0 or k == cfg.steps):
        make_plain = _env_factory(cfg)
        tl = train_levels(cfg) or list(range(cfg.test_levels))
        row["eval_train_reward"] = evaluate(net, make_plain, tl, cfg.eval_episodes, eval_seed + k)
        row["eval_test_reward"] = evaluate(net, make_plain, test_levels(cfg), cfg.eval_episodes, eval_seed + k)
    return row


# ---------------------------------------------------------------------------
# CSV


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


class RecordWriter:
    """Streams rows to disk, flushing after each so a crash leaves a usable file."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.fh = open(self.path, "w", newline="", encoding="utf-8")
        self.fh.write(f"# schema={SCHEMA_VERSION}\n")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(COLUMNS)
        self.fh.flush()

    def write(self, row: dict) -> None:
        self.writer.writerow([format_value(row.get(c, "")) for c in COLUMNS])
        self.fh.flush()

    def write_error(self, mode: str, seed: int, step: int, message: str) -> None:
        row = {c: "" for c in COLUMNS}
        row.update(mode=mode, seed=seed, step=step, status="error: " + message.replace("\n", " "))
        self.write(row)

    def close(self) -> None:
        self.fh.close()


def read_records(path) -> tuple[str, list[dict]]:
    """Return (schema version, rows) for a run CSV."""
    text = Path(path).read_text(encoding="utf-8")
    first, _, rest = text.partition("\n")
    if not first.startswith("# schema="):
        raise ValueError(f"{path}: missing schema header")
    reader = csv.DictReader(io.StringIO(rest))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ValueError(f"{path}: column layout does not match {SCHEMA_VERSION}")
    rows = []
    for r in reader:
        out = {}
        for k, v in r.items():
            if k in ("mode", "status"):
                out[k] = v
            elif v == "":
                out[k] = math.nan
            else:
                out[k] = float(v)
        rows.append(out)
    return first[len("# schema="):].strip(), rows
