"""Train/eval policy mismatch, ratio perturbation, clip saturation, collapse detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import ActorCritic
from .layers import Eval, Train
from .rollout import RolloutBuffer

PROB_FLOOR = 1e-12


def js_divergence(p, q) -> np.ndarray | float:
    """Jensen-Shannon divergence (natural log) along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    pf, qf, mf = (np.maximum(a, PROB_FLOOR) for a in (p, q, m))
    kl_pm = np.sum(p * (np.log(pf) - np.log(mf)), axis=-1)
    kl_qm = np.sum(q * (np.log(qf) - np.log(mf)), axis=-1)
    js = np.clip(0.5 * kl_pm + 0.5 * kl_qm, 0.0, np.log(2.0))
    return float(js) if js.ndim == 0 else js


def _partition(n: int, m: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + m] for i in range(0, n, m)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks.pop()
    return chunks


@dataclass
class ModePair:
    """Per-transition log-policies under both modes for the same weights.

    Rows follow buffer order; ``covered`` marks transitions that fell in a
    measured minibatch (a trailing singleton batch is skipped).
    """

    train_log_probs: np.ndarray  # (n, |A|)
    eval_log_probs: np.ndarray
    chunks: list[np.ndarray]
    covered: np.ndarray


def mode_pair(buf: RolloutBuffer, net: ActorCritic, minibatch_size: int,
              rng: np.random.Generator | None = None) -> ModePair:
    """Forward every minibatch once in Train and once in Eval mode.

    Running statistics and dropout streams are restored afterwards, so the
    measurement has no side effects on the network.
    """
    n = buf.size
    if n < 2:
        raise ValueError("buffer is smaller than one minibatch")
    chunks = _partition(n, minibatch_size, rng)
    obs = buf.flat_obs
    k = net.n_actions
    lp_train = np.zeros((n, k))
    lp_eval = np.zeros((n, k))
    saved = net.snapshot()
    try:
        for idx in chunks:
            lp_train[idx] = net.forward(obs[idx], Train)[0].log_probs.data
            lp_eval[idx] = net.forward(obs[idx], Eval)[0].log_probs.data
    finally:
        net.restore(saved)
    covered = np.zeros(n, dtype=bool)
    covered[np.concatenate(chunks)] = True
    return ModePair(lp_train, lp_eval, chunks, covered)


@dataclass
class MismatchReport:
    step: int
    mean: float
    per_minibatch: list[float] = field(default_factory=list)


def policy_mismatch(buf: RolloutBuffer, net: ActorCritic, minibatch_size: int,
                    rng: np.random.Generator | None = None, pair: ModePair | None = None) -> MismatchReport:
    """Mean JS divergence between train-mode and eval-mode policies over the buffer."""
    if buf.size < 2:
        raise ValueError("buffer is smaller than one minibatch")
    if not net.has_mode_dependent_layers:
        return MismatchReport(buf.step, 0.0, [0.0] * max(1, buf.size // minibatch_size))
    pair = pair or mode_pair(buf, net, minibatch_size, rng)
    js = js_divergence(np.exp(pair.train_log_probs), np.exp(pair.eval_log_probs))
    per_mb = [float(js[idx].mean()) for idx in pair.chunks]
    return MismatchReport(buf.step, float(js[pair.covered].mean()), per_mb)


@dataclass
class RatioPerturbationReport:
    delta_r: np.ndarray
    mean_abs: float
    max_abs: float
    quantiles: dict
    delta_eps: float
    violations: int


def ratio_perturbation(buf: RolloutBuffer, net: ActorCritic, clip_eps: float, minibatch_size: int,
                       rng: np.random.Generator | None = None, pair: ModePair | None = None
                       ) -> RatioPerturbationReport:
    """delta_r = r' - r per transition, and an estimate of the clip-bound shift.

    ``delta_eps`` is the largest ``|r - 1| - eps`` among transitions whose
    plain ratio lies outside ``[1 - eps, 1 + eps]`` while the perturbed ratio
    lies inside it, i.e. the widest effective bound the perturbation let
    through. Zero when no sample escaped clipping this way.
    """
    actions = buf.flat("actions")
    old = buf.flat("log_probs_old")
    if not net.has_mode_dependent_layers:
        zeros = np.zeros(buf.size)
        q = {f"q{int(100 * a)}": 0.0 for a in (0.5, 0.9, 0.99)}
        return RatioPerturbationReport(zeros, 0.0, 0.0, q, 0.0, 0)
    pair = pair or mode_pair(buf, net, minibatch_size, rng)
    rows = np.flatnonzero(pair.covered)
    a = actions[rows]
    r_train = np.exp(np.clip(pair.train_log_probs[rows, a] - old[rows], -20, 20))
    r_eval = np.exp(np.clip(pair.eval_log_probs[rows, a] - old[rows], -20, 20))
    return _perturbation_summary(r_train, r_eval, clip_eps)


def _perturbation_summary(r_train: np.ndarray, r_eval: np.ndarray, eps: float) -> RatioPerturbationReport:
    dr = r_train - r_eval
    outside = np.abs(r_eval - 1.0) > eps
    inside_perturbed = np.abs(r_train - 1.0) <= eps
    viol = outside & inside_perturbed
    # bound expansion needed to admit r: how far it sits beyond the nominal edge
    expansion = np.abs(r_eval - 1.0) - eps
    delta_eps = float(expansion[viol].max()) if viol.any() else 0.0
    absd = np.abs(dr)
    q = {f"q{int(100 * a)}": float(np.quantile(absd, a)) for a in (0.5, 0.9, 0.99)}
    return RatioPerturbationReport(dr, float(absd.mean()), float(absd.max()), q, delta_eps, int(viol.sum()))


@dataclass
class SaturationScan:
    r_grid: np.ndarray
    delta_r_levels: np.ndarray
    eps: float
    unclipped: np.ndarray  # (levels, grid) bool
    perturbed: np.ndarray  # worst-case r + delta_r per cell
    intervals: list[tuple[float, float]]

    def rows(self):
        for i, dr in enumerate(self.delta_r_levels):
            lo, hi = self.intervals[i]
            for j, r in enumerate(self.r_grid):
                yield {
                    "delta_r": float(dr),
                    "r": float(r),
                    "r_perturbed": float(self.perturbed[i, j]),
                    "unclipped": int(self.unclipped[i, j]),
                    "lower": lo,
                    "upper": hi,
                }


def clip_saturation_scan(r_grid, delta_r_levels, eps: float) -> SaturationScan:
    """Which ratios escape clipping when a bounded perturbation pushes them toward 1.

    The worst case moves each ratio by ``delta_r`` toward the trust region,
    so the unclipped band becomes ``[1 - eps - delta_r, 1 + eps + delta_r]``.
    """
    r = np.asarray(r_grid, dtype=np.float64)
    levels = np.asarray(delta_r_levels, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.any(np.diff(r) < 0):
        raise ValueError("r_grid must be sorted")
    toward = np.where(r > 1.0, -1.0, 1.0)
    perturbed = r[None, :] + toward[None, :] * levels[:, None]
    # a perturbation cannot overshoot past 1 in the worst case it just reaches it
    perturbed = np.where(np.abs(r[None, :] - 1.0) < levels[:, None], 1.0, perturbed)
    unclipped = (perturbed >= 1.0 - eps) & (perturbed <= 1.0 + eps)
    intervals = [(round(1.0 - eps - d, 12), round(1.0 + eps + d, 12)) for d in levels]
    return SaturationScan(r, levels, eps, unclipped, perturbed, intervals)


@dataclass
class CollapseEvent:
    onset: int
    pre_collapse_mean: float
    trough: float
    recovered: bool
    recovery_step: int | None = None


def windowed_mean(series, w: int) -> np.ndarray:
    """Trailing mean over ``w`` points; entry i covers series[i-w+1 .. i] (i >= w-1)."""
    x = np.asarray(series, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def detect_collapse(series, w: int = 5, f: float = 0.5, baseline: float = 0.0) -> list[CollapseEvent]:
    """Sustained drops of the windowed mean below a fraction of its running peak.

    The threshold is ``baseline + f * (peak - baseline)``; with the default
    baseline of 0 this is ``f * peak``. An event needs at least ``w``
    consecutive windowed means under the threshold. Onsets are reported as
    indices into ``series`` (end of the first window under the threshold).
    """
    x = np.asarray(series, dtype=np.float64)
    if len(x) <= 2 * w:
        raise ValueError(f"series of length {len(x)} is too short for window {w}")
    sm = windowed_mean(x, w)
    events: list[CollapseEvent] = []
    peak = -np.inf
    i = 0
    while i < len(sm):
        thr = baseline + f * (peak - baseline)
        if np.isfinite(peak) and peak > baseline and sm[i] < thr:
            j = i
            while j < len(sm) and sm[j] < thr:
                j += 1
            if j - i >= w:
                recovered = j < len(sm)
                events.append(CollapseEvent(i + w - 1, float(peak), float(sm[i:j].min()), recovered,
                                            j + w - 1 if recovered else None))
                if recovered:
                    peak = -np.inf  # track a fresh peak after recovery
                i = j
                continue
        peak = max(peak, sm[i])
        i += 1
    return events
