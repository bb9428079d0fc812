"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 9 to 11 train agents end to end and take several minutes in total.
"""

import time

import numpy as np
import pytest
from scipy.spatial.distance import jensenshannon

from mdrlab import cli
from mdrlab.agent import build_network
from mdrlab.config import load_config
from mdrlab.diagnostics import (clip_saturation_scan, detect_collapse, js_divergence, policy_mismatch,
                                ratio_perturbation, windowed_mean)
from mdrlab.envs import make_env
from mdrlab.experiment import read_records, run_training
from mdrlab.layers import BatchNorm, Eval, Train
from mdrlab.rollout import EnvPool, collect, compute_gae, gae, normalize_advantages
from mdrlab.train import MdrSchedule, PpoConfig, clipped_surrogate, ppo_gradcheck_suite, ppo_loss

SEEDS5 = [0, 1, 2, 3, 4]


# ---------------------------------------------------------------------------
# exact math


def test_criterion_01_gradient_correctness(criterion):
    t0 = time.perf_counter()
    results = ppo_gradcheck_suite(n_cases=20, seed=0, rtol=1e-4, atol=1e-6)
    elapsed = time.perf_counter() - t0
    kinds = {info["kind"] for info, _ in results}
    passed = sum(res.passed for _, res in results)
    worst = max(res.max_rel_err for _, res in results)
    ok = len(results) >= 20 and passed == len(results) and elapsed < 30 and {"plain", "batchnorm", "dropout"} <= kinds
    assert criterion(1, "PPO loss gradients match central differences", ok,
                     f"{passed}/{len(results)} nets, kinds={sorted(kinds)}, worst rel={worst:.1e}, {elapsed:.1f}s")


def test_criterion_02_batchnorm_semantics(criterion):
    rng = np.random.default_rng(0)
    # variance is scaled by var/(var+eta); wide batches push that factor within 1e-9 of one
    x = rng.normal(3.0, 1e3, size=(256, 5))
    bn = BatchNorm(5, momentum=0.1)
    xhat = bn.normalize(x, Train).data
    mean_err = np.abs(xhat.mean(axis=0)).max()
    var_err = np.abs(xhat.var(axis=0) - 1.0).max()
    exact_var = np.abs(xhat.var(axis=0) - x.var(axis=0) / (x.var(axis=0) + bn.eta)).max()
    small = rng.normal(size=(64, 5))
    bn2 = BatchNorm(5, momentum=0.3)
    mu0, var0 = bn2.running_mean.copy(), bn2.running_var.copy()
    bn2.forward(small, Train)
    update_exact = (np.array_equal(bn2.running_mean, 0.7 * mu0 + 0.3 * small.mean(axis=0))
                    and np.array_equal(bn2.running_var, 0.7 * var0 + 0.3 * small.var(axis=0)))
    bn3 = BatchNorm(5, momentum=0.1)
    bn3.running_mean[:] = -20.0
    target = small.mean(axis=0)
    gap = np.abs(bn3.running_mean - target)
    contraction = 0.0
    for _ in range(10):
        bn3.forward(small, Train)
        new = np.abs(bn3.running_mean - target)
        contraction = max(contraction, np.abs(new - 0.9 * gap).max())
        gap = new
    ok = mean_err <= 1e-9 and var_err <= 1e-9 and exact_var <= 1e-12 and update_exact and contraction <= 1e-12
    assert criterion(2, "BatchNorm standardisation, running update, contraction", ok,
                     f"mean {mean_err:.1e}, var {var_err:.1e}, update exact={update_exact}, "
                     f"contraction err {contraction:.1e}")


def small_rollout(net, env="constant", steps=64, n_envs=4):
    pool = EnvPool([make_env(env, seed=i) for i in range(n_envs)], seed=0)
    buf = collect(pool, net, steps)
    compute_gae(buf, 0.99, 0.95)
    normalize_advantages(buf)
    return buf


def test_criterion_03_mode_equivalence(criterion):
    net = build_network(6, 3, hidden=(16, 16), batchnorm=True, momentum=1.0, seed=1)
    x = np.random.default_rng(2).normal(size=(32, 6))
    train_lp = net.forward(x, Train)[0].log_probs.data  # M = 1: running stats become batch stats
    eval_lp = net.forward(x, Eval)[0].log_probs.data
    agree = np.abs(train_lp - eval_lp).max()
    cnet = build_network(4, 2, hidden=(8, 8), batchnorm=True, momentum=1.0, seed=0)
    buf = small_rollout(cnet)
    cnet.forward(buf.flat_obs[:8], Train)
    mismatch = policy_mismatch(buf, cnet, 64, np.random.default_rng(0)).mean
    ok = agree <= 1e-10 and mismatch <= 1e-10
    assert criterion(3, "Train and Eval agree when running stats equal batch stats", ok,
                     f"max |dlogp| {agree:.1e}, mismatch on constant data {mismatch:.1e}")


def brute_force_gae(rewards, values, dones, gamma, lam, bootstrap):
    T = len(rewards)
    nxt = [0.0 if dones[t] else (values[t + 1] if t + 1 < T else bootstrap) for t in range(T)]
    delta = [rewards[t] + gamma * nxt[t] - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total = 0.0
        for l in range(T - t):
            total += (gamma * lam) ** l * delta[t + l]
            if dones[t + l]:
                break
        adv.append(total)
    return np.array(adv)


def test_criterion_04_gae_oracle(criterion):
    rng = np.random.default_rng(0)
    worst = worst0 = worst1 = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 51))
        r, v, d, boot = rng.normal(size=T), rng.normal(size=T), rng.random(T) < 0.15, float(rng.normal())
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0, 1)
        worst = max(worst, np.abs(gae(r, v, d, gamma, lam, boot)[0] - brute_force_gae(r, v, d, gamma, lam, boot)).max())
        nxt = np.where(d, 0.0, np.append(v[1:], boot))
        worst0 = max(worst0, np.abs(gae(r, v, d, gamma, 0.0, boot)[0] - (r + gamma * nxt - v)).max())
        ret, g = np.zeros(T), boot
        for t in range(T - 1, -1, -1):
            g = r[t] + gamma * (0.0 if d[t] else g)
            ret[t] = g
        worst1 = max(worst1, np.abs(gae(r, v, d, gamma, 1.0, boot)[0] - (ret - v)).max())
    ok = max(worst, worst0, worst1) <= 1e-10
    assert criterion(4, "GAE equals the double-sum oracle on 100 trajectories", ok,
                     f"max err {worst:.1e}, lambda=0 {worst0:.1e}, lambda=1 {worst1:.1e}")


def test_criterion_05_clip_arithmetic(criterion):
    cases = [clipped_surrogate([1.5], [1.0], 0.2).data[0] == 1.2,
             clipped_surrogate([0.5], [-1.0], 0.2).data[0] == -0.8,
             clipped_surrogate([1.0], [0.7], 0.2).data[0] == 0.7]
    net = build_network(4, 2, hidden=(8,), batchnorm=True)
    buf = small_rollout(net)
    _, comps = ppo_loss(buf.minibatch(np.arange(128)), net, PpoConfig(), Eval)
    cases.append(comps["clip_fraction"] == 0.0)
    assert criterion(5, "clipped surrogate hand cases", all(cases), f"cases {[bool(c) for c in cases]}")


def test_criterion_06_js_divergence(criterion):
    rng = np.random.default_rng(0)
    sym = bound = 0.0
    oracle = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 10))
        p, q = rng.dirichlet(np.full(n, 0.5)), rng.dirichlet(np.full(n, 0.5))
        a, b = js_divergence(p, q), js_divergence(q, p)
        sym = max(sym, abs(a - b))
        bound = max(bound, a - np.log(2))
        oracle = max(oracle, abs(a - jensenshannon(p, q) ** 2))
    disjoint = abs(js_divergence([1.0, 0.0], [0.0, 1.0]) - np.log(2))
    identity = js_divergence([0.3, 0.7], [0.3, 0.7])
    ok = sym <= 1e-15 and bound <= 1e-12 and disjoint <= 1e-12 and identity == 0.0 and oracle <= 1e-12
    assert criterion(6, "JS divergence symmetry, bound, identity, oracle", ok,
                     f"asym {sym:.1e}, disjoint err {disjoint:.1e}, oracle err {oracle:.1e}")


def test_criterion_07_mdr_schedule(criterion):
    plan = MdrSchedule(2, 1).update_plan(3000, 128)
    plain = sum(n for _, n in MdrSchedule.standard(3).update_plan(3000, 128))
    plan_ok = [(m, n) for m, n in plan] == [(Train, 46), (Eval, 23)] and plain == 69
    cfg = load_config(overrides=["mode=nonorm", "steps=3", "rollout_size=128", "minibatch_size=64",
                                 "env.image_size=32", "env.view_size=8", "hidden=[16]"])
    run = run_training(cfg, 0)
    logged = np.concatenate([run.series("mean_abs_delta_r"), run.series("max_abs_delta_r")])
    net = build_network(4, 2, hidden=(8,))
    measured = ratio_perturbation(small_rollout(net), net, 0.2, 64)
    zero = np.all(logged == 0.0) and measured.max_abs == 0.0
    ok = plan_ok and zero
    assert criterion(7, "MDR(2,1) on 3000/128 runs 46 Train then 23 Eval updates", ok,
                     f"plan {[(m.name, n) for m, n in plan]}, plain {plain}, nonorm |dr| zero={zero}")


def test_criterion_08_saturation_scan(criterion, tmp_path, capsys):
    scan = clip_saturation_scan(np.linspace(0.5, 1.5, 201), [0.05, 0.10, 0.15], 0.2)
    code = cli.main(["scan", "--eps", "0.2", "--levels", "0.05,0.10,0.15", "--out", str(tmp_path)])
    printed = capsys.readouterr().out.split()
    expected = [(0.75, 1.25), (0.7, 1.3), (0.65, 1.35)]
    ok = (code == 0 and scan.intervals == expected
          and printed == ["[0.75,", "1.25]", "[0.7,", "1.3]", "[0.65,", "1.35]"])
    assert criterion(8, "nested effective clip intervals", ok, f"{[(float(a), float(b)) for a, b in scan.intervals]}")


# ---------------------------------------------------------------------------
# end-to-end experiments (shared cache: criterion 10 reuses criterion 9 runs)

_RUNS: dict = {}


def train(overrides: tuple, seed: int):
    key = (overrides, seed)
    if key not in _RUNS:
        t0 = time.perf_counter()
        cfg = load_config(overrides=list(overrides))
        _RUNS[key] = (run_training(cfg, seed), time.perf_counter() - t0)
    return _RUNS[key]


def final_window(series: np.ndarray) -> float:
    w = max(len(series) // 10, 1)
    return float(np.mean(series[-w:]))


def pre_collapse_pearson(reward: np.ndarray, mismatch: np.ndarray) -> float:
    events = detect_collapse(reward)
    end = events[0].onset + 1 if events else len(reward)
    d = mismatch[:end]
    if end < 3 or d.std() == 0:
        return 0.0
    return float(np.corrcoef(np.arange(end), d)[0, 1])


@pytest.mark.slow
def test_criterion_09_collapse_phenomenon(criterion):
    modes = {m: [train(("preset=collapse-demo", f"mode={m}"), s) for s in SEEDS5] for m in ("bn", "eval", "bn-mdr")}
    runtime = sum(t for runs in modes.values() for _, t in runs)
    bn = [r for r, _ in modes["bn"]]
    pearson = [pre_collapse_pearson(r.series("reward_mean"), r.series("delta_pi_minus")) for r in bn]
    fires = [bool(detect_collapse(r.series("reward_mean"))) for r in bn]
    a_ok = sum(p > 0.3 for p in pearson) >= 3
    b_ok = sum(fires) >= 3
    ev = [r for r, _ in modes["eval"]]
    eval_zero = all(np.all(r.series("delta_pi_minus") == 0.0) for r in ev)
    eval_stable = all(not any(not e.recovered for e in detect_collapse(r.series("reward_mean"))) for r in ev)
    eval_final = np.mean([final_window(r.series("reward_mean")) for r in ev])
    mdr = [r for r, _ in modes["bn-mdr"]]
    mdr_final = np.mean([final_window(r.series("reward_mean")) for r in mdr])
    reward_ok = mdr_final >= eval_final - 0.1 * abs(eval_final)
    dpm_bn = np.mean([r.series("delta_pi_minus").mean() for r in bn])
    dpm_mdr = np.mean([r.series("delta_pi_minus").mean() for r in mdr])
    soft_ok = dpm_bn >= 5 * dpm_mdr
    collapse_ok = b_ok or soft_ok
    ok = a_ok and collapse_ok and eval_zero and eval_stable and reward_ok and runtime < 15 * 60
    assert criterion(9, "collapse phenomenon under the collapse-demo preset", ok,
                     f"(a) pearson {np.round(pearson, 2).tolist()} -> {a_ok}; (b) fires {fires} -> {b_ok}; "
                     f"soft gate dpm bn {dpm_bn:.4f} vs 5x bn-mdr {5 * dpm_mdr:.4f} -> {soft_ok}; "
                     f"eval dpm zero={eval_zero}, eval no lasting collapse={eval_stable}; "
                     f"final reward bn-mdr {mdr_final:.4f} vs eval {eval_final:.4f} -> {reward_ok}; "
                     f"runtime {runtime / 60:.1f} min")


def fluctuation(reward: np.ndarray, w: int = 5) -> float:
    half = reward[len(reward) // 2:]
    return float(np.std(windowed_mean(half, w)))


@pytest.mark.slow
def test_criterion_10_entropy_ablation(criterion):
    stat = {}
    for mode in ("bn-mdr", "eval"):
        for c2 in (0.0, 1e-4):
            runs = [train(("preset=collapse-demo", f"mode={mode}") + (("ent_coef=0.0",) if c2 == 0 else ()), s)[0]
                    for s in (0, 1)]
            stat[mode, c2] = max(fluctuation(r.series("reward_mean")) for r in runs)  # worst seed
    mdr_gap = stat["bn-mdr", 0.0] - stat["bn-mdr", 1e-4]
    eval_gap = stat["eval", 0.0] - stat["eval", 1e-4]
    ok = mdr_gap > 0 and abs(eval_gap) < abs(mdr_gap)
    assert criterion(10, "entropy bonus damps bn-mdr reward fluctuation more than eval", ok,
                     ", ".join(f"{m} c2={c:g}: {v:.4f}" for (m, c), v in stat.items())
                     + f"; gaps bn-mdr {mdr_gap:+.4f}, eval {eval_gap:+.4f}")


def train_test_gap(run) -> float:
    tr, te = run.series("eval_train_reward"), run.series("eval_test_reward")
    keep = ~np.isnan(tr)
    return float(np.mean(tr[keep][-3:] - te[keep][-3:]))  # last three evaluations


def curve_variance(run) -> float:
    return float(np.var(np.diff(run.series("reward_mean"))))


@pytest.mark.slow
def test_criterion_11_dropout_generalization(criterion):
    seeds = (0, 1, 2)
    runs = {m: [train(("preset=dropout-generalization", f"mode={m}"), s)[0] for s in seeds]
            for m in ("nonorm", "dropout", "dropout-mdr")}
    gap = {m: np.mean([train_test_gap(r) for r in rs]) for m, rs in runs.items()}
    var = {m: np.mean([curve_variance(r) for r in rs]) for m, rs in runs.items()}
    gap_ok = gap["dropout-mdr"] <= gap["nonorm"]
    var_ok = var["dropout"] > var["dropout-mdr"]
    ok = gap_ok and var_ok
    assert criterion(11, "dropout-mdr generalises at least as well as nonorm and is steadier than dropout", ok,
                     "gap " + ", ".join(f"{m} {v:+.4f}" for m, v in gap.items()) + f" -> {gap_ok}; "
                     "curve var " + ", ".join(f"{m} {v:.5f}" for m, v in var.items()) + f" -> {var_ok}")


# ---------------------------------------------------------------------------


def test_criterion_12_determinism(criterion, tmp_path, capsys):
    tiny = ["steps=3", "rollout_size=128", "minibatch_size=64", "hidden=[16]"]
    configs = {
        "bn-mdr": ["env.image_size=32", "env.view_size=8"],
        "dropout-mdr": ["env.image_size=32", "env.view_size=8", "checkpoint_every=2"],
        "nonorm": ["preset=dropout-generalization", "eval_every=1", "eval_episodes=2"],
    }
    same = []
    for mode, extra in configs.items():
        sets = []
        for item in tiny + extra + [f"mode={mode}"]:
            sets += ["--set", item]
        first, second = tmp_path / f"{mode}-a", tmp_path / f"{mode}-b"
        codes = [cli.main(["run", *sets, "--seeds", "0,1", "--out", str(first)]),
                 cli.main(["run", "--config", str(first / "resolved.cfg"), "--out", str(second)])]
        for seed in (0, 1):
            name = f"{mode}_seed{seed}.csv"
            a, b = (first / name).read_bytes(), (second / name).read_bytes()
            same.append(codes == [0, 0] and a == b and len(read_records(first / name)[1]) == 3)
    capsys.readouterr()
    assert criterion(12, "manifest re-runs reproduce byte-identical CSVs", all(same),
                     f"{sum(same)}/{len(same)} CSVs identical")
