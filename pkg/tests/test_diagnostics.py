import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import jensenshannon

from mdrlab.agent import build_network
from mdrlab.diagnostics import (_perturbation_summary, clip_saturation_scan, detect_collapse, js_divergence,
                                mode_pair, policy_mismatch, ratio_perturbation, windowed_mean)
from mdrlab.envs import make_env
from mdrlab.layers import Eval, Train
from mdrlab.rollout import EnvPool, collect, compute_gae, normalize_advantages

LN2 = np.log(2.0)

def test_js_fixed_points():
    p = np.array([0.2, 0.8])
    assert js_divergence(p, p) == 0.0
    assert abs(js_divergence([1.0, 0.0], [0.0, 1.0]) - LN2) <= 1e-12
    with pytest.raises(ValueError):
        js_divergence([0.5, 0.5], [1.0, 0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 8).flatmap(lambda k: st.tuples(
    st.lists(st.floats(0, 1), min_size=k, max_size=k), st.lists(st.floats(0, 1), min_size=k, max_size=k))))
def test_js_symmetric_and_bounded(pair):
    p, q = (np.array(x) + 1e-9 for x in pair)
    p, q = p / p.sum(), q / q.sum()
    a, b = js_divergence(p, q), js_divergence(q, p)
    assert a == pytest.approx(b, abs=1e-15)
    assert 0.0 <= a <= LN2


def test_js_matches_scipy_on_random_pairs():
    rng = np.random.default_rng(0)
    k = rng.integers(2, 10, size=1000)
    for i, n in enumerate(k):
        p = rng.dirichlet(np.full(n, 0.5))
        q = rng.dirichlet(np.full(n, 0.5))
        assert abs(js_divergence(p, q) - jensenshannon(p, q) ** 2) <= 1e-12, i


def test_js_batched_rows():
    p = np.array([[0.5, 0.5], [1.0, 0.0]])
    q = np.array([[0.5, 0.5], [0.0, 1.0]])
    np.testing.assert_allclose(js_divergence(p, q), [0.0, LN2], atol=1e-12)


def rollout(net, env="constant", steps=64, n_envs=4, **kw):
    pool = EnvPool([make_env(env, seed=i, **kw) for i in range(n_envs)], seed=0)
    buf = collect(pool, net, steps)
    compute_gae(buf, 0.99, 0.95)
    normalize_advantages(buf)
    return buf


def test_policy_mismatch_has_no_side_effects():
    net = build_network(26, 4, hidden=(16, 16), batchnorm=True, dropout=0.2, seed=0)
    buf = rollout(net, env="gridgame", n_background=0)
    snap_hash = net.buffers_hash()
    params = net.params_hash()
    rng_state = [m.rng.bit_generator.state for m in net.modules() if hasattr(m, "rng")]
    rep = policy_mismatch(buf, net, 64, np.random.default_rng(0))
    assert rep.mean > 0
    assert net.buffers_hash() == snap_hash and net.params_hash() == params
    assert [m.rng.bit_generator.state for m in net.modules() if hasattr(m, "rng")] == rng_state
    assert len(rep.per_minibatch) == 4


def test_policy_mismatch_zero_without_mode_dependent_layers():
    net = build_network(4, 2, hidden=(8,))
    rep = policy_mismatch(rollout(net), net, 64)
    assert rep.mean == 0.0
    rp = ratio_perturbation(rollout(net), net, 0.2, 64)
    assert rp.max_abs == 0.0 and rp.delta_eps == 0.0


def test_train_eval_agree_when_running_stats_equal_batch_stats():
    net = build_network(6, 3, hidden=(16, 16), batchnorm=True, momentum=1.0, seed=1)
    x = np.random.default_rng(2).normal(size=(32, 6))
    train_lp = net.forward(x, Train)[0].log_probs.data  # M = 1: running stats := batch stats
    eval_lp = net.forward(x, Eval)[0].log_probs.data
    np.testing.assert_allclose(train_lp, eval_lp, atol=1e-10, rtol=0)


def test_constant_dataset_has_zero_mismatch():
    net = build_network(4, 2, hidden=(8, 8), batchnorm=True, momentum=1.0, seed=0)
    buf = rollout(net)
    net.forward(buf.flat_obs[:8], Train)
    net.restore(net.snapshot())
    assert policy_mismatch(buf, net, 64, np.random.default_rng(0)).mean <= 1e-10


def test_mode_pair_skips_singleton_tail():
    net = build_network(4, 2, hidden=(8,), batchnorm=True)
    buf = rollout(net, steps=33, n_envs=3)  # 99 transitions: chunks of 49, 49, and a dropped single
    pair = mode_pair(buf, net, 49, None)
    assert [len(c) for c in pair.chunks] == [49, 49]
    assert pair.covered.sum() == 98


def test_perturbation_summary_hand_case():
    r = np.array([1.3, 1.0, 0.7, 1.25])
    r_prime = np.array([1.15, 1.05, 0.95, 1.4])
    rep = _perturbation_summary(r_prime, r, 0.2)
    np.testing.assert_allclose(rep.delta_r, r_prime - r)
    assert rep.violations == 2
    assert rep.delta_eps == pytest.approx(0.1)
    assert rep.max_abs == pytest.approx(0.25)


def test_saturation_scan_intervals_and_cells():
    scan = clip_saturation_scan(np.linspace(0.5, 1.5, 11), [0.05, 0.10, 0.15], 0.2)
    assert scan.intervals == [(0.75, 1.25), (0.7, 1.3), (0.65, 1.35)]
    rows = list(scan.rows())
    assert len(rows) == 33
    cell = {(round(r["delta_r"], 2), round(r["r"], 2)): r["unclipped"] for r in rows}
    assert cell[(0.05, 1.3)] == 0 and cell[(0.1, 1.3)] == 1 and cell[(0.15, 0.7)] == 1
    assert cell[(0.05, 0.7)] == 0
    with pytest.raises(ValueError):
        clip_saturation_scan([1.2, 1.0], [0.1], 0.2)


def test_windowed_mean_matches_loop():
    x = np.random.default_rng(0).normal(size=30)
    naive = [x[i - 4:i + 1].mean() for i in range(4, 30)]
    np.testing.assert_allclose(windowed_mean(x, 5), naive, atol=1e-12)


def test_detect_collapse_synthetic():
    rise = np.linspace(0, 1, 20)
    series = np.concatenate([rise, np.full(20, 0.1)])
    (ev,) = detect_collapse(series, w=5, f=0.5)
    assert 20 <= ev.onset <= 24 and not ev.recovered
    assert ev.trough == pytest.approx(0.1)

    recovered = np.concatenate([rise, np.full(10, 0.1), np.full(15, 1.0)])
    (ev,) = detect_collapse(recovered, w=5, f=0.5)
    assert ev.recovered and ev.recovery_step > ev.onset

    assert detect_collapse(np.linspace(0, 1, 40)) == []
    blip = np.concatenate([np.ones(20), np.full(3, 0.0), np.ones(20)])
    assert detect_collapse(blip, w=5, f=0.5) == []
    with pytest.raises(ValueError):
        detect_collapse(np.ones(10), w=5)


def test_detect_collapse_with_baseline():
    series = np.concatenate([np.linspace(0.15, 0.4, 20), np.full(20, 0.2)])
    assert detect_collapse(series, f=0.5) == []
    assert len(detect_collapse(series, f=0.5, baseline=0.15)) == 1
