import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridflow import nn
from gridflow.environment import GridEnv
from gridflow.gnn import GnnConfig, init_params, policy_logits, state_value
from gridflow.grid_model import load_bundled
from gridflow.ppo import (
    METRIC_COLUMNS, PpoConfig, collect_episode, gae_advantages, ppo_loss, stream_rng, train,
)
from oracles import gae_double_sum, ppo_loss_script

floats = st.floats(-5, 5, allow_nan=False)


@given(data=st.data(), T=st.integers(1, 30), gamma=st.floats(0, 1), lam=st.floats(0, 1))
def test_gae_matches_double_sum(data, T, gamma, lam):
    r = data.draw(st.lists(floats, min_size=T, max_size=T))
    v = data.draw(st.lists(floats, min_size=T, max_size=T))
    last = data.draw(floats)
    adv, ret = gae_advantages(r, v, last, gamma, lam, normalize=False)
    np.testing.assert_allclose(adv, gae_double_sum(r, v, last, gamma, lam), atol=1e-10, rtol=0)
    np.testing.assert_allclose(ret, adv + np.array(v), atol=1e-12)


def test_gae_four_step_fixture():
    # worked by hand: delta = [0.68, -0.29, -0.63, 2.06], then A_t = delta_t + 0.72 A_{t+1}
    adv, ret = gae_advantages([1.0, 0.0, -1.0, 2.0], [0.5, 0.2, -0.1, 0.3], 0.4, 0.9, 0.8, normalize=False)
    np.testing.assert_allclose(adv, [0.91349888, 0.324304, 0.8532, 2.06], atol=1e-10, rtol=0)
    np.testing.assert_allclose(ret, [1.41349888, 0.524304, 0.7532, 2.36], atol=1e-10, rtol=0)


def test_gae_limits():
    rng = np.random.default_rng(0)
    r, v, last = rng.normal(size=10), rng.normal(size=10), 0.7
    # lambda = 0: one-step TD error
    adv, _ = gae_advantages(r, v, last, 0.9, 0.0, normalize=False)
    np.testing.assert_allclose(adv, r + 0.9 * np.append(v[1:], last) - v, atol=1e-12)
    # lambda = 1: discounted Monte Carlo return with a bootstrapped tail, minus V
    adv, ret = gae_advantages(r, v, last, 0.9, 1.0, normalize=False)
    mc = [sum(0.9 ** (k - t) * r[k] for k in range(t, 10)) + 0.9 ** (10 - t) * last for t in range(10)]
    np.testing.assert_allclose(ret, mc, atol=1e-12)


def test_advantage_normalisation():
    r, v = np.random.default_rng(1).normal(size=(2, 20))
    adv, ret = gae_advantages(r, v, 0.0, 0.99, 0.95)
    _, ret2 = gae_advantages(r, v, 0.0, 0.99, 0.95, normalize=False)
    assert adv.mean() == pytest.approx(0, abs=1e-12) and adv.std() == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(ret, ret2)  # returns come from the raw advantages
    one, _ = gae_advantages([2.0], [0.5], 0.0, 0.9, 0.9)
    assert one[0] == pytest.approx(1.5)  # a single step is left as is
    flat, _ = gae_advantages([0.0, 0.0], [0.0, 0.0], 0.0, 0.9, 0.9)
    np.testing.assert_array_equal(flat, 0.0)


@pytest.fixture(scope="module")
def batch():
    case = load_bundled("toy4")
    env = GridEnv(case)
    params = init_params(GnnConfig(zero_heads=False), 3)  # non-uniform policy, non-zero V
    traj = collect_episode(env, params, 6, stream_rng(0, 1))
    rng = np.random.default_rng(2)
    # perturb the behaviour log-probs so some ratios sit outside the clip range
    old = traj.log_probs + rng.normal(scale=0.3, size=6)
    adv = rng.normal(size=6)
    ret = rng.normal(size=6)
    return params, traj, old, adv, ret


def test_loss_matches_script(batch):
    params, traj, old, adv, ret = batch
    cfg = PpoConfig(horizon=6, minibatch=6)
    loss, parts = ppo_loss(params, traj.states, traj.actions, old, adv, ret, cfg)
    with nn.no_grad():
        lps = [policy_logits(params, g).log_softmax().data for g in traj.states]
        vals = [state_value(params, g).item() for g in traj.states]
    ref, l_clip, l_value, l_ent = ppo_loss_script(lps, old, traj.actions, adv, vals, ret,
                                                  cfg.epsilon, cfg.k1, cfg.k2)
    assert loss.item() == pytest.approx(ref, abs=1e-10)
    assert parts["l_clip"] == pytest.approx(l_clip, abs=1e-10)
    assert parts["l_value"] == pytest.approx(l_value, abs=1e-10)
    assert parts["l_entropy"] == pytest.approx(l_ent, abs=1e-10)


def test_on_policy_batch_has_unit_ratio(batch):
    params, traj, _, adv, ret = batch
    cfg = PpoConfig(horizon=6, minibatch=6, k1=0.0, k2=0.0)
    loss, parts = ppo_loss(params, traj.states, traj.actions, traj.log_probs, adv, ret, cfg)
    assert parts["l_clip"] == pytest.approx(np.mean(adv), abs=1e-12)


def test_clip_blocks_gradient_outside_range(batch):
    params, traj, _, _, ret = batch
    cfg = PpoConfig(horizon=6, minibatch=6, k1=0.0, k2=0.0)
    # ratio = e > 1 + eps with positive advantage: the clipped branch wins, no gradient
    old = traj.log_probs - 1.0
    adv = np.ones(6)
    loss, _ = ppo_loss(params, traj.states, traj.actions, old, adv, ret, cfg)
    named = params.named_parameters()
    grads = nn.gradients(loss, named)
    assert all(np.all(g == 0) for g in grads.values())
    # inside the range the same batch does move the actor
    loss, _ = ppo_loss(params, traj.states, traj.actions, traj.log_probs, adv, ret, cfg)
    grads = nn.gradients(loss, named)
    assert any(np.any(g != 0) for k, g in grads.items() if k.startswith("actor"))


def test_policy_gradient_direction():
    # one Adam step on a positive-advantage action must make that action more likely
    case = load_bundled("bandit")
    env = GridEnv(case)
    params = init_params(GnnConfig(), 0)
    s = env.reset()
    with nn.no_grad():
        lp0 = policy_logits(params, s.graph).log_softmax().data
    cfg = PpoConfig(horizon=2, minibatch=2, k1=0.0, k2=0.0)
    loss, _ = ppo_loss(params, [s.graph, s.graph], np.array([1, 0]), lp0[[1, 0]], np.array([1.0, -1.0]),
                       np.zeros(2), cfg)
    named = params.named_parameters()
    nn.adam_step(named, nn.gradients(loss, named), nn.AdamState(lr=1e-3))
    with nn.no_grad():
        lp1 = policy_logits(params, s.graph).log_softmax().data
    assert lp1[1] > lp0[1]


def test_entropy_bounds(batch):
    params, traj, old, adv, ret = batch
    _, parts = ppo_loss(params, traj.states, traj.actions, old, adv, ret, PpoConfig(horizon=6, minibatch=6))
    assert 0.0 <= parts["l_entropy"] <= np.log(len(traj.states[0].generator_nodes)) + 1e-12


def test_collect_episode(batch):
    params, traj, *_ = batch
    assert len(traj) == 6 and len(traj.env_states) == 7 and len(traj.infos) == 6
    with nn.no_grad():
        for g, a, lp in zip(traj.states, traj.actions, traj.log_probs):
            assert policy_logits(params, g).log_softmax().data[a] == pytest.approx(lp, abs=1e-12)
    assert np.array_equal(traj.rewards, [i.reward for i in traj.infos])


def test_config_validation():
    for bad in (dict(gamma=1.1), dict(lam=-0.1), dict(epsilon=0.0), dict(minibatch=0),
                dict(minibatch=200, horizon=100), dict(select_rollouts=5)):
        with pytest.raises(ValueError):
            PpoConfig(**bad)


SMALL = PpoConfig(episodes=3, horizon=6, minibatch=3, epochs=2, checkpoint_every=2, select_every=2,
                  select_rollouts=10, seed=5)


def test_training_is_deterministic(tmp_path):
    case = load_bundled("toy4")
    a = train(case, SMALL, out_dir=tmp_path / "a")
    b = train(case, SMALL, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    names = sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir())
    assert names == ["best.json", "ep_0000.json", "ep_0002.json", "final.json"]
    for n in names:
        assert (tmp_path / "a" / "checkpoints" / n).read_bytes() == (tmp_path / "b" / "checkpoints" / n).read_bytes()
    assert a.metrics_csv().splitlines()[0].split(",") == METRIC_COLUMNS
    c = train(case, dataclasses.replace(SMALL, seed=6))
    assert c.metrics != a.metrics


def test_training_changes_parameters():
    case = load_bundled("toy4")
    res = train(case, dataclasses.replace(SMALL, select_every=0))
    fresh = init_params(GnnConfig(), stream_rng(SMALL.seed, 0))
    p, q = res.params.named_parameters(), fresh.named_parameters()
    assert any(not np.array_equal(p[k].data, q[k].data) for k in p)
    assert res.best_params is None and len(res.metrics) == 3


def test_zero_episodes(tmp_path):
    case = load_bundled("toy4")
    res = train(case, dataclasses.replace(SMALL, episodes=0), out_dir=tmp_path)
    assert res.metrics == [] and res.best_params is None
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["ep_0000.json"]
    assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(METRIC_COLUMNS)


def test_on_step_sees_every_transition():
    case = load_bundled("toy4")
    seen = []
    train(case, dataclasses.replace(SMALL, select_every=0), on_step=lambda ep, info: seen.append((ep, info.t)))
    assert seen == [(ep, t) for ep in (1, 2, 3) for t in range(6)]


def test_unscoreable_selection_keeps_no_best(ieee30, tmp_path):
    # two steps from reset never bring the IEEE-30 slack under its limit, so every score is inf
    cfg = PpoConfig(episodes=2, horizon=2, minibatch=2, epochs=1, checkpoint_every=0, select_every=1, select_horizon=2,
                    select_rollouts=10)
    res = train(ieee30, cfg, out_dir=tmp_path)
    assert res.best_params is None and res.best_score == float("inf")
    assert not (tmp_path / "checkpoints" / "best.json").exists()
