import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batchrl import ContractViolation, envs
from batchrl.agent import (BETA_MAX, BETA_MIN, EVAL, TRAIN, BatchPPO, PolicyBatch, PpoConfig,
                           adapt_beta, policy_loss_and_grads, whiten)
from batchrl.nn import AdamState, adam_step, forward, init_mlp

from gradcheck import fd_grads, max_rel_error

TINY = dict(hidden=(4, 3), episodes_per_update=2, update_epochs=3)


def lq_spec():
    return envs.make("lq1d").spec


def pendulum_spec():
    return envs.make("pendulum").spec


# -- adapt_beta ---------------------------------------------------------------

CFG = PpoConfig()


@pytest.mark.parametrize("beta,observed,expected", [
    (1.0, 0.02, 2.0),                  # above 1.5 * target: doubles
    (1.0, 0.015, 1.0),                 # exactly at upper threshold: dead zone
    (1.0, 0.0150001, 2.0),
    (1.0, 0.01, 1.0),                  # at target
    (1.0, 0.01 / 1.5, 1.0),            # exactly at lower threshold: dead zone
    (1.0, 0.006, 0.5),                 # below target / 1.5: halves
    (1.0, 0.0, 0.5),
    (BETA_MAX, 1.0, BETA_MAX),         # saturated high
    (BETA_MAX / 1.5, 1.0, BETA_MAX),   # clamped on the way up
    (BETA_MIN, 0.0, BETA_MIN),         # saturated low
    (1.5e-4, 0.0, BETA_MIN),           # clamped on the way down
    (3.0, 0.012, 3.0),
])
def test_adapt_beta_table(beta, observed, expected):
    assert adapt_beta(beta, observed, CFG) == expected


def test_adapt_beta_rejects_nonpositive():
    with pytest.raises(ContractViolation):
        adapt_beta(0.0, 0.01, CFG)


@settings(max_examples=300)
@given(st.floats(1e-4, 1e4), st.floats(0, 1), st.floats(0, 1))
def test_adapt_beta_monotone(beta, kl_a, kl_b):
    lo, hi = sorted((kl_a, kl_b))
    assert adapt_beta(beta, lo, CFG) <= adapt_beta(beta, hi, CFG)


# -- surrogate loss -----------------------------------------------------------

def random_batch(r, n, obs_dim, act_dim, offset=0.0, dtype=np.float64):
    return PolicyBatch(
        obs=r.normal(size=(n, obs_dim)),
        actions=r.normal(size=(n, act_dim)),
        behavior_mean=np.tanh(r.normal(size=(n, act_dim))) + offset,
        behavior_log_std=np.tile(r.normal(scale=0.3, size=act_dim), (n, 1)),
        advantages=r.normal(size=n),
    ).astype(dtype)


def loop_surrogate(params, log_std, batch, beta, cfg):
    """Transition-by-transition penalized surrogate, written without the package's math."""
    n = len(batch.advantages)
    ratio_adv, kls = 0.0, 0.0
    for i in range(n):
        h = list(batch.obs[i])
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            z = [sum(w[j, q] * h[q] for q in range(len(h))) + b[j] for j in range(w.shape[0])]
            h = [max(v, 0.0) for v in z] if k < len(params.weights) - 1 else [math.tanh(v) for v in z]
        logp_new = logp_old = kl = 0.0
        for a in range(len(h)):
            m_new, s_new = h[a], math.exp(log_std[a])
            m_old, s_old = batch.behavior_mean[i, a], math.exp(batch.behavior_log_std[i, a])
            x = batch.actions[i, a]
            logp_new += -math.log(s_new) - 0.5 * math.log(2 * math.pi) - 0.5 * ((x - m_new) / s_new) ** 2
            logp_old += -math.log(s_old) - 0.5 * math.log(2 * math.pi) - 0.5 * ((x - m_old) / s_old) ** 2
            kl += math.log(s_new / s_old) + (s_old ** 2 + (m_old - m_new) ** 2) / (2 * s_new ** 2) - 0.5
        ratio_adv += math.exp(logp_new - logp_old) * batch.advantages[i]
        kls += kl
    mean_kl = kls / n
    cutoff = max(0.0, mean_kl - cfg.kl_cutoff_factor * cfg.kl_target)
    return -ratio_adv / n + beta * mean_kl + cfg.kl_cutoff_coef * cutoff ** 2


@pytest.mark.parametrize("offset", [0.0, 0.05, 0.5])
def test_surrogate_value_matches_loop_oracle(rng, offset):
    params = init_mlp(rng, 3, (5, 4), "tanh", 2, dtype=np.float64)
    batch = random_batch(rng, 6, 3, 2, offset)
    log_std = rng.normal(scale=0.3, size=2)
    info, _, _ = policy_loss_and_grads(params, log_std, batch, 0.7, CFG)
    assert info.loss == pytest.approx(loop_surrogate(params, log_std, batch, 0.7, CFG), rel=1e-12)


@pytest.mark.parametrize("offset", [0.0, 0.05, 0.5])
@pytest.mark.parametrize("seed", range(3))
def test_surrogate_gradient_matches_finite_differences(seed, offset):
    r = np.random.default_rng(seed)
    params = init_mlp(r, 3, (5, 4), "tanh", 2, dtype=np.float64)
    params = params.with_arrays([a + 0.1 * r.normal(size=a.shape) for a in params.arrays()])
    batch = random_batch(r, 8, 3, 2, offset)
    log_std = r.normal(scale=0.3, size=2)
    beta = 0.7

    def loss(arrays):
        info, _, _ = policy_loss_and_grads(params.with_arrays(arrays[:-1]), arrays[-1], batch, beta, CFG)
        return info.loss

    info, g, g_log_std = policy_loss_and_grads(params, log_std, batch, beta, CFG)
    if offset == 0.5:
        assert info.mean_kl > CFG.kl_cutoff_factor * CFG.kl_target  # cut-off engaged
    numeric = fd_grads(loss, [a.copy() for a in params.arrays()] + [log_std.copy()], h=1e-5)
    assert max_rel_error([*g.arrays(), g_log_std], numeric) < 1e-3


def test_identity_policies_give_unit_ratio_and_zero_kl(rng):
    params = init_mlp(rng, 3, (5, 4), "tanh", 2)
    obs = rng.normal(size=(7, 3)).astype(np.float32)
    mean, _ = forward(params, obs)
    log_std = np.full(2, -0.7, np.float32)
    batch = PolicyBatch(obs, rng.normal(size=(7, 2)).astype(np.float32), mean,
                        np.tile(log_std, (7, 1)), rng.normal(size=7).astype(np.float32))
    info, _, _ = policy_loss_and_grads(params, log_std, batch, 1.0, CFG)
    assert info.max_ratio_dev == 0.0
    assert info.mean_kl == 0.0
    assert info.surrogate == pytest.approx(-batch.advantages.mean(), rel=1e-6)


def test_zero_advantages_make_first_step_a_noop(rng):
    params = init_mlp(rng, 3, (5, 4), "tanh", 2)
    obs = rng.normal(size=(7, 3)).astype(np.float32)
    mean, _ = forward(params, obs)
    log_std = np.full(2, -0.7, np.float32)
    batch = PolicyBatch(obs, rng.normal(size=(7, 2)).astype(np.float32), mean,
                        np.tile(log_std, (7, 1)), np.zeros(7, np.float32))
    _, g, g_log_std = policy_loss_and_grads(params, log_std, batch, 1.0, CFG)
    leaves = [*params.arrays(), log_std]
    _, after = adam_step(AdamState.zeros_like(leaves), leaves, [*g.arrays(), g_log_std], 1e-4)
    for a, b in zip(leaves, after):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 500))
def test_whitening(seed, n):
    r = np.random.default_rng(seed)
    x = (r.normal(size=n) * r.uniform(0.01, 100) + r.uniform(-50, 50)).astype(np.float32)
    if np.unique(x).size < 2:
        return
    w = whiten(x)
    assert abs(w.astype(np.float64).mean()) < 1e-6
    assert abs(w.astype(np.float64).std() - 1) < 1e-3


# -- episode protocol ---------------------------------------------------------

def step_agent(agent, rng, done=None, mode=TRAIN):
    n = agent.num_agents
    obs = rng.normal(size=(n, agent.spec.obs_dim)).astype(np.float32)
    action = agent.perform(obs, mode)
    reward = rng.normal(size=n).astype(np.float32)
    done = np.zeros(n, bool) if done is None else np.asarray(done)
    agent.experience(obs, action, reward, done, obs)
    return action


def test_begin_episodes_allocates_buffers():
    agent = BatchPPO(pendulum_spec(), 4, PpoConfig(**TINY), seed=0)
    agent.begin_episodes(range(4))
    assert agent.store.in_flight == {0: [], 1: [], 2: [], 3: []}
    agent.begin_episodes([])
    with pytest.raises(ContractViolation):
        agent.begin_episodes([1])


def test_partial_restart(rng):
    agent = BatchPPO(pendulum_spec(), 4, PpoConfig(**TINY), seed=0)
    agent.begin_episodes(range(4))
    step_agent(agent, rng, [False, True, False, True])
    agent.end_episodes([1, 3])
    agent.begin_episodes([1, 3])
    assert len(agent.store.in_flight[0]) == 1 and agent.store.in_flight[1] == []


def test_experience_grows_each_buffer_and_keeps_terminal(rng):
    agent = BatchPPO(pendulum_spec(), 2, PpoConfig(**TINY), seed=0)
    agent.begin_episodes([0, 1])
    step_agent(agent, rng)
    step_agent(agent, rng, [True, False])
    assert [len(agent.store.in_flight[i]) for i in (0, 1)] == [2, 2]
    assert agent.store.in_flight[0][-1].done


def test_experience_requires_perform(rng):
    agent = BatchPPO(pendulum_spec(), 2, PpoConfig(**TINY), seed=0)
    agent.begin_episodes([0, 1])
    step_agent(agent, rng)
    with pytest.raises(ContractViolation):
        agent.experience(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros(2), np.zeros(2, bool), np.zeros((2, 3)))


def test_end_without_episode_is_violation():
    agent = BatchPPO(pendulum_spec(), 2, PpoConfig(**TINY), seed=0)
    with pytest.raises(ContractViolation):
        agent.end_episodes([0])


def test_perform_shape_check():
    agent = BatchPPO(pendulum_spec(), 2, PpoConfig(**TINY), seed=0)
    with pytest.raises(ContractViolation):
        agent.perform(np.zeros((3, 3)))


def test_behavior_stats_are_bit_identical_to_perform(rng):
    agent = BatchPPO(pendulum_spec(), 3, PpoConfig(**TINY), seed=0)
    agent.begin_episodes(range(3))
    obs = rng.normal(size=(3, 3)).astype(np.float32)
    agent.perform(obs, TRAIN)
    cached = agent._cache
    agent.experience(obs, np.zeros((3, 1)), np.zeros(3), np.zeros(3, bool), obs)
    for i in range(3):
        t = agent.store.in_flight[i][0]
        assert t.behavior_mean.tobytes() == cached["mean"][i].tobytes()
        assert t.behavior_log_std.tobytes() == cached["log_std"][i].tobytes()
        assert t.action.tobytes() == cached["action"][i].tobytes()


def test_eval_mode_deterministic_and_bounded(rng):
    agent = BatchPPO(pendulum_spec(), 5, PpoConfig(**TINY, init_mean_scale=50.0), seed=0)
    agent.obs_stats = agent.obs_stats.__class__(3.0, np.zeros(3), np.full(3, 3.0))
    obs = rng.normal(size=(5, 3)).astype(np.float32) * 100
    a = agent.perform(obs, EVAL)
    b = agent.perform(obs, EVAL)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a) <= 2.0)


def test_train_mode_degenerate_width_returns_mean(rng):
    agent = BatchPPO(pendulum_spec(), 5, PpoConfig(**TINY), seed=0)
    agent.log_std[:] = -20.0
    obs = rng.normal(size=(5, 3)).astype(np.float32)
    a = agent.perform(obs, TRAIN)
    mean = agent.to_env_action(agent._cache["mean"])
    np.testing.assert_allclose(a, mean, atol=1e-5)


def test_train_mode_sampling_std():
    agent = BatchPPO(lq_spec(), 1, PpoConfig(**TINY), seed=0)
    agent.obs_stats = agent.obs_stats.__class__(2.0, np.zeros(1), np.full(1, 2.0))
    obs = np.array([[0.3]], np.float32)
    actions = np.array([agent.perform(obs, TRAIN)[0, 0] for _ in range(10_000)])
    # Env actions are normalized actions scaled by (high - low) / 2 = 2.
    expected = 2.0 * math.exp(agent.log_std[0])
    assert abs(actions.std() / expected - 1) < 0.03


def test_eval_mode_freezes_statistics(rng):
    agent = BatchPPO(pendulum_spec(), 2, PpoConfig(**TINY), seed=0)
    agent.begin_episodes([0, 1])
    step_agent(agent, rng)
    obs_stats, reward_stats = agent.obs_stats, agent.reward_stats
    agent.abort_episodes()
    agent.begin_episodes([0, 1])
    for _ in range(5):
        step_agent(agent, rng, mode=EVAL)
    assert agent.obs_stats is obs_stats and agent.reward_stats is reward_stats
    agent.end_episodes([0, 1])
    assert agent.store.pool == []


def fill_pool(agent, rng, episodes, length=3):
    """Run ``episodes`` complete train episodes one agent index at a time."""
    updates = []
    n = agent.num_agents
    for _ in range(episodes // n):
        agent.begin_episodes(range(n))
        for t in range(length):
            step_agent(agent, rng, [t == length - 1] * n)
        updates.append(agent.end_episodes(range(n)))
    return updates


def test_update_threshold_and_pool_discard(rng):
    cfg = PpoConfig(hidden=(4, 3), episodes_per_update=25, update_epochs=2)
    agent = BatchPPO(pendulum_spec(), 1, cfg, seed=0)
    flags = fill_pool(agent, rng, 24)
    assert not any(flags) and len(agent.store.pool) == 24
    flags = fill_pool(agent, rng, 1)
    assert flags == [True] and agent.store.pool == []
    assert agent.updates[-1].episodes == 25


def test_simultaneous_ends_give_one_update(rng):
    cfg = PpoConfig(hidden=(4, 3), episodes_per_update=5, update_epochs=2)
    agent = BatchPPO(pendulum_spec(), 3, cfg, seed=0)
    fill_pool(agent, rng, 3)
    assert len(agent.store.pool) == 3
    fill_pool(agent, rng, 3)
    assert len(agent.updates) == 1 and agent.updates[0].episodes == 6
    assert agent.store.pool == []


def test_pool_below_threshold_returns_false(rng):
    agent = BatchPPO(pendulum_spec(), 3, PpoConfig(hidden=(4, 3)), seed=0)
    assert fill_pool(agent, rng, 3) == [False]


def test_no_transition_used_twice(rng, monkeypatch):
    cfg = PpoConfig(hidden=(4, 3), episodes_per_update=2, update_epochs=1)
    agent = BatchPPO(pendulum_spec(), 2, cfg, seed=0)
    seen = []
    original = agent.prepare_batch

    def spy(pool):
        seen.append([id(ep) for ep in pool])
        return original(pool)

    monkeypatch.setattr(agent, "prepare_batch", spy)
    fill_pool(agent, rng, 8)
    assert len(seen) == 4
    flat = [i for ids in seen for i in ids]
    assert len(flat) == len(set(flat))


def test_first_epoch_identity_inside_update(rng):
    cfg = PpoConfig(hidden=(16, 8), episodes_per_update=4, update_epochs=5)
    agent = BatchPPO(pendulum_spec(), 4, cfg, seed=0)
    fill_pool(agent, rng, 12, length=10)
    assert len(agent.updates) == 3
    for m in agent.updates:
        assert m.initial_max_ratio_dev < 1e-5
        assert m.initial_mean_kl < 1e-10


@pytest.mark.parametrize("start,bound", [(5.0, 2.0), (-15.0, -10.0)])
def test_log_std_clamped_after_step(rng, start, bound):
    cfg = PpoConfig(hidden=(4, 3), episodes_per_update=1, update_epochs=1)
    agent = BatchPPO(pendulum_spec(), 1, cfg, seed=0)
    agent.log_std[:] = start
    fill_pool(agent, rng, 1)
    assert agent.log_std[0] == bound


def test_surrogate_after_one_epoch_matches_independent_oracle():
    r = np.random.default_rng(3)
    cfg = PpoConfig(hidden=(4, 3), episodes_per_update=1, update_epochs=1, gamma=0.9)
    agent = BatchPPO(lq_spec(), 1, cfg, seed=2)
    agent.begin_episodes([0])
    for t in range(3):
        step_agent(agent, r, [t == 2])
    steps, _ = agent.store.end(0)
    from batchrl.agent import Episode
    pool = [Episode.from_transitions(steps)]

    init_params = agent.policy.astype(np.float64)
    init_log_std = agent.log_std.astype(np.float64)
    value = agent.value.astype(np.float64)
    beta = agent.beta
    ep = pool[0]

    # Independent advantages: brute-force discounting, loop forward for V, whitening.
    rewards = ep.rewards.astype(np.float64)
    returns = np.array([sum(0.9 ** i * rewards[t + i] for i in range(3 - t)) for t in range(3)])
    v = np.array([forward(value, ep.obs[t:t + 1].astype(np.float64))[0][0, 0] for t in range(3)])
    adv = returns - v
    adv = (adv - adv.mean()) / adv.std()
    batch = PolicyBatch(ep.obs, ep.actions, ep.behavior_mean, ep.behavior_log_std, adv).astype(np.float64)

    def loss(arrays):
        return loop_surrogate(init_params.with_arrays(arrays[:-1]), arrays[-1], batch, beta, cfg)

    leaves = [*[a.copy() for a in init_params.arrays()], init_log_std.copy()]
    grads = fd_grads(loss, leaves, h=1e-6)
    _, stepped = adam_step(AdamState.zeros_like(leaves), leaves, grads, cfg.policy_lr)
    expected = loop_surrogate(init_params.with_arrays(stepped[:-1]), stepped[-1], batch, beta, cfg)

    agent.run_update(pool)
    got = loop_surrogate(agent.policy.astype(np.float64), agent.log_std.astype(np.float64), batch, beta, cfg)
    assert got == pytest.approx(expected, abs=1e-5)


def test_checkpoint_round_trip(tmp_path, rng):
    agent = BatchPPO(pendulum_spec(), 2, PpoConfig(**TINY), seed=0)
    fill_pool(agent, rng, 4)
    agent.save(tmp_path / "a.brlc")
    other = BatchPPO.from_checkpoint(tmp_path / "a.brlc", pendulum_spec(), 2, PpoConfig(**TINY))
    obs = rng.normal(size=(2, 3)).astype(np.float32)
    np.testing.assert_array_equal(agent.perform(obs, EVAL), other.perform(obs, EVAL))
    assert other.beta == agent.beta
    np.testing.assert_array_equal(other.log_std, agent.log_std)


def test_checkpoint_spec_mismatch(tmp_path):
    agent = BatchPPO(pendulum_spec(), 2, PpoConfig(**TINY), seed=0)
    agent.save(tmp_path / "a.brlc")
    with pytest.raises(ContractViolation):
        BatchPPO.from_checkpoint(tmp_path / "a.brlc", lq_spec(), 2, PpoConfig(**TINY))


def test_config_validation():
    with pytest.raises(ContractViolation):
        PpoConfig(gamma=0.0)
    with pytest.raises(ContractViolation):
        PpoConfig(kl_cutoff_factor=1.0)
    with pytest.raises(ContractViolation):
        PpoConfig(episodes_per_update=0)
    cfg = PpoConfig()
    assert (cfg.episodes_per_update, cfg.update_epochs, cfg.policy_lr, cfg.value_lr) == (25, 25, 1e-4, 1e-3)
    assert cfg.hidden == (200, 100) and cfg.kl_cutoff_factor == 2.0
