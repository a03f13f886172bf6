import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drmd.agent import (CLASSIFY_ONLY, CLASSIFY_REJECT, AgentConfig, DrmdAgent, SlidingWindow, Transition, advantage,
                        classification_uncertainty, reward_config_for, standardize)
from drmd.errors import ConfigurationError, ContractViolation
from drmd.mdp import Action, RewardConfig, Sample
from drmd.metrics import f1

from conftest import tiny_stream


def small_agent(kind=CLASSIFY_REJECT, dim=30, **kw):
    params = dict(policy_kind=kind, hidden_layers=1, layer_size=16, seed=4)
    params.update(kw)
    return DrmdAgent(dim, AgentConfig(**params))


@pytest.fixture(scope="module")
def stream():
    return tiny_stream()


def params_of(agent):
    return [p.copy() for net in (agent.actor, agent.critic) for p in net.parameters()]


class TestConfig:
    def test_defaults(self):
        cfg = AgentConfig()
        assert (cfg.data_epochs, cfg.minibatch_epochs, cfg.minibatch_size) == (5, 1, 100)
        assert (cfg.clip_coefficient, cfg.value_coefficient, cfg.entropy_coefficient) == (0.2, 0.5, 0.01)
        assert (cfg.max_grad_norm, cfg.learning_rate, cfg.adam_epsilon) == (0.5, 2.5e-4, 1e-5)
        assert (cfg.sliding_window_size, cfg.seed, cfg.hidden_layers, cfg.layer_size) == (5000, 1, 3, 512)

    @pytest.mark.parametrize("bad", [dict(clip_coefficient=0), dict(learning_rate=-1), dict(minibatch_size=0),
                                     dict(policy_kind="other"), dict(minibatch_size=50, sliding_window_size=10)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            AgentConfig(**bad)

    def test_output_sizes(self):
        assert small_agent(CLASSIFY_ONLY).actor.output_dim == 2
        assert small_agent(CLASSIFY_REJECT).actor.output_dim == 3
        assert small_agent().critic.output_dim == 1


class TestRollout:
    def test_one_transition_per_sample(self, stream):
        agent = small_agent()
        cfg = reward_config_for(stream)
        batch = agent.rollout(stream, cfg)
        assert len(batch) == len(stream)
        assert [t.sample_id for t in batch] == [s.id for s in stream]
        assert all(t.log_prob <= 0 and math.isfinite(t.reward) for t in batch)

    def test_classify_only_never_rejects(self, stream):
        batch = small_agent(CLASSIFY_ONLY).rollout(stream, reward_config_for(stream))
        assert not np.any(batch.actions == Action.REJECT)

    def test_degenerate_actor(self, stream):
        agent = small_agent()
        head = agent.actor.layers[-1]
        head.weights[:] = 0
        head.biases[:] = [1000.0, 0.0, 0.0]
        batch = agent.rollout(stream, reward_config_for(stream))
        assert np.all(batch.actions == Action.GOODWARE)
        assert np.all(batch.log_probs == 0.0)

    def test_rewards_use_rollout_probabilities(self, stream):
        from drmd.mdp import reward
        agent = small_agent()
        cfg = reward_config_for(stream)
        batch = agent.rollout(stream[:50], cfg)
        for s, a, p, r in zip(stream, batch.actions, batch.probs, batch.rewards):
            assert r == pytest.approx(reward(s, a, p, cfg), rel=1e-12)

    def test_reordering_leaves_per_sample_quantities(self, stream):
        agent = small_agent()
        subset = stream[:40]
        x = agent.features(subset)
        perm = np.random.default_rng(0).permutation(len(subset))
        np.testing.assert_array_equal(agent.action_probs(x)[perm], agent.action_probs(x[perm]))

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            small_agent().rollout([], RewardConfig())


class TestAdvantage:
    def test_definition(self):
        t = Transition("a", (), Action.MALWARE, -0.1, 3.0, 5.0)
        assert advantage(t) == 2.0
        assert advantage(Transition("a", (), Action.MALWARE, -0.1, 5.0, 5.0)) == 0.0

    def test_standardized_moments(self):
        adv = standardize(np.random.default_rng(0).normal(3, 7, size=257))
        assert abs(adv.mean()) < 1e-6 and abs(adv.std() - 1) < 1e-6

    def test_single_value_untouched(self):
        np.testing.assert_array_equal(standardize(np.array([4.0])), [4.0])

    def test_batch_advantage_is_reward_minus_value(self, stream):
        batch = small_agent().rollout(stream, reward_config_for(stream))
        np.testing.assert_array_equal(batch.advantages, batch.rewards - batch.values)
        np.testing.assert_array_equal(batch.returns, batch.rewards)


class TestPpoUpdate:
    def test_first_pass_ratio_is_one(self, stream):
        agent = small_agent()
        batch = agent.rollout(stream, reward_config_for(stream))
        np.testing.assert_allclose(agent.policy_ratios(batch), 1.0, atol=1e-6)

    def test_identical_policy_gives_zero_policy_loss(self, stream):
        agent = small_agent(dropout=0.0, minibatch_size=len(stream))
        batch = agent.rollout(stream, reward_config_for(stream))
        stats = agent.ppo_update(batch)
        assert stats["clip_fraction"] == 0.0
        assert abs(stats["policy_loss"]) < 1e-6

    def test_ratio_clamped_in_surrogate(self, stream):
        agent = small_agent(dropout=0.0, minibatch_size=len(stream))
        batch = agent.rollout(stream, reward_config_for(stream))
        batch.log_probs = batch.log_probs - math.log(3.0)
        adv = standardize(batch.advantages.copy())
        expected = -np.mean(np.minimum(3.0 * adv, 1.2 * adv))
        stats = agent.ppo_update(batch)
        assert stats["clip_fraction"] == 1.0
        assert stats["policy_loss"] == pytest.approx(expected, rel=1e-5)

    @pytest.mark.parametrize("sign", [1.0, -1.0])
    def test_single_transition_moves_with_advantage(self, stream, sign):
        agent = small_agent(CLASSIFY_ONLY, dropout=0.0, minibatch_size=1, sliding_window_size=None)
        cfg = RewardConfig(sigma_hat=0.1, temporal_scaling=False, imbalance_scaling=False)
        batch = agent.rollout(stream[:1], cfg)
        batch.values[:] = 0.0
        batch.advantages[:] = sign
        a = batch.actions[0]
        before = agent.action_probs(batch.x)[0, a]
        agent.ppo_update(batch)
        after = agent.action_probs(batch.x)[0, a]
        assert (after - before) * sign > 0

    def test_entropy_bounds(self, stream):
        agent = small_agent()
        stats = agent.ppo_update(agent.rollout(stream, reward_config_for(stream)))
        assert 0 <= stats["entropy"] <= math.log(3) + 1e-9

    def test_empty_batch(self, stream):
        agent = small_agent()
        batch = agent.rollout(stream[:2], reward_config_for(stream))
        from drmd.agent import RolloutBatch
        empty = RolloutBatch([], batch.x[:0], batch.actions[:0], batch.log_probs[:0], batch.values[:0],
                             batch.rewards[:0], batch.probs[:0], batch.advantages[:0], batch.returns[:0])
        with pytest.raises(ContractViolation):
            agent.ppo_update(empty)


class TestTraining:
    def test_empty_window(self):
        with pytest.raises(ConfigurationError):
            small_agent().train(SlidingWindow(10))

    def test_deterministic(self, stream):
        a = small_agent().fit(stream)
        b = small_agent().fit(stream)
        for p, q in zip(params_of(a), params_of(b)):
            np.testing.assert_array_equal(p, q)

    def test_separable_holdout(self, separable):
        train, holdout = separable
        agent = DrmdAgent(50, AgentConfig(policy_kind=CLASSIFY_ONLY, seed=1)).fit(train)
        preds, _ = agent.decide(agent.features(holdout))
        assert f1(preds, [s.label for s in holdout]) >= 0.95

    def test_fine_tune_changes_parameters(self, stream):
        agent = small_agent().fit(stream[:300])
        before = params_of(agent)
        agent.update(stream[300:360])
        assert any(not np.array_equal(p, q) for p, q in zip(before, params_of(agent)))

    def test_reward_config_frozen_from_training(self, stream):
        agent = small_agent().fit(stream[:360])
        frozen = agent.reward_cfg
        agent.update(stream[360:420])
        assert agent.reward_cfg is frozen
        assert frozen.origin_month == 0

    def test_reset_optimizer_flag(self, stream):
        agent = small_agent(reset_optimizer=True).fit(stream[:200])
        assert agent.actor_opt.step_count == 5 * 2
        agent.update(stream[200:240])
        # moments restart, so only the fine-tune's 5 epochs x 3 minibatches are counted
        assert agent.actor_opt.step_count == 5 * 3

    def test_optimizer_state_kept_by_default(self, stream):
        agent = small_agent().fit(stream[:200])
        agent.update(stream[200:240])
        assert agent.actor_opt.step_count == 5 * 2 + 5 * 3


class TestSlidingWindow:
    def test_evicts_oldest(self):
        win = SlidingWindow(5000, [Sample(f"a{i:05d}", 0, 0, ()) for i in range(5000)])
        evicted = win.push([Sample(f"b{i:03d}", 1, 0, ()) for i in range(100)])
        assert evicted == 100 and len(win) == 5000
        assert win.samples[0].id == "a00100" and win.samples[-1].id == "b099"

    def test_rejects_older_month(self):
        win = SlidingWindow(10, [Sample("a", 3, 0, ())])
        with pytest.raises(ContractViolation):
            win.push([Sample("b", 2, 0, ())])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 50), st.lists(st.integers(0, 30), max_size=20))
    def test_capacity_and_order(self, capacity, sizes):
        win = SlidingWindow(capacity)
        for month, n in enumerate(sizes):
            win.push([Sample(f"{month}-{i}", month, 0, ()) for i in range(n)])
            months = [s.month for s in win.samples]
            assert len(win) <= capacity and months == sorted(months)


class TestInference:
    def fixed(self, probs):
        agent = small_agent(dim=3)
        agent.action_probs = lambda x: np.atleast_2d(np.asarray(probs, dtype=np.float64))
        return agent

    def test_deterministic_argmax(self):
        assert self.fixed([0.7, 0.2, 0.1]).predict(np.zeros(3))[0] is Action.GOODWARE
        assert self.fixed([0.1, 0.6, 0.3]).predict(np.zeros(3))[0] is Action.MALWARE

    def test_ties_to_lowest_code(self):
        assert self.fixed([0.4, 0.4, 0.2]).predict(np.zeros(3))[0] is Action.GOODWARE

    def test_stochastic_matches_distribution(self):
        agent = self.fixed([0.2, 0.5, 0.3])
        rng = np.random.default_rng(0)
        draws = [int(agent.predict(np.zeros(3), "stochastic", rng)[0]) for _ in range(4000)]
        np.testing.assert_allclose(np.bincount(draws, minlength=3) / 4000, [0.2, 0.5, 0.3], atol=0.03)

    def test_classify_only_never_rejects(self, stream):
        agent = small_agent(CLASSIFY_ONLY)
        actions, probs = agent.decide(agent.features(stream))
        assert probs.shape[1] == 2 and not np.any(actions == 2)

    def test_probabilities_valid(self, stream):
        probs = small_agent().action_probs(small_agent().features(stream))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("probs,expected", [([1, 0], 0.0), ([0.5, 0.5], 0.5), ([0.4, 0.2, 0.4], 1 / 3)])
    def test_uncertainty(self, probs, expected):
        assert classification_uncertainty(np.array(probs))[0] == pytest.approx(expected, abs=1e-15)

    def test_uncertainty_range(self, stream):
        agent = small_agent()
        u = agent.uncertainty(agent.features(stream))
        assert np.all((u >= 0) & (u <= 0.5))


def test_checkpoint_roundtrip(tmp_path, stream):
    agent = small_agent().fit(stream[:200])
    agent.save(tmp_path / "agent.npz")
    loaded = DrmdAgent.load(tmp_path / "agent.npz")
    x = agent.features(stream[200:260])
    np.testing.assert_array_equal(loaded.action_probs(x), agent.action_probs(x))
    assert loaded.reward_cfg == agent.reward_cfg
    assert loaded.config == agent.config


def test_deepcopy_continues_identically(stream):
    agent = small_agent().fit(stream[:200])
    twin = copy.deepcopy(agent)
    agent.update(stream[200:240])
    twin.update(stream[200:240])
    for p, q in zip(params_of(agent), params_of(twin)):
        np.testing.assert_array_equal(p, q)
