import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drmd.agent import CLASSIFY_ONLY, AgentConfig, DrmdAgent
from drmd.errors import ConfigurationError, ContractViolation
from drmd.icmdp import IcmdpAgent, IcmdpConfig, episode_ids, gae, icmdp_reward, icmdp_rollout
from drmd.mdp import Action, Sample

from conftest import tiny_stream


def brute_force_gae(rewards, values, gamma, lam):
    n = len(rewards)
    v = list(values) + [0.0]
    deltas = [rewards[t] + gamma * v[t + 1] - v[t] for t in range(n)]
    return [sum((gamma * lam) ** k * deltas[t + k] for k in range(n - t)) for t in range(n)]


class TestReward:
    @pytest.mark.parametrize("label,action,expected", [(1, Action.MALWARE, 1.0), (0, Action.GOODWARE, 0.1),
                                                       (0, Action.MALWARE, -0.1), (1, Action.GOODWARE, -1.0)])
    def test_values(self, label, action, expected):
        assert icmdp_reward(label, action) == expected

    def test_no_reject(self):
        with pytest.raises(ContractViolation):
            icmdp_reward(1, Action.REJECT)


class TestEpisodes:
    def test_always_correct_is_one_episode(self):
        labels = np.array([0, 1, 1, 0, 1])
        assert set(episode_ids(labels, labels)) == {0}

    def test_goodware_miss_does_not_terminate(self):
        np.testing.assert_array_equal(episode_ids([0, 1, 0], [1, 1, 1]), [0, 0, 0])

    def test_single_wrong_malware(self):
        np.testing.assert_array_equal(episode_ids([1], [0]), [0])

    def test_restart_after_termination(self):
        np.testing.assert_array_equal(episode_ids([1, 0, 1, 1, 0], [0, 0, 0, 1, 0]), [0, 1, 1, 2, 2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
    def test_partition_covers_stream(self, pairs):
        labels, actions = map(np.array, zip(*pairs))
        ids = episode_ids(labels, actions)
        assert len(ids) == len(labels) and ids[0] == 0
        assert np.all(np.diff(ids) >= 0) and np.all(np.diff(ids) <= 1)
        # every episode but the last ends on a missed malware sample
        ends = np.flatnonzero(np.diff(ids)) 
        assert np.all((labels[ends] == 1) & (actions[ends] == 0))


class TestGae:
    def test_single_step(self):
        assert gae([2.0], [0.5], 0.99, 0.95)[0] == 1.5

    def test_gamma_zero(self):
        r, v = [1.0, -0.1, 0.1], [0.2, 0.3, -0.4]
        np.testing.assert_allclose(gae(r, v, 0.0, 0.95), np.array(r) - np.array(v))

    def test_three_steps_against_brute_force(self):
        r, v = [0.1, -0.1, 1.0], [0.05, 0.2, 0.7]
        np.testing.assert_allclose(gae(r, v, 0.99, 0.95), brute_force_gae(r, v, 0.99, 0.95), rtol=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-5, 5)), min_size=1, max_size=30),
           st.floats(0.01, 1), st.floats(0.01, 1))
    def test_random_episodes(self, rv, gamma, lam):
        r, v = zip(*rv)
        np.testing.assert_allclose(gae(r, v, gamma, lam), brute_force_gae(r, v, gamma, lam), rtol=1e-9, atol=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            gae([1.0, 2.0], [0.0], 0.9, 0.9)


class TestAgent:
    def test_config(self):
        cfg = IcmdpConfig()
        assert (cfg.gamma, cfg.gae_lambda, cfg.policy_kind) == (0.99, 0.95, CLASSIFY_ONLY)
        with pytest.raises(ConfigurationError):
            IcmdpConfig(gamma=0.0)
        with pytest.raises(ConfigurationError):
            IcmdpConfig(policy_kind="classify-reject")

    def test_same_initial_parameters_as_md_mdp_agent(self):
        a = IcmdpAgent(30, IcmdpConfig(hidden_layers=1, layer_size=16, seed=9))
        b = DrmdAgent(30, AgentConfig(policy_kind=CLASSIFY_ONLY, hidden_layers=1, layer_size=16, seed=9))
        for net_a, net_b in ((a.actor, b.actor), (a.critic, b.critic)):
            for p, q in zip(net_a.parameters(), net_b.parameters()):
                np.testing.assert_array_equal(p, q)

    def test_rollout_episodes_partition(self):
        stream = tiny_stream()
        agent = IcmdpAgent(30, IcmdpConfig(hidden_layers=1, layer_size=16))
        episodes = icmdp_rollout(agent, stream, np.random.default_rng(0))
        flat = [t.sample_id for ep in episodes for t in ep]
        assert flat == [s.id for s in stream]
        for ep in episodes[:-1]:
            last = ep[-1]
            assert last.reward == -1.0

    def test_rollout_advantages_are_per_episode_gae(self):
        stream = tiny_stream()[:200]
        agent = IcmdpAgent(30, IcmdpConfig(hidden_layers=1, layer_size=16))
        batch = agent.rollout(stream)
        for ep in np.unique(batch.episode_ids):
            idx = np.flatnonzero(batch.episode_ids == ep)
            np.testing.assert_allclose(batch.advantages[idx], gae(batch.rewards[idx], batch.values[idx], 0.99, 0.95))

    def test_trains_on_shuffled_input_chronologically(self):
        stream = tiny_stream()
        a = IcmdpAgent(30, IcmdpConfig(hidden_layers=1, layer_size=16)).fit(stream)
        b = IcmdpAgent(30, IcmdpConfig(hidden_layers=1, layer_size=16)).fit(stream[::-1])
        np.testing.assert_array_equal(a.actor.parameters()[0], b.actor.parameters()[0])
