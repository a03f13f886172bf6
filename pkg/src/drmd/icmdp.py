"""Imbalanced-classification MDP variant used for comparison.

Samples form one chronological stream. An episode runs until a malware
sample is misclassified or the stream ends, after which the next episode
starts at the following sample. Rewards are fixed at +/-1 for malware and
+/-0.1 for goodware, and advantages come from GAE within each episode. The
networks and the PPO update are shared with :class:`~drmd.agent.DrmdAgent`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .agent import CLASSIFY_ONLY, AgentConfig, DrmdAgent, RolloutBatch, Transition, _sample_actions
from .errors import ConfigurationError, ContractViolation
from .mdp import Action, RewardConfig, Sample, labels_of


@dataclass
class IcmdpConfig(AgentConfig):
    policy_kind: str = CLASSIFY_ONLY
    gamma: float = 0.99
    gae_lambda: float = 0.95

    def __post_init__(self):
        super().__post_init__()
        if self.policy_kind != CLASSIFY_ONLY:
            raise ConfigurationError("the ICMDP agent has no rejection action")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigurationError("gamma and gae_lambda must lie in (0, 1]")


def icmdp_reward(label: int, action) -> float:
    action = Action(action)
    if action is Action.REJECT:
        raise ContractViolation("the ICMDP has no rejection action")
    magnitude = 1.0 if label == 1 else 0.1
    return magnitude if int(action) == label else -magnitude


def episode_ids(labels: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Episode index of each step; an episode ends right after a missed malware sample."""
    labels = np.asarray(labels)
    actions = np.asarray(actions)
    terminal = (labels == 1) & (actions != labels)
    # a step belongs to the episode counted by the terminals strictly before it
    return np.concatenate(([0], np.cumsum(terminal)[:-1])).astype(np.int64)


def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates for one episode; the value past the end is 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ContractViolation("rewards and values must be aligned")
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        next_value = values[t + 1] if t + 1 < len(rewards) else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


class IcmdpAgent(DrmdAgent):
    kind = "drmd-icmdp"

    def __init__(self, input_dim: int, config: IcmdpConfig | None = None, reward_overrides: dict | None = None):
        super().__init__(input_dim, config or IcmdpConfig(), reward_overrides)

    def rollout(self, samples: Sequence[Sample], reward_cfg: RewardConfig | None = None,
                x: np.ndarray | None = None) -> RolloutBatch:
        """Step through ``samples`` in the given (chronological) order.

        The policy conditions on the current sample only, so all steps are
        scored in one batch; episode boundaries then follow from the sampled
        actions.
        """
        if not samples:
            raise ConfigurationError("cannot roll out an empty sample list")
        if x is None:
            x = self.features(samples)
        logp_all = self.log_policy(x)
        probs = np.exp(logp_all)
        values = self.critic(x)[:, 0].astype(np.float64)
        actions = _sample_actions(probs, self.rollout_rng)
        labels = labels_of(samples)
        rewards = np.where(labels == 1, 1.0, 0.1) * np.where(actions == labels, 1.0, -1.0)
        eps = episode_ids(labels, actions)
        adv = np.empty(len(samples))
        bounds = np.flatnonzero(np.diff(eps)) + 1
        for seg in np.split(np.arange(len(samples)), bounds):
            adv[seg] = gae(rewards[seg], values[seg], self.config.gamma, self.config.gae_lambda)
        logp = logp_all[np.arange(len(actions)), actions]
        return RolloutBatch(list(samples), x, actions, logp, values, rewards, probs,
                            advantages=adv, returns=adv + values, episode_ids=eps)

    def train(self, samples, reward_cfg: RewardConfig | None = None) -> "IcmdpAgent":
        if not isinstance(samples, list):
            samples = samples.samples if hasattr(samples, "samples") else list(samples)
        samples = sorted(samples, key=lambda s: (s.month, s.id))
        return super().train(samples, reward_cfg)


def icmdp_rollout(agent: IcmdpAgent, samples: Sequence[Sample], rng: np.random.Generator | None = None
                  ) -> list[list[Transition]]:
    """Roll the stream out and group the transitions by episode."""
    if rng is not None:
        agent.rollout_rng = rng
    batch = agent.rollout(samples)
    episodes: list[list[Transition]] = []
    for i, ep in enumerate(batch.episode_ids):
        if ep == len(episodes):
            episodes.append([])
        episodes[ep].append(batch[i])
    return episodes
