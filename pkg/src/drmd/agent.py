"""Actor-critic PPO agent for the one-step malware-detection MDP.

Each training sample is one episode, so there is no bootstrapping: the
advantage of a transition is its reward minus the critic's estimate and the
critic regresses straight onto the reward. Rollouts and inference use
eval-mode forwards; dropout is only active inside the PPO loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, TrainingError
from .mdp import Action, RewardConfig, Sample, as_matrix, batch_rewards, labels_of, months_of
from .nn import (
    Activation,
    Network,
    OptimizerState,
    build_network,
    clip_global_norm,
    load_checkpoint,
    log_softmax,
    optimizer_step,
    save_checkpoint,
)
from .seeding import substream

log = logging.getLogger(__name__)

CLASSIFY_ONLY = "classify-only"
CLASSIFY_REJECT = "classify-reject"


@dataclass
class AgentConfig:
    policy_kind: str = CLASSIFY_REJECT
    hidden_layers: int = 3
    layer_size: int = 512
    dropout: float = 0.5
    data_epochs: int = 5
    minibatch_epochs: int = 1
    minibatch_size: int = 100
    clip_coefficient: float = 0.2
    value_coefficient: float = 0.5
    entropy_coefficient: float = 0.01
    max_grad_norm: float = 0.5
    learning_rate: float = 2.5e-4
    adam_epsilon: float = 1e-5
    # None keeps every labelled sample (no window)
    sliding_window_size: int | None = 5000
    reset_optimizer: bool = False
    normalize_advantages: bool = True
    seed: int = 1

    def __post_init__(self):
        if self.policy_kind not in (CLASSIFY_ONLY, CLASSIFY_REJECT):
            raise ConfigurationError(f"unknown policy kind {self.policy_kind!r}")
        positive = ("clip_coefficient", "value_coefficient", "entropy_coefficient", "max_grad_norm", "learning_rate",
                    "adam_epsilon")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("data_epochs", "minibatch_epochs", "minibatch_size", "hidden_layers", "layer_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.sliding_window_size is not None and self.minibatch_size > self.sliding_window_size:
            raise ConfigurationError("minibatch_size cannot exceed the sliding window size")

    @property
    def n_actions(self) -> int:
        return 3 if self.policy_kind == CLASSIFY_REJECT else 2

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Transition:
    sample_id: str
    state_features: tuple[int, ...]
    action: Action
    log_prob: float
    value_estimate: float
    reward: float


@dataclass
class RolloutBatch:
    """Array-backed transitions from one pass over a sample list.

    Indexing yields :class:`Transition` records; the PPO update reads the
    arrays directly.
    """

    samples: list
    x: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episode_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Transition:
        s = self.samples[i]
        return Transition(s.id, s.features, Action(int(self.actions[i])), float(self.log_probs[i]),
                          float(self.values[i]), float(self.rewards[i]))

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(len(self)))


def advantage(transition: Transition) -> float:
    """One-step advantage: there is no next state to bootstrap from."""
    return transition.reward - transition.value_estimate


def standardize(values: np.ndarray) -> np.ndarray:
    if len(values) < 2:
        return values
    return (values - values.mean()) / (values.std() + 1e-8)


class SlidingWindow:
    """The newest labelled samples, oldest evicted first.

    Samples must arrive in non-decreasing month order; a batch pushed at once
    is sorted by ``(month, id)`` first.
    """

    def __init__(self, capacity: int | None = 5000, samples: Iterable[Sample] = ()):
        if capacity is not None and capacity < 1:
            raise ConfigurationError("window capacity must be positive")
        self.capacity = capacity
        self._samples: deque = deque(maxlen=capacity)
        self.push(samples)

    def push(self, samples: Iterable[Sample]) -> int:
        """Append samples and return how many old ones were evicted."""
        batch = sorted(samples, key=lambda s: (s.month, s.id))
        if batch and self._samples and batch[0].month < self._samples[-1].month:
            raise ContractViolation(
                f"sample from month {batch[0].month} pushed after month {self._samples[-1].month}"
            )
        before = len(self._samples)
        self._samples.extend(batch)
        return before + len(batch) - len(self._samples)

    @property
    def samples(self) -> list[Sample]:
        return list(self._samples)

    def __len__(self) -> int:
        return len(self._samples)


def reward_config_for(samples: Sequence[Sample], **overrides) -> RewardConfig:
    """Freeze sigma_hat and origin month from the initial training split."""
    labels = labels_of(samples)
    if labels.sum() == 0:
        raise ConfigurationError("training data holds no malware; imbalance scaling is undefined")
    params = {"sigma_hat": float(labels.mean()), "origin_month": int(months_of(samples).min())}
    params.update(overrides)
    return RewardConfig(**params)


class DrmdAgent:
    """PPO actor-critic that classifies, and optionally rejects, one sample per episode."""

    kind = "drmd"

    def __init__(self, input_dim: int, config: AgentConfig | None = None, reward_overrides: dict | None = None):
        self.config = config or AgentConfig()
        self.input_dim = input_dim
        cfg = self.config
        init_rng = substream(cfg.seed, "init")
        hidden = [cfg.layer_size] * cfg.hidden_layers
        self.actor = build_network(input_dim, hidden, cfg.n_actions, init_rng, Activation.LEAKY_RELU,
                                   Activation.SOFTMAX, cfg.dropout)
        self.critic = build_network(input_dim, hidden, 1, init_rng, Activation.LEAKY_RELU, Activation.IDENTITY,
                                    cfg.dropout)
        self.actor_opt = self._new_optimizer()
        self.critic_opt = self._new_optimizer()
        self.rollout_rng = substream(cfg.seed, "rollout")
        self.shuffle_rng = substream(cfg.seed, "minibatch-shuffle")
        self.dropout_rng = substream(cfg.seed, "dropout")
        self.reward_overrides = dict(reward_overrides or {})
        self.reward_cfg: RewardConfig | None = None
        self.window = SlidingWindow(cfg.sliding_window_size)
        self.history: list[dict] = []

    def _new_optimizer(self) -> OptimizerState:
        return OptimizerState("adam", self.config.learning_rate, adam_epsilon=self.config.adam_epsilon)

    @property
    def can_reject(self) -> bool:
        return self.config.policy_kind == CLASSIFY_REJECT

    # -- inference -------------------------------------------------------------

    def features(self, samples: Sequence[Sample]) -> np.ndarray:
        return as_matrix(samples, self.input_dim, self.actor.dtype)

    def action_probs(self, x: np.ndarray) -> np.ndarray:
        return self.actor(x)

    def log_policy(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode log-probabilities computed from the logits in float64."""
        _, cache = self.actor.forward(x)
        return log_softmax(cache.preacts[-1].astype(np.float64))

    def policy_ratios(self, batch: RolloutBatch) -> np.ndarray:
        """exp(current log-prob - rollout log-prob) for every transition, eval mode."""
        logp = self.log_policy(batch.x)[np.arange(len(batch)), batch.actions]
        return np.exp(logp - batch.log_probs)

    def predict(self, x, mode: str = "deterministic", rng: np.random.Generator | None = None):
        """Return ``(action, probs)`` for one feature vector (or a Sample)."""
        if isinstance(x, Sample):
            x = self.features([x])[0]
        probs = self.action_probs(np.asarray(x)[None, :])[0]
        if mode == "deterministic":
            return Action(int(np.argmax(probs))), probs
        if mode == "stochastic":
            rng = rng or self.rollout_rng
            return Action(int(_sample_actions(probs[None, :], rng)[0])), probs
        raise ContractViolation(f"unknown prediction mode {mode!r}")

    def decide(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic batch decisions: argmax action, lowest code on ties."""
        probs = self.action_probs(x)
        return np.argmax(probs, axis=1), probs

    def uncertainty(self, x: np.ndarray, probs: np.ndarray | None = None) -> np.ndarray:
        """1 - max classification probability, renormalised over the classification actions."""
        if probs is None:
            probs = self.action_probs(np.atleast_2d(x))
        return classification_uncertainty(probs)

    # -- training --------------------------------------------------------------

    def rollout(self, samples: Sequence[Sample], reward_cfg: RewardConfig, x: np.ndarray | None = None) -> RolloutBatch:
        if not samples:
            raise ConfigurationError("cannot roll out an empty sample list")
        if x is None:
            x = self.features(samples)
        logp_all = self.log_policy(x)
        probs = np.exp(logp_all)
        values = self.critic(x)[:, 0].astype(np.float64)
        actions = _sample_actions(probs, self.rollout_rng)
        logp = logp_all[np.arange(len(actions)), actions]
        rewards = batch_rewards(months_of(samples), labels_of(samples), actions, probs, reward_cfg)
        return RolloutBatch(list(samples), x, actions, logp, values, rewards, probs,
                            advantages=rewards - values, returns=rewards)

    def ppo_update(self, batch: RolloutBatch) -> dict:
        """Clipped-surrogate update over shuffled minibatches; returns mean diagnostics."""
        if len(batch) < 1:
            raise ContractViolation("ppo_update needs at least one transition")
        cfg = self.config
        stats = []
        for _ in range(cfg.minibatch_epochs):
            order = self.shuffle_rng.permutation(len(batch))
            for start in range(0, len(batch), cfg.minibatch_size):
                stats.append(self._minibatch_step(batch, order[start:start + cfg.minibatch_size]))
        summary = {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}
        self.history.append(summary)
        return summary

    def _minibatch_step(self, batch: RolloutBatch, idx: np.ndarray) -> dict:
        cfg = self.config
        eps = cfg.clip_coefficient
        n = len(idx)
        x = batch.x[idx]
        actions = batch.actions[idx]
        old_logp = batch.log_probs[idx]
        old_v = batch.values[idx]
        ret = batch.returns[idx]
        adv = batch.advantages[idx].astype(np.float64)
        if cfg.normalize_advantages:
            adv = standardize(adv)

        probs, acache = self.actor.forward(x, train=True, rng=self.dropout_rng)
        logp_all = log_softmax(acache.preacts[-1].astype(np.float64))
        p = np.exp(logp_all)
        new_logp = logp_all[np.arange(n), actions]
        ratio = np.exp(new_logp - old_logp)
        surr1 = ratio * adv
        surr2 = np.clip(ratio, 1 - eps, 1 + eps) * adv
        pg_loss = -np.mean(np.minimum(surr1, surr2))
        entropy = -np.sum(p * logp_all, axis=1)

        # d/dlogp of -min(...): the clipped branch carries no gradient once the ratio leaves the band
        active = (surr1 <= surr2) | ((ratio >= 1 - eps) & (ratio <= 1 + eps))
        d_logp = -(adv * ratio * active) / n
        onehot = np.zeros_like(p)
        onehot[np.arange(n), actions] = 1.0
        d_logits = d_logp[:, None] * (onehot - p)
        d_logits += (cfg.entropy_coefficient / n) * p * (logp_all + entropy[:, None])

        v, ccache = self.critic.forward(x, train=True, rng=self.dropout_rng)
        v = v[:, 0].astype(np.float64)
        v_clipped = old_v + np.clip(v - old_v, -eps, eps)
        err = (v - ret) ** 2
        err_clipped = (v_clipped - ret) ** 2
        v_loss = np.mean(np.maximum(err, err_clipped))
        v_active = (err >= err_clipped) | (np.abs(v - old_v) <= eps)
        d_v = cfg.value_coefficient * 2.0 * (v - ret) * v_active / n

        loss = pg_loss + cfg.value_coefficient * v_loss - cfg.entropy_coefficient * entropy.mean()
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite PPO loss (policy {pg_loss}, value {v_loss}, entropy {entropy.mean()})"
            )

        g_actor = clip_global_norm(self.actor.backward(acache, d_logits, from_logits=True), cfg.max_grad_norm)
        g_critic = clip_global_norm(self.critic.backward(ccache, d_v[:, None]), cfg.max_grad_norm)
        optimizer_step(self.actor_opt, self.actor, g_actor)
        optimizer_step(self.critic_opt, self.critic, g_critic)
        return {
            "loss": float(loss),
            "policy_loss": float(pg_loss),
            "value_loss": float(v_loss),
            "entropy": float(entropy.mean()),
            "clip_fraction": float(np.mean(np.abs(ratio - 1) > eps)),
        }

    def train(self, samples: Sequence[Sample] | SlidingWindow, reward_cfg: RewardConfig | None = None) -> "DrmdAgent":
        """``data_epochs`` rounds of rollout + PPO update over ``samples``."""
        if isinstance(samples, SlidingWindow):
            samples = samples.samples
        samples = list(samples)
        if not samples:
            raise ConfigurationError("cannot train on an empty window")
        if reward_cfg is None:
            reward_cfg = self.reward_cfg or reward_config_for(samples, **self.reward_overrides)
        self.reward_cfg = reward_cfg
        x = self.features(samples)
        for epoch in range(self.config.data_epochs):
            batch = self.rollout(samples, reward_cfg, x=x)
            stats = self.ppo_update(batch)
            log.debug("epoch %d: %s", epoch, stats)
        return self

    def fit(self, train_samples: Sequence[Sample]) -> "DrmdAgent":
        """Initial training on the whole training split, then seed the window with its newest samples."""
        train_samples = sorted(train_samples, key=lambda s: (s.month, s.id))
        self.reward_cfg = reward_config_for(train_samples, **self.reward_overrides)
        self.train(train_samples, self.reward_cfg)
        self.window = SlidingWindow(self.config.sliding_window_size, train_samples)
        return self

    def fine_tune(self, window: SlidingWindow | None = None) -> "DrmdAgent":
        window = window if window is not None else self.window
        if self.config.reset_optimizer:
            self.actor_opt.reset()
            self.critic_opt.reset()
        return self.train(window, self.reward_cfg)

    def update(self, labelled: Sequence[Sample]) -> None:
        """Month-end adaptation: push newly labelled samples into the window and fine-tune."""
        if not labelled:
            return
        self.window.push(labelled)
        self.fine_tune()

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "kind": self.kind,
            "policy_kind": self.config.policy_kind,
            "config": asdict(self.config),
            "config_digest": self.config.digest(),
            "input_dim": self.input_dim,
            "origin_month": None if self.reward_cfg is None else self.reward_cfg.origin_month,
            "reward": None if self.reward_cfg is None else asdict(self.reward_cfg),
        }
        save_checkpoint(path, {"actor": self.actor, "critic": self.critic}, meta)

    @classmethod
    def load(cls, path) -> "DrmdAgent":
        nets, meta = load_checkpoint(path)
        agent = cls(meta["input_dim"], AgentConfig(**meta["config"]))
        agent.actor, agent.critic = nets["actor"], nets["critic"]
        if meta.get("reward"):
            agent.reward_cfg = RewardConfig(**meta["reward"])
        return agent


def _sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    cdf = np.cumsum(probs.astype(np.float64), axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    actions = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(actions, probs.shape[1] - 1)


def classification_uncertainty(probs: np.ndarray) -> np.ndarray:
    probs = np.atleast_2d(probs)
    clf = probs[:, :2].astype(np.float64)
    total = clf.sum(axis=1, keepdims=True)
    total[total <= 0] = 1.0
    return 1.0 - (clf / total).max(axis=1)
