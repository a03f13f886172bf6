"""The one-step malware-detection MDP: samples, actions and rewards.

Every episode is a single sample. Classification rewards are the product of
an accuracy sign, a malware upscaling factor and a temporal factor; rejection
is rewarded by inverting the reward the agent would have earned with its
preferred classification.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, TrainPrecedenceError

# |R_rej - cost| multipliers for a counterfactually correct / wrong classification
CORRECT_REJECT_SCALE = 10.0
WRONG_REJECT_SCALE = 0.1


class Action(IntEnum):
    GOODWARE = 0
    MALWARE = 1
    REJECT = 2


@dataclass(frozen=True)
class Sample:
    """A labelled sparse binary feature vector.

    ``features`` holds the sorted active indices; ``month`` counts months
    since the dataset epoch.
    """

    id: str
    month: int
    label: int
    features: tuple[int, ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractViolation(f"label must be 0 or 1, got {self.label!r}")
        if self.month < 0:
            raise ContractViolation("month must be non-negative")
        f = self.features
        if f and (f[0] < 0 or any(a >= b for a, b in zip(f, f[1:]))):
            raise ContractViolation("features must be ascending, unique, non-negative indices")


@dataclass(frozen=True)
class RewardConfig:
    """Parameters of the reward function.

    ``rejection_cost`` is a signed additive term: the rejection reward
    contains ``+rejection_cost``, so -1.0 punishes rejection hardest. Set
    ``cost_sign="paper"`` to instead subtract it literally.
    ``reject_outcome=False`` drops the counterfactual term so a rejection
    earns the flat cost only.
    """

    sigma_hat: float = 0.1
    rejection_cost: float = -0.1
    temporal_scaling: bool = True
    imbalance_scaling: bool = True
    origin_month: int = 0
    reject_outcome: bool = True
    cost_sign: str = "additive"

    def __post_init__(self):
        if not (0.0 < self.sigma_hat <= 1.0):
            raise ConfigurationError(f"sigma_hat must lie in (0, 1], got {self.sigma_hat}")
        if self.origin_month < 0:
            raise ConfigurationError("origin_month must be non-negative")
        if self.cost_sign not in ("additive", "paper"):
            raise ConfigurationError(f"cost_sign must be 'additive' or 'paper', got {self.cost_sign!r}")

    @property
    def flat_rejection_term(self) -> float:
        return self.rejection_cost if self.cost_sign == "additive" else -self.rejection_cost


def r_acc(action, label: int) -> float:
    action = Action(action)
    if action is Action.REJECT:
        raise ContractViolation("accuracy reward is only defined for classification actions")
    return 1.0 - 2.0 * abs(int(action) - int(label))


def r_imb(label: int, sigma_hat: float) -> float:
    if not sigma_hat > 0:
        raise ConfigurationError(f"sigma_hat must be positive, got {sigma_hat}")
    return max(label / sigma_hat, 1.0)


def r_tmp(sample_month: int, origin_month: int) -> float:
    if sample_month < origin_month:
        raise TrainPrecedenceError(f"sample month {sample_month} precedes origin month {origin_month}")
    return 0.5 * max(1, sample_month - origin_month)


def r_clf(sample: Sample, action, cfg: RewardConfig) -> float:
    tmp = r_tmp(sample.month, cfg.origin_month)
    if not cfg.temporal_scaling:
        tmp = 1.0
    imb = r_imb(sample.label, cfg.sigma_hat if cfg.imbalance_scaling else 1.0)
    return tmp * imb * r_acc(action, sample.label)


def next_most_likely(probs) -> Action:
    """The classification action the policy prefers, ignoring Reject. Ties go to Goodware."""
    p = np.asarray(probs, dtype=float)
    if p.shape[-1] < 2 or not np.all(np.isfinite(p)):
        raise ContractViolation("need finite probabilities for both classification actions")
    return Action.MALWARE if p[1] > p[0] else Action.GOODWARE


def rejection_from_counterfactual(r_nml: float, cfg: RewardConfig) -> float:
    if not cfg.reject_outcome:
        return cfg.flat_rejection_term
    scale = CORRECT_REJECT_SCALE if r_nml >= 0 else WRONG_REJECT_SCALE
    return cfg.flat_rejection_term - scale * r_nml


def r_rej(sample: Sample, probs, cfg: RewardConfig) -> float:
    r_nml = r_clf(sample, next_most_likely(probs), cfg)
    return rejection_from_counterfactual(r_nml, cfg)


def reward(sample: Sample, action, probs, cfg: RewardConfig) -> float:
    if Action(action) is Action.REJECT:
        return r_rej(sample, probs, cfg)
    return r_clf(sample, action, cfg)


def batch_rewards(
    months: np.ndarray, labels: np.ndarray, actions: np.ndarray, probs: np.ndarray, cfg: RewardConfig
) -> np.ndarray:
    """Vectorised :func:`reward` over aligned arrays; element-wise identical to the scalar path."""
    months = np.asarray(months)
    labels = np.asarray(labels)
    actions = np.asarray(actions)
    if np.any(months < cfg.origin_month):
        raise TrainPrecedenceError(f"sample month {months.min()} precedes origin month {cfg.origin_month}")
    if cfg.temporal_scaling:
        tmp = 0.5 * np.maximum(1, months - cfg.origin_month)
    else:
        tmp = np.ones(len(labels))
    sigma = cfg.sigma_hat if cfg.imbalance_scaling else 1.0
    scale = tmp * np.maximum(labels / sigma, 1.0)

    probs = np.asarray(probs)
    if not np.all(np.isfinite(probs)):
        raise ContractViolation("non-finite probabilities")
    nml = (probs[:, 1] > probs[:, 0]).astype(int)
    clf_action = np.where(actions == Action.REJECT, nml, actions)
    acc = 1.0 - 2.0 * np.abs(clf_action - labels)
    out = scale * acc
    rej = actions == Action.REJECT
    if np.any(rej):
        r_nml = out[rej]
        if cfg.reject_outcome:
            factor = np.where(r_nml >= 0, CORRECT_REJECT_SCALE, WRONG_REJECT_SCALE)
            out[rej] = cfg.flat_rejection_term - factor * r_nml
        else:
            out[rej] = cfg.flat_rejection_term
    return out


def as_matrix(samples: Sequence[Sample], dim: int, dtype=np.float32) -> np.ndarray:
    """Densify a list of samples into an ``(n, dim)`` 0/1 matrix."""
    x = np.zeros((len(samples), dim), dtype=dtype)
    rows = np.repeat(np.arange(len(samples)), [len(s.features) for s in samples])
    cols = np.fromiter((i for s in samples for i in s.features), dtype=np.int64, count=len(rows))
    if len(cols) and cols.max() >= dim:
        raise ContractViolation(f"feature index {cols.max()} outside dimension {dim}")
    x[rows, cols] = 1
    return x


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.fromiter((s.label for s in samples), dtype=np.int64, count=len(samples))


def months_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.fromiter((s.month for s in samples), dtype=np.int64, count=len(samples))

