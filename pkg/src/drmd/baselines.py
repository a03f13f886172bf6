"""Supervised baselines: a linear SVM (Drebin), DeepDrebin and SL-DRMD.

All three share the harness-facing interface of the agent: ``fit`` on the
training split, ``update`` with newly labelled samples (a full retrain on
everything labelled so far, or on the newest ``retrain_window`` samples when
set), ``decide`` and ``uncertainty``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numba
import numpy as np

from .errors import ConfigurationError, TrainingError
from .mdp import Sample, as_matrix, labels_of
from .metrics import f1
from .nn import Activation, OptimizerState, build_network, log_softmax, optimizer_step
from .seeding import substream


def _check_window(window: int | None) -> int | None:
    if window is not None and window < 1:
        raise ConfigurationError("retrain_window must be positive or None")
    return window


def _retrain_set(old: Sequence[Sample], new: Sequence[Sample], window: int | None) -> list[Sample]:
    merged = list(old) + list(new)
    if window is None or len(merged) <= window:
        return merged
    newest = sorted(range(len(merged)), key=lambda i: (merged[i].month, i))[-window:]
    return [merged[i] for i in sorted(newest)]


# -- linear SVM -----------------------------------------------------------------

@numba.njit(cache=True)
def _dual_cd(indptr, indices, y, c, max_iter, tol, dim):
    """Cyclic dual coordinate descent for the L1-loss (hinge) linear SVM.

    Features are binary; column ``dim`` is an implicit constant-1 bias
    feature. Stops when the duality gap falls below ``tol`` relative to the
    primal objective.
    """
    n = len(y)
    w = np.zeros(dim + 1)
    alpha = np.zeros(n)
    qii = np.empty(n)
    for i in range(n):
        qii[i] = indptr[i + 1] - indptr[i] + 1.0
    gap = np.inf
    it = 0
    while it < max_iter:
        it += 1
        for i in range(n):
            wx = w[dim]
            for p in range(indptr[i], indptr[i + 1]):
                wx += w[indices[p]]
            g = y[i] * wx - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == c:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                new = min(max(a - g / qii[i], 0.0), c)
                step = (new - a) * y[i]
                alpha[i] = new
                for p in range(indptr[i], indptr[i + 1]):
                    w[indices[p]] += step
                w[dim] += step
        wnorm = 0.0
        for j in range(dim + 1):
            wnorm += w[j] * w[j]
        hinge = 0.0
        for i in range(n):
            wx = w[dim]
            for p in range(indptr[i], indptr[i + 1]):
                wx += w[indices[p]]
            hinge += max(0.0, 1.0 - y[i] * wx)
        primal = 0.5 * wnorm + c * hinge
        dual = alpha.sum() - 0.5 * wnorm
        gap = primal - dual
        if gap <= tol * max(primal, 1e-12):
            break
    return w, it, gap


def _csr(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    indptr = np.zeros(len(samples) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(s.features) for s in samples])
    indices = np.fromiter((j for s in samples for j in s.features), dtype=np.int64, count=int(indptr[-1]))
    return indptr, indices


@dataclass
class LinearSvmModel:
    weights: np.ndarray
    bias: float
    c_param: float = 1.0
    max_iterations: int = 50000
    iterations: int = 0
    duality_gap: float = float("nan")

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights + self.bias


def train_linear_svm(samples: Sequence[Sample], dim: int, c_param: float = 1.0, max_iterations: int = 50000,
                     tol: float = 1e-4) -> LinearSvmModel:
    """Minimise 0.5*|w|^2 + C * sum(hinge) by deterministic dual coordinate descent."""
    labels = labels_of(samples)
    if len(np.unique(labels)) < 2:
        raise TrainingError("the SVM needs at least one sample of each class")
    if c_param <= 0:
        raise ConfigurationError("C must be positive")
    indptr, indices = _csr(samples)
    y = np.where(labels == 1, 1.0, -1.0)
    w, iters, gap = _dual_cd(indptr, indices, y, float(c_param), int(max_iterations), float(tol), dim)
    return LinearSvmModel(w[:dim].copy(), float(w[dim]), c_param, max_iterations, int(iters), float(gap))


def svm_predict(model: LinearSvmModel, x: np.ndarray) -> np.ndarray:
    return (model.decision(x) > 0).astype(np.int64)


def svm_uncertainty(model: LinearSvmModel, x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.abs(model.decision(x)))


class LinearSvm:
    """Drebin-style classifier retrained from scratch on every update."""

    kind = "svm"
    can_reject = False

    def __init__(self, input_dim: int, c_param: float = 1.0, max_iterations: int = 50000, tol: float = 1e-4,
                 retrain_window: int | None = None):
        self.input_dim = input_dim
        self.c_param, self.max_iterations, self.tol = c_param, max_iterations, tol
        self.retrain_window = _check_window(retrain_window)
        self.labelled: list[Sample] = []
        self.model: LinearSvmModel | None = None

    def features(self, samples: Sequence[Sample]) -> np.ndarray:
        return as_matrix(samples, self.input_dim, np.float64)

    def fit(self, train_samples: Sequence[Sample]) -> "LinearSvm":
        self.labelled = list(train_samples)
        self.model = train_linear_svm(self.labelled, self.input_dim, self.c_param, self.max_iterations, self.tol)
        return self

    def update(self, labelled: Sequence[Sample]) -> None:
        if labelled:
            self.fit(_retrain_set(self.labelled, labelled, self.retrain_window))

    def decide(self, x: np.ndarray):
        return svm_predict(self.model, x), None

    def uncertainty(self, x: np.ndarray, probs=None) -> np.ndarray:
        return svm_uncertainty(self.model, x)


# -- MLP baselines -------------------------------------------------------------

@dataclass
class MlpBaselineConfig:
    hidden_layers: int = 1
    layer_size: int = 200
    dropout: float = 0.5
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    train_fraction: float = 0.66
    seed: int = 0x10C0FFEE

    def __post_init__(self):
        if self.hidden_layers < 1 or self.layer_size < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("layer counts, sizes, epochs and batch size must be positive")
        if not 0 < self.train_fraction <= 1:
            raise ConfigurationError("train_fraction must lie in (0, 1]")

    @classmethod
    def deep_drebin(cls, **overrides) -> "MlpBaselineConfig":
        return replace(cls(hidden_layers=1, layer_size=200, epochs=10, batch_size=64), **overrides)

    @classmethod
    def sl_drmd(cls, **overrides) -> "MlpBaselineConfig":
        return replace(cls(hidden_layers=3, layer_size=512, epochs=5, batch_size=256), **overrides)


def chronological_split(samples: Sequence[Sample], fraction: float) -> tuple[list[Sample], list[Sample]]:
    ordered = sorted(samples, key=lambda s: (s.month, s.id))
    cut = int(round(fraction * len(ordered)))
    return ordered[:cut], ordered[cut:]


def train_mlp_baseline(config: MlpBaselineConfig, samples: Sequence[Sample], dim: int):
    """Cross-entropy + SGD; returns the network from the epoch with the best validation F1."""
    if not samples:
        raise ConfigurationError("cannot train on an empty sample list")
    train, val = chronological_split(samples, config.train_fraction)
    if not train:
        train, val = list(samples), []
    net = build_network(dim, [config.layer_size] * config.hidden_layers, 2, substream(config.seed, "init"),
                        Activation.RELU, Activation.SOFTMAX, config.dropout)
    opt = OptimizerState("sgd", config.learning_rate)
    shuffle_rng = substream(config.seed, "shuffle")
    dropout_rng = substream(config.seed, "dropout")
    x, y = as_matrix(train, dim), labels_of(train)
    xv, yv = as_matrix(val, dim), labels_of(val)

    best, best_f1, history = net.copy(), -1.0, []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, cache = net.forward(x[idx], train=True, rng=dropout_rng)
            logp = log_softmax(cache.preacts[-1].astype(np.float64))
            target = np.zeros_like(logp)
            target[np.arange(len(idx)), y[idx]] = 1.0
            loss = -np.mean(np.sum(target * logp, axis=1))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite cross-entropy at epoch {epoch}")
            losses.append(loss)
            grads = net.backward(cache, (np.exp(logp) - target) / len(idx), from_logits=True)
            optimizer_step(opt, net, grads)
        score = f1(np.argmax(net(xv), axis=1), yv) if len(val) else None
        score = -float(np.mean(losses)) if score is None else score
        history.append(score)
        if score > best_f1:
            best, best_f1 = net.copy(), score
    return best, history


class MlpClassifier:
    """DeepDrebin / SL-DRMD: an MLP retrained from scratch on every update."""

    can_reject = False

    def __init__(self, input_dim: int, config: MlpBaselineConfig | None = None, kind: str = "deep-mlp",
                 retrain_window: int | None = None):
        self.input_dim = input_dim
        self.retrain_window = _check_window(retrain_window)
        self.config = config or MlpBaselineConfig.deep_drebin()
        self.kind = kind
        self.labelled: list[Sample] = []
        self.net = None
        self.history: list[float] = []

    def features(self, samples: Sequence[Sample]) -> np.ndarray:
        return as_matrix(samples, self.input_dim)

    def fit(self, train_samples: Sequence[Sample]) -> "MlpClassifier":
        self.labelled = list(train_samples)
        self.net, self.history = train_mlp_baseline(self.config, self.labelled, self.input_dim)
        return self

    def update(self, labelled: Sequence[Sample]) -> None:
        if labelled:
            self.fit(_retrain_set(self.labelled, labelled, self.retrain_window))

    def action_probs(self, x: np.ndarray) -> np.ndarray:
        return self.net(x)

    def decide(self, x: np.ndarray):
        probs = self.net(x)
        return np.argmax(probs, axis=1), probs

    def uncertainty(self, x: np.ndarray, probs=None) -> np.ndarray:
        if probs is None:
            probs = self.net(np.atleast_2d(x))
        return 1.0 - probs.max(axis=1).astype(np.float64)
