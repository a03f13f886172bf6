"""Dataset ingestion, feature selection and a seeded concept-drift generator.

Datasets are JSON Lines, one sample per line::

    {"id": "m000-00000", "month": 0, "label": 1, "features": [3, 17, 42]}

``features`` lists the active indices of a binary vector in ascending order.
A sidecar ``<name>.manifest.json`` records the feature dimension, month range
and per-month class counts.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, SchemaError, TrainPrecedenceError
from .mdp import Sample, labels_of
from .seeding import substream


@dataclass
class DatasetManifest:
    feature_dim: int
    month_range: tuple[int, int] | None
    counts: dict[int, tuple[int, int]]  # month -> (goodware, malware)
    source: str = "ingested"
    seed: int | None = None
    config: dict | None = None

    def to_json(self) -> str:
        payload = asdict(self)
        payload["counts"] = {str(m): list(c) for m, c in sorted(self.counts.items())}
        payload["month_range"] = list(self.month_range) if self.month_range else None
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        payload = json.loads(text)
        payload["counts"] = {int(m): tuple(c) for m, c in payload["counts"].items()}
        if payload.get("month_range") is not None:
            payload["month_range"] = tuple(payload["month_range"])
        return cls(**payload)

    @property
    def n_samples(self) -> int:
        return sum(g + m for g, m in self.counts.values())


def build_manifest(samples: Sequence[Sample], feature_dim: int | None = None, source: str = "ingested",
                   seed: int | None = None, config: dict | None = None) -> DatasetManifest:
    counts: dict[int, list[int]] = {}
    max_index = -1
    for s in samples:
        counts.setdefault(s.month, [0, 0])[s.label] += 1
        if s.features:
            max_index = max(max_index, s.features[-1])
    if feature_dim is None:
        feature_dim = max_index + 1
    elif max_index >= feature_dim:
        raise SchemaError(f"feature index {max_index} outside dimension {feature_dim}")
    months = sorted(counts)
    month_range = (months[0], months[-1]) if months else None
    return DatasetManifest(feature_dim, month_range, {m: tuple(c) for m, c in counts.items()}, source, seed, config)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def _parse_record(line: str, lineno: int, feature_dim: int | None) -> Sample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", lineno)
    missing = {"id", "month", "label", "features"} - rec.keys()
    if missing:
        raise SchemaError(f"missing fields {sorted(missing)}", lineno)
    label, month, feats = rec["label"], rec["month"], rec["features"]
    if isinstance(label, bool) or label not in (0, 1):
        raise SchemaError(f"label must be 0 or 1, got {label!r}", lineno)
    if isinstance(month, bool) or not isinstance(month, int) or month < 0:
        raise SchemaError(f"month must be a non-negative integer, got {month!r}", lineno)
    if not isinstance(feats, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in feats):
        raise SchemaError("features must be a list of integers", lineno)
    if any(b <= a for a, b in zip(feats, feats[1:])) or (feats and feats[0] < 0):
        raise SchemaError("features must be ascending, unique and non-negative", lineno)
    if feature_dim is not None and feats and feats[-1] >= feature_dim:
        raise SchemaError(f"feature index {feats[-1]} >= feature_dim {feature_dim}", lineno)
    return Sample(str(rec["id"]), month, label, tuple(feats))


def load_dataset(path, feature_dim: int | None = None) -> tuple[list[Sample], DatasetManifest]:
    """Read a JSONL dataset, validating every record.

    The feature dimension comes from the argument, else the sidecar
    manifest, else ``max index + 1``.
    """
    path = Path(path)
    sidecar = manifest_path(path)
    stored = None
    if sidecar.exists():
        stored = DatasetManifest.from_json(sidecar.read_text())
        if feature_dim is None:
            feature_dim = stored.feature_dim
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            samples.append(_parse_record(line, lineno, feature_dim))
    manifest = build_manifest(samples, feature_dim,
                              source=stored.source if stored else "ingested",
                              seed=stored.seed if stored else None,
                              config=stored.config if stored else None)
    if stored is not None and stored.counts != manifest.counts:
        raise SchemaError(f"manifest counts disagree with {path.name}")
    return samples, manifest


def dump_record(s: Sample) -> str:
    return json.dumps({"id": s.id, "month": s.month, "label": s.label, "features": list(s.features)},
                      separators=(",", ":"))


def write_dataset(path, samples: Iterable[Sample], manifest: DatasetManifest | None = None) -> DatasetManifest:
    samples = list(samples)
    if manifest is None:
        manifest = build_manifest(samples)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(dump_record(s) + "\n")
    manifest_path(path).write_text(manifest.to_json(), encoding="utf-8")
    return manifest


# -- feature selection & prevalence -------------------------------------------

def feature_scores(samples: Sequence[Sample], feature_dim: int) -> np.ndarray:
    """|P(f=1 | malware) - P(f=1 | goodware)| with +1/+2 Laplace smoothing."""
    counts = np.zeros((2, feature_dim))
    totals = np.zeros(2)
    for s in samples:
        totals[s.label] += 1
        counts[s.label, list(s.features)] += 1
    freq = (counts + 1.0) / (totals[:, None] + 2.0)
    return np.abs(freq[1] - freq[0])


def rank_features(samples: Sequence[Sample], feature_dim: int) -> list[int]:
    """Feature indices from most to least informative; ties favour the lower index."""
    scores = feature_scores(samples, feature_dim)
    return sorted(range(feature_dim), key=lambda j: (-scores[j], j))


def select_features(train_samples: Sequence[Sample], k: int, feature_dim: int,
                    first_test_month: int | None = None) -> dict[int, int]:
    """Map the ``k`` most informative features to ``0..k-1``, keeping their relative order.

    Ranking uses :func:`feature_scores` on training data only; ties favour
    the lower index. Passing ``first_test_month`` makes the function refuse
    any sample from that month onwards.
    """
    if k <= 0 or k > feature_dim:
        raise ConfigurationError(f"k must lie in 1..{feature_dim}, got {k}")
    if first_test_month is not None:
        late = [s.month for s in train_samples if s.month >= first_test_month]
        if late:
            raise TrainPrecedenceError(f"feature selection saw a sample from test month {min(late)}")
    kept = sorted(rank_features(train_samples, feature_dim)[:k])
    return {old: new for new, old in enumerate(kept)}


def apply_feature_map(samples: Iterable[Sample], index_map: dict[int, int]) -> list[Sample]:
    return [
        Sample(s.id, s.month, s.label, tuple(index_map[i] for i in s.features if i in index_map))
        for s in samples
    ]


def estimate_sigma_hat(train_samples: Sequence[Sample]) -> float:
    labels = labels_of(train_samples)
    if len(labels) == 0 or labels.sum() == 0:
        raise ConfigurationError("cannot estimate malware prevalence without malware samples")
    return float(labels.mean())


# -- synthetic drift -----------------------------------------------------------

@dataclass
class DriftGenConfig:
    """Parameters of the synthetic concept-drift stream.

    Every feature fires with probability ``base_activation["goodware"]`` in
    goodware and in uninformative positions of malware; the ``n_informative``
    malware-indicative features fire with ``base_activation["malware"]`` in
    malware. Each month ``drift_rate * n_informative`` of the oldest
    informative features collapse to the goodware rate while the same number
    of fresh features become malware-indicative.
    """

    feature_dim: int = 200
    months: int = 24
    samples_per_month: int = 1000
    malware_rate: float = 0.10
    n_informative: int = 40
    drift_rate: float = 0.05
    base_activation: dict = field(default_factory=lambda: {"goodware": 0.05, "malware": 0.25})
    seed: int = 1

    def __post_init__(self):
        if not 0.0 <= self.drift_rate <= 1.0:
            raise ConfigurationError("drift_rate must lie in [0, 1]")
        if not 0 < self.n_informative <= self.feature_dim:
            raise ConfigurationError("n_informative must lie in 1..feature_dim")
        if not 0.0 <= self.malware_rate <= 1.0:
            raise ConfigurationError("malware_rate must lie in [0, 1]")
        if self.months < 1 or self.samples_per_month < 0:
            raise ConfigurationError("months must be >= 1 and samples_per_month >= 0")
        for key in ("goodware", "malware"):
            if not 0.0 <= self.base_activation.get(key, -1) <= 1.0:
                raise ConfigurationError(f"base_activation[{key!r}] must be a probability")


@dataclass
class DriftSchedule:
    """True per-month parameter tables of a drift stream."""

    goodware_probs: np.ndarray  # (d,)
    malware_probs: np.ndarray  # (months, d)
    informative: list  # per month, sorted list of informative indices


def drift_schedule(cfg: DriftGenConfig) -> DriftSchedule:
    rng = substream(cfg.seed, "drift-params")
    order = [int(j) for j in rng.permutation(cfg.feature_dim)]
    active = deque(order[:cfg.n_informative])
    initial = set(active)
    fresh = deque(order[cfg.n_informative:])
    retired: deque = deque()

    p_good = np.full(cfg.feature_dim, cfg.base_activation["goodware"])
    p_mal = p_good.copy()
    p_mal[list(active)] = cfg.base_activation["malware"]
    tables = [p_mal.copy()]
    informative = [sorted(active)]
    per_month = cfg.drift_rate * cfg.n_informative
    for m in range(1, cfg.months):
        n_swap = int(np.floor(m * per_month + 1e-9)) - int(np.floor((m - 1) * per_month + 1e-9))
        # month-0 features never come back, which keeps the drift from month 0 monotone
        n_swap = min(n_swap, len(fresh) + len(retired))
        for _ in range(n_swap):
            old = active.popleft()
            p_mal[old] = p_good[old]
            if old not in initial:
                retired.append(old)
            new = fresh.popleft() if fresh else retired.popleft()
            p_mal[new] = cfg.base_activation["malware"]
            active.append(new)
        tables.append(p_mal.copy())
        informative.append(sorted(active))
    return DriftSchedule(p_good, np.stack(tables), informative)


def generate_drift_dataset(cfg: DriftGenConfig) -> list[Sample]:
    """Draw the stream month by month; each month uses its own ``(seed, month)`` substream."""
    sched = drift_schedule(cfg)
    samples = []
    for m in range(cfg.months):
        rng = substream(cfg.seed, "drift-month", m)
        labels = (rng.random(cfg.samples_per_month) < cfg.malware_rate).astype(int)
        probs = np.where(labels[:, None] == 1, sched.malware_probs[m][None, :], sched.goodware_probs[None, :])
        active = rng.random((cfg.samples_per_month, cfg.feature_dim)) < probs
        for i in range(cfg.samples_per_month):
            feats = tuple(int(j) for j in np.flatnonzero(active[i]))
            samples.append(Sample(f"m{m:03d}-{i:05d}", m, int(labels[i]), feats))
    return samples


def generate_to_files(cfg: DriftGenConfig, path) -> DatasetManifest:
    samples = generate_drift_dataset(cfg)
    manifest = build_manifest(samples, cfg.feature_dim, source="synthetic", seed=cfg.seed, config=asdict(cfg))
    return write_dataset(path, samples, manifest)


def malware_marginal_tv(sched: DriftSchedule, month: int) -> float:
    """Mean per-feature total-variation distance between month-0 and ``month`` malware marginals."""
    diff = np.abs(sched.malware_probs[month] - sched.malware_probs[0])
    # fsum is exact, so equal multisets of differences give equal distances
    return math.fsum(diff) / len(diff)


def dataset_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def samples_digest(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(dump_record(s).encode())
        h.update(b"\n")
    return h.hexdigest()
