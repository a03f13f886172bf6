"""Time-aware evaluation: constrained temporal splits and the monthly loop.

A run scores each test month in order, optionally quarantines samples
(through the agent's own reject action and/or an uncertainty budget),
measures F1 on the accepted samples, hands a labelled subset back to the
model at month end and moves on. Months are never revisited.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, PrevalenceError, TrainPrecedenceError, WindowSpanError
from .mdp import Action, Sample, labels_of
from .metrics import aut_skipping_missing, precision_recall_f1
from .seeding import substream

CSV_COLUMNS = ("month", "f1", "precision", "recall", "n_rejected", "n_al", "n_evaluated")


# -- splitting -------------------------------------------------------------------

def malware_rate(samples: Sequence[Sample]) -> float:
    return float(np.mean(labels_of(samples))) if samples else 0.0


@dataclass
class TimelineSplit:
    train: list[Sample]
    test_months: list[list[Sample]]
    target_prevalence: float | None = None
    tolerance: float = 0.05

    @property
    def months(self) -> list[int]:
        return [bucket[0].month for bucket in self.test_months]

    def validate(self) -> "TimelineSplit":
        """Check C1 (train precedes test), C2 (one month per bucket) and C3 (prevalence)."""
        if not self.train:
            raise TrainPrecedenceError("empty training split")
        if not self.test_months:
            raise TrainPrecedenceError("no test months")
        last_train = max(s.month for s in self.train)
        previous = None
        for bucket in self.test_months:
            if not bucket:
                raise WindowSpanError("empty test bucket")
            months = {s.month for s in bucket}
            if len(months) != 1:
                raise WindowSpanError(f"a test bucket spans months {sorted(months)}")
            month = bucket[0].month
            if month <= last_train:
                raise TrainPrecedenceError(f"test month {month} does not follow the last training month {last_train}")
            if previous is not None and month <= previous:
                raise WindowSpanError("test buckets are not in strictly increasing month order")
            previous = month
            if self.target_prevalence is not None:
                rate = malware_rate(bucket)
                if abs(rate - self.target_prevalence) > self.tolerance + 1e-12:
                    raise PrevalenceError(
                        f"month {month} has malware rate {rate:.3f}, target {self.target_prevalence:.3f}"
                        f" +/- {self.tolerance}"
                    )
        return self


def downsample_bucket(bucket: Sequence[Sample], target: float, rng: np.random.Generator) -> list[Sample]:
    """Drop samples of the over-represented class until the malware rate is ``target`` (to within one sample)."""
    mal = [s for s in bucket if s.label == 1]
    good = [s for s in bucket if s.label == 0]
    if not 0 < target < 1:
        raise PrevalenceError(f"cannot rebalance towards prevalence {target}")
    if len(mal) > target * len(bucket):
        keep_mal, keep_good = min(len(mal), int(round(target * len(good) / (1 - target)))), len(good)
    else:
        keep_mal, keep_good = len(mal), min(len(good), int(round(len(mal) * (1 - target) / target)))
    if keep_mal + keep_good == 0 or (keep_mal == 0 and mal) or (keep_good == 0 and good):
        raise PrevalenceError(f"month {bucket[0].month} cannot be rebalanced to prevalence {target}")

    def pick(group: list[Sample], k: int) -> list[Sample]:
        idx = rng.choice(len(group), size=k, replace=False) if k < len(group) else np.arange(len(group))
        return [group[i] for i in sorted(idx)]

    return sorted(pick(mal, keep_mal) + pick(good, keep_good), key=lambda s: s.id)


def make_split(train: Sequence[Sample], test: Sequence[Sample], target_prevalence: float | None = None,
               tolerance: float = 0.05, downsample: bool = False, seed: int = 1) -> TimelineSplit:
    """Bucket ``test`` by month and validate; out-of-tolerance buckets are rebalanced when ``downsample``."""
    buckets: dict[int, list[Sample]] = defaultdict(list)
    for s in test:
        buckets[s.month].append(s)
    ordered = [sorted(buckets[m], key=lambda s: s.id) for m in sorted(buckets)]
    if downsample and target_prevalence is not None:
        ordered = [
            downsample_bucket(b, target_prevalence, substream(seed, "downsample", b[0].month))
            if abs(malware_rate(b) - target_prevalence) > tolerance else b
            for b in ordered
        ]
    split = TimelineSplit(sorted(train, key=lambda s: (s.month, s.id)), ordered, target_prevalence, tolerance)
    return split.validate()


def split_timeline(samples: Sequence[Sample], train_month_count: int = 12, target_prevalence: float | None = None,
                   tolerance: float = 0.05, downsample: bool = False, seed: int = 1,
                   enforce_prevalence: bool = True) -> TimelineSplit:
    """The first ``train_month_count`` distinct months train; every later month is one test bucket.

    When ``target_prevalence`` is None the training-set malware rate is used
    as the C3 target; ``enforce_prevalence=False`` disables C3.
    """
    if train_month_count < 1:
        raise ConfigurationError("train_month_count must be positive")
    months = sorted({s.month for s in samples})
    if len(months) <= train_month_count:
        raise TrainPrecedenceError(
            f"no test months: {len(months)} distinct months for {train_month_count} training months"
        )
    cutoff = months[train_month_count - 1]
    train = [s for s in samples if s.month <= cutoff]
    test = [s for s in samples if s.month > cutoff]
    if enforce_prevalence and target_prevalence is None:
        target_prevalence = malware_rate(train)
    if not enforce_prevalence:
        target_prevalence = None
    return make_split(train, test, target_prevalence, tolerance, downsample, seed)


# -- protocol --------------------------------------------------------------------

@dataclass
class ProtocolConfig:
    monthly_rejection_budget: int = 0
    monthly_al_budget: int = 0
    integrated_rejection: bool = False
    integrated_al: bool = False
    augmented_al: bool = False
    al_budget_for_iraal: int = 0

    def __post_init__(self):
        if min(self.monthly_rejection_budget, self.monthly_al_budget, self.al_budget_for_iraal) < 0:
            raise ConfigurationError("budgets must be non-negative")
        if (self.integrated_al or self.augmented_al) and not self.integrated_rejection:
            raise ConfigurationError("IRAL and IRAAL require integrated rejection")
        if (self.integrated_al or self.augmented_al) and self.monthly_al_budget:
            raise ConfigurationError("a monthly AL budget cannot be combined with IRAL or IRAAL")

    @property
    def al_mode(self) -> str:
        if self.augmented_al:
            return "iraal"
        if self.integrated_al:
            return "iral"
        return "budget" if self.monthly_al_budget else "none"


def top_uncertain(scores: np.ndarray, budget: int, ids: Sequence[str] | None = None) -> np.ndarray:
    """Indices of the ``budget`` highest scores; ties go to the smaller sample id."""
    scores = np.asarray(scores, dtype=np.float64)
    budget = min(int(budget), len(scores))
    if budget <= 0:
        return np.zeros(0, dtype=np.int64)
    tiebreak = np.arange(len(scores)) if ids is None else np.argsort(np.argsort(np.asarray(ids), kind="stable"))
    order = np.lexsort((tiebreak, -scores))
    return np.sort(order[:budget])


def monthly_reject(scores, budget: int, ids: Sequence[str] | None = None) -> np.ndarray:
    return top_uncertain(scores, budget, ids)


class LabelOracle:
    """Reveals ground truth for explicitly selected test samples and counts every query."""

    def __init__(self):
        self.queries = 0

    def label(self, samples: Sequence[Sample]) -> list[Sample]:
        self.queries += len(samples)
        return list(samples)


def monthly_al(scores, budget: int, samples: Sequence[Sample], oracle: LabelOracle) -> list[Sample]:
    idx = top_uncertain(scores, budget, [s.id for s in samples])
    return oracle.label([samples[i] for i in idx])


class Model(Protocol):
    input_dim: int
    can_reject: bool

    def features(self, samples: Sequence[Sample]) -> np.ndarray: ...
    def decide(self, x: np.ndarray): ...
    def uncertainty(self, x: np.ndarray, probs=None) -> np.ndarray: ...
    def update(self, labelled: Sequence[Sample]) -> None: ...


# -- report ----------------------------------------------------------------------

@dataclass
class MonthRecord:
    month: int
    f1: float | None
    precision: float | None
    recall: float | None
    n_rejected: int
    n_al: int
    n_evaluated: int
    n_integrated_rejected: int = 0
    n_budget_rejected: int = 0
    accepted_errors: int = 0
    rejected_errors: int = 0


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class EvalReport:
    months: list[MonthRecord] = field(default_factory=list)
    protocol: dict = field(default_factory=dict)
    label_queries: int = 0

    @property
    def f1_series(self) -> list[float | None]:
        return [m.f1 for m in self.months]

    @property
    def aut_f1(self) -> float | None:
        return aut_skipping_missing(self.f1_series)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in self.months:
            w.writerow([m.month, _fmt(m.f1), _fmt(m.precision), _fmt(m.recall), m.n_rejected, m.n_al, m.n_evaluated])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def summary(self, **extra) -> dict:
        out = {
            "aut_f1": self.aut_f1,
            "missing_f1_months": [m.month for m in self.months if m.f1 is None],
            "label_queries": self.label_queries,
            "protocol": self.protocol,
            "months": [asdict(m) for m in self.months],
        }
        out.update(extra)
        return out

    def write_summary(self, path, **extra) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(**extra), fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_f1_column(path) -> list[float | None]:
    with open(path, newline="") as fh:
        return [float(row["f1"]) if row["f1"] != "" else None for row in csv.DictReader(fh)]


# -- the monthly loop ------------------------------------------------------------

def _best_classification(actions: np.ndarray, probs: np.ndarray | None) -> np.ndarray:
    """The class each sample would have received; a reject falls back to the likelier class (goodware on ties)."""
    if probs is None:
        return actions
    clf = np.argmax(probs[:, :2], axis=1)
    return np.where(actions == Action.REJECT, clf, actions)


def run_monthly_eval(model: Model, split: TimelineSplit, protocol: ProtocolConfig | None = None) -> EvalReport:
    """Score, quarantine, measure and adapt, one test month at a time."""
    protocol = protocol or ProtocolConfig()
    if protocol.integrated_rejection and not getattr(model, "can_reject", False):
        raise ConfigurationError("integrated rejection needs a model with a reject action")
    oracle = LabelOracle()
    report = EvalReport(protocol=asdict(protocol))

    for bucket in split.test_months:
        n = len(bucket)
        ids = [s.id for s in bucket]
        x = model.features(bucket)
        actions, probs = model.decide(x)
        actions = np.asarray(actions)
        unc = np.asarray(model.uncertainty(x, probs), dtype=np.float64)

        quarantined = np.zeros(n, dtype=bool)
        if protocol.integrated_rejection:
            quarantined |= actions == Action.REJECT
        n_integrated = int(quarantined.sum())
        remaining = np.flatnonzero(~quarantined)
        budget_rej = remaining[monthly_reject(unc[remaining], protocol.monthly_rejection_budget,
                                              [ids[i] for i in remaining])]
        rejected = quarantined.copy()
        rejected[budget_rej] = True
        accepted = np.flatnonzero(~rejected)

        # labels are read here only for the month's metrics
        labels = labels_of(bucket)
        preds = _best_classification(actions, probs)
        precision, recall, f1 = precision_recall_f1(preds[accepted], labels[accepted])

        mode = protocol.al_mode
        if mode == "budget":
            chosen = top_uncertain(unc, protocol.monthly_al_budget, ids)
        elif mode == "iral":
            chosen = np.flatnonzero(quarantined)
        elif mode == "iraal":
            chosen = iraal_selection(quarantined, unc, protocol.al_budget_for_iraal, ids)
        else:
            chosen = np.zeros(0, dtype=np.int64)
        labelled = oracle.label([bucket[i] for i in chosen])

        report.months.append(MonthRecord(
            month=bucket[0].month, f1=f1, precision=precision, recall=recall,
            n_rejected=int(rejected.sum()), n_al=len(labelled), n_evaluated=len(accepted),
            n_integrated_rejected=n_integrated, n_budget_rejected=len(budget_rej),
            accepted_errors=int(np.sum(preds[accepted] != labels[accepted])),
            rejected_errors=int(np.sum(preds[rejected] != labels[rejected])),
        ))
        if labelled:
            model.update(labelled)

    report.label_queries = oracle.queries
    return report


def iraal_selection(quarantined: np.ndarray, unc: np.ndarray, budget: int, ids: Sequence[str]) -> np.ndarray:
    """Rejected samples topped up with the most uncertain accepted ones, or truncated to the budget."""
    rejected = np.flatnonzero(quarantined)
    accepted = np.flatnonzero(~quarantined)
    if len(rejected) >= budget:
        return np.sort(rejected[top_uncertain(unc[rejected], budget, [ids[i] for i in rejected])])
    extra = accepted[top_uncertain(unc[accepted], budget - len(rejected), [ids[i] for i in accepted])]
    return np.sort(np.concatenate([rejected, extra]))
