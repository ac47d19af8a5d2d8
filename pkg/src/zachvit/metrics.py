"""Classification metrics and nonparametric rank statistics.

Scores are post-softmax probabilities.  Binary tasks score the ranking
quality of class-1 probabilities (Mann-Whitney form, ties at half
credit) alongside a fixed-threshold accuracy, since summary tables tend
to conflate the two; both are kept.

The rank half follows the classic Friedman + Nemenyi recipe: per-column
average ranks, a chi-square statistic over mean ranks, and a critical
difference from tabulated Studentized-range constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata

from .data import TASK_BINARY


class MetricError(ValueError):
    """Metric invoked on inputs it is not defined for."""


class UndefinedMetricError(MetricError):
    """Inputs are structurally fine but the metric has no value (e.g. AUC
    with a single observed class)."""


@dataclass
class PredictionSet:
    scores: np.ndarray  # [n, K] probabilities
    labels: np.ndarray  # [n] class indices
    task_kind: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2:
            raise MetricError(f"scores must be [n, K], got {self.scores.shape}")
        n, k = self.scores.shape
        if k < 2:
            raise MetricError("need at least two classes of scores")
        if self.labels.shape != (n,):
            raise MetricError(f"{n} score rows but {self.labels.shape[0]} labels")
        if n:
            sums = self.scores.sum(axis=1)
            worst = float(np.abs(sums - 1.0).max())
            if worst > 1e-9:
                raise MetricError(f"score rows must sum to 1 (off by {worst:.3g})")
            if self.labels.min() < 0 or self.labels.max() >= k:
                raise MetricError("label outside [0, K)")

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]


def predicted_classes(pred: PredictionSet) -> np.ndarray:
    # np.argmax takes the first maximum, which is the tie-to-lowest rule
    return np.argmax(pred.scores, axis=1)


def _require_nonempty(pred: PredictionSet) -> None:
    if pred.n == 0:
        raise MetricError("empty prediction set")


def accuracy(pred: PredictionSet) -> float:
    _require_nonempty(pred)
    return float(np.mean(predicted_classes(pred) == pred.labels))


def macro_f1(pred: PredictionSet) -> float:
    """Unweighted mean of per-class F1; a class with no true and no
    predicted members contributes 0, not an undefined value."""
    _require_nonempty(pred)
    hat = predicted_classes(pred)
    total = 0.0
    for cls in range(pred.num_classes):
        tp = int(np.sum((hat == cls) & (pred.labels == cls)))
        fp = int(np.sum((hat == cls) & (pred.labels != cls)))
        fn = int(np.sum((hat != cls) & (pred.labels == cls)))
        denom = 2 * tp + fp + fn
        total += (2.0 * tp / denom) if denom else 0.0
    return total / pred.num_classes


def _require_binary(pred: PredictionSet, what: str) -> None:
    if pred.task_kind != TASK_BINARY or pred.num_classes != 2:
        raise MetricError(f"{what} requires a binary task")


def roc_auc(pred: PredictionSet) -> float:
    """P(random positive scores above random negative), ties half-counted.

    Rank-sum form: with average ranks r over class-1 scores,
    AUC = (sum of positive ranks - n_pos(n_pos+1)/2) / (n_pos * n_neg).
    """
    _require_nonempty(pred)
    _require_binary(pred, "roc_auc")
    positive = pred.labels == 1
    n_pos = int(positive.sum())
    n_neg = pred.n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc undefined: only one class observed")
    ranks = rankdata(pred.scores[:, 1], method="average")
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def threshold_accuracy(pred: PredictionSet, tau: float = 0.5) -> float:
    """Accuracy when predicting class 1 iff its probability >= tau."""
    _require_nonempty(pred)
    _require_binary(pred, "threshold_accuracy")
    hat = (pred.scores[:, 1] >= tau).astype(np.int64)
    return float(np.mean(hat == pred.labels))


# ---------------------------------------------------------------------------
# score tables and ranking


@dataclass
class ScoreTable:
    model_names: list
    dataset_names: list
    scores: np.ndarray  # [k models x N datasets], higher is better
    metric_names: Optional[list] = None  # one per dataset, informational

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        k, n = len(self.model_names), len(self.dataset_names)
        if self.scores.shape != (k, n):
            raise ValueError(
                f"score matrix {self.scores.shape} does not match "
                f"{k} models x {n} datasets"
            )
        if len(set(self.model_names)) != k:
            raise ValueError("duplicate model names")
        if len(set(self.dataset_names)) != n:
            raise ValueError("duplicate dataset names")
        if self.metric_names is not None and len(self.metric_names) != n:
            raise ValueError("need one metric name per dataset")
        bad = np.argwhere(~np.isfinite(self.scores))
        if bad.size:
            cells = [
                f"({self.model_names[i]}, {self.dataset_names[j]})" for i, j in bad
            ]
            raise ValueError("missing score cells: " + ", ".join(cells))

    def score(self, model: str, dataset: str) -> float:
        try:
            i = self.model_names.index(model)
        except ValueError:
            raise ValueError(f"unknown model {model!r}") from None
        try:
            j = self.dataset_names.index(dataset)
        except ValueError:
            raise ValueError(f"unknown dataset {dataset!r}") from None
        return float(self.scores[i, j])


def regime_advantage(
    table: ScoreTable, subject: str, baselines: Sequence[str], dataset: str
) -> float:
    """Subject's score minus the mean score of the baselines, per dataset."""
    if not baselines:
        raise ValueError("need at least one baseline model")
    subject_score = table.score(subject, dataset)
    base = [table.score(b, dataset) for b in baselines]
    return subject_score - sum(base) / len(base)


def rank_models(table: ScoreTable):
    """Per-dataset ranks (1 = best, ties averaged) and per-model means."""
    ranks = np.empty_like(table.scores)
    for j in range(table.scores.shape[1]):
        ranks[:, j] = rankdata(-table.scores[:, j], method="average")
    return ranks, ranks.mean(axis=1)


def friedman_test(ranks: np.ndarray):
    """Chi-square Friedman statistic over a [k models x N datasets] rank
    matrix, p-value from the chi-square survival function with k-1 df."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.ndim != 2:
        raise ValueError(f"ranks must be [k, N], got {ranks.shape}")
    k, n = ranks.shape
    if k < 3:
        raise ValueError(f"Friedman test needs k >= 3 models, got {k}")
    if n < 2:
        raise ValueError(f"Friedman test needs N >= 2 datasets, got {n}")
    mean_ranks = ranks.mean(axis=1)
    stat = (12.0 * n / (k * (k + 1))) * (
        float(np.sum(mean_ranks**2)) - k * (k + 1) ** 2 / 4.0
    )
    stat = max(stat, 0.0)  # guard tiny negative round-off under heavy ties
    p = float(gammaincc((k - 1) / 2.0, stat / 2.0))
    return stat, p


# Critical q constants for the two-tailed Nemenyi test at infinite df,
# i.e. Studentized-range quantiles divided by sqrt(2).  Values from the
# table in Demsar, "Statistical Comparisons of Classifiers over Multiple
# Data Sets", JMLR 7 (2006), extended to k = 20 with the standard
# continuation of the same quantiles.
_NEMENYI_Q = {
    0.05: {
        2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949,
        8: 3.031, 9: 3.102, 10: 3.164, 11: 3.219, 12: 3.268, 13: 3.313,
        14: 3.354, 15: 3.391, 16: 3.426, 17: 3.458, 18: 3.489, 19: 3.517,
        20: 3.544,
    },
    0.10: {
        2: 1.645, 3: 2.052, 4: 2.291, 5: 2.459, 6: 2.589, 7: 2.693,
        8: 2.780, 9: 2.855, 10: 2.920, 11: 2.978, 12: 3.030, 13: 3.077,
        14: 3.120, 15: 3.159, 16: 3.196, 17: 3.230, 18: 3.261, 19: 3.291,
        20: 3.319,
    },
}


def nemenyi_q(k: int, alpha: float = 0.05) -> float:
    try:
        per_alpha = _NEMENYI_Q[alpha]
    except KeyError:
        raise ValueError(f"alpha must be one of {sorted(_NEMENYI_Q)}, got {alpha}") from None
    try:
        return per_alpha[k]
    except KeyError:
        raise ValueError(f"k must be in [2, 20], got {k}") from None


def nemenyi_cd(k: int, n_datasets: int, alpha: float = 0.05) -> float:
    """Minimal mean-rank gap for significance: q * sqrt(k(k+1)/(6N))."""
    if n_datasets < 1:
        raise ValueError(f"need at least one dataset, got {n_datasets}")
    return nemenyi_q(k, alpha) * math.sqrt(k * (k + 1) / (6.0 * n_datasets))


def cd_grouping(mean_ranks, cd: float):
    """Maximal runs of rank-sorted models whose rank spread is within cd.

    Returns groups as lists of model indices (into mean_ranks), best
    rank first; every model appears in at least one group.
    """
    mean_ranks = np.asarray(mean_ranks, dtype=np.float64)
    if cd < 0:
        raise ValueError("critical difference must be nonnegative")
    order = np.argsort(mean_ranks, kind="stable")
    sorted_ranks = mean_ranks[order]
    groups = []
    prev_end = -1
    for start in range(len(order)):
        end = start
        while end + 1 < len(order) and sorted_ranks[end + 1] - sorted_ranks[start] <= cd:
            end += 1
        if end > prev_end:
            groups.append([int(i) for i in order[start : end + 1]])
            prev_end = end
    return groups
