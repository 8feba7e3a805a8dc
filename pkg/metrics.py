"""
Sample-based (empirical) estimators of AUC, FPR and PPV, threshold selection,
and the MetricEstimate record every estimation method reports through
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import auc, roc_curve

from config import METRIC_NAMES
from dataset import EvalDataset, SubpopKey, enumerate_subpops, subset
from errors import InsufficientClassError, MBMError, UndefinedMetricError, tag_with_key

logger = logging.getLogger(__name__)

# ==================== TYPES ====================

@dataclass(frozen=True)
class MetricKind:
    """AUC, or FPR/PPV at threshold tau (strict s > tau)"""
    name: str
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ValueError(f"unknown metric {self.name!r} (expected one of {', '.join(METRIC_NAMES)})")
        if self.threshold is not None and not math.isfinite(self.threshold):
            raise ValueError(f"{self.name} threshold must be finite")

    @classmethod
    def parse(cls, text: str, threshold: Optional[float] = None) -> "MetricKind":
        """'AUC', 'FPR', 'PPV', or 'FPR@0.3' style with an explicit threshold"""
        name, _, tau = text.strip().partition("@")
        name = name.strip().upper()
        if tau:
            threshold = float(tau)
        return cls(name, None if name == "AUC" else threshold)

    @property
    def needs_threshold(self) -> bool:
        return self.name != "AUC"

    def at(self, threshold: float) -> "MetricKind":
        return self if not self.needs_threshold else replace(self, threshold=float(threshold))

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class ScoreSample:
    """Scores split by class: pos = N_1, neg = N_0"""
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=float).reshape(-1)
        neg = np.asarray(self.neg, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "neg", neg)

    @classmethod
    def from_arrays(cls, scores, labels) -> "ScoreSample":
        scores = np.asarray(scores, dtype=float)
        labels = np.asarray(labels)
        return cls(pos=scores[labels == 1], neg=scores[labels == 0])

    @classmethod
    def from_dataset(cls, d: EvalDataset) -> "ScoreSample":
        return cls.from_arrays(d.require_scores(), d.labels)

    def _require(self, need_pos: bool = True, need_neg: bool = True):
        if need_pos and len(self.pos) == 0:
            raise InsufficientClassError("no positive (y=1) records", missing_class=1)
        if need_neg and len(self.neg) == 0:
            raise InsufficientClassError("no negative (y=0) records", missing_class=0)


# ==================== ESTIMATORS ====================

def auc_u_statistic(s: ScoreSample) -> float:
    """Mann-Whitney U / (n1 n0) with ties counted 0.5, via mid-ranks"""
    s._require()
    n1, n0 = len(s.pos), len(s.neg)
    ranks = rankdata(np.concatenate([s.pos, s.neg]), method="average")
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auc_roc_integration(s: ScoreSample) -> float:
    """Trapezoidal area under the empirical ROC; tied scores form one vertex"""
    s._require()
    labels = np.concatenate([np.ones(len(s.pos)), np.zeros(len(s.neg))])
    fpr, tpr, _ = roc_curve(labels, np.concatenate([s.pos, s.neg]), drop_intermediate=False)
    return float(auc(fpr, tpr))


def fpr_at(s: ScoreSample, threshold: float) -> float:
    s._require(need_pos=False)
    return float(np.count_nonzero(s.neg > threshold) / len(s.neg))


def ppv_at(s: ScoreSample, threshold: float) -> float:
    true_pos = np.count_nonzero(s.pos > threshold)
    false_pos = np.count_nonzero(s.neg > threshold)
    if true_pos + false_pos == 0:
        raise UndefinedMetricError(f"no predicted positives above threshold {threshold:g}")
    return float(true_pos / (true_pos + false_pos))


def threshold_for_fpr(s: ScoreSample, target: float) -> float:
    """
    Smallest observed negative score tau with fpr_at(s, tau) <= target.
    The largest negative always qualifies (nothing lies strictly above it).
    """
    if not 0 < target < 1:
        raise ValueError("FPR target must lie in (0, 1)")
    s._require(need_pos=False)
    neg = np.sort(s.neg)
    n0 = len(neg)
    allowed = math.floor(target * n0 + 1e-9)
    # number strictly above neg[i] is n0 - (index past the last tie of neg[i])
    above = n0 - np.searchsorted(neg, neg, side="right")
    ok = np.flatnonzero(above <= allowed)
    return float(neg[ok[0]])


def evaluate(s: ScoreSample, metric: MetricKind) -> float:
    if metric.name == "AUC":
        return auc_u_statistic(s)
    if metric.threshold is None:
        raise ValueError(f"{metric.name} needs a threshold")
    if metric.name == "FPR":
        return fpr_at(s, metric.threshold)
    return ppv_at(s, metric.threshold)


def empirical_estimate(d: EvalDataset, key: SubpopKey, m: MetricKind) -> float:
    """Subset to the subpopulation and apply the estimator for m"""
    sample = ScoreSample.from_dataset(subset(d, key))
    try:
        return evaluate(sample, m)
    except (InsufficientClassError, UndefinedMetricError) as e:
        raise tag_with_key(e, key)


# ==================== REPORTED ESTIMATES ====================

@dataclass
class MetricEstimate:
    """
    One (subpopulation, metric, method) result.
    provenance: "empirical", "mbm:<model>" or "fallback:<model>"
    replicates: length-B bootstrap values, NaN where a replicate was undefined
    """
    key: SubpopKey
    metric: MetricKind
    point: Optional[float]
    method: str = "empirical"
    provenance: str = "empirical"
    n: int = 0
    replicates: Optional[np.ndarray] = None
    intervals: Dict[float, Tuple[float, float]] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def missing(self) -> bool:
        return self.point is None

    @property
    def n_missing(self) -> int:
        if self.replicates is None:
            return 0
        return int(np.count_nonzero(np.isnan(self.replicates)))

    @property
    def n_valid(self) -> int:
        if self.replicates is None:
            return 0
        return len(self.replicates) - self.n_missing

    @property
    def ident(self) -> Tuple[SubpopKey, str]:
        return self.key, self.metric.name

    def to_dict(self) -> Dict:
        return {
            "key": self.key.label(),
            "metric": self.metric.name,
            "threshold": self.metric.threshold,
            "point": self.point,
            "method": self.method,
            "provenance": self.provenance,
            "n": self.n,
            "replicates": None if self.replicates is None else [None if np.isnan(v) else float(v) for v in self.replicates],
            "intervals": {f"{level:g}": [lo, hi] for level, (lo, hi) in self.intervals.items()},
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricEstimate":
        replicates = data.get("replicates")
        return cls(
            key=SubpopKey.parse(data["key"]),
            metric=MetricKind(data["metric"], data.get("threshold")),
            point=data.get("point"),
            method=data.get("method", "empirical"),
            provenance=data.get("provenance", "empirical"),
            n=int(data.get("n", 0)),
            replicates=None if replicates is None else np.array([np.nan if v is None else v for v in replicates], dtype=float),
            intervals={float(level): (bounds[0], bounds[1]) for level, bounds in data.get("intervals", {}).items()},
            error=data.get("error"),
        )


def estimate_or_missing(compute, key: SubpopKey, metric: MetricKind, method: str, provenance: str, n: int) -> MetricEstimate:
    """Run compute(); estimator failures become a missing estimate with the error text"""
    try:
        point = compute()
    except (InsufficientClassError, UndefinedMetricError) as e:
        return MetricEstimate(key, metric, None, method, provenance, n, error=str(e))
    return MetricEstimate(key, metric, float(point), method, provenance, n)


def empirical_all(d: EvalDataset, keys: Sequence[SubpopKey], metrics: Sequence[MetricKind]) -> List[MetricEstimate]:
    """Empirical points for every key x metric; per-cell failures are annotated, not raised"""
    estimates = []
    for key in keys:
        cell = subset(d, key)
        sample = ScoreSample.from_dataset(cell)
        for metric in metrics:
            estimates.append(
                estimate_or_missing(lambda: evaluate(sample, metric), key, metric, "empirical", "empirical", cell.n)
            )
    missing = sum(e.missing for e in estimates)
    if missing:
        logger.info(f"Empirical estimates: {missing} of {len(estimates)} undefined")
    return estimates


def subpop_keys(d: EvalDataset, attrs: Iterable[str], include_all: bool = True) -> List[SubpopKey]:
    """Whole population first, then non-empty cells in enumerate_subpops order"""
    keys = [key for key, _ in enumerate_subpops(d, list(attrs))]
    if include_all and SubpopKey() not in keys:
        keys.insert(0, SubpopKey())
    return keys


def resolve_thresholds(d: EvalDataset, metrics: Sequence[MetricKind], fpr_target: float,
                       threshold: Optional[float] = None) -> Tuple[List[MetricKind], Optional[float]]:
    """
    Fix tau for FPR/PPV: an explicit threshold wins, otherwise the whole-dataset
    threshold_for_fpr at fpr_target. AUC passes through unchanged.
    """
    if not any(m.needs_threshold and m.threshold is None for m in metrics):
        return list(metrics), threshold
    if threshold is None:
        try:
            threshold = threshold_for_fpr(ScoreSample.from_dataset(d), fpr_target)
        except MBMError as e:
            logger.warning(f"Could not set a threshold at FPR {fpr_target}: {e}")
            return [m for m in metrics if not m.needs_threshold or m.threshold is not None], None
    return [m.at(threshold) if m.threshold is None else m for m in metrics], threshold
