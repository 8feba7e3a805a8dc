"""Tests for the empirical estimators and threshold selection"""

import itertools
import math

import numpy as np
import pytest
from scipy.stats import norm

from conftest import make_dataset
from dataset import SubpopKey
from errors import InsufficientClassError, UndefinedMetricError
from metrics import (
    MetricEstimate,
    MetricKind,
    ScoreSample,
    auc_roc_integration,
    auc_u_statistic,
    empirical_all,
    empirical_estimate,
    evaluate,
    fpr_at,
    ppv_at,
    resolve_thresholds,
    subpop_keys,
    threshold_for_fpr,
)


def brute_force_auc(pos, neg):
    total = 0.0
    for p, q in itertools.product(pos, neg):
        total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


# ==================== AUC ====================

@pytest.mark.parametrize("pos,neg,expected", [
    ([3, 4], [1, 2], 1.0),
    ([1, 2], [1, 2], 0.5),
    ([2], [1, 3], 0.5),
])
def test_auc_u_statistic_examples(pos, neg, expected):
    assert auc_u_statistic(ScoreSample(pos, neg)) == expected


@pytest.mark.parametrize("pos,neg,expected", [([3, 4], [1, 2], 1.0), ([1], [1], 0.5)])
def test_auc_roc_integration_examples(pos, neg, expected):
    assert auc_roc_integration(ScoreSample(pos, neg)) == pytest.approx(expected, abs=1e-12)


def test_rank_auc_matches_pairwise_sum_with_ties():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n1, n0 = rng.integers(1, 15, size=2)
        # small integer grid forces ties
        pos = rng.integers(0, 6, n1).astype(float)
        neg = rng.integers(0, 6, n0).astype(float)
        sample = ScoreSample(pos, neg)
        expected = brute_force_auc(pos, neg)
        assert auc_u_statistic(sample) == pytest.approx(expected, abs=1e-12)
        assert auc_roc_integration(sample) == pytest.approx(expected, abs=1e-12)


def test_auc_complement_and_monotone_invariance():
    rng = np.random.default_rng(1)
    pos, neg = rng.normal(1, 1, 40), rng.normal(0, 1, 60)
    forward = auc_u_statistic(ScoreSample(pos, neg))
    assert forward + auc_u_statistic(ScoreSample(neg, pos)) == pytest.approx(1.0, abs=1e-12)
    assert auc_u_statistic(ScoreSample(np.exp(pos), np.exp(neg))) == pytest.approx(forward, abs=1e-12)


def test_auc_needs_both_classes():
    with pytest.raises(InsufficientClassError) as info:
        auc_u_statistic(ScoreSample([1.0, 2.0], []))
    assert info.value.missing_class == 0
    with pytest.raises(InsufficientClassError) as info:
        auc_roc_integration(ScoreSample([], [1.0]))
    assert info.value.missing_class == 1


# ==================== THRESHOLD METRICS ====================

def test_fpr_at_examples():
    assert fpr_at(ScoreSample([], [0.1, 0.2, 0.9]), 0.5) == pytest.approx(1 / 3)
    assert fpr_at(ScoreSample([], [0.1, 0.2]), 1.0) == 0.0
    assert fpr_at(ScoreSample([], [0.5]), 0.5) == 0.0


def test_fpr_needs_negatives():
    with pytest.raises(InsufficientClassError):
        fpr_at(ScoreSample([1.0], []), 0.0)


def test_ppv_at_examples():
    assert ppv_at(ScoreSample([0.9, 0.2], [0.8]), 0.5) == 0.5
    assert ppv_at(ScoreSample([0.9], [0.1]), 0.5) == 1.0
    with pytest.raises(UndefinedMetricError):
        ppv_at(ScoreSample([0.1], [0.2]), 0.5)


def test_threshold_for_fpr_examples():
    neg = np.arange(1, 101, dtype=float)
    tau = threshold_for_fpr(ScoreSample([], neg), 0.01)
    assert tau == 99.0
    assert fpr_at(ScoreSample([], neg), tau) == pytest.approx(0.01)
    assert threshold_for_fpr(ScoreSample([], [5.0]), 0.01) == 5.0


def test_threshold_for_fpr_postcondition_with_ties():
    rng = np.random.default_rng(3)
    for target in (0.01, 0.05, 0.2, 0.5):
        neg = rng.integers(0, 20, 137).astype(float)
        tau = threshold_for_fpr(ScoreSample([], neg), target)
        assert fpr_at(ScoreSample([], neg), tau) <= target
        # the next smaller observed negative would exceed the target
        smaller = neg[neg < tau]
        if len(smaller):
            assert fpr_at(ScoreSample([], neg), smaller.max()) > target


def test_fpr_nonincreasing_in_threshold():
    neg = np.random.default_rng(0).normal(size=50)
    values = [fpr_at(ScoreSample([], neg), t) for t in np.linspace(-3, 3, 25)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# ==================== METRIC KINDS ====================

def test_metric_kind_parse():
    assert MetricKind.parse("auc") == MetricKind("AUC")
    assert MetricKind.parse("FPR@0.3") == MetricKind("FPR", 0.3)
    assert MetricKind.parse("PPV").needs_threshold
    assert MetricKind.parse("AUC").at(0.2).threshold is None
    with pytest.raises(ValueError):
        MetricKind("TPR")
    with pytest.raises(ValueError):
        MetricKind("FPR", math.inf)


def test_evaluate_requires_threshold():
    with pytest.raises(ValueError):
        evaluate(ScoreSample([1.0], [0.0]), MetricKind("FPR"))


# ==================== DATASET-LEVEL ESTIMATES ====================

def test_empirical_estimate_empty_key_is_whole_dataset():
    d = make_dataset()
    whole = auc_u_statistic(ScoreSample.from_dataset(d))
    assert empirical_estimate(d, SubpopKey(), MetricKind("AUC")) == whole


def test_empirical_estimate_tags_missing_class_with_key():
    d = make_dataset(n=12)
    negatives = d.take(np.flatnonzero(d.labels == 0))
    key = SubpopKey.of(g="a")
    with pytest.raises(InsufficientClassError) as info:
        empirical_estimate(negatives, key, MetricKind("AUC"))
    assert info.value.key == key


def test_empirical_all_records_failures_instead_of_raising():
    d = make_dataset(n=60)
    negatives = d.take(np.flatnonzero(d.labels == 0))
    keys = subpop_keys(negatives, ["g"])
    estimates = empirical_all(negatives, keys, [MetricKind("AUC"), MetricKind("FPR", 0.0)])
    assert len(estimates) == 2 * len(keys)
    aucs = [e for e in estimates if e.metric.name == "AUC"]
    assert all(e.missing and "positive" in e.error for e in aucs)
    assert all(not e.missing for e in estimates if e.metric.name == "FPR")


def test_subpop_keys_lists_whole_population_first():
    d = make_dataset()
    keys = subpop_keys(d, ["g"])
    assert keys[0] == SubpopKey()
    assert set(keys[1:]) == {SubpopKey.of(g="a"), SubpopKey.of(g="b")}


def test_resolve_thresholds_uses_full_sample_fpr_target():
    d = make_dataset(n=400)
    metrics, tau = resolve_thresholds(d, [MetricKind("AUC"), MetricKind("FPR")], 0.05)
    assert tau == threshold_for_fpr(ScoreSample.from_dataset(d), 0.05)
    assert metrics[0].threshold is None and metrics[1].threshold == tau
    explicit, tau = resolve_thresholds(d, [MetricKind("PPV")], 0.05, threshold=0.25)
    assert tau == 0.25 and explicit[0].threshold == 0.25


def test_gaussian_auc_matches_analytic_value():
    rng = np.random.default_rng(11)
    neg = -3.5 + 1.25 * rng.standard_normal(100_000)
    pos = -2.0 + 1.25 * rng.standard_normal(100_000)
    expected = norm.cdf(1.5 / (1.25 * math.sqrt(2)))
    assert expected == pytest.approx(0.8019, abs=1e-4)
    assert auc_u_statistic(ScoreSample(pos, neg)) == pytest.approx(expected, abs=0.005)


def test_metric_estimate_dict_round_trip():
    estimate = MetricEstimate(
        key=SubpopKey.of(g="a", h="x"), metric=MetricKind("FPR", 0.5), point=0.1, method="fixed.b",
        provenance="mbm:fixed.b", n=17, replicates=np.array([0.1, np.nan, 0.2]),
        intervals={0.95: (0.1, 0.2)},
    )
    restored = MetricEstimate.from_dict(estimate.to_dict())
    assert restored.to_dict() == estimate.to_dict()
    assert restored.n_missing == 1 and restored.n_valid == 2
