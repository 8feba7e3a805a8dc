"""Tests for posterior predictive simulation and model-based estimates"""

import math
import os

import numpy as np
import pytest
from scipy.stats import norm

from conftest import make_dataset
from dataset import SubpopKey
from errors import InsufficientClassError, StalenessError
from formula import parse_formula
from inference import draw_moments, sample_conjugate
from metrics import MetricKind, ScoreSample, auc_u_statistic
from predictive import PredictiveSims, mbm_all, mbm_estimate, simulate_predictive
from synth import MECHANISM_MANIFEST, ScoreMechanism, generate_population, load_population_spec, simulate_scores


@pytest.fixture(scope="module")
def fitted():
    d = make_dataset(n=400, seed=9)
    spec = parse_formula("S ~ g + h + Y + c")
    draws, _ = sample_conjugate(spec, d, R=300, seed=0, warmup=200)
    return spec, draws, d


def test_simulations_are_aligned_with_records(fitted):
    spec, draws, d = fitted
    sims = simulate_predictive(spec, draws, d, seed=1)
    assert (sims.N, sims.R) == (d.n, draws.R)
    mu, sigma = draw_moments(spec, draws, d)
    # averaged over draws, each record's simulations centre on its predictive mean
    np.testing.assert_allclose(sims.sims.mean(axis=1), mu.mean(axis=0), atol=5 * sigma.mean() / np.sqrt(draws.R))
    np.testing.assert_array_equal(sims.column(0).scores, sims.sims[:, 0])


def test_simulation_is_reproducible(fitted):
    spec, draws, d = fitted
    first = simulate_predictive(spec, draws, d, seed=5)
    second = simulate_predictive(spec, draws, d, seed=5)
    np.testing.assert_array_equal(first.sims, second.sims)


def test_stale_draws_are_refused(fitted):
    spec, draws, d = fitted
    with pytest.raises(StalenessError):
        simulate_predictive(spec, draws, d.take(np.arange(100)), seed=0)
    with pytest.raises(StalenessError):
        simulate_predictive(parse_formula("S ~ Y"), draws, d, seed=0)


def test_records_argument_simulates_other_rows(fitted):
    spec, draws, d = fitted
    rows = d.take([0, 0, 3])
    sims = simulate_predictive(spec, draws, d, seed=2, records=rows)
    assert sims.N == 3 and sims.dataset is rows


def test_mbm_auc_tracks_empirical_auc_for_a_correct_model(fitted):
    spec, draws, d = fitted
    sims = simulate_predictive(spec, draws, d, seed=3)
    empirical = auc_u_statistic(ScoreSample.from_dataset(d))
    assert mbm_estimate(sims, SubpopKey(), MetricKind("AUC")) == pytest.approx(empirical, abs=0.05)


def test_pooled_and_per_draw_estimates():
    d = make_dataset(n=12)
    # the first two columns separate the classes, the third reverses them
    base = d.labels.astype(float)
    sims = PredictiveSims(sims=np.column_stack([base, base + 1.0, -base]), dataset=d, spec_hash="h")
    auc = MetricKind("AUC")
    assert mbm_estimate(sims, SubpopKey(), auc, pooling="per_draw") == pytest.approx(2 / 3)
    pooled = mbm_estimate(sims, SubpopKey(), auc, pooling="pooled")
    expected = auc_u_statistic(ScoreSample.from_arrays(sims.sims.ravel(), np.repeat(d.labels, 3)))
    assert pooled == pytest.approx(expected)
    with pytest.raises(ValueError):
        mbm_estimate(sims, SubpopKey(), auc, pooling="median")


def test_mbm_all_records_undefined_cells():
    d = make_dataset(n=40)
    negatives = d.take(np.flatnonzero(d.labels == 0))
    sims = PredictiveSims(sims=np.zeros((negatives.n, 4)), dataset=negatives, spec_hash="h")
    estimates = mbm_all(sims, ["g"], [MetricKind("AUC"), MetricKind("FPR", -1.0)], model_name="fixed.a")
    aucs = [e for e in estimates if e.metric.name == "AUC"]
    assert all(e.missing for e in aucs)
    assert all(e.provenance == "mbm:fixed.a" and e.method == "fixed.a" for e in estimates)
    fprs = [e for e in estimates if e.metric.name == "FPR"]
    assert all(e.point == 1.0 for e in fprs)
    assert [e.n for e in fprs] == [negatives.n] + [int(negatives.mask(e.key).sum()) for e in fprs[1:]]


def test_mbm_estimate_tags_key_on_failure():
    d = make_dataset(n=40)
    negatives = d.take(np.flatnonzero(d.labels == 0))
    sims = PredictiveSims(sims=np.zeros((negatives.n, 2)), dataset=negatives, spec_hash="h")
    key = SubpopKey.of(h="y")
    with pytest.raises(InsufficientClassError) as info:
        mbm_estimate(sims, key, MetricKind("AUC"))
    assert info.value.key == key


def test_predictive_sims_validate_shape():
    d = make_dataset(n=10)
    with pytest.raises(ValueError):
        PredictiveSims(sims=np.zeros((9, 2)), dataset=d, spec_hash="h")
    with pytest.raises(ValueError):
        PredictiveSims(sims=np.full((10, 2), np.nan), dataset=d, spec_hash="h")


@pytest.mark.slow
def test_population_mbm_auc_matches_the_analytic_value():
    spec_path = os.path.join(os.path.dirname(MECHANISM_MANIFEST), "population_spec.json")
    population = generate_population(load_population_spec(spec_path), n_pop=60_000, seed=5)
    d = population.with_scores(simulate_scores(population, ScoreMechanism("none"), seed=1))
    spec = parse_formula("S ~ Y")
    draws, _ = sample_conjugate(spec, d, R=60, seed=0, warmup=200)
    sims = simulate_predictive(spec, draws, d, seed=2)
    # class means -3.5 and -2.0 with a common sd of 1.25
    expected = norm.cdf(1.5 / (1.25 * math.sqrt(2)))
    assert mbm_estimate(sims, SubpopKey(), MetricKind("AUC")) == pytest.approx(expected, abs=0.01)
