"""Tests for the KDE baseline, cross-validated checks, fallback and best.ll merging"""

import math
import os

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import iqr, norm

from config import SamplerSettings
from conftest import make_dataset
from dataset import SubpopKey, cell_index
from errors import AlignmentError, DataError
from formula import parse_formula, reference_models
from metrics import MetricEstimate, MetricKind
from predictive import PredictiveSims
from synth import (
    DEMOGRAPHICS,
    MECHANISM_MANIFEST,
    ScoreMechanism,
    generate_population,
    load_population_spec,
    simulate_scores,
    subsample,
)
from checking import (
    FALLBACK,
    KDE,
    MODEL_OK,
    CellCheckResult,
    apply_fallback,
    best_overall,
    cv_compare,
    cv_compare_models,
    kde_bandwidth,
    kde_heldout,
    kde_logpdf,
    merge_best,
    ppc_summary,
    relative_nll_table,
    select_best,
    stratified_folds,
    summarize_cells,
)

KEY_A = SubpopKey.of(g="a")
KEY_B = SubpopKey.of(g="b")
AUC = MetricKind("AUC")


def check(key, y, model, n, model_ll, kde_ll, verdict=MODEL_OK, n_paired=None):
    return CellCheckResult(key, y, model, n, model_ll, kde_ll, 0.1, verdict, n_paired)


def estimate(key, point, method="empirical", provenance="empirical"):
    return MetricEstimate(key=key, metric=AUC, point=point, method=method, provenance=provenance, n=10,
                          replicates=np.array([point, point]), intervals={0.95: (point, point)})


# ==================== KDE ====================

def test_silverman_bandwidth():
    train = np.random.default_rng(0).normal(size=200)
    expected = 0.9 * min(train.std(ddof=1), iqr(train) / 1.34) * 200 ** -0.2
    assert kde_bandwidth(train) == pytest.approx(expected)
    assert kde_bandwidth([2.0, 2.0, 2.0]) == 1e-3


def test_kde_logpdf_matches_kernel_average():
    train = np.array([0.0, 0.5, 2.0, 3.5])
    h = kde_bandwidth(train)
    expected = math.log(np.mean(norm.pdf(1.0, loc=train, scale=h)))
    assert kde_logpdf(train, 1.0) == pytest.approx(expected, rel=1e-6)
    values = kde_logpdf(train, [1.0, 2.0])
    assert values.shape == (2,) and values[0] == pytest.approx(expected, rel=1e-6)
    with pytest.raises(DataError):
        kde_logpdf([1.0], 0.0)


def test_kde_density_integrates_to_one():
    train = np.random.default_rng(3).normal(size=50)
    h = kde_bandwidth(train)
    total, _ = quad(lambda x: math.exp(kde_logpdf(train, x)), train.min() - 12 * h, train.max() + 12 * h,
                    points=np.sort(train)[::5], limit=400)
    assert total == pytest.approx(1.0, abs=1e-6)


# ==================== FOLDS ====================

def test_stratified_folds_cover_every_record():
    d = make_dataset(n=150)
    folds = stratified_folds(d, K=5, seed=3)
    assert set(folds.tolist()) == set(range(5))
    counts = np.bincount(folds)
    assert counts.max() - counts.min() <= 3
    for fold in range(5):
        assert set(d.labels[folds == fold].tolist()) == {0, 1}
    np.testing.assert_array_equal(folds, stratified_folds(d, K=5, seed=3))


def test_stratified_folds_argument_checks():
    d = make_dataset(n=12)
    with pytest.raises(ValueError):
        stratified_folds(d, K=1, seed=0)
    with pytest.raises(DataError):
        stratified_folds(d.take(np.arange(3)), K=5, seed=0)


def test_kde_heldout_needs_two_training_scores():
    d = make_dataset(n=60)
    folds = stratified_folds(d, K=3, seed=0)
    values = kde_heldout(d, folds)
    cells, _ = cell_index(d, d.schema.attr_names)
    for i in range(d.n):
        same = (cells == cells[i]) & (d.labels == d.labels[i]) & (folds != folds[i])
        assert np.isnan(values[i]) == (same.sum() < 2)


# ==================== VERDICTS ====================

def test_summarize_cells_flags_a_clearly_worse_model():
    d = make_dataset(n=200)
    model_lp = np.zeros(d.n)
    kde_lp = np.zeros(d.n)
    target = d.mask(KEY_A.union(SubpopKey.of(h="x"))) & (d.labels == 1)
    kde_lp[target] = 5.0 + 0.1 * np.random.default_rng(0).standard_normal(target.sum())
    results = summarize_cells(d, model_lp, kde_lp, "fixed.a", margin=1.0)
    verdicts = {(r.key, r.y): r.verdict for r in results}
    assert verdicts[(SubpopKey.of(g="a", h="x"), 1)] == FALLBACK
    assert sum(v == FALLBACK for v in verdicts.values()) == 1
    assert len(results) == 12
    assert sum(r.n for r in results) == d.n


def test_summarize_cells_needs_two_pairs():
    d = make_dataset(n=12)
    kde_lp = np.full(d.n, np.nan)
    kde_lp[0] = 10.0
    results = summarize_cells(d, np.zeros(d.n), kde_lp, "m")
    assert all(r.verdict == MODEL_OK for r in results)
    missing = [r for r in results if math.isnan(r.kde_ll)]
    assert len(missing) == len(results) - 1
    assert [r.paired for r in results if not math.isnan(r.kde_ll)] == [1]
    assert all(r.paired == 0 and r.scored == r.n for r in missing)


def test_check_result_dict_round_trip():
    result = CellCheckResult(SubpopKey.of(g="a", h="y"), 1, "rand.a", 7, -1.25, float("nan"), float("nan"), MODEL_OK)
    data = result.to_dict()
    assert data["kde_ll"] is None and data["key"] == "g=a,h=y"
    assert data["n_paired"] == 7
    restored = CellCheckResult.from_dict(data)
    assert restored.to_dict() == data


# ==================== MERGING ====================

def check_results():
    return {
        "m1": [check(KEY_A, 0, "m1", 10, -1.0, -2.0), check(KEY_A, 1, "m1", 5, -1.0, -0.5),
               check(KEY_B, 0, "m1", 10, -3.0, -1.0, FALLBACK), check(KEY_B, 1, "m1", 5, -3.0, -1.0)],
        "m2": [check(KEY_A, 0, "m2", 10, -0.8, -2.0), check(KEY_A, 1, "m2", 5, -0.8, -0.5),
               check(KEY_B, 0, "m2", 10, -2.5, -1.0), check(KEY_B, 1, "m2", 5, -2.5, -1.0)],
    }


def test_select_best_picks_highest_total_log_likelihood():
    choice = select_best(check_results())
    assert choice == {KEY_A: "m2", KEY_B: KDE}
    assert best_overall(check_results()) == "m2"


def test_kde_only_competes_where_it_covers_the_cell():
    results = {"m1": [check(KEY_A, 0, "m1", 10, -3.0, float("nan")), check(KEY_A, 1, "m1", 5, -3.0, 0.0)]}
    assert select_best(results) == {KEY_A: "m1"}


def test_select_best_sums_over_paired_records():
    # class 0 has a KDE value for 2 of its 10 records, so the KDE sits out and
    # both models are scored on 2 + 5 records
    results = {
        "m1": [check(KEY_A, 0, "m1", 10, -1.0, -0.1, n_paired=2), check(KEY_A, 1, "m1", 5, -2.0, -0.1)],
        "m2": [check(KEY_A, 0, "m2", 10, -1.5, -0.1, n_paired=2), check(KEY_A, 1, "m2", 5, -1.6, -0.1)],
    }
    assert select_best(results) == {KEY_A: "m2"}
    assert best_overall(results) == "m2"


def test_apply_fallback_replaces_flagged_cells():
    empirical = [estimate(SubpopKey(), 0.7), estimate(KEY_A, 0.6), estimate(KEY_B, 0.9)]
    model = [estimate(k, 0.75, "m1", "mbm:m1") for k in (SubpopKey(), KEY_A, KEY_B)]
    merged = apply_fallback(model, check_results()["m1"], empirical)
    by_key = {e.key: e for e in merged}
    assert by_key[KEY_B].point == 0.9
    assert by_key[KEY_B].provenance == "fallback:kde"
    assert by_key[KEY_B].method == "m1"
    assert by_key[KEY_B].intervals == {0.95: (0.9, 0.9)}
    assert by_key[KEY_A].point == 0.75 and by_key[SubpopKey()].provenance == "mbm:m1"


def test_apply_fallback_requires_aligned_estimates():
    with pytest.raises(AlignmentError):
        apply_fallback([estimate(KEY_A, 0.5, "m1")], [], [estimate(KEY_B, 0.5)])


def test_merge_best_assembles_rows_from_chosen_sources():
    empirical = [estimate(SubpopKey(), 0.7), estimate(KEY_A, 0.6), estimate(KEY_B, 0.9)]
    models = {
        "m1": [estimate(k, 0.71, "m1", "mbm:m1") for k in (SubpopKey(), KEY_A, KEY_B)],
        "m2": [estimate(k, 0.72, "m2", "mbm:m2") for k in (SubpopKey(), KEY_A, KEY_B)],
    }
    merged = merge_best(models, empirical, select_best(check_results()), default_model="m2")
    by_key = {e.key: e for e in merged}
    assert all(e.method == "best.ll" for e in merged)
    assert by_key[SubpopKey()].provenance == "mbm:m2"
    assert by_key[KEY_A].point == 0.72
    assert by_key[KEY_B].point == 0.9 and by_key[KEY_B].provenance == "fallback:kde"
    # sources are left untouched
    assert models["m2"][1].method == "m2"


def test_relative_nll_table():
    table = relative_nll_table(check_results())
    assert list(table.columns) == ["key", "y", "n", "model", "nll_diff"]
    assert len(table) == 4 + 4 + 4
    row = table[(table.model == "m1") & (table.key == "g=a") & (table.y == 0)].iloc[0]
    assert row.nll_diff == pytest.approx(-1.0)
    worse = table[(table.model == "m1") & (table.key == "g=b") & (table.y == 0)].iloc[0]
    assert worse.nll_diff == pytest.approx(2.0)
    assert set(table[table.model == KDE].nll_diff) == {0.0}


def test_relative_nll_table_handles_positive_log_densities():
    # peaked scores have log densities above zero; the model is better by 0.5 nats per record
    table = relative_nll_table({"m1": [check(KEY_A, 0, "m1", 10, 2.0, 1.5)]})
    assert table.loc[table.model == "m1", "nll_diff"].item() == pytest.approx(-0.5)
    missing = relative_nll_table({"m1": [check(KEY_A, 0, "m1", 10, 2.0, float("nan"))]})
    assert missing.nll_diff.isna().all()


def test_ppc_summary_compares_means_and_spreads():
    d = make_dataset(n=60)
    sims = PredictiveSims(sims=np.column_stack([d.scores, d.scores]), dataset=d, spec_hash="h")
    table = ppc_summary(sims, ["g"])
    assert list(table.columns) == ["key", "y", "n", "obs_mean", "obs_sd", "sim_mean", "sim_sd"]
    assert len(table) == 4
    np.testing.assert_allclose(table.sim_mean, table.obs_mean)
    np.testing.assert_allclose(table.sim_sd, table.obs_sd)


# ==================== CROSS VALIDATION ====================

def test_cv_compare_models_shares_one_baseline():
    d = make_dataset(n=120, seed=4)
    specs = {"fixed.a": parse_formula("S ~ g + h + Y"), "fixed.b": parse_formula("S ~ g + h + Y + c")}
    results = cv_compare_models(specs, d, K=3, seed=1, R=100, settings=SamplerSettings(warmup=100), attrs=["g"])
    assert set(results) == set(specs)
    first, second = results["fixed.a"], results["fixed.b"]
    assert [(r.key, r.y, r.n) for r in first] == [(r.key, r.y, r.n) for r in second]
    np.testing.assert_allclose([r.kde_ll for r in first], [r.kde_ll for r in second])
    assert all(np.isfinite(r.model_ll) for r in first + second)
    # the covariate explains part of the noise, so it wins out of fold overall
    assert best_overall(results) == "fixed.b"


def test_cv_compare_single_model():
    d = make_dataset(n=90, seed=6)
    results = cv_compare(parse_formula("S ~ g + Y + c"), d, K=3, seed=2, R=100,
                         settings=SamplerSettings(warmup=100), model_name="fixed.b", attrs=["g"])
    assert len(results) == 4
    assert {r.model for r in results} == {"fixed.b"}
    assert sum(r.n for r in results) == d.n
    assert {r.verdict for r in results} <= {MODEL_OK, FALLBACK}


@pytest.mark.slow
def test_fixed_model_falls_back_under_interactions_hetero():
    spec_path = os.path.join(os.path.dirname(MECHANISM_MANIFEST), "population_spec.json")
    population = generate_population(load_population_spec(spec_path), n_pop=20_000, seed=3)
    scored = population.with_scores(simulate_scores(population, ScoreMechanism.parse("interactions-hetero"), seed=1))
    d = subsample(scored, 3000, seed=2)
    formula = reference_models(DEMOGRAPHICS, d.schema.covariates)["fixed.b"]
    results = cv_compare(parse_formula(formula), d, K=5, seed=4, R=200, settings=SamplerSettings(warmup=200),
                         model_name="fixed.b", attrs=["gender", "race"])
    positives = [r for r in results if r.y == 1 and not math.isnan(r.kde_ll)]
    assert positives
    # the pooled noise scale overstates the spread of the positives
    assert any(r.verdict == FALLBACK for r in positives)
