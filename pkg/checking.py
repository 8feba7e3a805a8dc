"""
Evaluation-model validation: cross-validated log-likelihoods against a per-cell
KDE baseline, the fallback decision, best.ll selection and a simple predictive check
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import iqr
from sklearn.model_selection import StratifiedKFold
from sklearn.neighbors import KernelDensity

from config import SamplerSettings, stream_seed
from dataset import EvalDataset, SubpopKey, cell_index
from errors import AlignmentError, DataError
from formula import ModelSpec
from inference import fit_posterior, posterior_predictive_logpdf
from metrics import MetricEstimate
from predictive import PredictiveSims

logger = logging.getLogger(__name__)

MODEL_OK = "model_ok"
FALLBACK = "fallback"
KDE = "kde"
RELATIVE_NLL_COLUMNS = ["key", "y", "n", "model", "nll_diff"]

# ==================== KDE BASELINE ====================

def kde_bandwidth(train) -> float:
    """Silverman: 0.9 min(sd, IQR/1.34) n^(-1/5), floored at 1e-3 sd (1e-3 when sd = 0)"""
    train = np.asarray(train, dtype=float).reshape(-1)
    n = len(train)
    sd = float(train.std(ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        return 1e-3
    spread = float(iqr(train)) / 1.34
    spread = min(sd, spread) if spread > 0 else sd
    return max(0.9 * spread * n ** (-0.2), 1e-3 * sd)


def kde_logpdf(train, query):
    """Gaussian-kernel log density; scalar in, scalar out"""
    train = np.asarray(train, dtype=float).reshape(-1)
    if len(train) < 2:
        raise DataError("a KDE baseline needs at least two training scores")
    scalar = np.ndim(query) == 0
    points = np.asarray(query, dtype=float).reshape(-1, 1)
    kde = KernelDensity(kernel="gaussian", bandwidth=kde_bandwidth(train)).fit(train[:, None])
    values = kde.score_samples(points)
    return float(values[0]) if scalar else values


# ==================== CROSS VALIDATION ====================

@dataclass(frozen=True)
class CellCheckResult:
    """Out-of-fold comparison for one (subpopulation cell, class)"""
    key: SubpopKey
    y: int
    model: str
    n: int
    model_ll: float
    kde_ll: float
    diff_se: float
    verdict: str
    n_paired: Optional[int] = None

    @property
    def paired(self) -> int:
        """Records with both a model and a KDE value"""
        return self.n if self.n_paired is None else self.n_paired

    @property
    def scored(self) -> int:
        """Records behind model_ll: the paired ones, or every member when there are none"""
        return self.paired if self.paired > 0 else self.n

    def to_dict(self) -> Dict:
        def clean(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

        return {
            "key": self.key.label(),
            "y": self.y,
            "model": self.model,
            "n": self.n,
            "n_paired": self.paired,
            "model_ll": clean(self.model_ll),
            "kde_ll": clean(self.kde_ll),
            "diff_se": clean(self.diff_se),
            "verdict": self.verdict,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CellCheckResult":
        nan = float("nan")
        return cls(
            key=SubpopKey.parse(data["key"]),
            y=int(data["y"]),
            model=data["model"],
            n=int(data["n"]),
            model_ll=nan if data.get("model_ll") is None else float(data["model_ll"]),
            kde_ll=nan if data.get("kde_ll") is None else float(data["kde_ll"]),
            diff_se=nan if data.get("diff_se") is None else float(data["diff_se"]),
            verdict=data["verdict"],
            n_paired=int(data.get("n_paired", data["n"])),
        )


def stratified_folds(d: EvalDataset, K: int, seed: int, attrs: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Fold id per record. Strata are (cell x class) when that stratum has >= K members,
    otherwise the record's class; class leftovers smaller than K share one stratum.
    """
    if K < 2:
        raise ValueError("cross validation needs K >= 2 folds")
    if d.n < K:
        raise DataError(f"cannot split {d.n} records into {K} folds")
    attrs = list(d.schema.attr_names if attrs is None else attrs)
    cells, _ = cell_index(d, attrs)
    labels = d.labels.astype(np.int64)
    strata = cells * 2 + labels
    values, counts = np.unique(strata, return_counts=True)
    small = np.isin(strata, values[counts < K])
    strata = np.where(small, -1 - labels, strata)
    values, counts = np.unique(strata, return_counts=True)
    strata = np.where(np.isin(strata, values[counts < K]), -3, strata)
    leftovers = strata == -3
    if 0 < leftovers.sum() < K and (~leftovers).any():
        others, other_counts = np.unique(strata[~leftovers], return_counts=True)
        strata = np.where(leftovers, others[np.argmax(other_counts)], strata)

    folds = np.empty(d.n, dtype=np.int64)
    splitter = StratifiedKFold(n_splits=K, shuffle=True, random_state=seed % (2 ** 32))
    for fold, (_, test_idx) in enumerate(splitter.split(np.zeros(d.n), strata)):
        folds[test_idx] = fold
    return folds


def kde_heldout(d: EvalDataset, folds: np.ndarray, attrs: Optional[Sequence[str]] = None) -> np.ndarray:
    """Out-of-fold KDE log density per record from its own (cell, class) training scores; NaN if < 2"""
    attrs = list(d.schema.attr_names if attrs is None else attrs)
    cells, _ = cell_index(d, attrs)
    scores = d.require_scores()
    out = np.full(d.n, np.nan)
    for fold in np.unique(folds):
        test = folds == fold
        for cell, y in set(zip(cells[test].tolist(), d.labels[test].tolist())):
            same = (cells == cell) & (d.labels == y)
            train = scores[same & ~test]
            query = same & test
            if len(train) >= 2:
                out[query] = kde_logpdf(train, scores[query])
    return out


def _fold_logpdf(spec: ModelSpec, d: EvalDataset, folds: np.ndarray, fold: int, R: int, seed: int,
                 settings: SamplerSettings) -> Tuple[np.ndarray, np.ndarray]:
    test_idx = np.flatnonzero(folds == fold)
    train = d.take(np.flatnonzero(folds != fold))
    draws, _ = fit_posterior(spec, train, R, seed, settings=settings)
    return test_idx, posterior_predictive_logpdf(spec, draws, d.take(test_idx))


def model_heldout(spec: ModelSpec, d: EvalDataset, folds: np.ndarray, R: int, seed: int,
                  settings: Optional[SamplerSettings] = None, n_jobs: int = 1) -> np.ndarray:
    """Out-of-fold posterior predictive log density per record (each record scored once)"""
    settings = settings or SamplerSettings()
    fold_ids = [int(f) for f in np.unique(folds)]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_fold_logpdf)(spec, d, folds, fold, R, stream_seed(seed, "cv", fold), settings)
        for fold in fold_ids
    )
    out = np.full(d.n, np.nan)
    for test_idx, values in results:
        out[test_idx] = values
    return out


def summarize_cells(d: EvalDataset, model_lp: np.ndarray, kde_lp: np.ndarray, model_name: str,
                    margin: float = 1.0, attrs: Optional[Sequence[str]] = None) -> List[CellCheckResult]:
    """
    Per (cell, class): mean log densities over records that have a KDE value, and the verdict
    fallback iff mean(kde - model) > margin * SE of the paired differences (needs >= 2 pairs)
    """
    attrs = list(d.schema.attr_names if attrs is None else attrs)
    cells, keys = cell_index(d, attrs)
    results = []
    for cell, key in enumerate(keys):
        for y in (0, 1):
            members = (cells == cell) & (d.labels == y)
            n = int(members.sum())
            if n == 0:
                continue
            paired = members & np.isfinite(kde_lp)
            m = int(paired.sum())
            if m == 0:
                results.append(CellCheckResult(key, y, model_name, n, float(model_lp[members].mean()),
                                               float("nan"), float("nan"), MODEL_OK, n_paired=0))
                continue
            diffs = kde_lp[paired] - model_lp[paired]
            se = float(diffs.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
            fallback = m > 1 and float(diffs.mean()) > margin * se
            results.append(CellCheckResult(
                key, y, model_name, n,
                float(model_lp[paired].mean()), float(kde_lp[paired].mean()), se,
                FALLBACK if fallback else MODEL_OK, n_paired=m,
            ))
    return results


def cv_compare(spec: ModelSpec, d: EvalDataset, K: int, seed: int, margin: float = 1.0, R: int = 1000,
               settings: Optional[SamplerSettings] = None, model_name: str = "model",
               attrs: Optional[Sequence[str]] = None, n_jobs: int = 1) -> List[CellCheckResult]:
    folds = stratified_folds(d, K, seed, attrs)
    kde_lp = kde_heldout(d, folds, attrs)
    model_lp = model_heldout(spec, d, folds, R, seed, settings, n_jobs)
    results = summarize_cells(d, model_lp, kde_lp, model_name, margin, attrs)
    n_fallback = sum(r.verdict == FALLBACK for r in results)
    logger.info(f"CV check {model_name}: {n_fallback} of {len(results)} (cell, class) pairs fall back to the KDE")
    return results


def cv_compare_models(specs: Dict[str, ModelSpec], d: EvalDataset, K: int, seed: int, margin: float = 1.0,
                      R: int = 1000, settings: Optional[SamplerSettings] = None,
                      attrs: Optional[Sequence[str]] = None, n_jobs: int = 1) -> Dict[str, List[CellCheckResult]]:
    """All models share one fold assignment and one KDE baseline"""
    folds = stratified_folds(d, K, seed, attrs)
    kde_lp = kde_heldout(d, folds, attrs)
    results = {}
    for name, spec in specs.items():
        model_lp = model_heldout(spec, d, folds, R, seed, settings, n_jobs)
        results[name] = summarize_cells(d, model_lp, kde_lp, name, margin, attrs)
        n_fallback = sum(r.verdict == FALLBACK for r in results[name])
        logger.info(f"CV check {name}: {n_fallback} of {len(results[name])} (cell, class) pairs fall back to the KDE")
    return results


# ==================== MERGING ====================

def fallback_keys(checks: Sequence[CellCheckResult]) -> set:
    """Cells where either class falls back"""
    return {c.key for c in checks if c.verdict == FALLBACK}


def _aligned(estimates: Sequence[MetricEstimate], empirical: Sequence[MetricEstimate]) -> Dict:
    by_ident = {e.ident: e for e in empirical}
    if set(by_ident) != {e.ident for e in estimates} or len(by_ident) != len(empirical):
        raise AlignmentError("model and empirical estimates do not cover the same (key, metric) pairs")
    return by_ident


def _as_fallback(model: MetricEstimate, empirical: MetricEstimate, tag: str) -> MetricEstimate:
    return MetricEstimate(
        key=model.key,
        metric=model.metric,
        point=empirical.point,
        method=model.method,
        provenance=f"fallback:{tag}",
        n=empirical.n,
        replicates=None if empirical.replicates is None else empirical.replicates.copy(),
        intervals=dict(empirical.intervals),
        error=empirical.error,
    )


def apply_fallback(estimates: Sequence[MetricEstimate], checks: Sequence[CellCheckResult],
                   empirical: Sequence[MetricEstimate]) -> List[MetricEstimate]:
    """Cells whose check says fallback take the empirical estimate (point, replicates, intervals)"""
    by_ident = _aligned(estimates, empirical)
    flagged = fallback_keys(checks)
    merged = []
    for estimate in estimates:
        if estimate.key in flagged:
            merged.append(_as_fallback(estimate, by_ident[estimate.ident], KDE))
        else:
            merged.append(estimate)
    return merged


def select_best(results: Dict[str, Sequence[CellCheckResult]]) -> Dict[SubpopKey, str]:
    """
    Per cell, the candidate with the highest out-of-fold log-likelihood summed over
    both classes: one of the models, or 'kde' when the baseline wins. Sums run over the
    paired records (every member for a class without any KDE value), so all candidates
    are scored on the same records. The KDE only competes where every record of the
    cell has a baseline value.
    """
    totals: Dict[SubpopKey, Dict[str, float]] = {}
    kde_ok: Dict[SubpopKey, bool] = {}
    first = next(iter(results), None)
    for name, checks in results.items():
        for c in checks:
            cell = totals.setdefault(c.key, {})
            cell[name] = cell.get(name, 0.0) + c.scored * c.model_ll
            complete = c.paired == c.n and not math.isnan(c.kde_ll)
            kde_ok[c.key] = kde_ok.get(c.key, True) and complete
            if name == first and complete:
                cell[KDE] = cell.get(KDE, 0.0) + c.paired * c.kde_ll
    choice = {}
    for key, cell in totals.items():
        candidates = {k: v for k, v in cell.items() if k != KDE or kde_ok[key]}
        choice[key] = max(candidates, key=lambda k: (candidates[k], k != KDE))
    return choice


def best_overall(results: Dict[str, Sequence[CellCheckResult]]) -> str:
    """Model with the highest total out-of-fold log-likelihood over all cells"""
    return max(results, key=lambda name: sum(c.scored * c.model_ll for c in results[name]))


def merge_best(model_estimates: Dict[str, Sequence[MetricEstimate]], empirical: Sequence[MetricEstimate],
               choice: Dict[SubpopKey, str], default_model: str, method: str = "best.ll") -> List[MetricEstimate]:
    """
    Assemble best.ll rows: each cell takes the estimate of its chosen model, or the
    empirical one when the KDE won. Keys that are not cells (ALL) use default_model.
    """
    by_model = {}
    for name, estimates in model_estimates.items():
        _aligned(estimates, empirical)
        by_model[name] = {e.ident: e for e in estimates}
    merged = []
    for e in empirical:
        chosen = choice.get(e.key, default_model)
        if chosen == KDE:
            row = _as_fallback(e, e, KDE)
        else:
            source = by_model[chosen][e.ident]
            row = MetricEstimate(
                key=source.key, metric=source.metric, point=source.point, provenance=source.provenance,
                n=source.n, intervals=dict(source.intervals), error=source.error,
                replicates=None if source.replicates is None else source.replicates.copy(),
            )
        row.method = method
        merged.append(row)
    return merged


# ==================== REPORT TABLES ====================

def relative_nll_table(results: Dict[str, Sequence[CellCheckResult]]) -> pd.DataFrame:
    """
    Long table (key, y, n, model, nll_diff): the mean per-record NLL of each model minus
    that of the KDE over the paired records. KDE rows are 0; negative means the model
    fits better. NaN where the cell has no KDE values.
    """
    rows = []
    for name, checks in results.items():
        for c in checks:
            rows.append({"key": c.key.label(), "y": c.y, "n": c.n, "model": name, "nll_diff": c.kde_ll - c.model_ll})
    for c in next(iter(results.values()), []):
        rows.append({"key": c.key.label(), "y": c.y, "n": c.n, "model": KDE,
                     "nll_diff": 0.0 if not math.isnan(c.kde_ll) else float("nan")})
    return pd.DataFrame(rows, columns=RELATIVE_NLL_COLUMNS)


def ppc_summary(sims: PredictiveSims, attrs: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Per (cell, class): observed mean/sd of scores next to the mean/sd of the simulations"""
    d = sims.dataset
    attrs = list(d.schema.attr_names if attrs is None else attrs)
    cells, keys = cell_index(d, attrs)
    observed = d.require_scores()
    rows = []
    for cell, key in enumerate(keys):
        for y in (0, 1):
            members = (cells == cell) & (d.labels == y)
            if not members.any():
                continue
            block = sims.sims[members]
            rows.append({
                "key": key.label(), "y": y, "n": int(members.sum()),
                "obs_mean": float(observed[members].mean()), "obs_sd": float(observed[members].std()),
                "sim_mean": float(block.mean()), "sim_sd": float(block.std()),
            })
    return pd.DataFrame(rows, columns=["key", "y", "n", "obs_mean", "obs_sd", "sim_mean", "sim_sd"])
