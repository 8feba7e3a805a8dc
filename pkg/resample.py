"""
Bootstrap confidence intervals

- empirical_bootstrap: resample rows, recompute the sample-based estimators
- mbm_bootstrap exact: refit the evaluation model on every bootstrap dataset D_b
- mbm_bootstrap importance_weighted: reuse the full-data draws, reweighted by the
  likelihood ratio p(D_b | lambda) / p(D | lambda), truncated at sqrt(R) times the mean
  weight, self-normalized and resampled

Both model modes draw D_b from the same (seed, b) stream, so their replicates pair up.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config import BOOTSTRAP_MODES, SamplerSettings, stream_seed
from dataset import EvalDataset, SubpopKey, subset
from errors import DataError, InsufficientClassError, MBMError, UndefinedMetricError
from formula import ModelSpec
from inference import PosteriorDraws, fit_posterior
from metrics import MetricEstimate, MetricKind, ScoreSample, empirical_all, evaluate
from predictive import mbm_all, mbm_estimate, simulate_predictive

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapPlan:
    B: int = 100
    mode: str = "importance_weighted"
    seed: int = 0
    levels: Tuple[float, ...] = (0.5, 0.95)
    r_out: int = 1000
    exact_draws: int = 1000
    sampler: str = "auto"
    settings: SamplerSettings = field(default_factory=SamplerSettings)
    n_jobs: int = 1

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("a bootstrap plan needs B >= 1")
        if self.mode not in BOOTSTRAP_MODES:
            raise ValueError(f"bootstrap mode must be one of {', '.join(BOOTSTRAP_MODES)}")
        if any(not 0 < level < 1 for level in self.levels):
            raise ValueError("interval levels must lie in (0, 1)")
        object.__setattr__(self, "levels", tuple(self.levels))


@dataclass(frozen=True)
class WeightMatrix:
    """
    log_raw: B x R log w~ (the raw weights up to a per-row constant)
    truncated_normalized: B x R, rows sum to 1
    ess: 1 / sum_r w^2 per row
    """
    log_raw: np.ndarray
    truncated_normalized: np.ndarray
    ess: np.ndarray


# ==================== RESAMPLING ====================

def bootstrap_indices(n: int, seed: int, b: int) -> np.ndarray:
    if n < 1:
        raise DataError("cannot bootstrap an empty dataset")
    return np.random.default_rng([seed, b]).integers(0, n, size=n)


def bootstrap_counts(n: int, seed: int, b: int) -> np.ndarray:
    """Multiplicity c_n of every original row in D_b (sums to n)"""
    return np.bincount(bootstrap_indices(n, seed, b), minlength=n)


def bootstrap_dataset(d: EvalDataset, seed: int, b: int) -> EvalDataset:
    return d.take(bootstrap_indices(d.n, seed, b))


# ==================== IMPORTANCE WEIGHTS ====================

def truncate_and_normalize(log_w) -> np.ndarray:
    """min(w, sqrt(R) mean(w)) then divide by the sum; exponentiated after max-subtraction"""
    log_w = np.asarray(log_w, dtype=float)
    if np.any(np.isnan(log_w)):
        raise DataError("log weights contain NaN")
    w = np.exp(log_w - log_w.max())
    w = np.minimum(w, math.sqrt(len(w)) * w.mean())
    return w / w.sum()


def effective_sample_size(weights) -> float:
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(weights ** 2))


def importance_weights(draws: PosteriorDraws, counts) -> Tuple[np.ndarray, np.ndarray, float]:
    """(log w~, truncated normalized w, ess) for one bootstrap multiplicity vector"""
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (draws.loglik_cache.shape[1],):
        raise ValueError("counts must have one entry per record of the fitted dataset")
    if not np.isclose(counts.sum(), len(counts)):
        raise ValueError("bootstrap counts must sum to N")
    log_raw = draws.loglik_cache @ (counts - 1.0)
    weights = truncate_and_normalize(log_raw)
    return log_raw, weights, effective_sample_size(weights)


def importance_weight_matrix(draws: PosteriorDraws, seed: int, B: int) -> WeightMatrix:
    n = draws.loglik_cache.shape[1]
    rows = [importance_weights(draws, bootstrap_counts(n, seed, b)) for b in range(B)]
    return WeightMatrix(
        log_raw=np.vstack([r[0] for r in rows]),
        truncated_normalized=np.vstack([r[1] for r in rows]),
        ess=np.array([r[2] for r in rows]),
    )


def resample_posterior(draws: PosteriorDraws, weights, r_out: int, seed: int) -> PosteriorDraws:
    """r_out categorical draws from the posterior sample, with replacement"""
    weights = np.asarray(weights, dtype=float)
    picks = np.random.default_rng(seed).choice(draws.R, size=r_out, replace=True, p=weights / weights.sum())
    return draws.take(picks)


# ==================== INTERVALS ====================

def percentile_interval(replicates, level: float) -> Tuple[float, float]:
    """Equal-tailed interval over the non-missing replicates"""
    values = np.asarray(replicates, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) == 0:
        return float("nan"), float("nan")
    lo, hi = np.quantile(values, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    return float(lo), float(hi)


def attach_replicates(points: Sequence[MetricEstimate], replicates: np.ndarray, levels: Sequence[float]) -> List[MetricEstimate]:
    """replicates is B x len(points), column j belonging to points[j]"""
    out = []
    for j, point in enumerate(points):
        column = np.asarray(replicates[:, j], dtype=float)
        out.append(MetricEstimate(
            key=point.key, metric=point.metric, point=point.point, method=point.method,
            provenance=point.provenance, n=point.n, replicates=column,
            intervals={level: percentile_interval(column, level) for level in levels},
            error=point.error,
        ))
    return out


def replicates_frame(estimates: Sequence[MetricEstimate]) -> pd.DataFrame:
    """Rows = b, columns = method|key|metric"""
    columns = {}
    for e in estimates:
        if e.replicates is not None:
            columns[f"{e.method}|{e.key.label()}|{e.metric.name}"] = e.replicates
    frame = pd.DataFrame(columns)
    frame.index.name = "b"
    return frame


# ==================== REPLICATES ====================

def _safe(compute) -> float:
    try:
        return float(compute())
    except (InsufficientClassError, UndefinedMetricError):
        return float("nan")


def _empirical_replicate(d: EvalDataset, plan: BootstrapPlan, b: int,
                         targets: Sequence[Tuple[SubpopKey, MetricKind]]) -> np.ndarray:
    boot = bootstrap_dataset(d, plan.seed, b)
    values = np.empty(len(targets))
    samples = {}
    for j, (key, metric) in enumerate(targets):
        if key not in samples:
            samples[key] = ScoreSample.from_dataset(subset(boot, key))
        values[j] = _safe(lambda: evaluate(samples[key], metric))
    return values


def mbm_replicate(spec: ModelSpec, draws: PosteriorDraws, d: EvalDataset, indices: np.ndarray, plan: BootstrapPlan,
                  b: int, targets: Sequence[Tuple[SubpopKey, MetricKind]]) -> Tuple[np.ndarray, float]:
    """
    Metric values on one bootstrap dataset D = d[indices] (and the ess in importance mode).
    A refit or reweighting that fails leaves the whole row NaN with NaN ess.
    """
    if plan.mode not in ("exact", "importance_weighted"):
        raise ValueError(f"model bootstrap mode must be exact or importance_weighted, got {plan.mode!r}")
    try:
        sims, ess = _replicate_sims(spec, draws, d, indices, plan, b)
    except (MBMError, np.linalg.LinAlgError) as e:
        logger.warning(f"{plan.mode} bootstrap replicate {b} failed, recorded as missing: {type(e).__name__}: {e}")
        return np.full(len(targets), np.nan), float("nan")
    values = np.array([_safe(lambda: mbm_estimate(sims, key, metric)) for key, metric in targets])
    return values, ess


def _replicate_sims(spec: ModelSpec, draws: PosteriorDraws, d: EvalDataset, indices: np.ndarray,
                    plan: BootstrapPlan, b: int):
    boot = d.take(indices)
    if plan.mode == "exact":
        draws_b, _ = fit_posterior(spec, boot, plan.exact_draws, stream_seed(plan.seed, "refit", b),
                                   plan.sampler, plan.settings)
        sims = simulate_predictive(spec, draws_b, boot, stream_seed(plan.seed, "sims", b))
        ess = float(draws_b.R)
    elif plan.mode == "importance_weighted":
        counts = np.bincount(indices, minlength=d.n)
        _, weights, ess = importance_weights(draws, counts)
        resampled = resample_posterior(draws, weights, plan.r_out, stream_seed(plan.seed, "categorical", b))
        sims = simulate_predictive(spec, resampled, d, stream_seed(plan.seed, "sims", b), records=boot)
    return sims, ess


@dataclass
class BootstrapOutcome:
    estimates: List[MetricEstimate]
    ess: np.ndarray
    low_ess: bool = False


def run_mbm_bootstrap(spec: ModelSpec, draws: PosteriorDraws, d: EvalDataset, plan: BootstrapPlan,
                      points: Sequence[MetricEstimate]) -> BootstrapOutcome:
    """
    Replicates for every (key, metric) in points; the reported point stays the full-data
    MBM. Undefined replicates are NaN and excluded from the intervals.
    """
    targets = [(p.key, p.metric) for p in points]
    results = Parallel(n_jobs=plan.n_jobs)(
        delayed(mbm_replicate)(spec, draws, d, bootstrap_indices(d.n, plan.seed, b), plan, b, targets)
        for b in range(plan.B)
    )
    replicates = np.vstack([r[0] for r in results]) if results else np.zeros((0, len(targets)))
    ess = np.array([r[1] for r in results])

    failed = int(np.isnan(ess).sum())
    low_ess = False
    if plan.mode == "importance_weighted" and failed < len(ess):
        median_ess = float(np.nanmedian(ess))
        if median_ess < draws.R / 10:
            low_ess = True
            logger.warning(
                f"Importance weights are degenerate: median ESS {median_ess:.1f} < R/10 = {draws.R / 10:.1f}; "
                f"consider the exact bootstrap"
            )
    logger.info(f"{plan.mode} bootstrap: {plan.B} replicates ({failed} failed), "
                f"{int(np.isnan(replicates).sum())} undefined values")
    return BootstrapOutcome(attach_replicates(points, replicates, plan.levels), ess, low_ess)


def mbm_bootstrap(spec: ModelSpec, draws: PosteriorDraws, d: EvalDataset, plan: BootstrapPlan,
                  keys: Sequence[SubpopKey], metrics: Sequence[MetricKind], model_name: str = "model",
                  points: Optional[Sequence[MetricEstimate]] = None) -> List[MetricEstimate]:
    """MBM replicates and intervals; points default to the full-data MBM for keys x metrics"""
    if points is None:
        sims = simulate_predictive(spec, draws, d, stream_seed(plan.seed, "point"))
        points = mbm_all(sims, (), metrics, model_name, keys=keys)
    return run_mbm_bootstrap(spec, draws, d, plan, points).estimates


def empirical_bootstrap(d: EvalDataset, plan: BootstrapPlan, keys: Sequence[SubpopKey],
                        metrics: Sequence[MetricKind], points: Optional[Sequence[MetricEstimate]] = None) -> List[MetricEstimate]:
    if points is None:
        points = empirical_all(d, keys, metrics)
    targets = [(p.key, p.metric) for p in points]
    results = Parallel(n_jobs=plan.n_jobs)(
        delayed(_empirical_replicate)(d, plan, b, targets) for b in range(plan.B)
    )
    replicates = np.vstack(results) if results else np.zeros((0, len(targets)))
    return attach_replicates(points, replicates, plan.levels)
