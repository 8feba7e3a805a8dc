"""
Posterior predictive simulation and model-based metric (MBM) estimates
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from dataset import EvalDataset, SubpopKey
from errors import InsufficientClassError, StalenessError, UndefinedMetricError, tag_with_key
from formula import ModelSpec
from inference import PosteriorDraws, draw_moments, posterior_hash
from metrics import MetricEstimate, MetricKind, ScoreSample, estimate_or_missing, evaluate, subpop_keys

logger = logging.getLogger(__name__)

_CHUNK = 256


@dataclass(frozen=True)
class PredictiveSims:
    """sims[n, r] ~ N(mu_n(lambda_r), sigma_n(lambda_r)^2), rows aligned with dataset"""
    sims: np.ndarray
    dataset: EvalDataset
    spec_hash: str

    def __post_init__(self):
        sims = np.asarray(self.sims, dtype=float)
        if sims.ndim != 2 or sims.shape[0] != self.dataset.n:
            raise ValueError("simulations must be N x R and aligned with the dataset")
        if not np.all(np.isfinite(sims)):
            raise ValueError("simulated scores must be finite")
        sims = np.array(sims, copy=True)
        sims.setflags(write=False)
        object.__setattr__(self, "sims", sims)

    @property
    def N(self) -> int:
        return self.sims.shape[0]

    @property
    def R(self) -> int:
        return self.sims.shape[1]

    def column(self, r: int) -> EvalDataset:
        """Dataset whose scores are simulation column r"""
        return self.dataset.with_scores(self.sims[:, r])


def simulate_predictive(spec: ModelSpec, draws: PosteriorDraws, d: EvalDataset, seed: int,
                        records: Optional[EvalDataset] = None) -> PredictiveSims:
    """
    One simulated score per (record, draw). Covariates are held at their observed values.
    `records` (default d) are the rows to simulate; draws must have been fit on d.
    """
    if draws.spec_hash != posterior_hash(spec, d):
        raise StalenessError("posterior draws were fit to a different model or dataset; refit first")
    target = d if records is None else records
    rng = np.random.default_rng(seed)
    sims = np.empty((target.n, draws.R))
    for start in range(0, draws.R, _CHUNK):
        rows = slice(start, min(start + _CHUNK, draws.R))
        mu, sigma = draw_moments(spec, draws, target, rows)
        noise = rng.standard_normal(mu.shape)
        sims[:, rows] = (mu + sigma * noise).T
    return PredictiveSims(sims=sims, dataset=target, spec_hash=draws.spec_hash)


def mbm_estimate(sims: PredictiveSims, key: SubpopKey, m: MetricKind, pooling: str = "pooled") -> float:
    """
    pooled: every (n, r) with n in the subpopulation feeds one estimator
    per_draw: average of the per-column estimates (columns where the metric is undefined are skipped)
    """
    mask = sims.dataset.mask(key)
    block = sims.sims[mask]
    labels = sims.dataset.labels[mask]
    try:
        if pooling == "pooled":
            sample = ScoreSample(pos=block[labels == 1].ravel(), neg=block[labels == 0].ravel())
            return evaluate(sample, m)
        if pooling != "per_draw":
            raise ValueError(f"unknown pooling {pooling!r}")
        values = []
        first_error = None
        for r in range(block.shape[1]):
            try:
                values.append(evaluate(ScoreSample.from_arrays(block[:, r], labels), m))
            except UndefinedMetricError as e:
                first_error = first_error or e
        if not values:
            raise first_error
        return float(np.mean(values))
    except (InsufficientClassError, UndefinedMetricError) as e:
        raise tag_with_key(e, key)


def mbm_all(sims: PredictiveSims, attrs: Sequence[str], metrics: Sequence[MetricKind], model_name: str = "model",
            keys: Optional[Sequence[SubpopKey]] = None, pooling: str = "pooled") -> List[MetricEstimate]:
    """Points for every subpopulation x metric; failing cells carry an error instead of a value"""
    keys = list(keys) if keys is not None else subpop_keys(sims.dataset, attrs)
    estimates = []
    for key in keys:
        n = int(np.count_nonzero(sims.dataset.mask(key)))
        for metric in metrics:
            estimates.append(estimate_or_missing(
                lambda: mbm_estimate(sims, key, metric, pooling), key, metric, model_name, f"mbm:{model_name}", n
            ))
    missing = sum(e.missing for e in estimates)
    if missing:
        logger.info(f"{model_name}: {missing} of {len(estimates)} model-based estimates undefined")
    return estimates
