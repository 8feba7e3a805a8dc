"""
Semi-synthetic experiment generator

Population: demographic cells (gender x race x age_bin x bmi_bin) drawn by weight,
log-scale risk factors from per-cell Gaussians, binary risk factors from per-cell
probabilities. A pluggable risk function labels units (y = 1 iff risk >= cutoff) and
its log-odds is the risk score f_n some score mechanisms lean on.

Score mechanisms: none / simple / interactions, each homoscedastic or -hetero.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit, logit

from dataset import EvalDataset, Schema, SubpopKey
from errors import MBMError, PopulationSpecError
from metrics import MetricKind, ScoreSample, evaluate, subpop_keys, threshold_for_fpr

logger = logging.getLogger(__name__)

DEMOGRAPHICS = ("gender", "race", "age_bin", "bmi_bin")
REFERENCE_COVARIATES = ("ln.diabp", "ln.ppbp", "ln.tc", "ln.hdl")
MECHANISM_MANIFEST = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "mechanism_constants.json")
PULSE_PRESSURE = "ln.ppbp"
BLOCK_SIZE = 50_000

# Score mechanism constants; data/mechanism_constants.json mirrors them
MECHANISM_CONSTANTS = {
    "none": {"beta_y": [-3.5, -2.0], "sigma": 1.25},
    "simple": {"grid_halfwidth": 0.2, "beta_y": [-3.0, -2.5], "sigma": 0.5},
    "interactions": {"grid_halfwidth_squared": 0.2, "score_weight": 0.7, "mean_weight": 0.3, "sigma": 0.5},
    "hetero": {"base_fraction": 0.5},
}

STRUCTURES = ("none", "simple", "interactions")

# ==================== POPULATION SPEC ====================

@dataclass(frozen=True)
class PopulationCell:
    key: SubpopKey
    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    probabilities: np.ndarray


@dataclass(frozen=True)
class PopulationSpec:
    """Cells over the demographic attributes plus risk-factor names"""
    attributes: Tuple[Tuple[str, Tuple[str, ...]], ...]
    risk_factors: Tuple[str, ...]
    binary_factors: Tuple[str, ...]
    cells: Tuple[PopulationCell, ...]
    age_values: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        k, m = len(self.risk_factors), len(self.binary_factors)
        if not self.cells:
            raise PopulationSpecError("population spec has no cells")
        for cell in self.cells:
            label = cell.key.label()
            if not cell.weight > 0:
                raise PopulationSpecError(f"cell {label}: weight must be positive")
            if cell.mean.shape != (k,) or cell.covariance.shape != (k, k):
                raise PopulationSpecError(f"cell {label}: mean/covariance do not match {k} risk factors")
            if not np.allclose(cell.covariance, cell.covariance.T, atol=1e-12):
                raise PopulationSpecError(f"cell {label}: covariance is not symmetric")
            if k and np.linalg.eigvalsh(cell.covariance).min() < -1e-10:
                raise PopulationSpecError(f"cell {label}: covariance is not positive semidefinite")
            if cell.probabilities.shape != (m,) or np.any((cell.probabilities < 0) | (cell.probabilities > 1)):
                raise PopulationSpecError(f"cell {label}: probabilities must lie in [0, 1]")

    @property
    def schema(self) -> Schema:
        covariates = tuple(self.risk_factors)
        if {"ln.sysbp", "ln.diabp"} <= set(self.risk_factors):
            covariates += (PULSE_PRESSURE,)
        return Schema(attributes=self.attributes, covariates=covariates + tuple(self.binary_factors))

    @property
    def weights(self) -> np.ndarray:
        w = np.array([c.weight for c in self.cells], dtype=float)
        return w / w.sum()


def _vector(value, size: int, what: str) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    if array.shape != (size,):
        raise PopulationSpecError(f"{what} must have {size} entries")
    return array


def _expand_factorized(data: Dict, attributes, risk_factors, binary_factors) -> List[PopulationCell]:
    """Marginal weights multiply; mean shifts add; probability shifts add on the logit scale"""
    k, m = len(risk_factors), len(binary_factors)
    base = data["base"]
    base_mean = _vector(base["mean"], k, "base.mean")
    covariance = np.asarray(base["covariance"], dtype=float)
    base_logit = logit(np.clip(_vector(base["probabilities"], m, "base.probabilities"), 1e-12, 1 - 1e-12))
    shifts = data.get("shifts", {})
    marginals = {name: data["attributes"][name].get("weights") for name, _ in attributes}

    cells = []
    for levels in product(*[lv for _, lv in attributes]):
        weight = 1.0
        mean = base_mean.copy()
        log_odds = base_logit.copy()
        for (name, all_levels), level in zip(attributes, levels):
            marginal = marginals[name]
            if marginal is not None:
                if len(marginal) != len(all_levels):
                    raise PopulationSpecError(f"attributes.{name}.weights needs one weight per level")
                weight *= float(marginal[all_levels.index(level)])
            shift = shifts.get(name, {}).get(level, {})
            if "mean" in shift:
                mean = mean + _vector(shift["mean"], k, f"shifts.{name}.{level}.mean")
            if "logit" in shift:
                log_odds = log_odds + _vector(shift["logit"], m, f"shifts.{name}.{level}.logit")
        key = SubpopKey.of({name: level for (name, _), level in zip(attributes, levels)})
        cells.append(PopulationCell(key, weight, mean, covariance, expit(log_odds)))
    return cells


def load_population_spec(path: str) -> PopulationSpec:
    """
    JSON with "attributes" ({name: {"levels": [...], "weights": [...]}}), "risk_factors",
    "binary_factors", optional "age_values", and either "cells" (explicit) or "base" plus
    "shifts" (factorized).
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise PopulationSpecError(f"{path} is not valid JSON: {e}") from None

    try:
        attributes = tuple((name, tuple(spec["levels"])) for name, spec in data["attributes"].items())
        risk_factors = tuple(data["risk_factors"])
        binary_factors = tuple(data.get("binary_factors", ()))
    except (KeyError, TypeError) as e:
        raise PopulationSpecError(f"{path}: missing or malformed entry {e}") from None

    if "cells" in data:
        cells = []
        for entry in data["cells"]:
            cells.append(PopulationCell(
                key=SubpopKey.of(entry["key"]),
                weight=float(entry["weight"]),
                mean=_vector(entry["mean"], len(risk_factors), "cell mean"),
                covariance=np.asarray(entry["covariance"], dtype=float),
                probabilities=_vector(entry.get("probabilities", []), len(binary_factors), "cell probabilities"),
            ))
    elif "base" in data:
        cells = _expand_factorized(data, attributes, risk_factors, binary_factors)
    else:
        raise PopulationSpecError(f"{path} needs either 'cells' or 'base'")

    spec = PopulationSpec(
        attributes=attributes,
        risk_factors=risk_factors,
        binary_factors=binary_factors,
        cells=tuple(cells),
        age_values={k: float(v) for k, v in data.get("age_values", {}).items()},
    )
    logger.info(f"Loaded population spec {path}: {len(spec.cells)} cells, {len(risk_factors)} risk factors")
    return spec


# ==================== RISK FUNCTION ====================

RiskFn = Callable[[Mapping[str, np.ndarray], Mapping[str, np.ndarray]], np.ndarray]


def framingham_standin(attrs: Mapping[str, np.ndarray], covariates: Mapping[str, np.ndarray],
                       age_values: Optional[Mapping[str, float]] = None) -> np.ndarray:
    """
    Linear-logistic cardiovascular risk over the simulated risk factors:
    logit risk = -2.6 + 0.06 (age - 50) + 0.3 male + 1.8 (ln.sysbp - ln 125)
                 + 0.9 (ln.tc - ln 200) - 0.9 (ln.hdl - ln 50) + 0.55 diabetes + 0.4 htn_treatment
    """
    n = len(next(iter(covariates.values())))
    eta = np.full(n, -2.6)
    if "age_bin" in attrs and age_values:
        eta += 0.06 * (np.array([age_values.get(a, 50.0) for a in attrs["age_bin"]]) - 50.0)
    if "gender" in attrs:
        eta += 0.3 * (np.asarray(attrs["gender"]) == "male")
    terms = (("ln.sysbp", 1.8, math.log(125.0)), ("ln.tc", 0.9, math.log(200.0)), ("ln.hdl", -0.9, math.log(50.0)))
    for name, coef, center in terms:
        if name in covariates:
            eta += coef * (covariates[name] - center)
    if "diabetes" in covariates:
        eta += 0.55 * covariates["diabetes"]
    if "htn_treatment" in covariates:
        eta += 0.4 * covariates["htn_treatment"]
    return expit(eta)


# ==================== POPULATION ====================

@dataclass(frozen=True)
class Population:
    """Generated units: dataset without scores, risk and the risk score f_n = logit(risk)"""
    dataset: EvalDataset
    risk: np.ndarray
    frame_score: np.ndarray

    @property
    def n(self) -> int:
        return self.dataset.n

    def with_scores(self, scores) -> EvalDataset:
        return self.dataset.with_scores(scores)

    def save_csv(self, path: str, scores=None):
        """CSV readable by dataset.load_csv (attributes, covariates, y, optional s)"""
        d = self.dataset if scores is None else self.dataset.with_scores(scores)
        d.save_csv(path)


def _generate_block(spec: PopulationSpec, weights: np.ndarray, chol: List[np.ndarray], probs: np.ndarray,
                    n: int, seed: int, block: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0, block])
    cell_ids = rng.choice(len(spec.cells), size=n, p=weights)
    z = rng.standard_normal((n, len(spec.risk_factors)))
    uniforms = rng.random((n, len(spec.binary_factors)))
    continuous = np.empty_like(z)
    for c in np.unique(cell_ids):
        rows = cell_ids == c
        continuous[rows] = spec.cells[c].mean + z[rows] @ chol[c].T
    binary = (uniforms < probs[cell_ids]).astype(float)
    return cell_ids, continuous, binary


def _psd_root(covariance: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(covariance)
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def generate_population(spec: PopulationSpec, risk_fn: Optional[RiskFn] = None, cutoff: float = 0.10,
                        n_pop: int = 200_000, seed: int = 0, n_jobs: int = 1) -> Population:
    """Cells by weight, risk factors per cell, y = 1 iff risk >= cutoff; blocks use their own substreams"""
    if n_pop < 1:
        raise ValueError("n_pop must be at least 1")
    if risk_fn is None:
        def risk_fn(attrs, covs):
            return framingham_standin(attrs, covs, spec.age_values)

    weights = spec.weights
    chol = [_psd_root(c.covariance) for c in spec.cells]
    probs = np.vstack([c.probabilities for c in spec.cells]) if spec.binary_factors else np.zeros((len(spec.cells), 0))
    sizes = [min(BLOCK_SIZE, n_pop - start) for start in range(0, n_pop, BLOCK_SIZE)]
    blocks = Parallel(n_jobs=n_jobs)(
        delayed(_generate_block)(spec, weights, chol, probs, size, seed, b) for b, size in enumerate(sizes)
    )
    cell_ids = np.concatenate([b[0] for b in blocks])
    continuous = np.vstack([b[1] for b in blocks])
    binary = np.vstack([b[2] for b in blocks])

    schema = spec.schema
    cell_codes = np.array([[schema.level_code(name, cell.key.as_dict()[name]) for name in schema.attr_names]
                           for cell in spec.cells], dtype=np.int32)
    codes = cell_codes[cell_ids]

    covs = {name: continuous[:, j] for j, name in enumerate(spec.risk_factors)}
    if PULSE_PRESSURE in schema.covariates:
        # pulse pressure floored at 10 mmHg
        pulse = np.maximum(np.exp(covs["ln.sysbp"]) - np.exp(covs["ln.diabp"]), 10.0)
        covs[PULSE_PRESSURE] = np.log(pulse)
    covs.update({name: binary[:, j] for j, name in enumerate(spec.binary_factors)})
    attrs = {name: np.array(schema.levels(name), dtype=object)[codes[:, j]] for j, name in enumerate(schema.attr_names)}

    risk = np.asarray(risk_fn(attrs, covs), dtype=float).reshape(-1)
    if risk.shape != (n_pop,):
        raise PopulationSpecError("risk function must return one value per unit")
    labels = (risk >= cutoff).astype(np.int8)
    clipped = np.clip(risk, 1e-12, 1 - 1e-12)

    dataset = EvalDataset(
        schema=schema,
        codes=codes,
        covariates=np.column_stack([covs[name] for name in schema.covariates]),
        labels=labels,
    )
    logger.info(f"Generated population of {n_pop} units, prevalence {labels.mean():.3f} at cutoff {cutoff}")
    return Population(dataset=dataset, risk=risk, frame_score=logit(clipped))


# ==================== SCORE MECHANISMS ====================

@dataclass(frozen=True)
class ScoreMechanism:
    structure: str = "none"
    heteroscedastic: bool = False

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown score structure {self.structure!r} (expected one of {', '.join(STRUCTURES)})")

    @classmethod
    def parse(cls, regime: str) -> "ScoreMechanism":
        """'none', 'simple', 'interactions', optionally suffixed with '-hetero'"""
        regime = regime.strip()
        hetero = regime.endswith("-hetero")
        return cls(regime[: -len("-hetero")] if hetero else regime, hetero)

    @property
    def name(self) -> str:
        return self.structure + ("-hetero" if self.heteroscedastic else "")


def _grid(levels: int, halfwidth: float) -> np.ndarray:
    return np.linspace(-halfwidth, halfwidth, levels)


def score_moments(population: Population, mech: ScoreMechanism,
                  constants: Mapping[str, Mapping] = MECHANISM_CONSTANTS) -> Tuple[np.ndarray, np.ndarray]:
    """Per-unit mean mu_n and noise sd sigma_n; grids follow schema level order"""
    d = population.dataset
    schema = d.schema

    def codes(name):
        return d.codes[:, schema.attr_index(name)]

    def n_levels(name):
        return len(schema.levels(name))

    labels = d.labels.astype(np.int64)
    if mech.structure == "none":
        c = constants["none"]
        mu = np.asarray(c["beta_y"], dtype=float)[labels]
        sigma = float(c["sigma"])
    elif mech.structure == "simple":
        c = constants["simple"]
        mu = np.asarray(c["beta_y"], dtype=float)[labels]
        for name in DEMOGRAPHICS:
            mu = mu + _grid(n_levels(name), c["grid_halfwidth"])[codes(name)]
        sigma = float(c["sigma"])
    else:
        c = constants["interactions"]
        halfwidth = math.sqrt(c["grid_halfwidth_squared"])
        grid = {name: _grid(n_levels(name), halfwidth)[codes(name)] for name in DEMOGRAPHICS}
        f = population.frame_score
        mu = (grid["age_bin"] * grid["race"] + grid["gender"] * grid["bmi_bin"]
              + c["score_weight"] * f + c["mean_weight"] * f.mean())
        sigma = float(c["sigma"])

    if mech.heteroscedastic:
        # normalized over the realized population, so sigma_n depends on every unit
        fac = 1.0 / (1.0 + np.exp(mu))
        fac = fac / fac.max()
        sd = fac * sigma + constants["hetero"]["base_fraction"] * sigma
    else:
        sd = np.full(len(mu), sigma)
    return mu, sd


def simulate_scores(population: Population, mech: ScoreMechanism, seed: int) -> np.ndarray:
    mu, sd = score_moments(population, mech)
    eps = np.empty(len(mu))
    for b, start in enumerate(range(0, len(mu), BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, len(mu))
        eps[start:stop] = np.random.default_rng([seed, 1, b]).standard_normal(stop - start)
    return mu + sd * eps


def verify_constants(path: str, constants: Mapping[str, Mapping] = MECHANISM_CONSTANTS):
    """Raise if the constants manifest and the in-code mechanism constants disagree"""
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    drift = []
    for regime, values in constants.items():
        for name, value in values.items():
            recorded = manifest.get(regime, {}).get(name)
            if recorded is None or not np.allclose(np.asarray(recorded, dtype=float), np.asarray(value, dtype=float), rtol=0, atol=0):
                drift.append(f"{regime}.{name}: code {value!r} vs manifest {recorded!r}")
    if drift:
        raise PopulationSpecError("mechanism constants drifted:\n" + "\n".join(drift))
    return True


# ==================== GROUND TRUTH / SUBSAMPLES ====================

@dataclass(frozen=True)
class GroundTruth:
    """True per-subpopulation metrics on the full population; None where undefined"""
    threshold: Optional[float]
    values: Dict[Tuple[SubpopKey, str], Optional[float]]
    counts: Dict[SubpopKey, int]

    def get(self, key: SubpopKey, metric: str) -> Optional[float]:
        return self.values.get((key, metric))

    def to_dict(self) -> Dict:
        return {
            "threshold": self.threshold,
            "values": [{"key": k.label(), "metric": m, "value": v} for (k, m), v in self.values.items()],
            "counts": {k.label(): n for k, n in self.counts.items()},
        }


def ground_truth(population: EvalDataset, attrs: Sequence[str], metrics: Sequence[str],
                 fpr_target: float = 0.01, keys: Optional[Sequence[SubpopKey]] = None,
                 threshold: Optional[float] = None) -> GroundTruth:
    """tau* = threshold_for_fpr on the whole population unless given; metrics per cell (and ALL)"""
    if threshold is None:
        threshold = threshold_for_fpr(ScoreSample.from_dataset(population), fpr_target)
    keys = list(keys) if keys is not None else subpop_keys(population, attrs)
    kinds = [MetricKind.parse(m).at(threshold) for m in metrics]
    values: Dict[Tuple[SubpopKey, str], Optional[float]] = {}
    counts: Dict[SubpopKey, int] = {}
    scores = population.require_scores()
    for key in keys:
        mask = population.mask(key)
        counts[key] = int(mask.sum())
        sample = ScoreSample.from_arrays(scores[mask], population.labels[mask])
        for kind in kinds:
            try:
                values[(key, kind.name)] = evaluate(sample, kind)
            except MBMError:
                values[(key, kind.name)] = None
    return GroundTruth(threshold=threshold, values=values, counts=counts)


def subsample(population: EvalDataset, n: int, seed: int) -> EvalDataset:
    """n units uniformly without replacement"""
    if not 1 <= n <= population.n:
        raise ValueError(f"subsample size must lie in [1, {population.n}]")
    picks = np.random.default_rng([seed, 2]).permutation(population.n)[:n]
    return population.take(picks)
