#!/usr/bin/env python3
"""
Command-line entry point
Empirical estimates, evaluation-model fits, model-based metrics, CV checks with KDE
fallback and bootstrap intervals, plus the semi-synthetic experiment harness.

Subcommands: simulate, estimate, check, bootstrap, run, experiment, report
"""

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from functools import wraps
from importlib import metadata
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from checking import (
    CellCheckResult,
    FALLBACK,
    RELATIVE_NLL_COLUMNS,
    apply_fallback,
    best_overall,
    cv_compare_models,
    merge_best,
    ppc_summary,
    relative_nll_table,
    select_best,
)
from config import Config, RunConfig, load_run_config, stream_seed
from database import init_db, load_draws, load_json, save_draws, save_json, finish_run, start_run
from dataset import EvalDataset, load_csv, load_schema_config
from errors import (
    CSVParseError,
    ConfigError,
    DataError,
    FormulaSyntaxError,
    MBMError,
    PopulationSpecError,
    RecordValidationError,
    SchemaError,
)
from formula import ModelSpec, parse_formula, reference_models
from inference import PosteriorDraws, SamplerDiagnostics, fit_posterior, posterior_hash
from messages import get_text
from metrics import MetricEstimate, MetricKind, empirical_all, resolve_thresholds, subpop_keys
from predictive import mbm_all, simulate_predictive
from resample import BootstrapPlan, empirical_bootstrap, replicates_frame, run_mbm_bootstrap
from synth import (
    MECHANISM_MANIFEST,
    REFERENCE_COVARIATES,
    GroundTruth,
    Population,
    ScoreMechanism,
    generate_population,
    ground_truth,
    load_population_spec,
    simulate_scores,
    subsample,
    verify_constants,
)

logger = logging.getLogger(__name__)

EMPIRICAL = "empirical"
BEST_LL = "best.ll"

STAGE_FIT = "fit"
STAGE_MBM = "mbm"
STAGE_CV = "cv"
STAGE_BOOTSTRAP = "bootstrap"
ALL_STAGES = (STAGE_FIT, STAGE_MBM, STAGE_CV, STAGE_BOOTSTRAP)

ESTIMATE_COLUMNS = ["key", "metric", "threshold", "method", "provenance", "n", "point"]
CHECK_COLUMNS = ["key", "y", "model", "n", "n_paired", "model_ll", "kde_ll", "diff_se", "verdict"]
FOREST_COLUMNS = ["key", "method", "metric", "point", "lo95", "hi95", "truth"]
PPC_COLUMNS = ["model", "key", "y", "n", "obs_mean", "obs_sd", "sim_mean", "sim_sd"]
SIZE_BINS = [0, 100, 500, np.inf]
SIZE_BIN_LABELS = ["(0,100]", "(100,500]", ">500"]
VERSIONED_PACKAGES = ("numpy", "scipy", "pandas", "scikit-learn", "jax", "numpyro", "joblib")

# ==================== LOGGING ====================

def setup_logging():
    handlers = [logging.StreamHandler()]
    if Config.LOG_FILE:
        handlers.append(logging.FileHandler(Config.LOG_FILE))
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        handlers=handlers,
        force=True,
    )
    # jax is chatty about platform discovery
    logging.getLogger("jax").setLevel(logging.WARNING)

# ==================== REPORT ====================

def _interval_column(prefix: str, level: float) -> str:
    return f"{prefix}{level * 100:g}"


def _clean(value):
    """Non-finite floats -> None and numpy scalars -> Python, recursively, for strict JSON"""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


@dataclass
class Report:
    """Everything one pipeline run produced; truth is keyed 'key|metric'"""
    estimates: List[MetricEstimate] = field(default_factory=list)
    checks: Dict[str, List[CellCheckResult]] = field(default_factory=dict)
    diagnostics: Dict[str, Dict] = field(default_factory=dict)
    ppc: List[Dict] = field(default_factory=list)
    truth: Dict[str, Optional[float]] = field(default_factory=dict)
    manifest: Dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @property
    def levels(self) -> List[float]:
        return [float(x) for x in self.manifest.get("levels", [])]

    def truth_of(self, estimate: MetricEstimate) -> Optional[float]:
        return self.truth.get(f"{estimate.key.label()}|{estimate.metric.name}")

    def to_dict(self) -> Dict:
        return _clean({
            "manifest": self.manifest,
            "estimates": [e.to_dict() for e in self.estimates],
            "checks": {name: [c.to_dict() for c in checks] for name, checks in self.checks.items()},
            "diagnostics": self.diagnostics,
            "ppc": self.ppc,
            "truth": self.truth,
            "warnings": self.warnings,
        })

    @classmethod
    def from_dict(cls, data: Dict) -> "Report":
        estimates = []
        for row in data.get("estimates", []):
            estimate = MetricEstimate.from_dict(row)
            estimate.intervals = {
                level: (float("nan") if lo is None else lo, float("nan") if hi is None else hi)
                for level, (lo, hi) in estimate.intervals.items()
            }
            estimates.append(estimate)
        return cls(
            estimates=estimates,
            checks={name: [CellCheckResult.from_dict(c) for c in checks]
                    for name, checks in data.get("checks", {}).items()},
            diagnostics=dict(data.get("diagnostics", {})),
            ppc=list(data.get("ppc", [])),
            truth=dict(data.get("truth", {})),
            manifest=dict(data.get("manifest", {})),
            warnings=list(data.get("warnings", [])),
        )


def estimates_frame(estimates: Sequence[MetricEstimate], levels: Sequence[float]) -> pd.DataFrame:
    """One row per (key, metric, method); interval columns lo<pct>/hi<pct> per level"""
    levels = sorted(levels)
    columns = list(ESTIMATE_COLUMNS)
    for level in levels:
        columns += [_interval_column("lo", level), _interval_column("hi", level)]
    columns += ["n_valid", "n_missing", "error"]
    rows = []
    for e in estimates:
        row = {
            "key": e.key.label(), "metric": e.metric.name, "threshold": e.metric.threshold,
            "method": e.method, "provenance": e.provenance, "n": e.n, "point": e.point,
            "n_valid": e.n_valid, "n_missing": e.n_missing, "error": e.error,
        }
        for level in levels:
            lo, hi = e.intervals.get(level, (None, None))
            row[_interval_column("lo", level)] = lo
            row[_interval_column("hi", level)] = hi
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def forest_frame(report: Report) -> pd.DataFrame:
    """Plot-ready long table for forest plots"""
    rows = []
    for e in report.estimates:
        lo, hi = e.intervals.get(0.95, (None, None))
        rows.append({"key": e.key.label(), "method": e.method, "metric": e.metric.name,
                     "point": e.point, "lo95": lo, "hi95": hi, "truth": report.truth_of(e)})
    return pd.DataFrame(rows, columns=FOREST_COLUMNS)


def checks_frame(report: Report) -> pd.DataFrame:
    rows = [c.to_dict() for checks in report.checks.values() for c in checks]
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


def report_emit(report: Report, out_dir: str, formats: Sequence[str] = ("json", "csv")) -> List[str]:
    """Write report.json and the CSV tables; returns the written paths"""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    if "json" in formats:
        path = os.path.join(out_dir, "report.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
        written.append(path)

    if "csv" in formats:
        relative = relative_nll_table(report.checks) if report.checks else \
            pd.DataFrame(columns=RELATIVE_NLL_COLUMNS)
        replicates = replicates_frame(report.estimates)
        tables = {
            "estimates.csv": estimates_frame(report.estimates, report.levels),
            "checks.csv": checks_frame(report),
            "relative_nll.csv": relative,
            "forest.csv": forest_frame(report),
            "ppc.csv": pd.DataFrame(report.ppc, columns=PPC_COLUMNS),
        }
        for name, frame in tables.items():
            path = os.path.join(out_dir, name)
            frame.to_csv(path, index=False, float_format="%.17g")
            written.append(path)
        path = os.path.join(out_dir, "replicates.csv")
        replicates.to_csv(path, index=True, float_format="%.17g")
        written.append(path)

    return written

# ==================== DATA ====================

@dataclass
class PreparedData:
    dataset: EvalDataset
    attributes: List[str]
    truth: Optional[GroundTruth] = None
    population: Optional[Population] = None
    full: Optional[EvalDataset] = None


def _resolve_path(path: str) -> str:
    """Relative paths that do not exist from the working directory fall back to the package directory"""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(os.path.dirname(os.path.abspath(__file__)), path)
    return candidate if os.path.exists(candidate) else path


def _check_attributes(d: EvalDataset, attrs: Sequence[str]):
    unknown = [a for a in attrs if not d.schema.has_attr(a)]
    if unknown:
        raise ConfigError(f"subpops.attributes names unknown attributes: {', '.join(unknown)}")


def make_population(cfg: RunConfig) -> Population:
    verify_constants(MECHANISM_MANIFEST)
    spec = load_population_spec(_resolve_path(cfg.synth.population_spec))
    return generate_population(spec, cutoff=cfg.synth.cutoff, n_pop=cfg.synth.n_pop,
                               seed=stream_seed(cfg.seed, "population"), n_jobs=Config.N_JOBS)


def score_population(cfg: RunConfig, population: Population, regime: str,
                     attrs: Sequence[str]) -> Tuple[EvalDataset, GroundTruth]:
    mech = ScoreMechanism.parse(regime)
    scores = simulate_scores(population, mech, stream_seed(cfg.seed, "scores", mech.name))
    full = population.with_scores(scores)
    truth = ground_truth(full, attrs, cfg.metrics, cfg.fpr_target, threshold=cfg.threshold)
    return full, truth


def load_data(cfg: RunConfig) -> PreparedData:
    if cfg.source == "csv":
        d = load_csv(cfg.csv_path, load_schema_config(cfg.schema_path))
        attrs = cfg.attributes or list(d.schema.attr_names)
        _check_attributes(d, attrs)
        prepared = PreparedData(dataset=d, attributes=attrs)
    else:
        population = make_population(cfg)
        attrs = cfg.attributes or list(population.dataset.schema.attr_names)
        _check_attributes(population.dataset, attrs)
        full, truth = score_population(cfg, population, cfg.synth.regime, attrs)
        d = subsample(full, cfg.synth.n, stream_seed(cfg.seed, "subsample"))
        prepared = PreparedData(dataset=d, attributes=attrs, truth=truth, population=population, full=full)

    d = prepared.dataset
    print(get_text('data_loaded', n=d.n, positives=int(d.labels.sum()), attributes=",".join(prepared.attributes)))
    if cfg.standardize:
        prepared.dataset, _, _ = d.standardize_covariates()
    return prepared

# ==================== MODELS ====================

def model_specs(cfg: RunConfig, d: EvalDataset, attrs: Sequence[str]) -> Dict[str, ModelSpec]:
    """Parse every configured model; '@<name>' picks a reference model"""
    covariates = [c for c in REFERENCE_COVARIATES if c in d.schema.covariates] or list(d.schema.covariates)
    reference = reference_models(attrs, covariates)
    specs = {}
    for model in cfg.models:
        text = model.formula
        if text.startswith("@"):
            if text[1:] not in reference:
                raise ConfigError(f"model.{model.name}.formula: no reference model {text[1:]!r}")
            text = reference[text[1:]]
        try:
            specs[model.name] = parse_formula(text, model.sigma_formula or None)
        except FormulaSyntaxError as e:
            raise ConfigError(f"model.{model.name}.formula: {e}") from e
    return specs


def fit_models(cfg: RunConfig, d: EvalDataset, specs: Dict[str, ModelSpec],
               resume: bool = True, store: bool = True) -> Dict[str, Tuple[PosteriorDraws, SamplerDiagnostics]]:
    """Fit each model, reusing stored draws whose spec/dataset hash still matches"""
    config_hash = cfg.config_hash()
    fitted = {}
    for name, spec in specs.items():
        stored = load_draws(config_hash, name) if resume and store else None
        if stored is not None and stored[0].spec_hash == posterior_hash(spec, d):
            print(get_text('stage_resumed', stage=name, what="posterior draws"))
            fitted[name] = stored
            continue
        draws, diagnostics = fit_posterior(spec, d, cfg.sampler.draws, stream_seed(cfg.seed, "sampling", name),
                                           cfg.model(name).sampler, cfg.sampler)
        if store:
            save_draws(config_hash, name, draws, diagnostics)
        rhat = "n/a" if math.isnan(diagnostics.max_rhat) else f"{diagnostics.max_rhat:.3f}"
        print(get_text('model_fitted', model=name, draws=draws.R, method=diagnostics.method, rhat=rhat))
        fitted[name] = (draws, diagnostics)
    return fitted


def _stored_checks(config_hash: str, names: Sequence[str]) -> Optional[Dict[str, List[CellCheckResult]]]:
    stored = load_json(config_hash, "checks")
    if stored is None or sorted(stored) != sorted(names):
        return None
    return {name: [CellCheckResult.from_dict(c) for c in stored[name]] for name in names}


def run_checks(cfg: RunConfig, d: EvalDataset, specs: Dict[str, ModelSpec], attrs: Sequence[str],
               resume: bool = True, store: bool = True) -> Dict[str, List[CellCheckResult]]:
    config_hash = cfg.config_hash()
    if resume and store:
        stored = _stored_checks(config_hash, list(specs))
        if stored is not None:
            print(get_text('stage_resumed', stage=STAGE_CV, what="CV checks"))
            return stored
    checks = cv_compare_models(specs, d, cfg.cv.folds, stream_seed(cfg.seed, "cv"), cfg.cv.margin,
                               cfg.cv.draws, cfg.sampler, attrs, Config.N_JOBS)
    if store:
        save_json(config_hash, "checks", _clean({name: [c.to_dict() for c in rows] for name, rows in checks.items()}))
    return checks


def bootstrap_plan(cfg: RunConfig, mode: str, sampler: str = "auto") -> BootstrapPlan:
    return BootstrapPlan(
        B=cfg.bootstrap.replicates,
        mode=mode,
        seed=stream_seed(cfg.seed, "bootstrap"),
        levels=tuple(cfg.bootstrap.levels),
        r_out=cfg.bootstrap.r_out,
        exact_draws=cfg.bootstrap.exact_draws,
        sampler=sampler,
        settings=cfg.sampler,
        n_jobs=Config.N_JOBS,
    )


def _versions() -> Dict[str, str]:
    versions = {}
    for package in VERSIONED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "missing"
    return versions

# ==================== PIPELINE ====================

def run_pipeline(cfg: RunConfig, data: Optional[PreparedData] = None, stages: Sequence[str] = ALL_STAGES,
                 resume: bool = True, store: bool = True) -> Report:
    """
    Empirical estimates, then per model: fit, MBM, CV check, bootstrap, fallback merge.
    Per-cell estimator failures are recorded in the report; configuration and IO errors raise.
    """
    data = data or load_data(cfg)
    d, attrs = data.dataset, data.attributes
    threshold = cfg.threshold
    if threshold is None and data.truth is not None:
        # synthetic runs estimate at the population threshold so FPR/PPV match the truth
        threshold = data.truth.threshold
    metrics, tau = resolve_thresholds(d, [MetricKind.parse(m) for m in cfg.metrics], cfg.fpr_target, threshold)
    if tau is not None:
        print(get_text('threshold_resolved', threshold=tau, target=cfg.fpr_target))
    keys = subpop_keys(d, attrs)

    report = Report(manifest={
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "threshold": tau,
        "levels": list(cfg.bootstrap.levels) if STAGE_BOOTSTRAP in stages else [],
        "attributes": list(attrs),
        "n": d.n,
        "stages": list(stages),
        "versions": _versions(),
        "config": cfg.to_flat(),
    })
    if data.truth is not None:
        report.truth = {f"{key.label()}|{metric}": value for (key, metric), value in data.truth.values.items()}

    empirical = empirical_all(d, keys, metrics)
    if STAGE_BOOTSTRAP in stages:
        empirical = empirical_bootstrap(d, bootstrap_plan(cfg, EMPIRICAL), keys, metrics, empirical)
    report.estimates.extend(empirical)

    if cfg.empirical_only or not cfg.models or STAGE_FIT not in stages:
        return report

    specs = model_specs(cfg, d, attrs)
    fitted = fit_models(cfg, d, specs, resume, store)
    for name, (_, diagnostics) in fitted.items():
        report.diagnostics[name] = diagnostics.to_dict()
        for warning in diagnostics.warnings:
            print(get_text('model_warning', model=name, warning=warning))
            report.warnings.append(f"{name}: {warning}")

    if STAGE_CV in stages and cfg.cv.enabled:
        report.checks = run_checks(cfg, d, specs, attrs, resume, store)
        for name, checks in report.checks.items():
            n_fallback = sum(c.verdict == FALLBACK for c in checks)
            print(get_text('fallback_summary', model=name, fallback=n_fallback, total=len(checks)))

    if STAGE_MBM not in stages and STAGE_BOOTSTRAP not in stages:
        return report

    model_estimates: Dict[str, List[MetricEstimate]] = {}
    for name, spec in specs.items():
        draws, _ = fitted[name]
        sims = simulate_predictive(spec, draws, d, stream_seed(cfg.seed, "sims", name))
        for row in ppc_summary(sims, attrs).to_dict("records"):
            report.ppc.append(_clean({"model": name, **row}))
        points = mbm_all(sims, attrs, metrics, name, keys=keys)
        if STAGE_BOOTSTRAP in stages and cfg.bootstrap.mode != EMPIRICAL:
            outcome = run_mbm_bootstrap(spec, draws, d, bootstrap_plan(cfg, cfg.bootstrap.mode, cfg.model(name).sampler),
                                        points)
            points = outcome.estimates
            if outcome.low_ess:
                ess = float(np.nanmedian(outcome.ess))
                print(get_text('low_ess', model=name, ess=ess))
                report.warnings.append(f"{name}: importance weights degenerate (median ESS {ess:.1f})")
        model_estimates[name] = points

    for name, points in model_estimates.items():
        if report.checks:
            points = apply_fallback(points, report.checks[name], empirical)
        report.estimates.extend(points)

    if report.checks and len(model_estimates) > 1:
        winner = best_overall(report.checks)
        print(get_text('best_model', model=winner))
        report.estimates.extend(merge_best(model_estimates, empirical, select_best(report.checks), winner, BEST_LL))

    return report

# ==================== EXPERIMENT ====================

def experiment_rows(report: Report, regime: str, n: int, rep: int) -> List[Dict]:
    """Per estimate: absolute error against the truth and interval coverage"""
    rows = []
    for e in report.estimates:
        truth = report.truth_of(e)
        row = {
            "regime": regime, "N": n, "rep": rep, "key": e.key.label(), "cell_n": e.n,
            "method": e.method, "metric": e.metric.name, "point": e.point, "truth": truth,
            "abs_error": abs(e.point - truth) if e.point is not None and truth is not None else np.nan,
            "n_valid": e.n_valid,
        }
        valid = e.replicates[~np.isnan(e.replicates)] if e.replicates is not None else np.array([])
        row["replicate_range"] = float(valid.max() - valid.min()) if len(valid) else np.nan
        for level, (lo, hi) in e.intervals.items():
            pct = f"{level * 100:g}"
            defined = truth is not None and lo is not None and hi is not None and not (np.isnan(lo) or np.isnan(hi))
            row[f"covered{pct}"] = float(lo <= truth <= hi) if defined else np.nan
            row[f"width{pct}"] = hi - lo if defined else np.nan
        rows.append(row)
    return rows


def _paired_with_empirical(rows: pd.DataFrame) -> pd.DataFrame:
    """Rows where both the method and the empirical estimator have an error for the same cell"""
    base = ["regime", "N", "rep", "key", "metric"]
    if rows.empty or "method" not in rows:
        return pd.DataFrame(columns=base + ["method", "cell_n", "abs_error", "empirical_error"])
    emp = rows[rows["method"] == EMPIRICAL][base + ["abs_error"]].rename(columns={"abs_error": "empirical_error"})
    return rows.merge(emp, on=base, how="inner").dropna(subset=["abs_error", "empirical_error"])


def _relative_errors(paired: pd.DataFrame, by: List[str]) -> pd.DataFrame:
    columns = by + ["mae", "empirical_mae", "relative_error", "cells"]
    if paired.empty:
        return pd.DataFrame(columns=columns)
    table = paired.groupby(by, sort=True, observed=True).agg(
        mae=("abs_error", "mean"), empirical_mae=("empirical_error", "mean"), cells=("abs_error", "size"),
    ).reset_index()
    table["relative_error"] = table["mae"] / table["empirical_mae"].where(table["empirical_mae"] > 0)
    return table[columns]


def error_table(rows: pd.DataFrame) -> pd.DataFrame:
    """MAE per (regime, N, method, metric) and its ratio to the empirical MAE on the same cells"""
    return _relative_errors(_paired_with_empirical(rows), ["regime", "N", "method", "metric"])


def size_bin_table(rows: pd.DataFrame) -> pd.DataFrame:
    paired = _paired_with_empirical(rows)
    paired["size_bin"] = pd.cut(paired["cell_n"], SIZE_BINS, right=True, labels=SIZE_BIN_LABELS).astype(str)
    return _relative_errors(paired, ["regime", "N", "method", "metric", "size_bin"])


def coverage_table(rows: pd.DataFrame, levels: Sequence[float]) -> pd.DataFrame:
    """Coverage per level, with the number of intervals and of non-missing replicates behind it"""
    columns = ["regime", "N", "method", "metric", "level", "coverage", "intervals",
               "mean_width", "n_valid_replicates", "replicate_range"]
    tables = []
    for level in levels:
        pct = f"{level * 100:g}"
        if f"covered{pct}" not in rows:
            continue
        valid = rows.dropna(subset=[f"covered{pct}"])
        if valid.empty:
            continue
        table = valid.groupby(["regime", "N", "method", "metric"], sort=True).agg(
            coverage=(f"covered{pct}", "mean"),
            intervals=(f"covered{pct}", "size"),
            mean_width=(f"width{pct}", "mean"),
            n_valid_replicates=("n_valid", "sum"),
            replicate_range=("replicate_range", "mean"),
        ).reset_index()
        table["level"] = level
        tables.append(table[columns])
    return pd.concat(tables, ignore_index=True) if tables else pd.DataFrame(columns=columns)


def run_experiment(cfg: RunConfig) -> Dict[str, pd.DataFrame]:
    """Regimes x sizes x repetitions against ground truth; returns the row and summary tables"""
    if cfg.source != "synth":
        raise ConfigError("experiment needs data.source=synth")
    print(get_text('experiment_summary', regimes=len(cfg.experiment.regimes),
                   sizes=len(cfg.experiment.sizes), repetitions=cfg.experiment.repetitions))
    population = make_population(cfg)
    attrs = cfg.attributes or list(population.dataset.schema.attr_names)
    _check_attributes(population.dataset, attrs)
    rows = []
    for regime in cfg.experiment.regimes:
        full, truth = score_population(cfg, population, regime, attrs)
        for n in cfg.experiment.sizes:
            for rep in range(cfg.experiment.repetitions):
                d = subsample(full, n, stream_seed(cfg.seed, "subsample", regime, n, rep))
                if cfg.standardize:
                    d, _, _ = d.standardize_covariates()
                rep_cfg = replace(cfg, seed=stream_seed(cfg.seed, "repetition", regime, n, rep))
                report = run_pipeline(rep_cfg, PreparedData(d, attrs, truth), store=False)
                rows.extend(experiment_rows(report, regime, n, rep))
                logger.info(f"Experiment {regime} N={n} repetition {rep + 1}/{cfg.experiment.repetitions} done")
    frame = pd.DataFrame(rows)
    return {
        "experiment_rows": frame,
        "experiment_errors": error_table(frame),
        "experiment_size_bins": size_bin_table(frame),
        "experiment_coverage": coverage_table(frame, cfg.bootstrap.levels),
    }

# ==================== COMMANDS ====================

def output_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.output_dir, cfg.config_hash())


def stage(name: str):
    """Print start/finish banners and log the stage in the run table"""
    def decorator(func):
        @wraps(func)
        def wrapped(cfg: RunConfig, args: argparse.Namespace):
            config_hash = cfg.config_hash()
            print(get_text('stage_start', stage=name, config_hash=config_hash))
            run_id = start_run(config_hash, name)
            started = time.perf_counter()
            try:
                result = func(cfg, args)
            except Exception as e:
                finish_run(run_id, "failed", str(e))
                raise
            finish_run(run_id, "ok")
            print(get_text('stage_done', stage=name, seconds=time.perf_counter() - started))
            return result
        return wrapped
    return decorator


def _emit(cfg: RunConfig, report: Report, store: bool = True):
    if store:
        save_json(cfg.config_hash(), "report", report.to_dict())
    out = output_dir(cfg)
    report_emit(report, out)
    missing = sum(e.missing for e in report.estimates)
    print(get_text('estimates_summary', rows=len(report.estimates), missing=missing))
    print(get_text('outputs_written', path=out))


@stage("simulate")
def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.source != "synth":
        raise ConfigError("simulate needs data.source=synth")
    data = load_data(cfg)
    out = output_dir(cfg)
    os.makedirs(out, exist_ok=True)
    print(get_text('population_generated', n_pop=data.full.n, prevalence=float(data.full.labels.mean()), n=data.dataset.n))
    data.dataset.save_csv(os.path.join(out, "sample.csv"))
    with open(os.path.join(out, "truth.json"), "w", encoding="utf-8") as f:
        json.dump(_clean(data.truth.to_dict()), f, indent=2, sort_keys=True, allow_nan=False)
    if args.population:
        path = os.path.join(out, "population.csv")
        data.population.save_csv(path, data.full.scores)
        print(get_text('population_written', path=path))
    print(get_text('outputs_written', path=out))
    return 0


@stage("estimate")
def cmd_estimate(cfg: RunConfig, args: argparse.Namespace) -> int:
    _emit(cfg, run_pipeline(cfg, stages=(STAGE_FIT, STAGE_MBM), resume=not args.no_resume))
    return 0


@stage("check")
def cmd_check(cfg: RunConfig, args: argparse.Namespace) -> int:
    _emit(cfg, run_pipeline(cfg, stages=(STAGE_FIT, STAGE_CV), resume=not args.no_resume))
    return 0


@stage("bootstrap")
def cmd_bootstrap(cfg: RunConfig, args: argparse.Namespace) -> int:
    _emit(cfg, run_pipeline(cfg, stages=(STAGE_FIT, STAGE_MBM, STAGE_BOOTSTRAP), resume=not args.no_resume))
    return 0


@stage("run")
def cmd_run(cfg: RunConfig, args: argparse.Namespace) -> int:
    _emit(cfg, run_pipeline(cfg, stages=ALL_STAGES, resume=not args.no_resume))
    return 0


@stage("experiment")
def cmd_experiment(cfg: RunConfig, args: argparse.Namespace) -> int:
    tables = run_experiment(cfg)
    out = output_dir(cfg)
    os.makedirs(out, exist_ok=True)
    for name, frame in tables.items():
        frame.to_csv(os.path.join(out, f"{name}.csv"), index=False, float_format="%.17g")
    print(get_text('outputs_written', path=out))
    return 0


@stage("report")
def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    stored = load_json(cfg.config_hash(), "report")
    if stored is None:
        raise DataError(get_text('missing_report', config_hash=cfg.config_hash()))
    _emit(cfg, Report.from_dict(stored), store=False)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "check": cmd_check,
    "bootstrap": cmd_bootstrap,
    "run": cmd_run,
    "experiment": cmd_experiment,
    "report": cmd_report,
}

# ==================== ERROR HANDLING ====================

def error_handler(exc: BaseException) -> int:
    """Print a message for exc and return the process exit code"""
    if isinstance(exc, ConfigError):
        print(get_text('error_config', error=exc), file=sys.stderr)
        logger.error(f"Configuration error: {exc}")
        return 2
    if isinstance(exc, OSError):
        print(get_text('error_io', error=exc), file=sys.stderr)
        logger.error(f"IO error: {exc}")
        return 2
    if isinstance(exc, (SchemaError, CSVParseError, RecordValidationError, PopulationSpecError)):
        print(get_text('error_schema', error=exc), file=sys.stderr)
        logger.error(f"Schema error: {exc}")
        return 2
    if isinstance(exc, MBMError):
        print(get_text('error_model', error=exc), file=sys.stderr)
        logger.error(f"{type(exc).__name__}: {exc}")
        return 1
    print(get_text('error_unexpected', error=exc), file=sys.stderr)
    logger.error(f"Unexpected error: {exc}", exc_info=exc)
    return 1


def parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbm", description="Model-based subpopulation metric estimation")
    parser.add_argument("--config", help="run config file (key=value)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a run config key, e.g. --set bootstrap.B=20")
    parser.add_argument("--no-resume", action="store_true", help="ignore stored intermediates")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="generate a synthetic population, subsample and ground truth") \
        .add_argument("--population", action="store_true", help="also write the full population CSV")
    sub.add_parser("estimate", help="empirical and model-based point estimates")
    sub.add_parser("check", help="cross-validated model check against the KDE baseline")
    sub.add_parser("bootstrap", help="point estimates with bootstrap intervals")
    sub.add_parser("run", help="the full procedure: estimate, check, bootstrap, fallback merge")
    sub.add_parser("experiment", help="error and coverage tables over regimes, sizes and repetitions")
    sub.add_parser("report", help="re-emit the stored report of a config")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch the subcommand, map errors to exit codes"""
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        try:
            Config.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        cfg = load_run_config(args.config, parse_overrides(args.overrides))
        init_db()
        return COMMANDS[args.command](cfg, args)
    except Exception as e:
        return error_handler(e)


if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info(get_text('interrupted'))
        sys.exit(130)
