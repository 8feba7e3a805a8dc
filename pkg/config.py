"""
Configuration Management for model-based subpopulation metric estimation

Two layers:
- Config: process-level settings from environment variables (.env via python-dotenv)
- RunConfig: one pipeline run, read from a key-value file in the same dotenv format
"""

import hashlib
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Process-level configuration"""

    # Logging Configuration
    LOG_LEVEL = os.getenv("MBM_LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("MBM_LOG_FILE", "")

    # Artifact store (resumable stages)
    DATABASE_NAME = os.getenv("MBM_DATABASE", "mbm_artifacts.db")

    # Only environment override the CLI honours for outputs
    OUTPUT_DIR = os.getenv("MBM_OUTPUT_DIR", "")

    # Parallel workers for bootstrap replicates and CV folds
    N_JOBS = int(os.getenv("MBM_N_JOBS", "1"))

    @classmethod
    def validate(cls):
        """Validate configuration"""
        errors = []

        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            errors.append(f"MBM_LOG_LEVEL must be a logging level name, got {cls.LOG_LEVEL!r}")

        if cls.N_JOBS == 0:
            errors.append("MBM_N_JOBS must be a positive count or -1")

        if not cls.DATABASE_NAME:
            errors.append("MBM_DATABASE must not be empty")

        if errors:
            raise ValueError("Configuration errors:\n" + "\n".join(errors))

        return True

    @classmethod
    def print_config(cls):
        """Print current configuration (for debugging)"""
        print("=" * 50)
        print("Model-Based Metric Toolkit Configuration")
        print("=" * 50)
        print(f"Log level: {cls.LOG_LEVEL}")
        print(f"Log file: {cls.LOG_FILE or '(stderr)'}")
        print(f"Artifact database: {cls.DATABASE_NAME}")
        print(f"Output dir override: {cls.OUTPUT_DIR or '(none)'}")
        print(f"Parallel jobs: {cls.N_JOBS}")
        print("=" * 50)


# ==================== RUN CONFIGURATION ====================

METRIC_NAMES = ("AUC", "FPR", "PPV")
BOOTSTRAP_MODES = ("importance_weighted", "exact", "empirical")
SAMPLER_CHOICES = ("auto", "conjugate", "nuts")


@dataclass
class ModelConfig:
    """One named evaluation model"""
    name: str
    formula: str
    sigma_formula: str = ""
    sampler: str = "auto"


@dataclass
class SamplerSettings:
    draws: int = 4000
    chains: int = 4
    warmup: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10


@dataclass
class BootstrapSettings:
    replicates: int = 100
    mode: str = "importance_weighted"
    levels: List[float] = field(default_factory=lambda: [0.5, 0.95])
    r_out: int = 1000
    exact_draws: int = 1000


@dataclass
class CVSettings:
    enabled: bool = True
    folds: int = 5
    margin: float = 1.0
    draws: int = 1000


@dataclass
class SynthSettings:
    regime: str = "none"
    population_spec: str = "data/population_spec.json"
    n_pop: int = 200_000
    n: int = 5000
    cutoff: float = 0.10


@dataclass
class ExperimentSettings:
    regimes: List[str] = field(default_factory=lambda: ["none", "simple", "interactions"])
    sizes: List[int] = field(default_factory=lambda: [1000, 5000])
    repetitions: int = 10


@dataclass
class RunConfig:
    """Validated configuration of one pipeline run"""
    source: str = "synth"
    csv_path: str = ""
    schema_path: str = ""
    synth: SynthSettings = field(default_factory=SynthSettings)
    attributes: List[str] = field(default_factory=list)
    metrics: List[str] = field(default_factory=lambda: list(METRIC_NAMES))
    fpr_target: float = 0.01
    threshold: Optional[float] = None
    models: List[ModelConfig] = field(default_factory=list)
    empirical_only: bool = False
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    bootstrap: BootstrapSettings = field(default_factory=BootstrapSettings)
    cv: CVSettings = field(default_factory=CVSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    seed: int = 0
    standardize: bool = False
    output_dir: str = "runs"

    def to_flat(self) -> Dict[str, str]:
        """Canonical key-value listing (same keys the config file uses)"""
        flat = {
            "data.source": self.source,
            "data.csv": self.csv_path,
            "data.schema": self.schema_path,
            "synth.regime": self.synth.regime,
            "synth.population_spec": self.synth.population_spec,
            "synth.n_pop": str(self.synth.n_pop),
            "synth.n": str(self.synth.n),
            "synth.cutoff": repr(self.synth.cutoff),
            "subpops.attributes": ",".join(self.attributes),
            "metrics": ",".join(self.metrics),
            "metrics.fpr_target": repr(self.fpr_target),
            "metrics.threshold": "" if self.threshold is None else repr(self.threshold),
            "empirical_only": str(self.empirical_only).lower(),
            "sampler.draws": str(self.sampler.draws),
            "sampler.chains": str(self.sampler.chains),
            "sampler.warmup": str(self.sampler.warmup),
            "sampler.target_accept": repr(self.sampler.target_accept),
            "sampler.max_tree_depth": str(self.sampler.max_tree_depth),
            "bootstrap.B": str(self.bootstrap.replicates),
            "bootstrap.mode": self.bootstrap.mode,
            "bootstrap.levels": ",".join(repr(x) for x in self.bootstrap.levels),
            "bootstrap.r_out": str(self.bootstrap.r_out),
            "bootstrap.exact_draws": str(self.bootstrap.exact_draws),
            "cv.enabled": str(self.cv.enabled).lower(),
            "cv.folds": str(self.cv.folds),
            "cv.margin": repr(self.cv.margin),
            "cv.draws": str(self.cv.draws),
            "experiment.regimes": ",".join(self.experiment.regimes),
            "experiment.sizes": ",".join(str(n) for n in self.experiment.sizes),
            "experiment.repetitions": str(self.experiment.repetitions),
            "seed": str(self.seed),
            "standardize": str(self.standardize).lower(),
            "output.dir": self.output_dir,
        }
        for model in self.models:
            flat[f"model.{model.name}.formula"] = model.formula
            flat[f"model.{model.name}.sigma_formula"] = model.sigma_formula
            flat[f"model.{model.name}.sampler"] = model.sampler
        return flat

    def config_hash(self) -> str:
        """Stable fingerprint; the output directory does not change results"""
        flat = self.to_flat()
        flat.pop("output.dir")
        listing = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
        return hashlib.sha256(listing.encode("utf-8")).hexdigest()[:16]

    def model(self, name: str) -> ModelConfig:
        for model in self.models:
            if model.name == name:
                return model
        raise ConfigError(f"No model named {name!r} in the run config")


# ==================== PARSING HELPERS ====================

def _as_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off", ""):
        return False
    raise ConfigError(f"{key} must be a boolean, got {value!r}")


def _as_int(key: str, value: str) -> int:
    try:
        return int(value.strip().replace("_", ""))
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from None


def _as_float(key: str, value: str) -> float:
    try:
        return float(value.strip())
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {value!r}") from None


def _as_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def read_key_values(path: str) -> Dict[str, str]:
    """Read a dotenv-format key-value file without variable interpolation"""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    values = dotenv_values(path, interpolate=False)
    return {k: ("" if v is None else v) for k, v in values.items()}


def parse_run_config(values: Dict[str, str]) -> RunConfig:
    """Build a RunConfig from a flat key-value mapping"""
    cfg = RunConfig()
    models: Dict[str, ModelConfig] = {}
    unknown = []

    for key, value in values.items():
        if key.startswith("model."):
            # model names may contain dots (fixed.b), the attribute is the last part
            name, _, attribute = key[len("model."):].rpartition(".")
            if not name or attribute not in ("formula", "sigma_formula", "sampler"):
                unknown.append(key)
                continue
            model = models.setdefault(name, ModelConfig(name=name, formula=""))
            setattr(model, attribute, value.strip())
            continue

        if key == "data.source":
            cfg.source = value.strip()
        elif key == "data.csv":
            cfg.csv_path = value.strip()
        elif key == "data.schema":
            cfg.schema_path = value.strip()
        elif key == "synth.regime":
            cfg.synth.regime = value.strip()
        elif key == "synth.population_spec":
            cfg.synth.population_spec = value.strip()
        elif key == "synth.n_pop":
            cfg.synth.n_pop = _as_int(key, value)
        elif key == "synth.n":
            cfg.synth.n = _as_int(key, value)
        elif key == "synth.cutoff":
            cfg.synth.cutoff = _as_float(key, value)
        elif key == "subpops.attributes":
            cfg.attributes = _as_list(value)
        elif key == "metrics":
            cfg.metrics = [m.upper() for m in _as_list(value)]
        elif key == "metrics.fpr_target":
            cfg.fpr_target = _as_float(key, value)
        elif key == "metrics.threshold":
            cfg.threshold = _as_float(key, value) if value.strip() else None
        elif key == "empirical_only":
            cfg.empirical_only = _as_bool(key, value)
        elif key == "sampler.draws":
            cfg.sampler.draws = _as_int(key, value)
        elif key == "sampler.chains":
            cfg.sampler.chains = _as_int(key, value)
        elif key == "sampler.warmup":
            cfg.sampler.warmup = _as_int(key, value)
        elif key == "sampler.target_accept":
            cfg.sampler.target_accept = _as_float(key, value)
        elif key == "sampler.max_tree_depth":
            cfg.sampler.max_tree_depth = _as_int(key, value)
        elif key == "bootstrap.B":
            cfg.bootstrap.replicates = _as_int(key, value)
        elif key == "bootstrap.mode":
            cfg.bootstrap.mode = value.strip()
        elif key == "bootstrap.levels":
            cfg.bootstrap.levels = [_as_float(key, v) for v in _as_list(value)]
        elif key == "bootstrap.r_out":
            cfg.bootstrap.r_out = _as_int(key, value)
        elif key == "bootstrap.exact_draws":
            cfg.bootstrap.exact_draws = _as_int(key, value)
        elif key == "cv.enabled":
            cfg.cv.enabled = _as_bool(key, value)
        elif key == "cv.folds":
            cfg.cv.folds = _as_int(key, value)
        elif key == "cv.margin":
            cfg.cv.margin = _as_float(key, value)
        elif key == "cv.draws":
            cfg.cv.draws = _as_int(key, value)
        elif key == "experiment.regimes":
            cfg.experiment.regimes = _as_list(value)
        elif key == "experiment.sizes":
            cfg.experiment.sizes = [_as_int(key, v) for v in _as_list(value)]
        elif key == "experiment.repetitions":
            cfg.experiment.repetitions = _as_int(key, value)
        elif key == "seed":
            cfg.seed = _as_int(key, value)
        elif key == "standardize":
            cfg.standardize = _as_bool(key, value)
        elif key == "output.dir":
            cfg.output_dir = value.strip()
        else:
            unknown.append(key)

    if unknown:
        raise ConfigError("Unknown config keys: " + ", ".join(sorted(unknown)))

    cfg.models = [models[name] for name in sorted(models)]
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig):
    """Collect every violation, then raise once (same shape as Config.validate)"""
    errors = []

    if cfg.source not in ("csv", "synth"):
        errors.append("data.source must be 'csv' or 'synth'")
    if cfg.source == "csv" and not cfg.csv_path:
        errors.append("data.csv is required when data.source=csv")
    if cfg.source == "csv" and not cfg.schema_path:
        errors.append("data.schema is required when data.source=csv")
    if not cfg.metrics:
        errors.append("at least one metric is required")
    for metric in cfg.metrics:
        if metric not in METRIC_NAMES:
            errors.append(f"unknown metric {metric!r} (expected one of {', '.join(METRIC_NAMES)})")
    if not (0.0 < cfg.fpr_target < 1.0):
        errors.append("metrics.fpr_target must lie in (0, 1)")
    if not cfg.models and not cfg.empirical_only:
        errors.append("configure at least one model.<name>.formula or set empirical_only=true")
    for model in cfg.models:
        if not model.formula:
            errors.append(f"model.{model.name}.formula is empty")
        if model.sampler not in SAMPLER_CHOICES:
            errors.append(f"model.{model.name}.sampler must be one of {', '.join(SAMPLER_CHOICES)}")
    if cfg.sampler.draws < 1 or cfg.sampler.chains < 1 or cfg.sampler.warmup < 0:
        errors.append("sampler.draws and sampler.chains must be >= 1, sampler.warmup >= 0")
    if not (0.0 < cfg.sampler.target_accept < 1.0):
        errors.append("sampler.target_accept must lie in (0, 1)")
    if cfg.bootstrap.replicates < 1:
        errors.append("bootstrap.B must be >= 1")
    if cfg.bootstrap.mode not in BOOTSTRAP_MODES:
        errors.append(f"bootstrap.mode must be one of {', '.join(BOOTSTRAP_MODES)}")
    if any(not (0.0 < level < 1.0) for level in cfg.bootstrap.levels):
        errors.append("bootstrap.levels must lie in (0, 1)")
    if cfg.cv.folds < 2:
        errors.append("cv.folds must be >= 2")
    if cfg.synth.n < 1 or cfg.synth.n > cfg.synth.n_pop:
        errors.append("synth.n must satisfy 1 <= n <= synth.n_pop")
    if cfg.experiment.repetitions < 1:
        errors.append("experiment.repetitions must be >= 1")

    if errors:
        raise ConfigError("Run configuration errors:\n" + "\n".join(errors))

    return True


def load_run_config(path: Optional[str], overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """File values, then CLI overrides, then the MBM_OUTPUT_DIR environment override"""
    values: Dict[str, str] = read_key_values(path) if path else {}
    if overrides:
        values.update(overrides)
    output_override = os.getenv("MBM_OUTPUT_DIR", Config.OUTPUT_DIR)
    if output_override:
        values["output.dir"] = output_override
    return parse_run_config(values)


def stream_seed(seed: int, *names) -> int:
    """Derive an independent 32-bit seed for a named substream of the global seed"""
    label = "/".join(str(n) for n in (seed,) + names)
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:4], "little")
