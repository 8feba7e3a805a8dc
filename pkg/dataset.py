"""
Evaluation dataset: records (a_n, x_n, y_n, s_n), subpopulation keys, CSV ingestion

Storage is columnar (numpy) and read-only after construction, so a dataset can be
shared across workers without locking. Row order is preserved everywhere.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import read_key_values
from errors import (
    CSVParseError,
    LevelError,
    RecordValidationError,
    SchemaError,
    SubpopKeyError,
)

logger = logging.getLogger(__name__)

# ==================== SCHEMA ====================

@dataclass(frozen=True)
class Schema:
    """Ordered attribute levels and covariate names"""
    attributes: Tuple[Tuple[str, Tuple[str, ...]], ...]
    covariates: Tuple[str, ...] = ()

    @property
    def attr_names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.attributes)

    def levels(self, name: str) -> Tuple[str, ...]:
        for attr, levels in self.attributes:
            if attr == name:
                return levels
        raise SubpopKeyError(f"Unknown attribute {name!r}")

    def attr_index(self, name: str) -> int:
        for i, (attr, _) in enumerate(self.attributes):
            if attr == name:
                return i
        raise SubpopKeyError(f"Unknown attribute {name!r}")

    def has_attr(self, name: str) -> bool:
        return name in self.attr_names

    def level_code(self, name: str, level: str) -> int:
        levels = self.levels(name)
        try:
            return levels.index(level)
        except ValueError:
            raise LevelError(f"Level {level!r} is not a level of {name!r} (levels: {', '.join(levels)})") from None


@dataclass(frozen=True)
class EvalRecord:
    """One observation; score is None for a record that is only being predicted"""
    attrs: Dict[str, str]
    covariates: Dict[str, float]
    label: int
    score: Optional[float] = None


@dataclass(frozen=True)
class SubpopKey:
    """Binding of some attributes to one level each; the empty key is the whole population"""
    bindings: Tuple[Tuple[str, str], ...] = ()

    @classmethod
    def of(cls, mapping: Optional[Mapping[str, str]] = None, **kwargs) -> "SubpopKey":
        merged = dict(mapping or {})
        merged.update(kwargs)
        return cls(tuple(sorted((str(k), str(v)) for k, v in merged.items())))

    @classmethod
    def parse(cls, text: str) -> "SubpopKey":
        text = text.strip()
        if text in ("", "ALL"):
            return cls()
        pairs = {}
        for part in text.split(","):
            if "=" not in part:
                raise SubpopKeyError(f"Malformed subpopulation key part {part!r} (expected name=level)")
            name, level = part.split("=", 1)
            pairs[name.strip()] = level.strip()
        return cls.of(pairs)

    def as_dict(self) -> Dict[str, str]:
        return dict(self.bindings)

    def names(self) -> Tuple[str, ...]:
        return tuple(name for name, _ in self.bindings)

    def union(self, other: "SubpopKey") -> "SubpopKey":
        merged = self.as_dict()
        for name, level in other.bindings:
            if name in merged and merged[name] != level:
                raise SubpopKeyError(f"Keys bind {name!r} to different levels")
            merged[name] = level
        return SubpopKey.of(merged)

    def validate(self, schema: Schema):
        for name, level in self.bindings:
            if not schema.has_attr(name):
                raise SubpopKeyError(f"Unknown attribute {name!r} in subpopulation key")
            if level not in schema.levels(name):
                raise SubpopKeyError(f"Level {level!r} is not allowed for attribute {name!r}")

    def label(self) -> str:
        if not self.bindings:
            return "ALL"
        return ",".join(f"{name}={level}" for name, level in self.bindings)

    def __str__(self):
        return self.label()


# ==================== DATASET ====================

def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class EvalDataset:
    """
    Observed table D. Columns:
      codes      (N, A) level index per attribute, in schema level order
      covariates (N, C) real covariates
      labels     (N,)   0/1
      scores     (N,)   predictive model scores, or None before scores are simulated
    """
    schema: Schema
    codes: np.ndarray
    covariates: np.ndarray
    labels: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.labels)
        codes = np.asarray(self.codes, dtype=np.int32).reshape(n, len(self.schema.attributes))
        covariates = np.asarray(self.covariates, dtype=float).reshape(n, len(self.schema.covariates))
        labels = np.asarray(self.labels, dtype=np.int8)
        if np.any((labels != 0) & (labels != 1)):
            raise RecordValidationError("labels must be 0 or 1")
        if not np.all(np.isfinite(covariates)):
            raise RecordValidationError("covariate values must be finite")
        for j, (name, levels) in enumerate(self.schema.attributes):
            column = codes[:, j]
            if n and (column.min() < 0 or column.max() >= len(levels)):
                raise RecordValidationError(f"attribute {name!r} has codes outside its level list")
        object.__setattr__(self, "codes", _frozen(codes))
        object.__setattr__(self, "covariates", _frozen(covariates))
        object.__setattr__(self, "labels", _frozen(labels))
        if self.scores is not None:
            scores = np.asarray(self.scores, dtype=float).reshape(n)
            if not np.all(np.isfinite(scores)):
                raise RecordValidationError("scores must be finite")
            object.__setattr__(self, "scores", _frozen(scores))

    # ----- construction -----

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord], schema: Optional[Schema] = None) -> "EvalDataset":
        """Build from records; levels are inferred and sorted when no schema is given"""
        if len(records) < 1:
            raise RecordValidationError("a dataset needs at least one record")
        if schema is None:
            attr_names = list(records[0].attrs)
            cov_names = tuple(records[0].covariates)
            schema = Schema(
                attributes=tuple(
                    (name, tuple(sorted({r.attrs[name] for r in records if name in r.attrs})))
                    for name in attr_names
                ),
                covariates=cov_names,
            )
        codes = np.zeros((len(records), len(schema.attributes)), dtype=np.int32)
        covs = np.zeros((len(records), len(schema.covariates)))
        labels = np.zeros(len(records), dtype=np.int8)
        has_scores = all(r.score is not None for r in records)
        scores = np.zeros(len(records)) if has_scores else None
        for i, record in enumerate(records):
            if set(record.attrs) != set(schema.attr_names):
                raise RecordValidationError(f"record {i} attributes do not match the schema", row=i)
            if set(record.covariates) != set(schema.covariates):
                raise RecordValidationError(f"record {i} covariates do not match the schema", row=i)
            if record.label not in (0, 1):
                raise RecordValidationError(f"record {i} label must be 0 or 1", row=i)
            for j, name in enumerate(schema.attr_names):
                codes[i, j] = schema.level_code(name, record.attrs[name])
            for j, name in enumerate(schema.covariates):
                covs[i, j] = record.covariates[name]
            labels[i] = record.label
            if has_scores:
                scores[i] = record.score
        return cls(schema=schema, codes=codes, covariates=covs, labels=labels, scores=scores)

    # ----- basic access -----

    @property
    def n(self) -> int:
        return len(self.labels)

    def __len__(self):
        return self.n

    @property
    def attr_schema(self):
        return self.schema.attributes

    @property
    def cov_schema(self):
        return self.schema.covariates

    def record(self, i: int) -> EvalRecord:
        return EvalRecord(
            attrs={name: levels[self.codes[i, j]] for j, (name, levels) in enumerate(self.schema.attributes)},
            covariates={name: float(self.covariates[i, j]) for j, name in enumerate(self.schema.covariates)},
            label=int(self.labels[i]),
            score=None if self.scores is None else float(self.scores[i]),
        )

    @property
    def records(self) -> List[EvalRecord]:
        return [self.record(i) for i in range(self.n)]

    def attr_values(self, name: str) -> np.ndarray:
        """Level strings of one attribute, row-aligned"""
        levels = np.array(self.schema.levels(name), dtype=object)
        return levels[self.codes[:, self.schema.attr_index(name)]]

    def require_scores(self) -> np.ndarray:
        if self.scores is None:
            raise RecordValidationError("dataset has no scores yet")
        return self.scores

    # ----- derived datasets -----

    def take(self, indices) -> "EvalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return EvalDataset(
            schema=self.schema,
            codes=self.codes[idx],
            covariates=self.covariates[idx],
            labels=self.labels[idx],
            scores=None if self.scores is None else self.scores[idx],
        )

    def with_scores(self, scores) -> "EvalDataset":
        return EvalDataset(self.schema, self.codes, self.covariates, self.labels, np.asarray(scores, dtype=float))

    def mask(self, key: SubpopKey) -> np.ndarray:
        key.validate(self.schema)
        selected = np.ones(self.n, dtype=bool)
        for name, level in key.bindings:
            selected &= self.codes[:, self.schema.attr_index(name)] == self.schema.level_code(name, level)
        return selected

    def standardize_covariates(self) -> Tuple["EvalDataset", np.ndarray, np.ndarray]:
        """Z-score every covariate column; returns (dataset, means, sds)"""
        means = self.covariates.mean(axis=0) if self.n else np.zeros(len(self.schema.covariates))
        sds = self.covariates.std(axis=0) if self.n else np.ones(len(self.schema.covariates))
        sds = np.where(sds > 0, sds, 1.0)
        standardized = EvalDataset(self.schema, self.codes, (self.covariates - means) / sds, self.labels, self.scores)
        return standardized, means, sds

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(repr(self.schema).encode("utf-8"))
        for array in (self.codes, self.covariates, self.labels):
            digest.update(np.ascontiguousarray(array).tobytes())
        if self.scores is not None:
            digest.update(np.ascontiguousarray(self.scores).tobytes())
        return digest.hexdigest()[:16]

    # ----- serialization -----

    def to_frame(self, label_column: str = "y", score_column: str = "s") -> pd.DataFrame:
        columns = {name: self.attr_values(name) for name in self.schema.attr_names}
        for j, name in enumerate(self.schema.covariates):
            columns[name] = self.covariates[:, j]
        columns[label_column] = self.labels.astype(int)
        if self.scores is not None:
            columns[score_column] = self.scores
        return pd.DataFrame(columns)

    def save_csv(self, path: str, label_column: str = "y", score_column: str = "s"):
        # repr-precision floats keep load -> save -> load value-identical
        self.to_frame(label_column, score_column).to_csv(path, index=False, float_format="%.17g")


# ==================== INGESTION CONFIG ====================

@dataclass(frozen=True)
class BinSpec:
    """Numeric source column cut into labelled left-closed, right-open intervals"""
    source: str
    edges: Tuple[float, ...]
    labels: Tuple[str, ...]

    def __post_init__(self):
        if len(self.edges) < 2:
            raise SchemaError(f"bin on {self.source!r} needs at least two edges", self.source)
        if list(self.edges) != sorted(self.edges) or len(set(self.edges)) != len(self.edges):
            raise SchemaError(f"bin edges on {self.source!r} must be strictly increasing", self.source)
        if len(self.labels) != len(self.edges) - 1:
            raise SchemaError(f"bin on {self.source!r} needs {len(self.edges) - 1} labels", self.source)


@dataclass(frozen=True)
class SchemaConfig:
    """Column mapping for load_csv"""
    attributes: Tuple[str, ...]
    label: str = "y"
    score: Optional[str] = "s"
    covariates: Tuple[str, ...] = ()
    levels: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    bins: Dict[str, BinSpec] = field(default_factory=dict)

    @classmethod
    def from_schema(cls, schema: Schema, label: str = "y", score: Optional[str] = "s") -> "SchemaConfig":
        """Config that reloads a saved dataset with the exact same level order"""
        return cls(
            attributes=schema.attr_names,
            label=label,
            score=score,
            covariates=schema.covariates,
            levels={name: levels for name, levels in schema.attributes},
        )


def _split(value: str) -> Tuple[str, ...]:
    return tuple(item.strip() for item in value.split(",") if item.strip())


def load_schema_config(path: str) -> SchemaConfig:
    """
    Read a dotenv-format schema file:
      attributes=gender,race,age_bin
      label=y
      score=s
      covariates=ln.sysbp,ln.tc
      levels.race=H,NH A,NH B,NH W
      bin.age_bin.source=age
      bin.age_bin.edges=18,40,60,80,inf
      bin.age_bin.labels=18-39,40-59,60-79,80+
    """
    values = read_key_values(path)
    if "attributes" not in values:
        raise SchemaError("schema config must name its attributes", "attributes")
    levels: Dict[str, Tuple[str, ...]] = {}
    bin_parts: Dict[str, Dict[str, str]] = {}
    for key, value in values.items():
        if key.startswith("levels."):
            levels[key[len("levels."):]] = _split(value)
        elif key.startswith("bin."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in ("source", "edges", "labels"):
                raise SchemaError(f"unknown bin directive {key!r}", key)
            bin_parts.setdefault(parts[1], {})[parts[2]] = value
        elif key not in ("attributes", "label", "score", "covariates"):
            raise SchemaError(f"unknown schema config key {key!r}", key)

    bins = {}
    for name, parts in bin_parts.items():
        missing = [p for p in ("source", "edges", "labels") if p not in parts]
        if missing:
            raise SchemaError(f"bin.{name} is missing {', '.join(missing)}", name)
        try:
            edges = tuple(float(e) for e in _split(parts["edges"]))
        except ValueError:
            raise SchemaError(f"bin.{name}.edges must be numbers", name) from None
        bins[name] = BinSpec(source=parts["source"].strip(), edges=edges, labels=_split(parts["labels"]))

    score = values.get("score", "s").strip()
    return SchemaConfig(
        attributes=_split(values["attributes"]),
        label=values.get("label", "y").strip(),
        score=score or None,
        covariates=_split(values.get("covariates", "")),
        levels=levels,
        bins=bins,
    )


# ==================== CSV LOADING ====================

def _numeric_column(frame: pd.DataFrame, column: str, what: str) -> np.ndarray:
    """Parse a numeric column; non-numeric cells raise CSVParseError with the 1-based data row"""
    raw = frame[column]
    parsed = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(np.isnan(parsed))
    if len(bad):
        row = int(bad[0])
        raise CSVParseError(f"row {row + 1}: {what} column {column!r} has non-numeric value {raw.iloc[row]!r}", row=row + 1)
    infinite = np.flatnonzero(~np.isfinite(parsed))
    if len(infinite):
        row = int(infinite[0])
        raise RecordValidationError(f"row {row + 1}: {what} column {column!r} is not finite", row=row + 1)
    return parsed


def load_csv(path: str, schema_config: SchemaConfig) -> EvalDataset:
    """
    Load a UTF-8 CSV with a header row. Row numbers in errors are 1-based data rows
    (the header is not counted). Missing cells are rejected, never imputed.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path} has no header row") from None

    needed = []
    for name in schema_config.attributes:
        needed.append(schema_config.bins[name].source if name in schema_config.bins else name)
    needed += [schema_config.label] + list(schema_config.covariates)
    if schema_config.score:
        needed.append(schema_config.score)
    for column in needed:
        if column not in frame.columns:
            raise SchemaError(f"column {column!r} is missing from {path}", column)

    if len(frame) < 1:
        raise RecordValidationError(f"{path} has no data rows")

    used = frame[list(dict.fromkeys(needed))]
    empty = used.apply(lambda col: col.str.strip() == "")
    if empty.to_numpy().any():
        row, col = np.argwhere(empty.to_numpy())[0]
        raise RecordValidationError(
            f"row {row + 1}: missing value in column {used.columns[col]!r} (missing values are not imputed)",
            row=int(row) + 1,
        )

    labels_raw = _numeric_column(frame, schema_config.label, "label")
    bad_label = np.flatnonzero((labels_raw != 0) & (labels_raw != 1))
    if len(bad_label):
        row = int(bad_label[0])
        raise RecordValidationError(
            f"row {row + 1}: label must be 0 or 1, got {frame[schema_config.label].iloc[row]!r}", row=row + 1
        )

    scores = _numeric_column(frame, schema_config.score, "score") if schema_config.score else None
    covariates = np.column_stack(
        [_numeric_column(frame, name, "covariate") for name in schema_config.covariates]
    ) if schema_config.covariates else np.zeros((len(frame), 0))

    attributes = []
    codes = np.zeros((len(frame), len(schema_config.attributes)), dtype=np.int32)
    for j, name in enumerate(schema_config.attributes):
        if name in schema_config.bins:
            spec = schema_config.bins[name]
            values = _numeric_column(frame, spec.source, "bin source")
            position = np.searchsorted(np.asarray(spec.edges), values, side="right") - 1
            outside = np.flatnonzero((position < 0) | (position >= len(spec.labels)))
            if len(outside):
                row = int(outside[0])
                raise RecordValidationError(
                    f"row {row + 1}: {spec.source}={values[row]!r} lies outside the bin edges of {name!r}", row=row + 1
                )
            levels = schema_config.levels.get(name, spec.labels)
            label_codes = [levels.index(label) if label in levels else -1 for label in spec.labels]
            if -1 in label_codes:
                raise SchemaError(f"levels.{name} must list every bin label", name)
            codes[:, j] = np.asarray(label_codes)[position]
        else:
            column = frame[name].str.strip()
            levels = schema_config.levels.get(name) or tuple(sorted(column.unique()))
            lookup = {level: i for i, level in enumerate(levels)}
            mapped = column.map(lookup)
            unknown = np.flatnonzero(mapped.isna().to_numpy())
            if len(unknown):
                row = int(unknown[0])
                raise RecordValidationError(
                    f"row {row + 1}: {name}={column.iloc[row]!r} is not an allowed level", row=row + 1
                )
            codes[:, j] = mapped.to_numpy(dtype=np.int32)
        attributes.append((name, tuple(levels)))

    schema = Schema(attributes=tuple(attributes), covariates=tuple(schema_config.covariates))
    dataset = EvalDataset(schema=schema, codes=codes, covariates=covariates, labels=labels_raw.astype(np.int8), scores=scores)
    logger.info(f"Loaded {dataset.n} records from {path} ({len(attributes)} attributes, {len(schema.covariates)} covariates)")
    return dataset


# ==================== SUBPOPULATIONS ====================

def subset(d: EvalDataset, key: SubpopKey) -> EvalDataset:
    """Records matching every binding; may be empty"""
    if not key.bindings:
        return d
    return d.take(np.flatnonzero(d.mask(key)))


def enumerate_subpops(d: EvalDataset, attrs: Iterable[str]) -> List[Tuple[SubpopKey, int]]:
    """Non-empty cross-product cells, sorted by count then by level tuple"""
    attrs = list(attrs)
    for name in attrs:
        if not d.schema.has_attr(name):
            raise SubpopKeyError(f"Unknown attribute {name!r}")
    if not attrs:
        return [(SubpopKey(), d.n)] if d.n else []
    if d.n == 0:
        return []
    columns = [d.schema.attr_index(name) for name in attrs]
    cells, counts = np.unique(d.codes[:, columns], axis=0, return_counts=True)
    entries = []
    for cell, count in zip(cells, counts):
        levels = tuple(d.schema.levels(name)[code] for name, code in zip(attrs, cell))
        entries.append((int(count), levels, SubpopKey.of(dict(zip(attrs, levels)))))
    entries.sort(key=lambda e: (e[0], e[1]))
    return [(key, count) for count, _, key in entries]


def cell_index(d: EvalDataset, attrs: Sequence[str]) -> Tuple[np.ndarray, List[SubpopKey]]:
    """Per-row cell id over attrs (ids follow the order of the returned keys)"""
    if not attrs:
        return np.zeros(d.n, dtype=np.int64), [SubpopKey()]
    columns = [d.schema.attr_index(name) for name in attrs]
    cells, inverse = np.unique(d.codes[:, columns], axis=0, return_inverse=True)
    keys = [
        SubpopKey.of({name: d.schema.levels(name)[code] for name, code in zip(attrs, cell)})
        for cell in cells
    ]
    return np.asarray(inverse).reshape(-1), keys
