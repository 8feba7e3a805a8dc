"""
Evaluation-model formula language and design matrices

Grammar (whitespace-insensitive):
    formula   := response '~' rhs [(';' | newline) 'sigma' '~' rhs]
    rhs       := term ('+' term)*
    term      := '1' | '0' | name [':' name] | '(' names ')' ['^' k] | '(' '1' '|' groups ')'
    groups    := group ('+' group)*
    group     := name [':' name] | '(' names ')' ['^' k]
    names     := name ('+' name)*          k in {1, 2}

`(a+b+c)^2` expands to the mains a, b, c followed by the pairs a:b, a:c, b:c.
`(1 | (a+b)^2)` gives one random-intercept group per main and per pair.
`Y` is the reserved name of the binary label.
"""

import hashlib
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dataset import EvalDataset, EvalRecord, Schema
from errors import FormulaSyntaxError, NameResolutionError, UnsupportedConstructError

LABEL_NAME = "Y"
LABEL_LEVELS = ("0", "1")
MAX_INTERACTION_ORDER = 2


@dataclass(frozen=True)
class PriorConfig:
    """Prior scales (all > 0); group and residual scales use half-Student-t(3)"""
    fixed_coef_sd: float = 5.0
    intercept_sd: float = 5.0
    group_sd_scale: float = 2.5
    resid_sd_scale: float = 2.5
    sigma_coef_sd: float = 1.0
    df: float = 3.0

    def __post_init__(self):
        for name in ("fixed_coef_sd", "intercept_sd", "group_sd_scale", "resid_sd_scale", "sigma_coef_sd", "df"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PriorConfig.{name} must be positive")


class TermKind(Enum):
    INTERCEPT = "intercept"
    FACTOR = "factor"
    COVARIATE = "covariate"
    INTERACTION = "interaction"
    GROUP = "group"


@dataclass(frozen=True)
class Term:
    kind: TermKind
    factors: Tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.factors) > MAX_INTERACTION_ORDER:
            raise UnsupportedConstructError("interactions above order 2 are not supported", 0)

    @property
    def name(self) -> str:
        if self.kind is TermKind.INTERCEPT:
            return "1"
        joined = ":".join(self.factors)
        if self.kind is TermKind.GROUP:
            return f"(1 | {joined})"
        return joined

    @property
    def order(self) -> int:
        return len(self.factors)


@dataclass(frozen=True)
class ModelSpec:
    response: str = "S"
    mean_terms: Tuple[Term, ...] = ()
    intercept: bool = True
    sigma_terms: Optional[Tuple[Term, ...]] = None
    sigma_intercept: bool = True
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if not self.mean_terms and not self.intercept:
            raise FormulaSyntaxError("a model needs at least one mean term or an intercept", 0)
        if self.sigma_terms is not None and not self.sigma_terms and not self.sigma_intercept:
            raise FormulaSyntaxError("a sigma formula needs at least one term or an intercept", 0)

    @property
    def random_groups(self) -> Tuple[Term, ...]:
        return tuple(t for t in self.mean_terms if t.kind is TermKind.GROUP)

    @property
    def sigma_random_groups(self) -> Tuple[Term, ...]:
        return tuple(t for t in (self.sigma_terms or ()) if t.kind is TermKind.GROUP)

    @property
    def is_random_effects(self) -> bool:
        return bool(self.random_groups or self.sigma_random_groups)

    @property
    def is_heteroscedastic(self) -> bool:
        return self.sigma_terms is not None

    @property
    def interaction_order(self) -> int:
        orders = [t.order for t in (self.mean_terms + (self.sigma_terms or ())) if t.kind is not TermKind.INTERCEPT]
        return max(orders, default=0)

    def with_prior(self, prior: PriorConfig) -> "ModelSpec":
        return replace(self, prior=prior)

    def fingerprint(self) -> str:
        text = format_formula(self) + "|" + repr(self.prior)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# ==================== TOKENIZER ====================

_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_.]*)|(?P<num>\d+)|(?P<sym>[~+()^|:;\n]))")


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos] in " \t\r":
            pos += 1
            continue
        match = _TOKEN.match(text, pos)
        if not match or match.end() == pos:
            raise FormulaSyntaxError(f"unknown operator {text[pos]!r}", pos)
        kind = match.lastgroup
        value = match.group(kind)
        start = match.start(kind)
        tokens.append((kind, value, start))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive descent over one formula (response ~ rhs)"""

    def __init__(self, tokens: List[Tuple[str, str, int]]):
        self.tokens = tokens
        self.i = 0

    def peek(self, offset: int = 0):
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def next(self):
        token = self.tokens[self.i]
        self.i += 1
        return token

    def expect(self, value: str):
        kind, got, pos = self.next()
        if got != value:
            shown = got if kind != "end" else "end of formula"
            raise FormulaSyntaxError(f"expected {value!r} but found {shown!r}", pos)

    def name(self) -> str:
        kind, value, pos = self.next()
        if kind != "name":
            shown = value if kind != "end" else "end of formula"
            raise FormulaSyntaxError(f"expected a variable name but found {shown!r}", pos)
        return value

    def exponent(self) -> int:
        if self.peek()[1] != "^":
            return 1
        self.next()
        kind, value, pos = self.next()
        if kind != "num":
            raise FormulaSyntaxError("expected an integer after '^'", pos)
        k = int(value)
        if k < 1:
            raise FormulaSyntaxError("interaction order must be at least 1", pos)
        if k > MAX_INTERACTION_ORDER:
            raise UnsupportedConstructError("interactions above order 2 are not supported", pos)
        return k

    def name_or_pair(self) -> Tuple[str, ...]:
        first = self.name()
        if self.peek()[1] == ":":
            self.next()
            second = self.name()
            if self.peek()[1] == ":":
                raise UnsupportedConstructError("three-way interactions are not supported", self.peek()[2])
            return (first, second)
        return (first,)

    def name_block(self) -> List[Tuple[str, ...]]:
        """'(' names ')' ['^' k], already past '('"""
        names = [self.name()]
        while self.peek()[1] == "+":
            self.next()
            names.append(self.name())
        if self.peek()[1] == "|":
            raise UnsupportedConstructError("nested '|' is not supported", self.peek()[2])
        self.expect(")")
        order = self.exponent()
        expanded = [(n,) for n in names]
        if order == 2:
            expanded += [pair for pair in combinations(names, 2)]
        return expanded

    def group(self) -> List[Tuple[str, ...]]:
        kind, value, pos = self.peek()
        if value == "(":
            self.next()
            if self.peek()[0] == "num" and self.peek(1)[1] == "|":
                raise UnsupportedConstructError("nested '|' is not supported", self.peek(1)[2])
            return self.name_block()
        return [self.name_or_pair()]

    def random_block(self) -> List[Term]:
        """'(' '1' '|' groups ')', already past '('"""
        self.next()  # '1'
        self.expect("|")
        groups = self.group()
        while self.peek()[1] == "+":
            self.next()
            groups += self.group()
        if self.peek()[1] == "|":
            raise UnsupportedConstructError("nested '|' is not supported", self.peek()[2])
        self.expect(")")
        return [Term(TermKind.GROUP, g) for g in groups]

    def rhs(self) -> Tuple[List[Term], bool]:
        terms: List[Term] = []
        intercept = True
        while True:
            kind, value, pos = self.peek()
            if kind == "num":
                self.next()
                if value == "1":
                    intercept = True
                elif value == "0":
                    intercept = False
                else:
                    raise FormulaSyntaxError(f"unexpected number {value!r}", pos)
            elif kind == "name":
                factors = self.name_or_pair()
                terms.append(Term(TermKind.INTERACTION if len(factors) == 2 else TermKind.FACTOR, factors))
            elif value == "(":
                self.next()
                if self.peek()[0] == "num" and self.peek()[1] == "1" and self.peek(1)[1] == "|":
                    terms += self.random_block()
                else:
                    for factors in self.name_block():
                        terms.append(Term(TermKind.INTERACTION if len(factors) == 2 else TermKind.FACTOR, factors))
            elif value == "|":
                raise UnsupportedConstructError("'|' is only allowed inside (1 | ...)", pos)
            else:
                shown = value if kind != "end" else "end of formula"
                raise FormulaSyntaxError(f"expected a term but found {shown!r}", pos)

            if self.peek()[1] == "+":
                self.next()
                continue
            break
        # duplicates collapse to their first occurrence
        unique = list(dict.fromkeys(terms))
        return unique, intercept

    def formula(self) -> Tuple[str, List[Term], bool]:
        response = self.name()
        self.expect("~")
        terms, intercept = self.rhs()
        return response, terms, intercept


def _parse_one(text: str, offset: int) -> Tuple[str, List[Term], bool]:
    tokens = [(k, v, p + offset) for k, v, p in _tokenize(text)]
    parser = _Parser(tokens)
    result = parser.formula()
    kind, value, pos = parser.peek()
    if kind != "end":
        raise FormulaSyntaxError(f"unexpected {value!r} after the formula", pos)
    return result


def parse_formula(text: str, sigma: Optional[str] = None, prior: Optional[PriorConfig] = None) -> ModelSpec:
    """
    Parse `response ~ rhs`, optionally followed by `; sigma ~ rhs` (or passed as `sigma`).
    Errors carry the character position within `text`.
    """
    parts = []
    start = 0
    for i, ch in enumerate(text + ";"):
        if ch in ";\n":
            if text[start:i].strip():
                parts.append((text[start:i], start))
            start = i + 1
    if not parts:
        raise FormulaSyntaxError("empty formula", 0)
    if len(parts) > 2:
        raise FormulaSyntaxError("at most a mean formula and a sigma formula are allowed", parts[2][1])

    response, mean_terms, intercept = _parse_one(*parts[0])
    if response == "sigma":
        raise FormulaSyntaxError("the first formula must model the score, not sigma", parts[0][1])

    sigma_parsed = None
    if len(parts) == 2:
        if sigma:
            raise FormulaSyntaxError("sigma formula given twice", parts[1][1])
        sigma_parsed = _parse_one(*parts[1])
    elif sigma and sigma.strip():
        sigma_parsed = _parse_one(sigma, 0)

    sigma_terms = None
    sigma_intercept = True
    if sigma_parsed is not None:
        sigma_response, sigma_terms_list, sigma_intercept = sigma_parsed
        if sigma_response != "sigma":
            raise FormulaSyntaxError("the second formula must be 'sigma ~ ...'", 0)
        sigma_terms = tuple(sigma_terms_list)

    return ModelSpec(
        response=response,
        mean_terms=tuple(mean_terms),
        intercept=intercept,
        sigma_terms=sigma_terms,
        sigma_intercept=sigma_intercept,
        prior=prior or PriorConfig(),
    )


def _format_rhs(terms: Sequence[Term], intercept: bool) -> str:
    pieces = [] if intercept else ["0"]
    pieces += [t.name for t in terms]
    return " + ".join(pieces) if pieces else "1"


def format_formula(spec: ModelSpec) -> str:
    """Print a spec so that parse_formula(format_formula(spec)) == spec (terms stay expanded)"""
    text = f"{spec.response} ~ {_format_rhs(spec.mean_terms, spec.intercept)}"
    if spec.sigma_terms is not None:
        text += f"; sigma ~ {_format_rhs(spec.sigma_terms, spec.sigma_intercept)}"
    return text


# ==================== NAMED MODELS ====================

REFERENCE_MODEL_NAMES = ("fixed.a", "fixed.b", "fixed.c", "fixed.d", "rand.a", "rand.b")

def reference_models(attributes: Sequence[str], covariates: Sequence[str]) -> Dict[str, str]:
    """The six reference evaluation models over the given demographics and covariates"""
    demo = " + ".join(list(attributes) + [LABEL_NAME])
    covs = "".join(f" + {c}" for c in covariates)
    sigma_fixed = f"sigma ~ {demo}"
    sigma_random = f"sigma ~ (1 | ({demo})^2)"
    return {
        "fixed.a": f"S ~ {demo}",
        "fixed.b": f"S ~ {demo}{covs}",
        "fixed.c": f"S ~ ({demo})^2{covs}",
        "fixed.d": f"S ~ ({demo})^2{covs}; {sigma_fixed}",
        "rand.a": f"S ~ (1 | ({demo})^2){covs}",
        "rand.b": f"S ~ (1 | ({demo})^2){covs}; {sigma_random}",
    }


# ==================== DESIGN MATRICES ====================

@dataclass(frozen=True)
class DesignMatrix:
    """N x P matrix; group_index maps random-intercept column -> group id"""
    values: np.ndarray
    column_names: Tuple[str, ...]
    group_index: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2 or values.shape[1] != len(self.column_names):
            raise ValueError("design values and column names disagree")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def fixed_columns(self) -> np.ndarray:
        return np.array([j for j in range(self.n_cols) if j not in self.group_index], dtype=np.int64)

    @property
    def random_columns(self) -> np.ndarray:
        return np.array(sorted(self.group_index), dtype=np.int64)

    @property
    def groups(self) -> Tuple[str, ...]:
        """Group ids in column order"""
        return tuple(dict.fromkeys(self.group_index[j] for j in sorted(self.group_index)))

    def group_sizes(self) -> Tuple[int, ...]:
        counts: Dict[str, int] = {}
        for j in sorted(self.group_index):
            counts[self.group_index[j]] = counts.get(self.group_index[j], 0) + 1
        return tuple(counts[g] for g in self.groups)

    @property
    def fixed(self) -> np.ndarray:
        return self.values[:, self.fixed_columns]

    @property
    def random(self) -> np.ndarray:
        return self.values[:, self.random_columns]

    @property
    def fixed_names(self) -> Tuple[str, ...]:
        return tuple(self.column_names[j] for j in self.fixed_columns)

    @property
    def random_names(self) -> Tuple[str, ...]:
        return tuple(self.column_names[j] for j in self.random_columns)

    @property
    def random_group_of_column(self) -> np.ndarray:
        """Group position (0..G-1) for each random column, in column order"""
        order = {g: i for i, g in enumerate(self.groups)}
        return np.array([order[self.group_index[j]] for j in sorted(self.group_index)], dtype=np.int64)


def _factor(name: str, d: EvalDataset) -> Tuple[np.ndarray, Tuple[str, ...]]:
    if name == LABEL_NAME:
        return d.labels.astype(np.int64), LABEL_LEVELS
    if d.schema.has_attr(name):
        return d.codes[:, d.schema.attr_index(name)].astype(np.int64), d.schema.levels(name)
    if name in d.schema.covariates:
        raise NameResolutionError(f"{name!r} is a continuous covariate and cannot be used as a factor")
    raise NameResolutionError(f"{name!r} is not an attribute, covariate, or {LABEL_NAME}")


def resolve_terms(terms: Sequence[Term], schema: Schema) -> Tuple[Term, ...]:
    """Classify single names as categorical factors or continuous covariates"""
    resolved = []
    for term in terms:
        for name in term.factors:
            if name != LABEL_NAME and not schema.has_attr(name) and name not in schema.covariates:
                raise NameResolutionError(f"{name!r} is not an attribute, covariate, or {LABEL_NAME}")
        if term.kind is TermKind.FACTOR and term.factors[0] in schema.covariates:
            resolved.append(Term(TermKind.COVARIATE, term.factors))
        else:
            if term.kind in (TermKind.INTERACTION, TermKind.GROUP):
                for name in term.factors:
                    if name in schema.covariates:
                        raise NameResolutionError(f"{name!r} is a continuous covariate; only categorical factors can be crossed or grouped")
            resolved.append(term)
    return tuple(resolved)


def _build(terms: Sequence[Term], intercept: bool, d: EvalDataset) -> DesignMatrix:
    columns: List[np.ndarray] = []
    names: List[str] = []
    group_index: Dict[int, str] = {}
    if intercept:
        columns.append(np.ones(d.n))
        names.append("Intercept")

    for term in resolve_terms(terms, d.schema):
        if term.kind is TermKind.COVARIATE:
            columns.append(d.covariates[:, d.schema.covariates.index(term.factors[0])])
            names.append(term.factors[0])
        elif term.kind is TermKind.FACTOR:
            codes, levels = _factor(term.factors[0], d)
            for k in range(1, len(levels)):
                columns.append((codes == k).astype(float))
                names.append(f"{term.factors[0]}[{levels[k]}]")
        elif term.kind is TermKind.INTERACTION:
            (ca, la), (cb, lb) = _factor(term.factors[0], d), _factor(term.factors[1], d)
            for i in range(1, len(la)):
                for j in range(1, len(lb)):
                    columns.append(((ca == i) & (cb == j)).astype(float))
                    names.append(f"{term.factors[0]}[{la[i]}]:{term.factors[1]}[{lb[j]}]")
        elif term.kind is TermKind.GROUP:
            group = ":".join(term.factors)
            if len(term.factors) == 1:
                codes, levels = _factor(term.factors[0], d)
                for k, level in enumerate(levels):
                    group_index[len(columns)] = group
                    columns.append((codes == k).astype(float))
                    names.append(f"(1|{group})[{level}]")
            else:
                (ca, la), (cb, lb) = _factor(term.factors[0], d), _factor(term.factors[1], d)
                for i, level_a in enumerate(la):
                    for j, level_b in enumerate(lb):
                        group_index[len(columns)] = group
                        columns.append(((ca == i) & (cb == j)).astype(float))
                        names.append(f"(1|{group})[{level_a},{level_b}]")

    values = np.column_stack(columns) if columns else np.zeros((d.n, 0))
    return DesignMatrix(values=values.reshape(d.n, len(names)), column_names=tuple(names), group_index=group_index)


def build_design(spec: ModelSpec, d: EvalDataset) -> Tuple[DesignMatrix, Optional[DesignMatrix]]:
    """Mean design and (for heteroscedastic specs) the log-sigma design"""
    mean = _build(spec.mean_terms, spec.intercept, d)
    sigma = _build(spec.sigma_terms, spec.sigma_intercept, d) if spec.sigma_terms is not None else None
    return mean, sigma


def predict_design_row(spec: ModelSpec, record: EvalRecord, schema: Schema) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Design row(s) for a single (possibly unscored) record, same column layout as build_design"""
    one = EvalDataset.from_records([replace(record, score=None)], schema=schema)
    mean, sigma = build_design(spec, one)
    return mean.values[0], None if sigma is None else sigma.values[0]
