"""Tabular data handling: schema, loading, cleaning, question framing and encoding.

Tables are stored column-wise for speed. A cell is held as a float: numeric
features keep their value (NaN marks a null), categorical features keep the
index of the category in the feature's vocabulary (-1 marks a null). Public
accessors translate back to display values (floats and category strings).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"

ONE_HOT = "one_hot"
ORDINAL = "ordinal"


class SchemaError(ValueError):
    """A table or row does not conform to its declared schema."""


@dataclass(frozen=True)
class FeatureMeta:
    """Description of one column: raw-file name, display name, kind and vocabulary."""

    source_name: str
    display_name: str
    kind: str
    categories: tuple[str, ...] = ()
    plausible_range: Optional[tuple[float, float]] = None
    description: str = ""

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise SchemaError(f"unknown feature kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.categories:
                raise SchemaError(f"{self.display_name}: categorical feature needs categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"{self.display_name}: duplicate categories")
        elif self.categories:
            raise SchemaError(f"{self.display_name}: numeric feature must not list categories")

    @property
    def is_numeric(self) -> bool:
        return self.kind == NUMERIC

    def code_of(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise SchemaError(f"{self.display_name}: unknown category {category!r}") from None


def validate_schema(schema: Sequence[FeatureMeta]) -> None:
    names = [f.display_name for f in schema]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate display names in schema")


def schema_hash(schema: Sequence[FeatureMeta]) -> str:
    """Stable hex digest of a schema, used to pin encodings and model bundles."""
    payload = [
        [f.source_name, f.display_name, f.kind, list(f.categories), f.plausible_range]
        for f in schema
    ]
    blob = json.dumps(payload, sort_keys=False).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class RawTable:
    """Possibly-null tabular data aligned to a schema.

    Columns are float arrays keyed by display name; see the module docstring
    for the cell conventions.
    """

    def __init__(self, schema: Sequence[FeatureMeta], columns: Mapping[str, np.ndarray]):
        validate_schema(schema)
        self.schema = list(schema)
        self.columns = {}
        n = None
        for f in self.schema:
            if f.display_name not in columns:
                raise SchemaError(f"missing column {f.display_name!r}")
            col = np.asarray(columns[f.display_name], dtype=float)
            if n is None:
                n = col.shape[0]
            elif col.shape[0] != n:
                raise SchemaError("ragged columns")
            self.columns[f.display_name] = col
        self.n_rows = 0 if n is None else int(n)

    @classmethod
    def from_rows(cls, schema: Sequence[FeatureMeta], rows: Sequence[Mapping[str, object]]) -> "RawTable":
        cols = {f.display_name: np.full(len(rows), np.nan) for f in schema}
        for f in schema:
            col = cols[f.display_name]
            for i, row in enumerate(rows):
                col[i] = cell_to_code(f, row.get(f.display_name))
            if not f.is_numeric:
                col[np.isnan(col)] = -1.0
        return cls(schema, cols)

    def feature(self, display_name: str) -> FeatureMeta:
        for f in self.schema:
            if f.display_name == display_name:
                return f
        raise SchemaError(f"no feature named {display_name!r}")

    def cell(self, i: int, display_name: str):
        return code_to_cell(self.feature(display_name), self.columns[display_name][i])

    def row(self, i: int) -> dict:
        return {f.display_name: code_to_cell(f, self.columns[f.display_name][i]) for f in self.schema}

    def iter_rows(self) -> Iterator[dict]:
        for i in range(self.n_rows):
            yield self.row(i)

    def take(self, mask_or_idx: np.ndarray) -> "RawTable":
        cols = {name: col[mask_or_idx] for name, col in self.columns.items()}
        return RawTable(self.schema, cols)

    def null_mask(self) -> np.ndarray:
        """Boolean (n, M) matrix marking null cells, columns in schema order."""
        out = np.zeros((self.n_rows, len(self.schema)), dtype=bool)
        for j, f in enumerate(self.schema):
            col = self.columns[f.display_name]
            out[:, j] = np.isnan(col) if f.is_numeric else (col < 0)
        return out


def cell_to_code(meta: FeatureMeta, value) -> float:
    """Translate a display cell (None / float / category text) to its float code."""
    if value is None:
        return np.nan if meta.is_numeric else -1.0
    if meta.is_numeric:
        return float(value)
    return float(meta.code_of(str(value)))


def code_to_cell(meta: FeatureMeta, code: float):
    if meta.is_numeric:
        return None if np.isnan(code) else float(code)
    idx = int(code)
    return None if idx < 0 else meta.categories[idx]


def load_csv(path, schema: Sequence[FeatureMeta]) -> RawTable:
    """Read a comma-separated file into a RawTable restricted to `schema`.

    The first line is a header whose names must cover every schema
    source_name (order-independent; extra columns are ignored). Empty fields,
    unparseable numeric cells and unknown categorical tokens all become null.
    """
    validate_schema(schema)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header expected") from None
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise SchemaError(f"{path}: duplicate header names {dupes}")
        positions = {}
        for f in schema:
            if f.source_name not in header:
                raise SchemaError(f"{path}: header is missing column {f.source_name!r}")
            positions[f.display_name] = header.index(f.source_name)

        raw_rows = list(reader)

    n = len(raw_rows)
    cols = {f.display_name: np.full(n, np.nan) for f in schema}
    cat_lookup = {
        f.display_name: {c: float(i) for i, c in enumerate(f.categories)}
        for f in schema
        if not f.is_numeric
    }
    for i, line in enumerate(raw_rows):
        for f in schema:
            pos = positions[f.display_name]
            token = line[pos].strip() if pos < len(line) else ""
            if token == "":
                cols[f.display_name][i] = np.nan if f.is_numeric else -1.0
            elif f.is_numeric:
                try:
                    cols[f.display_name][i] = float(token)
                except ValueError:
                    cols[f.display_name][i] = np.nan
            else:
                cols[f.display_name][i] = cat_lookup[f.display_name].get(token, -1.0)
    for f in schema:
        if not f.is_numeric:
            col = cols[f.display_name]
            col[np.isnan(col)] = -1.0
    return RawTable(schema, cols)


# ---------------------------------------------------------------------------
# Cleaning


@dataclass(frozen=True)
class CleaningRules:
    """Declarative row-rejection rules.

    require_present: features whose null forces a drop.
    enforce_ranges:  drop numeric cells outside the schema's plausible_range.
    forbidden_combos: conjunctions of categorical equalities that are
        logically inconsistent (a row matching every clause is dropped).
    """

    require_present: tuple[str, ...] = ()
    enforce_ranges: bool = True
    forbidden_combos: tuple[Mapping[str, str], ...] = ()


@dataclass
class CleanResult:
    table: RawTable
    dropped: dict[str, int] = field(default_factory=dict)


def clean(raw: RawTable, rules: CleaningRules) -> CleanResult:
    """Drop rows violating the rules; order preserved, drop counts reported.

    A row is counted under the first rule (in declaration order) that
    rejects it. Idempotent: cleaning a cleaned table drops nothing.
    """
    names = {f.display_name for f in raw.schema}
    for name in rules.require_present:
        if name not in names:
            raise SchemaError(f"cleaning rule references unknown feature {name!r}")
    for combo in rules.forbidden_combos:
        for name in combo:
            if name not in names:
                raise SchemaError(f"cleaning rule references unknown feature {name!r}")

    keep = np.ones(raw.n_rows, dtype=bool)
    dropped: dict[str, int] = {}

    def reject(mask: np.ndarray, rule_name: str):
        hit = mask & keep
        count = int(hit.sum())
        if count:
            dropped[rule_name] = count
        keep[hit] = False

    for name in rules.require_present:
        f = raw.feature(name)
        col = raw.columns[name]
        nulls = np.isnan(col) if f.is_numeric else (col < 0)
        reject(nulls, f"null:{name}")

    if rules.enforce_ranges:
        for f in raw.schema:
            if f.is_numeric and f.plausible_range is not None:
                lo, hi = f.plausible_range
                col = raw.columns[f.display_name]
                with np.errstate(invalid="ignore"):
                    out = (col < lo) | (col > hi)
                reject(out & ~np.isnan(col), f"range:{f.display_name}")

    for k, combo in enumerate(rules.forbidden_combos):
        mask = np.ones(raw.n_rows, dtype=bool)
        for name, category in combo.items():
            f = raw.feature(name)
            mask &= raw.columns[name] == float(f.code_of(category))
        label = " & ".join(f"{n}={v}" for n, v in combo.items())
        reject(mask, f"combo:{label}")

    return CleanResult(raw.take(keep), dropped)


# ---------------------------------------------------------------------------
# Question framing


@dataclass(frozen=True)
class CohortFilter:
    """Keep rows whose categorical `feature` value is in `allowed`."""

    feature: str
    allowed: tuple[str, ...]


@dataclass(frozen=True)
class QuestionSpec:
    """One binary prediction task framed over the master table."""

    id: str
    target_feature: str
    positive_label: str
    excluded_features: frozenset[str]
    cohort_filter: Optional[CohortFilter] = None

    def __post_init__(self):
        if self.id not in ("DA", "LC-DA", "MD", "LC-MD"):
            raise SchemaError(f"unknown question id {self.id!r}")
        if self.target_feature not in self.excluded_features:
            raise SchemaError("target_feature must be excluded from inputs")


class Dataset:
    """Fully materialized inputs + binary target for one question.

    X holds one float code per (row, input feature); y is 0/1.
    """

    def __init__(
        self,
        features: Sequence[FeatureMeta],
        X: np.ndarray,
        y: np.ndarray,
        question: QuestionSpec,
        provenance_seed: int,
    ):
        validate_schema(features)
        self.features = list(features)
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=np.int8)
        self.question = question
        self.provenance_seed = int(provenance_seed)
        if self.X.shape != (len(self.y), len(self.features)):
            raise SchemaError("X shape does not match rows/features")
        excluded = question.excluded_features
        for f in self.features:
            if f.display_name in excluded:
                raise SchemaError(f"excluded feature {f.display_name!r} present in inputs")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def record(self, i: int) -> dict:
        return {
            f.display_name: code_to_cell(f, self.X[i, j]) for j, f in enumerate(self.features)
        }

    def codes_of(self, record: Mapping[str, object]) -> np.ndarray:
        return np.array(
            [cell_to_code(f, record[f.display_name]) for f in self.features], dtype=float
        )

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features, self.X[idx], self.y[idx], self.question, self.provenance_seed)

    def class_counts(self) -> tuple[int, int]:
        return int((self.y == 0).sum()), int((self.y == 1).sum())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(schema_hash(self.features).encode())
        h.update(self.X.tobytes())
        h.update(self.y.tobytes())
        return h.hexdigest()[:16]


def make_question_dataset(raw: RawTable, q: QuestionSpec, provenance_seed: int = 0) -> Dataset:
    """Frame a cleaned master table as one binary question.

    Applies the cohort filter, binarizes the target (positive_label -> 1) and
    removes the target plus every excluded feature from the inputs.
    """
    target_meta = raw.feature(q.target_feature)
    if target_meta.is_numeric:
        raise SchemaError(f"target {q.target_feature!r} must be categorical")

    keep = np.ones(raw.n_rows, dtype=bool)
    if q.cohort_filter is not None:
        cf = q.cohort_filter
        meta = raw.feature(cf.feature)
        codes = {float(meta.code_of(c)) for c in cf.allowed}
        keep = np.isin(raw.columns[cf.feature], sorted(codes))
        if not keep.any():
            raise ValueError(f"{q.id}: cohort filter removes every row")

    target_col = raw.columns[q.target_feature][keep]
    observed = np.unique(target_col[target_col >= 0])
    if len(observed) != 2:
        raise ValueError(
            f"{q.id}: target {q.target_feature!r} has {len(observed)} observed categories, need 2"
        )
    pos_code = float(target_meta.code_of(q.positive_label))
    if pos_code not in observed:
        raise ValueError(f"{q.id}: positive label {q.positive_label!r} not observed")
    if (target_col < 0).any():
        raise ValueError(f"{q.id}: target contains nulls; clean the table first")

    features = [f for f in raw.schema if f.display_name not in q.excluded_features]
    X = np.column_stack([raw.columns[f.display_name][keep] for f in features])
    nulls = np.zeros(X.shape[0], dtype=bool)
    for j, f in enumerate(features):
        nulls |= np.isnan(X[:, j]) if f.is_numeric else (X[:, j] < 0)
    if nulls.any():
        raise ValueError(f"{q.id}: {int(nulls.sum())} rows still hold nulls; clean the table first")

    y = (target_col == pos_code).astype(np.int8)
    return Dataset(features, X, y, q, provenance_seed)


# ---------------------------------------------------------------------------
# Balancing and splitting


def balance(d: Dataset, cap: Optional[int], seed: int) -> Dataset:
    """Downsample to equal class counts, optionally capped per class.

    The majority class is uniformly downsampled (without replacement) to
    min(minority_count, cap); the minority class is downsampled only when the
    cap is below its count. Selected rows keep their original order.
    """
    idx0 = np.flatnonzero(d.y == 0)
    idx1 = np.flatnonzero(d.y == 1)
    if len(idx0) == 0 or len(idx1) == 0:
        raise ValueError("balance: one class is empty")
    target = min(len(idx0), len(idx1))
    if cap is not None:
        target = min(target, int(cap))
    rng = np.random.default_rng(seed)
    chosen = []
    for idx in (idx0, idx1):
        if len(idx) > target:
            idx = rng.choice(idx, size=target, replace=False)
        chosen.append(np.sort(idx))
    keep = np.sort(np.concatenate(chosen))
    return d.subset(keep)


def split(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified train/test split; the test row order is the recorded order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if d.n_rows < 2:
        raise ValueError("split needs at least 2 rows")
    rng = np.random.default_rng(seed)
    test_parts = []
    train_parts = []
    for cls in (0, 1):
        idx = np.flatnonzero(d.y == cls)
        if len(idx) == 0:
            continue
        perm = rng.permutation(idx)
        n_test = int(round(test_fraction * len(idx)))
        test_parts.append(perm[:n_test])
        train_parts.append(perm[n_test:])
    test_idx = np.concatenate(test_parts)
    train_idx = np.concatenate(train_parts)
    if len(test_idx) == 0 or len(train_idx) == 0:
        raise ValueError("split fraction yields an empty side")
    # Mix classes so "the first k test rows" is a class-balanced prefix.
    rng.shuffle(test_idx)
    train_idx = np.sort(train_idx)
    return d.subset(train_idx), d.subset(test_idx)


# ---------------------------------------------------------------------------
# Encoding


def encoded_width(features: Sequence[FeatureMeta], strategy: str) -> int:
    if strategy == ONE_HOT:
        return sum(1 if f.is_numeric else len(f.categories) for f in features)
    if strategy == ORDINAL:
        return len(features)
    raise SchemaError(f"unknown encoding strategy {strategy!r}")


def encoded_column_names(features: Sequence[FeatureMeta], strategy: str) -> list[str]:
    names = []
    for f in features:
        if strategy == ORDINAL or f.is_numeric:
            names.append(f.display_name)
        else:
            names.extend(f"{f.display_name}={c}" for c in f.categories)
    return names


def encode(features: Sequence[FeatureMeta], row: Mapping[str, object], strategy: str) -> np.ndarray:
    """Encode one display record into a real vector.

    one_hot: numeric passthrough plus one indicator per category; ordinal:
    numeric passthrough plus the category index. Column layout is fixed by
    schema order, then category order.
    """
    codes = np.array([cell_to_code(f, row[f.display_name]) for f in features], dtype=float)
    return encode_codes(features, codes[None, :], strategy)[0]


def encode_codes(features: Sequence[FeatureMeta], X: np.ndarray, strategy: str) -> np.ndarray:
    """Vectorized encoding of a (n, M) code matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(features):
        raise SchemaError("code matrix width does not match features")
    if strategy == ORDINAL:
        return X.copy()
    if strategy != ONE_HOT:
        raise SchemaError(f"unknown encoding strategy {strategy!r}")
    blocks = []
    for j, f in enumerate(features):
        col = X[:, j]
        if f.is_numeric:
            blocks.append(col[:, None])
        else:
            k = len(f.categories)
            idx = col.astype(int)
            if ((idx < 0) | (idx >= k) | (idx != col)).any():
                raise SchemaError(f"{f.display_name}: out-of-vocabulary category code")
            hot = np.zeros((X.shape[0], k))
            hot[np.arange(X.shape[0]), idx] = 1.0
            blocks.append(hot)
    return np.concatenate(blocks, axis=1)
