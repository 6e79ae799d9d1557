"""Tabular data, model formulas and design matrices.

A :class:`DataTable` is a small immutable columnar table read from CSV.
:func:`parse_formula` understands the restricted R-style grammar
``response ~ term (+ term | - term)*`` where a term is a column name or
``.`` (all remaining columns). :func:`build_design` turns a table into a
standardized, one-hot encoded design matrix and returns the fitted
:class:`Encoder`, which :func:`apply_encoder` replays on new data.
"""

from __future__ import annotations

import csv
import io
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ColumnTypeMismatch,
    CsvError,
    EmptyPredictorSet,
    EmptyResponse,
    EmptyRhs,
    InvalidIdentifier,
    MinusWithoutDot,
    MissingTilde,
    MissingValues,
    ResponseIsExcluded,
    UnknownColumn,
    UnseenLevel,
)

_DECIMAL = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_IDENT = re.compile(r"^[A-Za-z0-9_.]+$")


# ---------------------------------------------------------------------------
# Columns and tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NumericColumn:
    values: np.ndarray  # float64, NaN marks a missing cell

    kind = "numeric"

    def __len__(self):
        return len(self.values)

    def take(self, idx):
        return NumericColumn(self.values[idx])

    def is_missing(self):
        return np.isnan(self.values)

    def cell_text(self, i):
        v = self.values[i]
        return "" if np.isnan(v) else repr(float(v))


@dataclass(frozen=True)
class CategoricalColumn:
    codes: np.ndarray  # int64 index into levels, -1 marks a missing cell
    levels: tuple

    kind = "categorical"

    def __post_init__(self):
        if len(set(self.levels)) != len(self.levels):
            raise ValueError("categorical levels must be unique")

    def __len__(self):
        return len(self.codes)

    def take(self, idx):
        return CategoricalColumn(self.codes[idx], self.levels)

    def is_missing(self):
        return self.codes < 0

    def cell_text(self, i):
        c = self.codes[i]
        return "" if c < 0 else self.levels[c]

    def labels(self):
        lv = np.array(self.levels + ("",), dtype=object)
        return lv[self.codes]


def categorical_from_strings(cells: Sequence[str]) -> CategoricalColumn:
    levels = tuple(sorted({c for c in cells if c != ""}))
    lookup = {lv: i for i, lv in enumerate(levels)}
    codes = np.array([lookup[c] if c != "" else -1 for c in cells], dtype=np.int64)
    return CategoricalColumn(codes, levels)


def numeric_from_strings(cells: Sequence[str]) -> NumericColumn:
    return NumericColumn(
        np.array([float(c) if c != "" else np.nan for c in cells], dtype=np.float64)
    )


@dataclass(frozen=True)
class DataTable:
    """Immutable columnar table of numeric and categorical columns."""

    column_names: tuple
    columns: tuple

    def __post_init__(self):
        names = tuple(self.column_names)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "columns", tuple(self.columns))
        if len(names) != len(self.columns):
            raise ValueError("one name per column required")
        if any(not n for n in names):
            raise ValueError("column names must be non-empty")
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate column names: {dup}")
        lengths = {len(c) for c in self.columns}
        if len(lengths) > 1:
            raise ValueError("all columns must have the same length")

    @classmethod
    def from_dict(cls, data: dict) -> "DataTable":
        """Build a table from ``{name: values}``; string values become categorical."""
        cols = []
        for values in data.values():
            arr = np.asarray(values)
            if arr.dtype.kind in "biuf":
                cols.append(NumericColumn(arr.astype(np.float64)))
            else:
                cols.append(categorical_from_strings([str(v) for v in arr]))
        return cls(tuple(data.keys()), tuple(cols))

    @property
    def n_rows(self) -> int:
        return len(self.columns[0]) if self.columns else 0

    def __contains__(self, name):
        return name in self.column_names

    def column(self, name: str):
        try:
            return self.columns[self.column_names.index(name)]
        except ValueError:
            raise UnknownColumn(name) from None

    def take_rows(self, idx) -> "DataTable":
        idx = np.asarray(idx, dtype=np.int64)
        return DataTable(self.column_names, tuple(c.take(idx) for c in self.columns))

    def with_column(self, name: str, column) -> "DataTable":
        if name in self.column_names:
            i = self.column_names.index(name)
            cols = list(self.columns)
            cols[i] = column
            return DataTable(self.column_names, tuple(cols))
        return DataTable(self.column_names + (name,), self.columns + (column,))

    def column_kinds(self) -> dict:
        return {n: c.kind for n, c in zip(self.column_names, self.columns)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.column_names)
        for i in range(self.n_rows):
            w.writerow([c.cell_text(i) for c in self.columns])
        return buf.getvalue()


def read_csv_text(text: str, categorical: Iterable[str] = (),
                  numeric: Iterable[str] = ()) -> DataTable:
    """Parse CSV text (RFC 4180, header row) into a :class:`DataTable`.

    A column is numeric iff every non-empty cell is a decimal number, unless
    its name is listed in ``categorical`` (forced categorical) or ``numeric``
    (forced numeric; a non-decimal cell is then an error).
    """
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]  # blank lines
    if not rows:
        raise CsvError("CSV input is empty")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise CsvError(
                f"line {lineno}: expected {len(header)} fields, found {len(r)}"
            )
    force_cat, force_num = set(categorical), set(numeric)
    cols = []
    for j, name in enumerate(header):
        cells = [r[j].strip() for r in body]
        parses = all(c == "" or _DECIMAL.match(c) for c in cells)
        if name in force_num:
            if not parses:
                bad = next(i for i, c in enumerate(cells) if c and not _DECIMAL.match(c))
                raise ColumnTypeMismatch(
                    f"column {name!r} must be numeric, row {bad + 1} is {cells[bad]!r}"
                )
            cols.append(numeric_from_strings(cells))
        elif name in force_cat or not parses:
            cols.append(categorical_from_strings(cells))
        else:
            cols.append(numeric_from_strings(cells))
    try:
        return DataTable(tuple(header), tuple(cols))
    except ValueError as e:
        raise CsvError(str(e)) from None


def read_csv(path, categorical: Iterable[str] = (), numeric: Iterable[str] = ()) -> DataTable:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CsvError(f"cannot read {path}: {e.strerror}") from None
    return read_csv_text(text, categorical, numeric)


# ---------------------------------------------------------------------------
# Formula
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Formula:
    response: str
    include_all: bool = False
    included_terms: tuple = ()
    excluded_terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "included_terms", tuple(self.included_terms))
        object.__setattr__(self, "excluded_terms", tuple(self.excluded_terms))
        if self.response in self.included_terms or self.response in self.excluded_terms:
            raise ResponseIsExcluded(
                f"response {self.response!r} cannot appear on the right-hand side"
            )
        if not self.include_all and not self.included_terms:
            raise EmptyRhs("formula has no predictors")
        if not self.include_all and self.excluded_terms:
            raise MinusWithoutDot("'- term' is only valid together with '.'")

    def __str__(self):
        rhs = []
        if self.include_all:
            rhs.append(".")
        rhs.extend(self.included_terms)
        s = " + ".join(rhs)
        for t in self.excluded_terms:
            s += f" - {t}"
        return f"{self.response} ~ {s}"


def parse_formula(text: str) -> Formula:
    """Parse ``"y ~ x1 + x2"``, ``"label ~ ."`` or ``"y ~ . - x3"``."""
    if "~" not in text:
        raise MissingTilde(f"formula {text!r} has no '~'")
    lhs, rhs = text.split("~", 1)
    response = lhs.strip()
    if not response:
        raise EmptyResponse(f"formula {text!r} has no response")
    if not _IDENT.match(response):
        raise InvalidIdentifier(f"invalid response name {response!r}")
    rhs = rhs.strip()
    if not rhs:
        raise EmptyRhs(f"formula {text!r} has no right-hand side")

    # split into (sign, term) pairs; a leading term carries an implicit '+'
    tokens = re.split(r"([+-])", rhs)
    pairs = []
    sign = "+"
    first = tokens[0].strip()
    if first:
        pairs.append(("+", first))
    elif len(tokens) == 1:
        raise EmptyRhs(f"formula {text!r} has no right-hand side")
    for i in range(1, len(tokens), 2):
        sign = tokens[i]
        term = tokens[i + 1].strip()
        pairs.append((sign, term))
    if not first and pairs and pairs[0][0] == "+":
        raise InvalidIdentifier(f"formula {text!r} starts with a dangling '+'")

    include_all = False
    included, excluded = [], []
    for sign, term in pairs:
        if not term:
            raise InvalidIdentifier(f"empty term after '{sign}' in {text!r}")
        if term != "." and not _IDENT.match(term):
            raise InvalidIdentifier(f"invalid term {term!r} in {text!r}")
        if sign == "+":
            if term == ".":
                include_all = True
            elif term not in included:
                included.append(term)
        else:
            if term == ".":
                raise InvalidIdentifier("'.' cannot be excluded")
            if not include_all:
                raise MinusWithoutDot(f"'- {term}' requires a preceding '.'")
            if term not in excluded:
                excluded.append(term)
    if include_all:
        # explicit terms are already covered by '.'
        included = []
    return Formula(response, include_all, tuple(included), tuple(excluded))


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureEncoding:
    name: str
    kind: str  # "numeric" | "categorical"
    center: float = 0.0
    scale: float = 1.0
    levels: tuple = ()

    @property
    def width(self) -> int:
        return 1 if self.kind == "numeric" else len(self.levels)


@dataclass(frozen=True)
class Encoder:
    features: tuple
    response: str
    response_kind: str
    response_levels: tuple = ()
    standardize: bool = True
    warnings: tuple = field(default=(), compare=False)

    @property
    def width(self) -> int:
        return sum(f.width for f in self.features)

    @property
    def feature_order(self) -> list:
        """Design-matrix column index -> (source column, level or None)."""
        out = []
        for f in self.features:
            if f.kind == "numeric":
                out.append((f.name, None))
            else:
                out.extend((f.name, lv) for lv in f.levels)
        return out

    def column_slices(self) -> dict:
        """Feature name -> list of design-matrix column indices."""
        out, k = {}, 0
        for f in self.features:
            out[f.name] = list(range(k, k + f.width))
            k += f.width
        return out

    def feature(self, name: str) -> FeatureEncoding:
        for f in self.features:
            if f.name == name:
                return f
        raise UnknownColumn(name, f"{name!r} is not a predictor of this model")


def resolve_predictors(formula: Formula, table: DataTable) -> list:
    if formula.response not in table:
        raise UnknownColumn(formula.response, f"response column {formula.response!r} not found")
    for name in formula.included_terms + formula.excluded_terms:
        if name not in table:
            raise UnknownColumn(name)
    if formula.include_all:
        drop = set(formula.excluded_terms) | {formula.response}
        names = [n for n in table.column_names if n not in drop]
    else:
        names = list(formula.included_terms)
    if not names:
        raise EmptyPredictorSet(f"formula {formula} selects no predictors")
    return names


def _check_missing(table: DataTable, names):
    for name in names:
        miss = table.column(name).is_missing()
        if miss.any():
            raise MissingValues(int(np.argmax(miss)) + 1, name)


def extract_response(encoder: Encoder, table: DataTable) -> np.ndarray:
    col = table.column(encoder.response)
    if encoder.response_kind == "numeric":
        if col.kind != "numeric":
            raise ColumnTypeMismatch(f"response {encoder.response!r} must be numeric")
        return col.values.copy()
    if col.kind != "categorical":
        raise ColumnTypeMismatch(f"response {encoder.response!r} must be categorical")
    return _recode(col, encoder.response_levels, encoder.response).astype(np.int64)


def _recode(col: CategoricalColumn, levels: tuple, name: str) -> np.ndarray:
    """Map a column's codes onto a stored level list."""
    lookup = {lv: i for i, lv in enumerate(levels)}
    mapping = np.empty(len(col.levels), dtype=np.int64)
    for i, lv in enumerate(col.levels):
        mapping[i] = lookup.get(lv, -1)
    codes = mapping[col.codes]
    bad = codes < 0
    if bad.any():
        row = int(np.argmax(bad))
        raise UnseenLevel(name, col.levels[col.codes[row]], row + 1)
    return codes


def build_design(formula: Formula, table: DataTable, standardize: bool = True,
                 fit_rows=None):
    """Encode ``table`` according to ``formula``.

    Returns ``(X, y, encoder)``. Numeric predictors are centered and scaled by
    their sample standard deviation when ``standardize`` is on; categorical
    predictors expand to one 0/1 column per level. ``y`` is the raw numeric
    response or, for a categorical response, level indices.

    ``fit_rows`` restricts the rows used to estimate center and scale (the
    training part of a train/validation split); all rows are still encoded.
    """
    names = resolve_predictors(formula, table)
    _check_missing(table, names + [formula.response])
    stats_table = table if fit_rows is None else table.take_rows(fit_rows)

    notes = []
    feats = []
    for name in names:
        col = table.column(name)
        if col.kind == "numeric":
            center, scale = 0.0, 1.0
            if standardize:
                v = stats_table.column(name).values
                center = float(v.mean())
                sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
                if sd > 0 and np.isfinite(sd):
                    scale = sd
                else:
                    msg = f"column {name!r} is constant; scale set to 1"
                    warnings.warn(msg, RuntimeWarning, stacklevel=2)
                    notes.append(msg)
            feats.append(FeatureEncoding(name, "numeric", center, scale))
        else:
            feats.append(FeatureEncoding(name, "categorical", levels=col.levels))

    rcol = table.column(formula.response)
    encoder = Encoder(
        features=tuple(feats),
        response=formula.response,
        response_kind=rcol.kind,
        response_levels=rcol.levels if rcol.kind == "categorical" else (),
        standardize=standardize,
        warnings=tuple(notes),
    )
    X = apply_encoder(encoder, table)
    y = extract_response(encoder, table)
    return X, y, encoder


def apply_encoder(encoder: Encoder, table: DataTable) -> np.ndarray:
    """Replay the fit-time transform on ``table`` using the stored statistics."""
    n = table.n_rows
    X = np.zeros((n, encoder.width), dtype=np.float64)
    k = 0
    for f in encoder.features:
        col = table.column(f.name)
        if f.kind == "numeric":
            if col.kind != "numeric":
                raise ColumnTypeMismatch(f"column {f.name!r} must be numeric")
            if np.isnan(col.values).any():
                raise MissingValues(int(np.argmax(np.isnan(col.values))) + 1, f.name)
            X[:, k] = (col.values - f.center) / f.scale
        else:
            if col.kind != "categorical":
                raise ColumnTypeMismatch(f"column {f.name!r} must be categorical")
            if (col.codes < 0).any():
                raise MissingValues(int(np.argmax(col.codes < 0)) + 1, f.name)
            codes = _recode(col, f.levels, f.name)
            X[np.arange(n), k + codes] = 1.0
        k += f.width
    return X
