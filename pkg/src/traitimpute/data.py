"""Sparse patient x measurement matrices: loading, normalization, filtering, folds."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

DEFAULT_MISSING_TOKENS = frozenset({"", "na", "nan"})
COLUMN_KINDS = ("continuous", "binary", "date", "ordinal", "unknown")


class DataError(ValueError):
    """Base class for malformed input data."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class ShapeError(DataError):
    pass


class EmptyResultError(DataError):
    pass


def format_value(v: float) -> str:
    """Decimal text that round-trips a float exactly."""
    return "%.17g" % v


@dataclass(frozen=True, eq=False)
class ObservationMatrix:
    """Observed cells of an ``n_rows x n_cols`` matrix.

    Entries are stored as three parallel arrays kept in row-major order, so two
    matrices holding the same cells always have identical array layouts.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    row_ids: tuple = ()
    col_names: tuple = ()

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == values.shape):
            raise ShapeError("rows, cols and values must have equal length")
        if self.n_rows < 0 or self.n_cols < 0:
            raise ShapeError("negative matrix dimensions")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n_rows:
                raise ShapeError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise ShapeError("column index out of range")
        if not np.all(np.isfinite(values)):
            raise DataError("observed values must be finite")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                k = int(np.argmax(dup))
                raise DataError(f"duplicate entry at ({rows[k]}, {cols[k]})")
        for arr in (rows, cols, values):
            arr.setflags(write=False)
        row_ids = tuple(self.row_ids) if len(self.row_ids) else tuple(str(u) for u in range(self.n_rows))
        col_names = tuple(self.col_names) if len(self.col_names) else tuple(f"m{i}" for i in range(self.n_cols))
        if len(row_ids) != self.n_rows or len(col_names) != self.n_cols:
            raise ShapeError("row_ids / col_names do not match the matrix dimensions")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "col_names", col_names)

    @classmethod
    def from_dense(cls, dense, row_ids=(), col_names=()) -> "ObservationMatrix":
        """Build from a 2-D array where NaN marks a missing cell."""
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(~np.isnan(dense))
        return cls(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols], row_ids, col_names)

    @property
    def n_observed(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    def entries(self) -> Iterator[tuple[int, int, float]]:
        for u, i, v in zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()):
            yield u, i, v

    def keys(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def column_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_cols)

    def row_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_rows)

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def to_dense(self) -> np.ndarray:
        out = np.full((self.n_rows, self.n_cols), np.nan)
        out[self.rows, self.cols] = self.values
        return out

    def take(self, selector) -> "ObservationMatrix":
        """Keep a subset of entries (boolean mask or index array); shape is preserved."""
        return ObservationMatrix(self.n_rows, self.n_cols, self.rows[selector], self.cols[selector],
                                 self.values[selector], self.row_ids, self.col_names)

    def with_values(self, values) -> "ObservationMatrix":
        return ObservationMatrix(self.n_rows, self.n_cols, self.rows, self.cols, values,
                                 self.row_ids, self.col_names)

    def select_columns(self, keep: Sequence[int]) -> "ObservationMatrix":
        keep = np.asarray(keep, dtype=np.int64)
        remap = np.full(self.n_cols, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        sel = remap[self.cols] >= 0
        return ObservationMatrix(self.n_rows, int(keep.size), self.rows[sel], remap[self.cols[sel]],
                                 self.values[sel], self.row_ids,
                                 tuple(self.col_names[j] for j in keep.tolist()))

    def same_entries(self, other: "ObservationMatrix") -> bool:
        return (self.shape == other.shape and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols))


@dataclass(frozen=True)
class ColumnMeta:
    name: str
    kind: str = "unknown"
    n_known: int = 0

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r} for {self.name!r}")


def column_metas(matrix: ObservationMatrix, kinds: dict | None = None) -> list[ColumnMeta]:
    kinds = kinds or {}
    counts = matrix.column_counts()
    return [ColumnMeta(name, kinds.get(name, "unknown"), int(n))
            for name, n in zip(matrix.col_names, counts.tolist())]


# --------------------------------------------------------------------------- I/O

def _read_text(source) -> str:
    if isinstance(source, str):
        return source
    return source.read()


def load_csv(source: str | TextIO, missing_tokens: Iterable[str] | None = None
             ) -> tuple[ObservationMatrix, list[ColumnMeta]]:
    """Parse a header-first CSV into an ObservationMatrix.

    Args:
        source: CSV text or an open text stream.
        missing_tokens: Cell values (compared case-insensitively after
            stripping whitespace) that mark a missing cell. Defaults to
            empty, ``NA`` and ``NaN``.

    Returns:
        The matrix and one ColumnMeta per measurement column (kind ``unknown``).
    """
    tokens = DEFAULT_MISSING_TOKENS if missing_tokens is None else frozenset(t.strip().lower() for t in missing_tokens)
    reader = csv.reader(io.StringIO(_read_text(source)))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input: no header row") from None
    header = [h.strip() for h in header]
    has_ids = bool(header) and header[0] == "patient_id"
    names = header[1:] if has_ids else header
    seen = set()
    for name in names:
        if name in seen:
            raise SchemaError(f"duplicate column name {name!r}")
        seen.add(name)

    rows, cols, values, row_ids = [], [], [], []
    width = len(header)
    u = 0
    for line_no, record in enumerate(reader, start=2):
        if not record:
            continue
        if len(record) != width:
            raise ParseError(f"line {line_no}: expected {width} fields, found {len(record)}")
        if has_ids:
            row_ids.append(record[0].strip())
            cells = record[1:]
        else:
            row_ids.append(str(u))
            cells = record
        for j, cell in enumerate(cells):
            text = cell.strip()
            if text.lower() in tokens:
                continue
            try:
                v = float(text)
            except ValueError:
                raise ParseError(f"line {line_no}, column {names[j]!r}: cannot parse {cell!r} as a number") from None
            if not np.isfinite(v):
                raise ParseError(f"line {line_no}, column {names[j]!r}: non-finite value {cell!r}")
            rows.append(u)
            cols.append(j)
            values.append(v)
        u += 1

    matrix = ObservationMatrix(u, len(names), np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                               np.array(values, dtype=np.float64), tuple(row_ids), tuple(names))
    return matrix, column_metas(matrix)


def write_csv(matrix: ObservationMatrix, missing: str = "") -> str:
    """Serialize to the ``load_csv`` format with a leading ``patient_id`` column."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", *matrix.col_names])
    dense = matrix.to_dense()
    obs = matrix.mask()
    for u in range(matrix.n_rows):
        writer.writerow([matrix.row_ids[u]] + [format_value(dense[u, j]) if obs[u, j] else missing
                                               for j in range(matrix.n_cols)])
    return buf.getvalue()


def load_manifest(source: str | TextIO) -> dict[str, str]:
    """Read a JSON column manifest into ``{name: kind}``."""
    try:
        items = json.loads(_read_text(source))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(items, list):
        raise SchemaError("manifest must be a JSON array")
    kinds = {}
    for pos, item in enumerate(items):
        if not isinstance(item, dict) or "name" not in item or "kind" not in item:
            raise SchemaError(f"manifest item {pos} must have 'name' and 'kind'")
        if item["kind"] not in COLUMN_KINDS[:-1]:
            raise SchemaError(f"manifest item {pos}: unknown kind {item['kind']!r}")
        kinds[item["name"]] = item["kind"]
    return kinds


def exclude_kinds(matrix: ObservationMatrix, kinds: dict[str, str], excluded: Iterable[str]
                  ) -> tuple[ObservationMatrix, list[int]]:
    """Drop columns whose manifest kind is in ``excluded``."""
    unknown = set(kinds) - set(matrix.col_names)
    if unknown:
        raise SchemaError(f"manifest names not in the CSV header: {sorted(unknown)}")
    excluded = set(excluded)
    keep = [j for j, name in enumerate(matrix.col_names) if kinds.get(name, "unknown") not in excluded]
    if not keep:
        raise EmptyResultError("every column was excluded by kind")
    return matrix.select_columns(keep), keep


# ------------------------------------------------------------------ normalization

@dataclass(frozen=True, eq=False)
class NormalizationParams:
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.mins == self.maxs

    @property
    def n_cols(self) -> int:
        return int(self.mins.size)

    def to_dict(self) -> dict:
        return {"min": self.mins.tolist(), "max": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def fit_normalizer(matrix: ObservationMatrix) -> NormalizationParams:
    mins = np.zeros(matrix.n_cols)
    maxs = np.zeros(matrix.n_cols)
    has = matrix.column_counts() > 0
    if matrix.n_observed:
        lo = np.full(matrix.n_cols, np.inf)
        hi = np.full(matrix.n_cols, -np.inf)
        np.minimum.at(lo, matrix.cols, matrix.values)
        np.maximum.at(hi, matrix.cols, matrix.values)
        mins[has] = lo[has]
        maxs[has] = hi[has]
    return NormalizationParams(mins, maxs)


def _check_cols(matrix: ObservationMatrix, params: NormalizationParams):
    if matrix.n_cols != params.n_cols:
        raise ShapeError(f"matrix has {matrix.n_cols} columns, normalizer has {params.n_cols}")


def normalize_values(values, cols, params: NormalizationParams) -> np.ndarray:
    lo, hi = params.mins[cols], params.maxs[cols]
    span = hi - lo
    degenerate = span == 0
    scaled = (values - lo) / np.where(degenerate, 1.0, span)
    return np.where(degenerate, 0.5, np.clip(scaled, 0.0, 1.0))


def denormalize_values(values, cols, params: NormalizationParams) -> np.ndarray:
    lo, hi = params.mins[cols], params.maxs[cols]
    return lo + values * (hi - lo)


def apply_normalizer(matrix: ObservationMatrix, params: NormalizationParams) -> ObservationMatrix:
    """Min-max scale each column to [0, 1]; constant columns become 0.5, out-of-range values clamp."""
    _check_cols(matrix, params)
    return matrix.with_values(normalize_values(matrix.values, matrix.cols, params))


def invert_normalizer(matrix: ObservationMatrix, params: NormalizationParams) -> ObservationMatrix:
    _check_cols(matrix, params)
    return matrix.with_values(denormalize_values(matrix.values, matrix.cols, params))


# ----------------------------------------------------------------- filtering, stats

def filter_columns_by_support(matrix: ObservationMatrix, min_known: int) -> tuple[ObservationMatrix, list[int]]:
    """Keep columns with strictly more than ``min_known`` observed entries."""
    if min_known < 0:
        raise ValueError("min_known must be >= 0")
    keep = np.flatnonzero(matrix.column_counts() > min_known).tolist()
    if not keep:
        raise EmptyResultError(f"no column has more than {min_known} known entries")
    return matrix.select_columns(keep), keep


def missingness_stats(matrix: ObservationMatrix) -> dict:
    total = matrix.n_rows * matrix.n_cols
    observed = matrix.n_observed
    return {
        "total": total,
        "observed": observed,
        "missing": total - observed,
        "fraction_missing": (total - observed) / total if total else 0.0,
    }


# ---------------------------------------------------------------------------- folds

@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index per observed entry, aligned with the matrix's entry order."""

    k: int
    assignment: np.ndarray
    seed: int = 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def as_mapping(self, matrix: ObservationMatrix) -> dict[tuple[int, int], int]:
        return dict(zip(matrix.keys(), self.assignment.tolist()))


def split_folds(matrix: ObservationMatrix, k: int, seed: int) -> FoldAssignment:
    if k < 2:
        raise ValueError("k must be at least 2")
    n = matrix.n_observed
    if k > n:
        raise ValueError(f"cannot split {n} observed entries into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    assignment.setflags(write=False)
    return FoldAssignment(k, assignment, seed)


def mask_fold(matrix: ObservationMatrix, folds: FoldAssignment, fold_index: int
              ) -> tuple[ObservationMatrix, ObservationMatrix]:
    """Return ``(train, test)`` where test holds the entries of ``fold_index``."""
    if not 0 <= fold_index < folds.k:
        raise ValueError(f"fold_index {fold_index} outside [0, {folds.k})")
    if folds.assignment.size != matrix.n_observed:
        raise ShapeError("fold assignment does not match the matrix")
    in_test = folds.assignment == fold_index
    return matrix.take(~in_test), matrix.take(in_test)
