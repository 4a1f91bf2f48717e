"""Cross-validation, baselines, per-measurement error reports and prior-mean grid search."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import (ObservationMatrix, apply_normalizer, fit_normalizer, mask_fold, normalize_values,
                   split_folds, format_value)
from .inference import FitConfig, fit
from .model import Hyperparams, predict_entries

logger = logging.getLogger(__name__)

GREEN_THRESHOLD = 0.2
NORM_SCOPES = ("fold", "whole", "none")
METHODS = ("model", "column_mean", "global_mean")
GRID_MODES = ("joint", "coordinate")


@dataclass(frozen=True)
class ColumnReport:
    name: str
    n_known: int
    n_test: int
    mae: float
    cls: str


def classify(mae: float, n_test: int) -> str:
    if n_test == 0:
        return "untested"
    return "green" if mae <= GREEN_THRESHOLD else "red"


@dataclass(eq=False)
class EvalReport:
    columns: list
    overall_column_mean_mae: float
    overall_entry_mae: float
    n_rows: int = 0
    err_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    err_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    abs_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def error_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(errors, tested)`` arrays for heatmap rendering."""
        shape = (self.n_rows, len(self.columns))
        errors = np.zeros(shape)
        tested = np.zeros(shape, dtype=bool)
        errors[self.err_rows, self.err_cols] = self.abs_errors
        tested[self.err_rows, self.err_cols] = True
        return errors, tested

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "n_known", "n_test", "mae", "class"])
        for c in self.columns:
            w.writerow([c.name, c.n_known, c.n_test, "" if c.n_test == 0 else format_value(c.mae), c.cls])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"overall_column_mean_mae": self.overall_column_mean_mae,
                "overall_entry_mae": self.overall_entry_mae,
                "n_columns": len(self.columns),
                "n_green": sum(c.cls == "green" for c in self.columns),
                "n_red": sum(c.cls == "red" for c in self.columns),
                "n_untested": sum(c.cls == "untested" for c in self.columns)}


def _report_from_arrays(rows, cols, errors, n_rows, col_names, n_known) -> EvalReport:
    n_cols = len(col_names)
    n_test = np.bincount(cols, minlength=n_cols)
    err_sum = np.bincount(cols, weights=errors, minlength=n_cols)
    columns = []
    for j in range(n_cols):
        mae = float(err_sum[j] / n_test[j]) if n_test[j] else float("nan")
        columns.append(ColumnReport(col_names[j], int(n_known[j]), int(n_test[j]), mae, classify(mae, n_test[j])))
    tested = [c.mae for c in columns if c.n_test]
    return EvalReport(
        columns=columns,
        overall_column_mean_mae=float(np.mean(tested)) if tested else float("nan"),
        overall_entry_mae=float(np.mean(errors)) if errors.size else float("nan"),
        n_rows=n_rows, err_rows=rows, err_cols=cols, abs_errors=errors,
    )


def mae_report(predictions: dict, truth: ObservationMatrix, col_names=None, n_known=None) -> EvalReport:
    """Per-column mean absolute error of ``predictions`` (keyed by ``(row, col)``)
    against the entries of ``truth``, both in normalized units."""
    keys = truth.keys()
    if len(predictions) != len(keys) or any(k not in predictions for k in keys):
        raise ValueError("predictions must cover exactly the entries of truth")
    col_names = truth.col_names if col_names is None else tuple(col_names)
    n_known = truth.column_counts() if n_known is None else np.asarray(n_known)
    preds = np.array([predictions[k] for k in keys], dtype=np.float64)
    errors = np.abs(preds - truth.values)
    return _report_from_arrays(truth.rows, truth.cols, errors, truth.n_rows, col_names, n_known)


def baseline_predict(train: ObservationMatrix, test_rows, test_cols, kind: str = "column_mean",
                     clamp: bool = True) -> np.ndarray:
    """Column-mean (falling back to the global mean) or global-mean predictions."""
    if train.n_observed == 0:
        raise ValueError("baseline needs at least one training entry")
    test_cols = np.asarray(test_cols, dtype=np.int64)
    global_mean = float(np.mean(train.values))
    if kind == "global_mean":
        preds = np.full(test_cols.size, global_mean)
    elif kind == "column_mean":
        counts = train.column_counts()
        sums = np.bincount(train.cols, weights=train.values, minlength=train.n_cols)
        col_mean = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
        preds = col_mean[test_cols]
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return np.clip(preds, 0.0, 1.0) if clamp else preds


def _predict(train, test, hyper, fit_config, method, clamp):
    if method == "model":
        result = fit(train, hyper, fit_config)
        preds = predict_entries(result.state, test.rows, test.cols)
        return np.clip(preds, 0.0, 1.0) if clamp else preds
    return baseline_predict(train, test.rows, test.cols, method, clamp)


def cross_validate(matrix: ObservationMatrix, hyper: Hyperparams, k: int = 5, seed: int = 0,
                   fit_config: FitConfig | None = None, method: str = "model",
                   norm_scope: str = "fold") -> EvalReport:
    """k-fold cross-validation over observed entries.

    Args:
        matrix: Observations in original units.
        hyper: Model hyperparameters (ignored by the baselines).
        k: Number of folds.
        seed: Fold-split seed; the model's init seed comes from ``fit_config``.
        fit_config: Inference settings.
        method: ``"model"``, ``"column_mean"`` or ``"global_mean"``.
        norm_scope: ``"fold"`` fits min-max parameters on each training fold,
            ``"whole"`` on all observed entries, ``"none"`` uses raw values and
            skips clamping.

    Returns:
        EvalReport over every observed entry, each tested exactly once.
    """
    if norm_scope not in NORM_SCOPES:
        raise ValueError(f"norm_scope must be one of {NORM_SCOPES}")
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    fit_config = fit_config or FitConfig()
    folds = split_folds(matrix, k, seed)
    whole = fit_normalizer(matrix) if norm_scope == "whole" else None
    clamp = norm_scope != "none"

    rows, cols, errors = [], [], []
    for f in range(k):
        train, test = mask_fold(matrix, folds, f)
        if norm_scope != "none":
            params = whole if whole is not None else fit_normalizer(train)
            train = apply_normalizer(train, params)
            test = test.with_values(normalize_values(test.values, test.cols, params))
        preds = _predict(train, test, hyper, fit_config, method, clamp)
        rows.append(test.rows)
        cols.append(test.cols)
        errors.append(np.abs(preds - test.values))
        logger.debug("fold %d/%d: mae %.4f", f + 1, k, errors[-1].mean())

    rows, cols, errors = np.concatenate(rows), np.concatenate(cols), np.concatenate(errors)
    order = np.lexsort((cols, rows))
    return _report_from_arrays(rows[order], cols[order], errors[order], matrix.n_rows,
                               matrix.col_names, matrix.column_counts())


def grid_values(lo: float = 0.05, hi: float = 0.95, step: float = 0.05) -> list[float]:
    """``lo, lo + step, ...`` up to ``hi`` inclusive, each computed as ``lo + n * step``."""
    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi and step > 0):
        raise ValueError(f"invalid grid range lo={lo}, hi={hi}, step={step}")
    n = int(np.floor((hi - lo) / step + 0.5))
    values = [lo + j * step for j in range(n + 1)]
    values = [v for v in values if v <= hi + step / 2]
    # pin the endpoint so drift cannot leave e.g. 0.30000000000000004 behind
    values = [round(v, 12) for v in values]
    return values


@dataclass(eq=False)
class GridSearchResult:
    table: list
    best: Hyperparams
    mode: str

    @property
    def best_score(self) -> float:
        return min(row[4] for row in self.table)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mu_P", "mu_R", "mu_bP", "mu_bR", "cv_score"])
        for row in self.table:
            w.writerow([format_value(x) for x in row])
        return buf.getvalue()

    def best_json(self) -> str:
        return json.dumps({"mode": self.mode, "cv_score": self.best_score,
                           "hyperparams": self.best.to_dict()}, indent=2, sort_keys=True)


def _best_row(rows):
    return min(rows, key=lambda r: (r[4], r[0], r[1], r[2], r[3]))


def grid_search(matrix: ObservationMatrix, base_hyper: Hyperparams, mode: str = "coordinate", k: int = 5,
                seed: int = 0, fit_config: FitConfig | None = None, lo: float = 0.05, hi: float = 0.95,
                step: float = 0.05, norm_scope: str = "fold") -> GridSearchResult:
    """Search prior means by cross-validated column-mean MAE.

    ``joint`` scores the full 4-D grid.  ``coordinate`` scans one mean at a time in
    the order mu_P, mu_R, mu_bP, mu_bR, keeping the best value of each scan.
    """
    if mode not in GRID_MODES:
        raise ValueError(f"mode must be one of {GRID_MODES}")
    grid = grid_values(lo, hi, step)

    def score(means):
        report = cross_validate(matrix, base_hyper.with_means(*means), k, seed, fit_config,
                                norm_scope=norm_scope)
        return (*means, report.overall_column_mean_mae)

    table = []
    if mode == "joint":
        for means in itertools.product(grid, repeat=4):
            table.append(score(means))
    else:
        current = list(base_hyper.means())
        for axis in range(4):
            scan = []
            for v in grid:
                means = list(current)
                means[axis] = v
                scan.append(score(tuple(means)))
            table.extend(scan)
            current = list(_best_row(scan)[:4])
            logger.info("grid axis %d -> %s", axis, current)
    best = _best_row(table)
    return GridSearchResult(table, base_hyper.with_means(*best[:4]), mode)
