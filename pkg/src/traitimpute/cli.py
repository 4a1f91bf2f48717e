"""Command-line pipeline with synth, cv, grid and impute subcommands.

Exit codes: 0 success, 1 I/O failure, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .evaluation import GRID_MODES, NORM_SCOPES, cross_validate, grid_search, grid_values
from .heatmap import render_heatmap_svg
from .inference import FitConfig, FitResult, NumericalError, fit
from .model import DEFAULT_TRAITS, Hyperparams, generate_synthetic, predict_dense

logger = logging.getLogger("traitimpute")

EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


def _dump_json(obj) -> str:
    # NaN is not valid JSON; untested aggregates become null
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, float) and not math.isfinite(o):
            return None
        return o
    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def _write(out_dir: Path, name: str, text: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _hyper_from_args(args) -> Hyperparams:
    return Hyperparams(T=args.traits, mu_P=args.prior_mean_p, mu_R=args.prior_mean_r,
                       mu_bP=args.prior_mean_bp, mu_bR=args.prior_mean_br,
                       var_prior=args.prior_var, noise_var=args.noise_var)


def _fit_config(args) -> FitConfig:
    return FitConfig(max_sweeps=args.max_sweeps, elbo_rel_tol=args.tol, seed=args.seed)


def _fold_seed(args) -> int:
    return args.seed if args.fold_seed is None else args.fold_seed


def _load_input(args, apply_support_filter=True):
    """Read the CSV, drop manifest-excluded kinds, then apply the support filter."""
    try:
        text = Path(args.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from None
    try:
        matrix, _ = D.load_csv(text)
    except D.DataError as exc:
        raise UsageError(f"{args.input}: {exc}") from None
    kept = list(range(matrix.n_cols))
    kinds = {}
    if args.manifest:
        try:
            kinds = D.load_manifest(Path(args.manifest).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read {args.manifest}: {exc}") from None
        except D.DataError as exc:
            raise UsageError(f"{args.manifest}: {exc}") from None
    excluded = [k.strip() for k in (args.exclude_kinds or "").split(",") if k.strip()]
    if excluded and not args.manifest:
        raise UsageError("--exclude-kinds needs --manifest")
    try:
        if args.manifest:
            matrix, kept = D.exclude_kinds(matrix, kinds, excluded)
        if apply_support_filter:
            matrix, idx = D.filter_columns_by_support(matrix, args.min_known)
            kept = [kept[j] for j in idx]
    except D.DataError as exc:
        raise UsageError(f"{args.input}: {exc}") from None
    return matrix, kept, kinds


# ------------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    hyper = _hyper_from_args(args)
    try:
        inst = generate_synthetic(args.rows, args.cols, hyper, args.missing, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.output_dir)
    _write(out, "data.csv", D.write_csv(inst.observed))
    truth = D.ObservationMatrix.from_dense(inst.clean, inst.observed.row_ids, inst.observed.col_names)
    _write(out, "truth.csv", D.write_csv(truth))
    _write(out, "latents.json", _dump_json(inst.latents_dict()))
    stats = D.missingness_stats(inst.observed)
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_cv(args) -> int:
    matrix, kept, _ = _load_input(args)
    hyper = _hyper_from_args(args)
    config = _fit_config(args)
    fold_seed = _fold_seed(args)
    try:
        model = cross_validate(matrix, hyper, args.k, fold_seed, config, "model", args.norm_scope)
        base = cross_validate(matrix, hyper, args.k, fold_seed, config, "column_mean", args.norm_scope)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    out = Path(args.output_dir)
    _write(out, "report.csv", model.to_csv())
    summary = {
        **model.summary(),
        "k": args.k,
        "seed": args.seed,
        "fold_seed": fold_seed,
        "norm_scope": args.norm_scope,
        "min_known": args.min_known,
        "hyperparams": hyper.to_dict(),
        "fit_config": {"max_sweeps": config.max_sweeps, "elbo_rel_tol": config.elbo_rel_tol},
        "kept_columns": [int(j) for j in kept],
        "baseline": {"kind": "column_mean", **base.summary()},
    }
    _write(out, "summary.json", _dump_json(summary))
    errors, tested = model.error_grid()
    _write(out, "heatmap.svg", render_heatmap_svg(errors, tested, errors.shape, args.heatmap_saturation))
    print(f"model  overall_column_mean_mae={model.overall_column_mean_mae:.4f} "
          f"overall_entry_mae={model.overall_entry_mae:.4f}")
    print(f"column_mean baseline  overall_column_mean_mae={base.overall_column_mean_mae:.4f} "
          f"overall_entry_mae={base.overall_entry_mae:.4f}")
    return 0


def cmd_grid(args) -> int:
    matrix, _, _ = _load_input(args)
    hyper = _hyper_from_args(args)
    try:
        grid_values(args.grid_lo, args.grid_hi, args.grid_step)
        result = grid_search(matrix, hyper, args.grid_mode, args.k, _fold_seed(args), _fit_config(args),
                             args.grid_lo, args.grid_hi, args.grid_step, args.norm_scope)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.output_dir)
    _write(out, "grid.csv", result.to_csv())
    _write(out, "best.json", result.best_json() + "\n")
    print(json.dumps(result.best.to_dict(), sort_keys=True))
    return 0


def _model_payload(hyper, params, result, matrix) -> dict:
    return {"hyperparams": hyper.to_dict(), "normalization": params.to_dict(),
            "col_names": list(matrix.col_names), "fit": result.to_dict()}


def cmd_impute(args) -> int:
    matrix, _, _ = _load_input(args, apply_support_filter=False)
    if args.model:
        try:
            payload = json.loads(Path(args.model).read_text(encoding="utf-8"))
            hyper = Hyperparams(**payload["hyperparams"])
            params = D.NormalizationParams.from_dict(payload["normalization"])
            result = FitResult.from_dict(payload["fit"])
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"cannot use model {args.model}: {exc}") from None
        if (result.state.n_rows, result.state.n_cols) != matrix.shape or params.n_cols != matrix.n_cols:
            raise UsageError(f"model {args.model} was fitted on a different matrix shape")
    else:
        hyper = _hyper_from_args(args)
        params = D.fit_normalizer(matrix)
        try:
            result = fit(D.apply_normalizer(matrix, params), hyper, _fit_config(args))
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    pred = np.clip(predict_dense(result.state), 0.0, 1.0)
    rows, cols = np.indices(matrix.shape).reshape(2, -1)
    full = D.denormalize_values(pred[rows, cols], cols, params).reshape(matrix.shape)
    observed = matrix.mask()
    full[matrix.rows, matrix.cols] = matrix.values
    imputed = D.ObservationMatrix.from_dense(full, matrix.row_ids, matrix.col_names)

    prov = io.StringIO()
    w = csv.writer(prov, lineterminator="\n")
    w.writerow(["patient_id", *matrix.col_names])
    for u in range(matrix.n_rows):
        w.writerow([matrix.row_ids[u]] + ["observed" if o else "imputed" for o in observed[u]])

    out = Path(args.output_dir)
    _write(out, "imputed.csv", D.write_csv(imputed))
    _write(out, "provenance.csv", prov.getvalue())
    _write(out, "model.json", _dump_json(_model_payload(hyper, params, result, matrix)))
    print(json.dumps({"imputed": int((~observed).sum()), "observed": matrix.n_observed,
                      "sweeps": result.n_sweeps, "converged": result.converged}, sort_keys=True))
    return 0


# -------------------------------------------------------------------------- parser

def _add_model_flags(p, seed_default=0):
    d = Hyperparams()
    p.add_argument("--traits", type=int, default=DEFAULT_TRAITS, help="number of latent traits T")
    p.add_argument("--prior-var", type=float, default=d.var_prior)
    p.add_argument("--noise-var", type=float, default=d.noise_var)
    p.add_argument("--prior-mean-p", type=float, default=d.mu_P)
    p.add_argument("--prior-mean-r", type=float, default=d.mu_R)
    p.add_argument("--prior-mean-bp", type=float, default=d.mu_bP)
    p.add_argument("--prior-mean-br", type=float, default=d.mu_bR)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--output-dir", default=".")


def _add_input_flags(p):
    p.add_argument("--input", required=True, help="observation CSV")
    p.add_argument("--manifest", help="JSON column-kind manifest")
    p.add_argument("--exclude-kinds", default="", help="comma-separated kinds to drop, e.g. binary,date")
    p.add_argument("--max-sweeps", type=int, default=FitConfig.max_sweeps)
    p.add_argument("--tol", type=float, default=FitConfig.elbo_rel_tol)


def _add_cv_flags(p):
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--fold-seed", type=int, default=None, help="defaults to --seed")
    p.add_argument("--min-known", type=int, default=0, help="keep columns with more than this many entries")
    p.add_argument("--norm-scope", choices=NORM_SCOPES, default="fold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="traitimpute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic matrix from the model's generative process")
    p.add_argument("--rows", type=int, default=374)
    p.add_argument("--cols", type=int, default=216)
    p.add_argument("--missing", type=float, default=0.7081)
    _add_model_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cv", help="k-fold cross-validation with per-measurement report")
    _add_input_flags(p)
    _add_model_flags(p)
    _add_cv_flags(p)
    p.add_argument("--heatmap-saturation", type=float, default=0.5)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("grid", help="grid search over the four prior means")
    _add_input_flags(p)
    _add_model_flags(p)
    _add_cv_flags(p)
    p.add_argument("--grid-lo", type=float, default=0.05)
    p.add_argument("--grid-hi", type=float, default=0.95)
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--grid-mode", choices=GRID_MODES, default="coordinate")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("impute", help="fit on all observed cells and fill every missing cell")
    _add_input_flags(p)
    _add_model_flags(p)
    p.add_argument("--model", help="model.json from a previous impute run; skips fitting")
    p.set_defaults(func=cmd_impute)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
