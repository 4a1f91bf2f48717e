"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line in ``RESULTS``; ``conftest.py`` prints
them in the pytest summary. Run ``python -m tests.test_acceptance`` to execute the
suite without pytest.
"""

import csv
import json
import sys
import tempfile
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from traitimpute import cli
from traitimpute.data import (
    ObservationMatrix, apply_normalizer, fit_normalizer, invert_normalizer, load_csv, missingness_stats,
    split_folds,
)
from traitimpute.evaluation import classify, cross_validate, grid_values
from traitimpute.inference import FitConfig, PATIENT, fit, update_bias, update_trait_vector
from traitimpute.model import Hyperparams, generate_synthetic, predict_dense, prior_state
from tests.oracles import exact_bias_posterior, quadrature_moments

RESULTS = []


def _record(name, ok, detail, elapsed, budget):
    within = elapsed < budget
    ok = bool(ok and within)
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({elapsed:.2f}s, budget {budget:g}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _obs(entries, n_rows, n_cols):
    rows, cols, vals = zip(*entries)
    return ObservationMatrix(n_rows, n_cols, np.array(rows), np.array(cols), np.array(vals, dtype=float))


def test_elbo_monotonicity():
    start = time.perf_counter()
    worst, n_fits = 0.0, 0
    for seed in range(100):
        T = (0, 1, 3)[seed % 3]
        gen = Hyperparams(T=T, mu_P=0.1, mu_R=0.1, mu_bP=0.2, mu_bR=0.2)
        data = generate_synthetic(50, 40, gen, 0.6, seed).observed
        trace = np.array(fit(data, Hyperparams(T=T), FitConfig(seed=seed)).elbo_trace)
        if len(trace) > 1:
            worst = min(worst, float(np.diff(trace).min()))
        n_fits += 1
    _record("elbo_monotonicity", worst >= -1e-8, f"{n_fits} fits, largest decrease {max(0.0, -worst):.3g}",
            time.perf_counter() - start, 60)


def test_linear_gaussian_oracle():
    start = time.perf_counter()
    max_err, var_ok, elbo_ok = 0.0, True, True
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        n_rows, n_cols = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cells = [(u, i) for u in range(n_rows) for i in range(n_cols)]
        keep = rng.random(len(cells)) < 0.7
        keep[rng.integers(len(cells))] = True
        data = _obs([(u, i, float(rng.normal(0.5, 0.3))) for (u, i), k in zip(cells, keep) if k], n_rows, n_cols)
        h = Hyperparams(T=0, mu_bP=float(rng.uniform(0, 0.5)), mu_bR=float(rng.uniform(0, 0.5)),
                        noise_var=float(rng.choice([0.01, 0.05, 0.2])))
        result = fit(data, h, FitConfig(max_sweeps=20000, elbo_rel_tol=1e-15))
        mean, cov, log_ev = exact_bias_posterior(n_rows, n_cols, data.rows, data.cols, data.values,
                                                 h.mu_bP, h.mu_bR, h.var_prior, h.noise_var)
        s = result.state
        max_err = max(max_err, float(np.max(np.abs(np.r_[s.bP_mean, s.bR_mean] - mean))))
        var_ok &= bool(np.all(np.r_[s.bP_var, s.bR_var] <= np.diag(cov) + 1e-15))
        elbo_ok &= result.elbo_trace[-1] <= log_ev + 1e-9
    _record("linear_gaussian_oracle", max_err <= 1e-6 and var_ok and elbo_ok,
            f"max mean error {max_err:.2e}, variances bounded {var_ok}, ELBO <= evidence {elbo_ok}",
            time.perf_counter() - start, 10)


def test_conjugate_single_updates():
    start = time.perf_counter()
    h1 = Hyperparams(T=1, mu_P=0.0, mu_R=0.0, mu_bP=0.0, mu_bR=0.0)
    state = prior_state(h1, 1, 1)
    state.R_mean[0], state.R_cov[0] = [0.5], [[0.1]]
    mean, cov = update_trait_vector(state, _obs([(0, 0, 0.2)], 1, 1), h1, PATIENT, 0)
    log_q = lambda p: -p ** 2 / 1.0 - (0.35 * p ** 2 - 0.2 * p) / 0.02
    qm, qv = quadrature_moments(log_q, -3, 3)
    trait_err = max(abs(mean[0] - 10 / 37), abs(cov[0, 0] - 1 / 37), abs(mean[0] - qm), abs(cov[0, 0] - qv))

    h0 = Hyperparams(T=0, mu_bP=0.0, mu_bR=0.0)
    b_mean, b_var = update_bias(prior_state(h0, 1, 1), _obs([(0, 0, 0.3)], 1, 1), h0, PATIENT, 0)
    qm, qv = quadrature_moments(lambda b: -b ** 2 / 1.0 - (0.3 - b) ** 2 / 0.02, -3, 3)
    bias_err = max(abs(b_mean - 30 / 102), abs(b_var - 1 / 102), abs(b_mean - qm), abs(b_var - qv))
    _record("conjugate_single_updates", max(trait_err, bias_err) <= 1e-9,
            f"trait error {trait_err:.1e}, bias error {bias_err:.1e}", time.perf_counter() - start, 1)


def test_low_noise_recovery():
    start = time.perf_counter()
    gen = Hyperparams(T=2, mu_P=0.0, mu_R=0.0, mu_bP=0.0, mu_bR=0.0, noise_var=1e-4)
    maes = []
    for seed in range(5):
        inst = generate_synthetic(100, 80, gen, 0.5, seed)
        state = fit(inst.observed, gen, FitConfig(seed=seed)).state
        maes.append(float(np.mean(np.abs(predict_dense(state) - inst.clean)[inst.missing_mask])))
    passed = sum(m <= 0.02 for m in maes)
    _record("low_noise_recovery", passed == 5, f"{passed}/5 seeds, held-out MAE " +
            ", ".join(f"{m:.4f}" for m in maes), time.perf_counter() - start, 120)


def test_baseline_dominance():
    start = time.perf_counter()
    gen = Hyperparams(T=2, mu_P=0.0, mu_R=0.0, mu_bP=0.0, mu_bR=0.0, noise_var=0.01)
    pairs = []
    for seed in range(5):
        data = generate_synthetic(100, 80, gen, 0.5, seed).observed
        model = cross_validate(data, Hyperparams(), k=5, seed=seed).overall_entry_mae
        base = cross_validate(data, Hyperparams(), k=5, seed=seed, method="column_mean").overall_entry_mae
        pairs.append((model, base))
    wins = sum(m < b for m, b in pairs)
    _record("baseline_dominance", wins == 5, f"{wins}/5 seeds, model vs column mean " +
            ", ".join(f"{m:.4f}<{b:.4f}" for m, b in pairs), time.perf_counter() - start, 180)


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_full_scale_end_to_end(tmp_path=None):
    start = time.perf_counter()
    root = Path(tmp_path or tempfile.mkdtemp())
    synth_code = _run("synth", "--rows", 374, "--cols", 216, "--missing", 0.7081, "--seed", 7,
                      "--output-dir", root / "synth")
    cv_code = _run("cv", "--input", root / "synth" / "data.csv", "--k", 5, "--seed", 7, "--min-known", 50,
                   "--output-dir", root / "cv")
    problems = []
    if synth_code or cv_code:
        problems.append(f"exit codes {synth_code}/{cv_code}")
    else:
        data, _ = load_csv((root / "synth" / "data.csv").read_text())
        kept = int((data.column_counts() > 50).sum())
        with open(root / "cv" / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != kept:
            problems.append(f"report has {len(rows)} rows for {kept} kept columns")
        summary = json.loads((root / "cv" / "summary.json").read_text())
        if not np.isfinite(summary.get("overall_entry_mae", float("nan"))):
            problems.append("summary lacks a finite overall_entry_mae")
        svg = ET.parse(root / "cv" / "heatmap.svg").getroot()
        n_rects = sum(1 for el in svg.iter() if el.tag.endswith("rect"))
        if n_rects != 374 * kept:
            problems.append(f"SVG has {n_rects} cells")
    _record("full_scale_end_to_end", not problems,
            "; ".join(problems) or "exit 0, report rows match kept columns, summary and SVG parse",
            time.perf_counter() - start, 600)


def test_pipeline_exactness():
    start = time.perf_counter()
    checks = {}
    g = grid_values()
    checks["grid"] = len(g) == 19 and g[0] == 0.05 and g[-1] == 0.95

    inst = generate_synthetic(374, 216, Hyperparams(), 57205 / 80784, seed=0)
    folds = split_folds(inst.observed, 5, seed=0)
    sizes = folds.sizes()
    checks["folds"] = (sorted(set(folds.assignment.tolist())) == list(range(5))
                       and sum(sizes) == inst.observed.n_observed and max(sizes) - min(sizes) <= 1)

    rng = np.random.default_rng(0)
    dense = rng.uniform(-100, 100, size=(40, 12))
    dense[rng.random(dense.shape) < 0.3] = np.nan
    matrix = ObservationMatrix.from_dense(dense)
    params = fit_normalizer(matrix)
    back = invert_normalizer(apply_normalizer(matrix, params), params)
    checks["round_trip"] = float(np.max(np.abs(back.values - matrix.values))) <= 1e-12

    checks["classify"] = classify(0.2, 3) == "green" and classify(0.2 + 1e-9, 3) == "red"
    stats = missingness_stats(inst.observed)
    checks["missing_count"] = stats["observed"] == 23579 and stats["missing"] == 57205
    failed = [k for k, ok in checks.items() if not ok]
    _record("pipeline_exactness", not failed, "failed: " + ", ".join(failed) if failed else
            "grid, folds, round trip, classification and missing count exact", time.perf_counter() - start, 60)


def test_cli_determinism(tmp_path=None):
    start = time.perf_counter()
    root = Path(tmp_path or tempfile.mkdtemp())
    commands = [
        ("synth", "--rows", 40, "--cols", 15, "--missing", 0.5, "--traits", 2, "--seed", 5),
        ("cv", "--input", root / "a0" / "data.csv", "--k", 3, "--seed", 2),
        ("grid", "--input", root / "a0" / "data.csv", "--k", 2, "--traits", 1, "--max-sweeps", 5,
         "--grid-lo", 0.2, "--grid-hi", 0.6, "--grid-step", 0.2),
        ("impute", "--input", root / "a0" / "data.csv", "--traits", 2),
    ]
    mismatched = []
    for n, cmd in enumerate(commands):
        for tag in "ab":
            assert _run(*cmd, "--output-dir", root / f"{tag}{n}") == 0
        for f in sorted((root / f"a{n}").iterdir()):
            if f.read_bytes() != (root / f"b{n}" / f.name).read_bytes():
                mismatched.append(f"{cmd[0]}/{f.name}")
    _record("cli_determinism", not mismatched,
            "differing: " + ", ".join(mismatched) if mismatched else "synth, cv, grid, impute outputs byte-identical",
            time.perf_counter() - start, 120)


if __name__ == "__main__":
    failures = 0
    for name, func in list(globals().items()):
        if name.startswith("test_") and callable(func):
            try:
                func()
            except AssertionError:
                failures += 1
    sys.exit(1 if failures else 0)
