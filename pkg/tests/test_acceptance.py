"""End-to-end acceptance checks, one printed PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import time

import numpy as np
import pytest

from kpiforecast import cli, forecaster as fc
from kpiforecast.jsonextract import KpiTable, extract_key
from kpiforecast.preprocess import ImputationConfig, fit_scaler, impute, inverse_transform, split, transform
from kpiforecast.synth import DISCONNECTED, read_regimes
from kpiforecast.windowing import WindowSpec, make_windows
from oracles import random_tree, reference_extract, tree_depth, window_pairs_bruteforce


def verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def test_gradient_correctness(capsys):
    t0 = time.perf_counter()
    state = fc.init_model(fc.ModelConfig(d=2, T=5, u=4, h=4, C=1, seed=0))
    rng = np.random.default_rng(1)
    X, Y = rng.uniform(size=(2, 5, 2)), rng.uniform(size=(2, 1, 1))
    _, analytic = fc.loss_and_grad(state, X, Y)
    numeric = fc.numerical_gradient(state, X, Y, eps=1e-5)
    worst = max(fc.relative_errors(analytic, numeric).values())
    secs = time.perf_counter() - t0
    verdict(capsys, "gradient correctness", worst < 1e-4 and secs < 30,
            f"max relative error {worst:.2e} over {state.n_params} parameters, {secs:.1f} s")


def test_extraction_oracle_equivalence(capsys):
    rng = np.random.default_rng(2024)
    mismatches, n = 0, 1000
    for _ in range(n):
        tree = random_tree(rng, max_depth=7, max_fanout=5)
        assert tree_depth(tree) <= 8
        for key in ("a", "sinr", "ues"):
            got, ref = extract_key(tree, key), reference_extract(tree, key)
            if len(got) != len(ref) or any(g is not r for g, r in zip(got, ref)):
                mismatches += 1
    verdict(capsys, "extraction oracle equivalence", mismatches == 0, f"{mismatches} mismatches over {n} trees")


def test_scaler_round_trip(capsys):
    rng = np.random.default_rng(7)
    worst, degenerate_ok = 0.0, True
    for _ in range(100):
        m, d = rng.integers(2, 50), rng.integers(1, 6)
        x = rng.normal(size=(m, d)) * rng.uniform(0.1, 100, size=d) + rng.uniform(-50, 50, size=d)
        p = fit_scaler(x)
        worst = max(worst, float(np.max(np.abs(inverse_transform(p, transform(p, x)) - x))))
        c = np.full((m, 1), rng.normal())
        pc = fit_scaler(c)
        degenerate_ok &= bool(np.all(inverse_transform(pc, transform(pc, c)) == pc.x_min))
    verdict(capsys, "scaler round-trip", worst <= 1e-9 and degenerate_ok,
            f"max error {worst:.1e}, degenerate columns exact: {degenerate_ok}")


def test_window_count_law(capsys):
    bad = []
    for n in (10, 50, 100):
        for w_in in (1, 3, 10):
            for s in (0, 1, 5):
                for w_lbl in (1, 3):
                    if w_lbl > w_in + s:
                        continue
                    pairs = window_pairs_bruteforce(n, w_in, s, w_lbl)
                    m = n - (w_in + s) - w_lbl + 1
                    if max(m, 0) != len(pairs):
                        bad.append((n, w_in, s, w_lbl))
                        continue
                    if not pairs:
                        continue
                    data = np.random.default_rng(n).normal(size=(n, 2))
                    ws = make_windows(data, WindowSpec(w_in, w_lbl, s))
                    for k, (xr, yr) in enumerate(pairs):
                        if not (np.array_equal(ws.X[k], data[xr]) and np.array_equal(ws.Y[k], data[yr])):
                            bad.append((n, w_in, s, w_lbl, k))
                            break
    verdict(capsys, "window-count law", not bad, f"{len(bad)} failing grid points")


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    """Two default ``run`` executions (3600 s trace, seed 0)."""
    runs = []
    for _ in range(2):
        out = tmp_path_factory.mktemp("accept")
        t0 = time.perf_counter()
        rc = cli.run(["run", "--out-dir", str(out), "--seed", "0", "--duration", "3600"])
        runs.append((out, rc, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
def test_end_to_end_learning(capsys, full_runs):
    out, rc, secs = full_runs[0]
    assert rc == 0
    cfg = json.loads((out / "manifest_train.json").read_text())["config"]
    m, w = cfg["model"], cfg["window"]
    assert (w["w_in"], w["shift"], w["w_lbl"], m["u"], m["h"], m["epochs"], m["eta"]) == (12, 1, 1, 32, 16, 50, 1e-3)
    hist = json.loads((out / "history.json").read_text())["epochs"]
    first, last = hist[0]["train_loss"], hist[-1]["train_loss"]
    test = json.loads((out / "eval_report.json").read_text())["phases"]["test"]
    verdict(capsys, "end-to-end learning: loss decreases", last < first,
            f"train loss epoch 1 {first:.5f} -> epoch {len(hist)} {last:.5f}")
    verdict(capsys, "end-to-end learning: beats persistence", test["rmse"] <= test["persistence_rmse"],
            f"test RMSE {test['rmse']:.3f} dB vs persistence {test['persistence_rmse']:.3f} dB")
    verdict(capsys, "end-to-end learning: runtime", secs < 300, f"{secs:.0f} s for the full run")


@pytest.mark.slow
def test_connectivity_forecasting(capsys, full_runs):
    out = full_runs[0][0]
    conn = json.loads((out / "connectivity_report.json").read_text())
    split_info = json.loads((out / "split.json").read_text())["sizes"]
    regimes = read_regimes(out / "regimes.csv")
    test_regimes = regimes[split_info["train"] + split_info["val"]:]
    # label rows of the test windows: w_in=12, shift=1, w_lbl=1
    truth = test_regimes[12:12 + conn["n"]] != DISCONNECTED
    predicted = np.array(conn["predicted_connected"], dtype=bool)
    acc = float(np.mean(predicted == truth))
    always = float(np.mean(truth))
    assert conn["threshold"] == 4.0
    verdict(capsys, "connectivity forecasting", acc >= 0.90,
            f"accuracy {acc:.3f} on {truth.size} steps; always-connected baseline {always:.3f}; "
            f"tn={conn['tn']} fn={conn['fn']}")


@pytest.mark.slow
def test_determinism(capsys, full_runs):
    (a, ra, _), (b, rb, _) = full_runs
    same = {name: (a / name).read_bytes() == (b / name).read_bytes()
            for name in ("model.ckpt", "eval_report.json")}
    verdict(capsys, "determinism", ra == rb == 0 and all(same.values()), f"byte-identical: {same}")


def test_split_and_imputation_laws(capsys):
    rng = np.random.default_rng(99)
    failures = 0
    for i in range(100):
        n, d = int(rng.integers(10, 200)), int(rng.integers(1, 5))
        data = rng.normal(size=(n, d)) * 10
        if i == 0:
            data[:] = np.nan
        elif i > 1:
            data[rng.uniform(size=(n, d)) < rng.uniform()] = np.nan
        table = KpiTable(data)
        cfg = ImputationConfig(float(rng.normal()))
        once = impute(table, cfg)
        twice = impute(once.series, cfg)
        parts = split(once.series)
        ok = (np.array_equal(np.concatenate(parts), once.series)
              and np.array_equal(once.series, twice.series)
              and int(once.counts.sum()) == int(np.isnan(data).sum()))
        failures += not ok
    verdict(capsys, "split/imputation laws", failures == 0, f"{failures} failures over 100 tables")
