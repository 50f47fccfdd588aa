"""Metric oracles: every statistic re-derived with explicit loops."""

import csv
import json
import math

import numpy as np
import pytest

from kneemark.evaluation import (
    ABLATION_SUBSET,
    TEST_SUBSET,
    aggregate_folds,
    cumulative_distribution,
    default_subsets,
    fold_report,
    outlier_rate,
    pck,
    radial_errors,
    render_mean_std,
    render_report,
    summarize_errors,
    write_report_csv,
    write_report_json,
)


def test_radial_errors_scalar_scale(rng):
    pred = rng.uniform(0, 100, (5, 4, 2))
    gt = rng.uniform(0, 100, (5, 4, 2))
    err = radial_errors(pred, gt, 0.3)
    for i in range(5):
        for j in range(4):
            ref = 0.3 * math.hypot(pred[i, j, 0] - gt[i, j, 0], pred[i, j, 1] - gt[i, j, 1])
            assert err[i, j] == pytest.approx(ref, rel=1e-14)


def test_radial_errors_anisotropic_scales(rng):
    pred = rng.uniform(0, 10, (3, 2, 2))
    gt = rng.uniform(0, 10, (3, 2, 2))
    per_axis = np.array([0.5, 2.0])
    err = radial_errors(pred, gt, per_axis)
    per_sample = rng.uniform(0.1, 1.0, (3, 2))
    err_s = radial_errors(pred, gt, per_sample)
    for i in range(3):
        for j in range(2):
            dx, dy = pred[i, j] - gt[i, j]
            assert err[i, j] == pytest.approx(math.hypot(0.5 * dx, 2.0 * dy), rel=1e-14)
            ref = math.hypot(per_sample[i, 0] * dx, per_sample[i, 1] * dy)
            assert err_s[i, j] == pytest.approx(ref, rel=1e-14)


def test_radial_errors_validation(rng):
    pred = rng.uniform(0, 10, (3, 2, 2))
    with pytest.raises(ValueError):
        radial_errors(pred, pred[:2], 1.0)
    with pytest.raises(ValueError):
        radial_errors(pred, pred, np.ones((4, 2)))


def test_pck_and_outliers_match_counting_loops(rng):
    for _ in range(50):
        err = rng.uniform(0, 12, (rng.integers(1, 8), rng.integers(1, 20)))
        r = float(rng.uniform(0, 12))
        n_in = sum(1 for v in err.ravel() if v <= r)
        n_out = sum(1 for v in err.ravel() if v > r)
        assert pck(err, r) == n_in / err.size  # exact: integer count / size
        assert outlier_rate(err, r) == n_out / err.size
        assert n_in + n_out == err.size


def test_pck_boundary_is_inclusive_outlier_strict():
    err = np.array([[1.0, 2.0, 3.0]])
    assert pck(err, 2.0) == 2 / 3
    assert outlier_rate(err, 2.0) == 1 / 3
    with pytest.raises(ValueError):
        pck(np.zeros((0, 3)), 1.0)


def test_pck_outlier_complement_at_shared_threshold(rng):
    for _ in range(200):
        err = rng.uniform(0, 20, (rng.integers(1, 6), rng.integers(1, 30)))
        t = float(rng.uniform(0, 20))
        p, o = pck(err, t), outlier_rate(err, t)
        # counts partition exactly; the float sum is within one rounding of 1
        assert abs(p + o - 1.0) <= np.finfo(float).eps


def test_cumulative_distribution_brute_force(rng):
    err = rng.uniform(0, 9, (4, 7))
    grid, cdf = cumulative_distribution(err, max_mm=10.0, step=0.1)
    flat = err.ravel()
    regular = np.linspace(0.0, 10.0, 101)
    assert np.isin(regular, grid).all()
    assert np.isin(np.unique(flat), grid).all()
    for g, v in zip(grid, cdf):
        assert v == sum(1 for e in flat if e <= g) / flat.size
    assert (np.diff(cdf) >= 0).all()
    assert cdf[-1] == 1.0
    assert grid[0] == 0.0


def test_aggregate_folds_population_std():
    vals = [1.0, 2.0, 4.0]
    mean, std = aggregate_folds(vals)
    assert mean == pytest.approx(7 / 3)
    assert std == pytest.approx(math.sqrt(sum((v - 7 / 3) ** 2 for v in vals) / 3))
    with pytest.raises(ValueError):
        aggregate_folds([])


def test_render_mean_std_two_decimals():
    assert render_mean_std(45.916, 8.787) == "45.92 ± 8.79"
    assert render_mean_std(0.0, 0.0) == "0.00 ± 0.00"


def test_default_subsets_by_landmark_count():
    s16 = default_subsets(16)
    assert set(s16) == {"all", "ablation", "test"}
    assert s16["ablation"] == ABLATION_SUBSET == (0, 8, 9, 15)
    assert s16["test"] == TEST_SUBSET == (0, 4, 8, 9, 12, 15)
    assert default_subsets(1) == {"all": (0,)}


def test_summarize_errors_subset_oracle(rng):
    err = rng.uniform(0, 11, (6, 16))
    out = summarize_errors(err, radii_mm=(1.0, 2.5), outlier_mm=10.0)
    for name, ids in default_subsets(16).items():
        sub = err[:, list(ids)]
        stats = out["subsets"][name]
        for r in (1.0, 2.5):
            assert stats["pck"][f"{r:g}"] == pck(sub, r)
        assert stats["outlier_rate"] == outlier_rate(sub, 10.0)
        assert stats["mean_mm"] == pytest.approx(sub.mean(), rel=1e-15)


def test_fold_report_aggregates_in_percent(rng):
    folds = [rng.uniform(0, 12, (5, 16)) for _ in range(3)]
    rep = fold_report(folds, radii_mm=(2.0,), outlier_mm=10.0)
    per_fold = [pck(f, 2.0) for f in folds]
    agg = rep["aggregated"]["all"]["pck"]["2"]
    assert agg["mean"] == pytest.approx(100.0 * np.mean(per_fold), rel=1e-12)
    assert agg["std"] == pytest.approx(100.0 * np.std(per_fold), rel=1e-12)
    assert agg["text"] == render_mean_std(agg["mean"], agg["std"])
    mean_mm = rep["aggregated"]["all"]["mean_mm"]["mean"]
    assert mean_mm == pytest.approx(np.mean([f.mean() for f in folds]), rel=1e-12)
    out_pct = rep["aggregated"]["all"]["outlier_rate"]["mean"]
    assert out_pct == pytest.approx(100.0 * np.mean([outlier_rate(f, 10.0) for f in folds]), rel=1e-12)


def test_report_writers_round_trip(rng, tmp_path):
    folds = [rng.uniform(0, 12, (4, 16)) for _ in range(2)]
    rep = fold_report(folds)
    jpath = tmp_path / "report.json"
    write_report_json(rep, jpath)
    loaded = json.loads(jpath.read_text())
    assert loaded["aggregated"]["all"]["pck"]["1"]["mean"] == rep["aggregated"]["all"]["pck"]["1"]["mean"]
    cpath = tmp_path / "report.csv"
    write_report_csv(rep, cpath)
    with open(cpath) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["fold", "subset", "metric", "radius_mm", "value"]
    fold0 = [r for r in rows if r[0] == "0" and r[1] == "all" and r[2] == "pck" and r[3] == "1"]
    assert float(fold0[0][4]) == pck(folds[0], 1.0)
    text = render_report(rep)
    assert "[all]" in text and "pck @ 1 mm" in text and "±" in text
