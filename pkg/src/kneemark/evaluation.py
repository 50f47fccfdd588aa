"""Landmark error metrics and report assembly.

All metrics operate on a radial error matrix of shape (images, landmarks),
in millimetres. PCK at radius r counts errors <= r (inclusive); the outlier
rate counts errors > threshold (strict), so at the same radius the two are
exact complements of each other.
"""

import csv
import json
from pathlib import Path

import numpy as np

# landmark index subsets reported alongside the full set
ABLATION_SUBSET = (0, 8, 9, 15)
TEST_SUBSET = (0, 4, 8, 9, 12, 15)

DEFAULT_RADII_MM = (1.0, 1.5, 2.0, 2.5)
OUTLIER_MM = 10.0


def radial_errors(pred_px: np.ndarray, gt_px: np.ndarray, scale_mm: np.ndarray | float) -> np.ndarray:
    """Per-landmark euclidean error in millimetres.

    pred_px, gt_px: (N, M, 2) pixel coordinates in a common frame.
    scale_mm: mm per pixel; a scalar, or an (N, 2) / (2,) array giving the
    per-axis scale when the frame is anisotropic.
    """
    pred = np.asarray(pred_px, dtype=np.float64)
    gt = np.asarray(gt_px, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError(f"predictions and targets must both be (N, M, 2), got {pred.shape} and {gt.shape}")
    scale = np.asarray(scale_mm, dtype=np.float64)
    if scale.ndim == 0:
        scale = scale.reshape(1, 1, 1)
    elif scale.shape == (2,):
        scale = scale.reshape(1, 1, 2)
    elif scale.ndim == 2 and scale.shape == (pred.shape[0], 2):
        scale = scale[:, None, :]
    else:
        raise ValueError(f"scale must be scalar, (2,), or (N, 2), got shape {scale.shape}")
    d = (pred - gt) * scale
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def pck(errors: np.ndarray, radius_mm: float) -> float:
    """Fraction of landmark errors <= radius_mm (inclusive)."""
    err = np.asarray(errors)
    if err.size == 0:
        raise ValueError("empty error matrix")
    return float(np.count_nonzero(err <= radius_mm)) / err.size


def outlier_rate(errors: np.ndarray, threshold_mm: float = OUTLIER_MM) -> float:
    """Fraction of landmark errors > threshold_mm (strict)."""
    err = np.asarray(errors)
    if err.size == 0:
        raise ValueError("empty error matrix")
    return float(np.count_nonzero(err > threshold_mm)) / err.size


def cumulative_distribution(errors: np.ndarray, max_mm: float = 10.0, step: float = 0.1):
    """Empirical CDF of the error distribution.

    The evaluation grid is the regular grid [0, max_mm] at the given step,
    merged with every distinct observed error so the curve is exact at its
    jump points. Returns (grid, fraction_at_or_below)."""
    err = np.asarray(errors, dtype=np.float64).ravel()
    if err.size == 0:
        raise ValueError("empty error matrix")
    n_steps = int(round(max_mm / step))
    regular = np.linspace(0.0, max_mm, n_steps + 1)
    grid = np.union1d(regular, np.unique(err))
    counts = np.searchsorted(np.sort(err), grid, side="right")
    return grid, counts / err.size


def aggregate_folds(values) -> tuple[float, float]:
    """Mean and population standard deviation across folds."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no fold values to aggregate")
    return float(arr.mean()), float(arr.std(ddof=0))


def render_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def _subset_errors(errors: np.ndarray, ids) -> np.ndarray:
    err = np.asarray(errors)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0 or ids.min() < 0 or ids.max() >= err.shape[1]:
        raise ValueError(f"subset indices {ids.tolist()} out of range for {err.shape[1]} landmarks")
    return err[:, ids]


def default_subsets(n_landmarks: int) -> dict[str, tuple[int, ...]]:
    """Named landmark subsets that fit the matrix; 'all' is always present."""
    subsets = {"all": tuple(range(n_landmarks))}
    if n_landmarks > max(ABLATION_SUBSET):
        subsets["ablation"] = ABLATION_SUBSET
    if n_landmarks > max(TEST_SUBSET):
        subsets["test"] = TEST_SUBSET
    return subsets


def summarize_errors(
    errors: np.ndarray,
    radii_mm=DEFAULT_RADII_MM,
    outlier_mm: float = OUTLIER_MM,
    subsets: dict[str, tuple[int, ...]] | None = None,
) -> dict:
    """Per-subset PCK at each radius, outlier rate, and mean error."""
    err = np.asarray(errors, dtype=np.float64)
    if err.ndim != 2:
        raise ValueError(f"error matrix must be (N, M), got shape {err.shape}")
    if subsets is None:
        subsets = default_subsets(err.shape[1])
    out = {"images": int(err.shape[0]), "landmarks": int(err.shape[1]), "subsets": {}}
    for name, ids in subsets.items():
        sub = _subset_errors(err, ids)
        out["subsets"][name] = {
            "pck": {f"{r:g}": pck(sub, r) for r in radii_mm},
            "outlier_rate": outlier_rate(sub, outlier_mm),
            "mean_mm": float(sub.mean()),
        }
    return out


def fold_report(
    fold_errors: list[np.ndarray],
    radii_mm=DEFAULT_RADII_MM,
    outlier_mm: float = OUTLIER_MM,
    subsets: dict[str, tuple[int, ...]] | None = None,
) -> dict:
    """Combine per-fold error matrices into one report.

    Per fold: the summarize_errors dict. Aggregated: mean and population std
    of every metric across folds, with PCK rendered in percent as 'a ± b'.
    """
    if not fold_errors:
        raise ValueError("no folds to report")
    per_fold = [summarize_errors(e, radii_mm, outlier_mm, subsets) for e in fold_errors]
    names = list(per_fold[0]["subsets"].keys())
    aggregated = {}
    for name in names:
        agg = {"pck": {}, "outlier_rate": None, "mean_mm": None}
        for r in radii_mm:
            key = f"{r:g}"
            vals = [100.0 * f["subsets"][name]["pck"][key] for f in per_fold]
            mean, std = aggregate_folds(vals)
            agg["pck"][key] = {"mean": mean, "std": std, "text": render_mean_std(mean, std)}
        for metric in ("outlier_rate", "mean_mm"):
            vals = [f["subsets"][name][metric] for f in per_fold]
            scale = 100.0 if metric == "outlier_rate" else 1.0
            mean, std = aggregate_folds([scale * v for v in vals])
            agg[metric] = {"mean": mean, "std": std, "text": render_mean_std(mean, std)}
        aggregated[name] = agg
    return {"folds": per_fold, "aggregated": aggregated, "radii_mm": list(radii_mm), "outlier_mm": outlier_mm}


def write_report_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def write_report_csv(report: dict, path) -> None:
    """Flatten a fold_report into rows: fold, subset, metric, radius_mm, value.

    Aggregated rows use fold values 'mean' and 'std'. PCK and outlier rows
    are fractions at fold level and percents at aggregate level, matching
    the JSON report.
    """
    rows = [["fold", "subset", "metric", "radius_mm", "value"]]
    for i, fold in enumerate(report["folds"]):
        for name, stats in fold["subsets"].items():
            for key, v in stats["pck"].items():
                rows.append([str(i), name, "pck", key, repr(v)])
            rows.append([str(i), name, "outlier_rate", "", repr(stats["outlier_rate"])])
            rows.append([str(i), name, "mean_mm", "", repr(stats["mean_mm"])])
    for name, agg in report["aggregated"].items():
        for key, v in agg["pck"].items():
            rows.append(["mean", name, "pck_pct", key, repr(v["mean"])])
            rows.append(["std", name, "pck_pct", key, repr(v["std"])])
        for metric in ("outlier_rate", "mean_mm"):
            label = "outlier_pct" if metric == "outlier_rate" else metric
            rows.append(["mean", name, label, "", repr(agg[metric]["mean"])])
            rows.append(["std", name, label, "", repr(agg[metric]["std"])])
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def render_report(report: dict) -> str:
    """Human-readable aggregate table."""
    lines = []
    radii = report["radii_mm"]
    for name, agg in report["aggregated"].items():
        lines.append(f"[{name}]")
        for r in radii:
            key = f"{r:g}"
            lines.append(f"  pck @ {key} mm: {agg['pck'][key]['text']} %")
        lines.append(f"  outliers > {report['outlier_mm']:g} mm: {agg['outlier_rate']['text']} %")
        lines.append(f"  mean error: {agg['mean_mm']['text']} mm")
    return "\n".join(lines)
