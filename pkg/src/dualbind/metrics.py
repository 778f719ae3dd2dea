"""Evaluation: regression metrics with the capping protocol, prediction
dumps and a small latency benchmark.

All metrics are plain float64 numpy; Spearman uses average ranks for ties.
Correlations of a constant sequence are undefined and reported as nan.
"""

import csv
import time

import numpy as np

from . import autodiff as ad
from . import data
from . import frames as fr
from . import model

METRIC_NAMES = ("n", "rmse", "pearson", "spearman", "r2")


class MetricsError(ValueError):
    pass


def cap_predictions(preds, threshold=data.CAP_THRESHOLD):
    """Clamp predictions the same way labels are capped: y <- min(y, t)."""
    if not np.isfinite(threshold):
        raise MetricsError(f"cap_predictions: threshold must be finite, got {threshold}")
    return np.minimum(np.asarray(preds, dtype=np.float64), threshold)


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricsError(f"pearson: need equal 1-D arrays, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise MetricsError(f"pearson: need at least 2 points, got {a.size}")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0.0:
        return float("nan")
    return float(np.sum(da * db) / denom)


def average_ranks(x):
    """1-based ranks; tied values share the mean of their rank run."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    start = 0
    for i in range(1, x.size + 1):
        if i == x.size or sx[i] != sx[start]:
            ranks[order[start:i]] = 0.5 * (start + 1 + i)
            start = i
    return ranks


def spearman(a, b):
    return pearson(average_ranks(a), average_ranks(b))


def rmse(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise MetricsError(f"rmse: shape mismatch {preds.shape} vs {labels.shape}")
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def r_squared(preds, labels):
    """Coefficient of determination against the mean-label baseline."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    ss_res = float(np.sum((labels - preds) ** 2))
    return 1.0 - ss_res / ss_tot


def compute_metrics(preds, labels):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise MetricsError(
            f"compute_metrics: need equal 1-D arrays, got {preds.shape} and {labels.shape}"
        )
    if preds.size < 2:
        raise MetricsError(f"compute_metrics: need at least 2 points, got {preds.size}")
    return {
        "n": int(preds.size),
        "rmse": rmse(preds, labels),
        "pearson": pearson(preds, labels),
        "spearman": spearman(preds, labels),
        "r2": r_squared(preds, labels),
    }


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------


def predict(params, mconfig, records, energy_fn=model.energy, prepare_fn=None):
    """Eval-mode energies for a list of complexes, in input order."""
    if prepare_fn is None:
        prepare_fn = (model.prepare_ligand_only
                      if energy_fn is model.ligand_only_energy else model.prepare)
    out = np.empty(len(records))
    with ad.Graph(), ad.no_record():
        for i, rec in enumerate(records):
            out[i] = energy_fn(params, mconfig, prepare_fn(rec, mconfig)).item()
    return out


def evaluate(params, mconfig, records, energy_fn=model.energy, prepare_fn=None,
             cap=data.CAP_THRESHOLD):
    """Predict, cap, and score a dataset.

    Returns (metrics, rows); each row is (complex_id, label, prediction,
    capped prediction), and the metrics are computed on the capped values.
    cap=None disables capping (the raw prediction is scored).
    """
    if len(records) < 2:
        raise MetricsError(f"evaluate: need at least 2 records, got {len(records)}")
    raw = predict(params, mconfig, records, energy_fn, prepare_fn)
    capped = raw if cap is None else cap_predictions(raw, cap)
    labels = np.array([r.label for r in records])
    rows = [(r.complex_id, r.label, float(p), float(c))
            for r, p, c in zip(records, raw, capped)]
    return compute_metrics(capped, labels), rows


def write_metrics_csv(path, m):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_NAMES)
        w.writerow([m["n"]] + [repr(float(m[k])) for k in METRIC_NAMES[1:]])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != METRIC_NAMES:
            raise MetricsError(f"{path}: unexpected metrics header {header}")
        row = next(r)
        out = {"n": int(row[0])}
        out.update({k: float(v) for k, v in zip(METRIC_NAMES[1:], row[1:])})
        return out


def write_predictions_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("complex_id", "label", "prediction", "prediction_capped"))
        for cid, label, p, c in rows:
            w.writerow((cid, repr(float(label)), repr(float(p)), repr(float(c))))


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


def latency_bench(params, mconfig, records, energy_fn=model.energy,
                  prepare_fn=None, repeats=3, group_size=None):
    """Wall-clock per-complex inference latency over prepared inputs.

    Preparation (pocket selection, featurization) is done once up front;
    the timed section is the energy evaluation alone, which is what repeats
    during screening.  One untimed warmup pass precedes measurement.
    group_size controls measurement granularity: the clock is read around
    groups of that many complexes (default: one reading per full pass).
    The forward path itself is always per-complex.
    """
    if prepare_fn is None:
        prepare_fn = (model.prepare_ligand_only
                      if energy_fn is model.ligand_only_energy else model.prepare)
    if not records:
        raise MetricsError("latency_bench: empty dataset")
    if group_size is None:
        group_size = len(records)
    if group_size < 1:
        raise MetricsError(f"latency_bench: group_size must be >= 1, got {group_size}")
    preps = [prepare_fn(rec, mconfig) for rec in records]
    with ad.Graph(), ad.no_record():
        for prep in preps:
            energy_fn(params, mconfig, prep)
        times = []
        for _ in range(repeats):
            for start in range(0, len(preps), group_size):
                chunk = preps[start:start + group_size]
                t0 = time.perf_counter()
                for prep in chunk:
                    energy_fn(params, mconfig, prep)
                times.append((time.perf_counter() - t0) / len(chunk))
    arr = 1e3 * np.array(times)
    return {
        "n": len(records),
        "repeats": repeats,
        "group_size": group_size,
        "mean_ms": float(arr.mean()),
        "median_ms": float(np.median(arr)),
        "best_ms": float(arr.min()),
    }
