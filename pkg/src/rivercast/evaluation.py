"""Skill metrics, lead-time and spin-up curves, ablation attribution and reports.

Undefined metric values (constant truth, zero high-flow volume) are reported
as ``nan``; they are never replaced by infinities.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grc import with_lag
from .oracle import VARIABLES
from .pipeline import make_windows

SCHEMA_VERSION = 1
CSV_COLUMNS = ("reach_id", "variable", "lead_time", "nse", "fhv", "n_samples", "excluded_reason")
MISSING = math.nan


def nse(pred, truth):
    """Nash-Sutcliffe efficiency ``1 - sum((p - y)^2) / sum((y - mean(y))^2)``.

    Returns ``nan`` when the truth has zero variance.
    """
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"pred and truth shapes differ: {p.shape} vs {y.shape}")
    if y.size < 2:
        raise ValueError("nse needs at least 2 samples")
    den = np.sum((y - y.mean()) ** 2)
    if den == 0.0:
        return MISSING
    return float(1.0 - np.sum((p - y) ** 2) / den)


def high_flow_count(n, quantile=0.98):
    return max(1, math.ceil((1.0 - quantile) * n - 1e-9))


def fhv(pred, truth, quantile=0.98):
    """High-flow volume bias in percent over the top ``1 - quantile`` of truth values.

    The ``max(1, ceil((1 - quantile) * T))`` largest truth values are used,
    ties broken by the earliest step.
    """
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"fhv expects equal-length 1-D series, got {p.shape} and {y.shape}")
    h = high_flow_count(y.size, quantile)
    idx = np.argsort(-y, kind="stable")[:h]
    vol = y[idx].sum()
    if vol == 0.0:
        return MISSING
    return float(100.0 * (p[idx] - y[idx]).sum() / vol)


def nse_columns(pred, truth):
    """Vectorised NSE over axis 0 for arrays of shape (T, ...)."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    den = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    num = ((p - y) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 - num / den
    return np.where(den > 0, out, np.nan)


@dataclass
class LeadTimeCurves:
    """Per-reach, per-variable, per-lead metrics; arrays of shape (N, 3, f)."""

    nse: np.ndarray
    fhv: np.ndarray
    n_samples: int

    @property
    def nse_avg(self):
        """Lead-averaged NSE, (N, 3)."""
        return self.nse.mean(axis=-1)

    @property
    def fhv_avg(self):
        return self.fhv.mean(axis=-1)

    def median_curve(self, variable=0):
        return np.nanmedian(self.nse[:, variable, :], axis=0)

    def mean_curve(self, variable=0):
        return np.nanmean(self.nse[:, variable, :], axis=0)


def leadtime_curves(pred, truth, quantile=0.98):
    """Metrics per lead time, pooling each lead's predictions across windows.

    ``pred`` and ``truth`` have shape (W, N, f, 3) with W >= 2 windows.
    """
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 4:
        raise ValueError(f"expected matching (W, N, f, 3) arrays, got {p.shape} and {y.shape}")
    w, n, f, v = p.shape
    if w < 2:
        raise ValueError("leadtime_curves needs at least 2 windows")
    nse_arr = np.transpose(nse_columns(p, y), (0, 2, 1))
    fhv_arr = np.empty((n, v, f))
    for i, k, lead in itertools.product(range(n), range(v), range(f)):
        fhv_arr[i, k, lead] = fhv(p[:, i, lead, k], y[:, i, lead, k], quantile)
    return LeadTimeCurves(nse_arr, fhv_arr, w)


def evaluate(cfg, params, dataset, partition="test", stride=1, workers=1):
    """Lead-time curves of a model on one partition of ``dataset``."""
    from .training import predict

    windows = make_windows(dataset.split, cfg, stride, partition)
    pred, truth = predict(cfg, params, dataset, windows, workers=workers)
    return leadtime_curves(pred, truth), pred, truth


def spinup_curve(cfg, params, dataset, max_spinup=None, partition="test", stride=1, variable=0,
                 spinups=None):
    """Day-1 skill of a coldstart model as a function of its lag (spin-up) length.

    Every spin-up length is scored on the same anchors, those leaving room
    for ``max_spinup`` lag steps inside ``partition``.

    Returns
    -------
    (spinups, per_reach) : numpy.ndarray, numpy.ndarray
        ``per_reach`` has shape (len(spinups), N) with day-1 NSE of ``variable``.
    """
    from .training import predict

    if cfg.hotstart:
        raise ValueError("spin-up curves are defined for coldstart models")
    max_spinup = max_spinup or cfg.h_lag
    a, b = dataset.split.partition(partition)
    if max_spinup > b - a - cfg.f_horizon:
        raise ValueError(f"max_spinup={max_spinup} exceeds the available lag room in {partition}")
    spinups = list(range(1, max_spinup + 1)) if spinups is None else list(spinups)
    rows = []
    for s in spinups:
        cfg_s = with_lag(cfg, s)
        windows = make_windows(dataset.split, cfg_s, stride, partition, min_lag=max_spinup)
        pred, truth = predict(cfg_s, params, dataset, windows)
        rows.append(nse_columns(pred[:, :, 0, variable], truth[:, :, 0, variable]))
    return np.array(spinups), np.array(rows)


# -- ablation attribution --------------------------------------------------------

COMPONENTS = ("Stat", "Temp", "Topo")


def _label(subset):
    return "+".join(c for c in COMPONENTS if c in subset) or "none"


@dataclass
class VennDecomposition:
    """Moebius regions over the ablation lattice.

    ``regions[S]`` for every non-empty subset ``S`` of components;
    ``baseline`` is the all-ablated (MLP) value.
    """

    regions: dict
    baseline: float

    def unique(self, component):
        return self.regions[frozenset([component])]

    def total(self):
        return self.baseline + sum(self.regions.values())

    def to_dict(self):
        out = {"baseline": self.baseline}
        out.update({_label(k): v for k, v in sorted(self.regions.items(), key=lambda kv: (len(kv[0]), _label(kv[0])))})
        return out


def _subsets(s):
    s = sorted(s)
    for r in range(len(s) + 1):
        for c in itertools.combinations(s, r):
            yield frozenset(c)


def venn_decompose(values):
    """Moebius inversion of metric values indexed by enabled-component sets.

    ``values`` maps each subset of ``{"Stat", "Temp", "Topo"}`` (the enabled
    components; the empty set is the MLP baseline) to a metric value.
    ``region(S) = sum_{T subset S} (-1)^{|S - T|} f(T)``.
    """
    vals = {frozenset(k): float(v) for k, v in values.items()}
    missing = [_label(s) for s in _subsets(COMPONENTS) if s not in vals]
    if missing:
        raise ValueError(f"ablation values missing for subsets: {missing}")
    regions = {}
    for s in _subsets(COMPONENTS):
        if not s:
            continue
        regions[s] = sum((-1) ** (len(s) - len(t)) * vals[t] for t in _subsets(s))
    return VennDecomposition(regions, vals[frozenset()])


def table_values(rows):
    """Map ``(stat, temp, topo)`` on/off tuples to values keyed by enabled-component sets."""
    return {frozenset(c for c, on in zip(COMPONENTS, flags) if on): v for flags, v in rows.items()}


# -- reports ---------------------------------------------------------------------

def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def metric_rows(curves, reach_ids=None):
    """Rows for ``metrics.csv``: one per reach x variable x lead time."""
    n, v, f = curves.nse.shape
    reach_ids = list(range(n)) if reach_ids is None else list(reach_ids)
    rows = []
    for i, k, lead in itertools.product(range(n), range(v), range(f)):
        val = curves.nse[i, k, lead]
        reason = "constant_truth" if math.isnan(val) else ""
        rows.append({
            "reach_id": reach_ids[i], "variable": VARIABLES[k], "lead_time": lead + 1,
            "nse": float(val), "fhv": float(curves.fhv[i, k, lead]),
            "n_samples": curves.n_samples, "excluded_reason": reason,
        })
    return rows


def write_metrics_csv(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["reach_id"], r["variable"], r["lead_time"], _fmt(r["nse"]), _fmt(r["fhv"]),
                    r["n_samples"], r["excluded_reason"]])
    Path(path).write_text(buf.getvalue())


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "reach_id": int(r["reach_id"]), "variable": r["variable"], "lead_time": int(r["lead_time"]),
                "nse": float(r["nse"]) if r["nse"] else math.nan,
                "fhv": float(r["fhv"]) if r["fhv"] else math.nan,
                "n_samples": int(r["n_samples"]), "excluded_reason": r["excluded_reason"],
            })
    return rows


def summarize_rows(rows):
    """Aggregate means/medians per variable and per lead time, excluding missing values."""
    out = {}
    for var in VARIABLES:
        sel = [r for r in rows if r["variable"] == var]
        if not sel:
            continue
        nse_vals = np.array([r["nse"] for r in sel if not math.isnan(r["nse"])])
        fhv_vals = np.array([r["fhv"] for r in sel if not math.isnan(r["fhv"])])
        leads = sorted({r["lead_time"] for r in sel})
        per_lead = {}
        for lead in leads:
            v = np.array([r["nse"] for r in sel if r["lead_time"] == lead and not math.isnan(r["nse"])])
            per_lead[str(lead)] = {"mean_nse": _jfloat(v.mean() if v.size else math.nan),
                                   "median_nse": _jfloat(np.median(v) if v.size else math.nan)}
        out[var] = {
            "mean_nse": _jfloat(nse_vals.mean() if nse_vals.size else math.nan),
            "median_nse": _jfloat(np.median(nse_vals) if nse_vals.size else math.nan),
            "mean_fhv": _jfloat(fhv_vals.mean() if fhv_vals.size else math.nan),
            "median_fhv": _jfloat(np.median(fhv_vals) if fhv_vals.size else math.nan),
            "n_rows": len(sel),
            "n_excluded": len(sel) - int(nse_vals.size),
            "per_lead": per_lead,
        }
    return out


def _jfloat(x):
    x = float(x)
    return None if math.isnan(x) else x


def write_summary(path, experiments):
    doc = {"schema_version": SCHEMA_VERSION, "experiments": experiments}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False))
    return doc


def report(run_dir, out_dir=None, figures=True):
    """Collect evaluation artefacts under ``run_dir`` into metrics.csv and summary.json.

    ``run_dir`` must contain one or more ``eval_<experiment>.npz`` files
    written by :func:`save_eval`; optional ``ablation_matrix.csv``,
    ``spinup.csv`` and ``sweep.csv`` are folded into the summary. The CSV
    holds the rows of the first experiment in sorted order (or of the only
    one); every experiment gets its own ``metrics_<experiment>.csv``.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    evals = sorted(run_dir.glob("eval_*.npz"))
    experiments = {}
    first_rows = None
    curves_by_exp = {}
    for path in evals:
        exp = path.stem[len("eval_"):]
        curves, reach_ids = load_eval(path)
        rows = metric_rows(curves, reach_ids)
        write_metrics_csv(out_dir / f"metrics_{exp}.csv", rows)
        if first_rows is None:
            first_rows = rows
        experiments[exp] = {"metrics": summarize_rows(rows), "n_reaches": len(reach_ids)}
        curves_by_exp[exp] = curves
    if first_rows is not None:
        write_metrics_csv(out_dir / "metrics.csv", first_rows)
    extras = {}
    abl = run_dir / "ablation_matrix.csv"
    if abl.exists():
        extras["ablation"] = _ablation_summary(abl)
    for name in ("spinup", "sweep", "finetune"):
        p = run_dir / f"{name}.csv"
        if p.exists():
            extras[name] = _read_table(p)
    if extras:
        experiments.setdefault("_extras", {}).update(extras)
    write_summary(out_dir / "summary.json", experiments)
    if figures and (curves_by_exp or extras):
        from . import plotting
        plotting.report_figures(out_dir, curves_by_exp, extras)
    return experiments


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = _jfloat(v) if v not in ("", None) else None
            except ValueError:
                conv[k] = v
        out.append(conv)
    return out


def _ablation_summary(path):
    rows = _read_table(path)
    values = {}
    for r in rows:
        key = frozenset(c for c in COMPONENTS if r.get(c.lower()) == 1.0)
        if r.get("nse") is not None:
            values[key] = r["nse"]
    out = {"cells": rows}
    try:
        out["venn"] = venn_decompose(values).to_dict()
    except ValueError as exc:
        out["venn_error"] = str(exc)
    return out


def save_eval(path, curves, reach_ids=None):
    reach_ids = np.arange(curves.nse.shape[0]) if reach_ids is None else np.asarray(reach_ids)
    np.savez(path, nse=curves.nse, fhv=curves.fhv, n_samples=curves.n_samples, reach_ids=reach_ids)


def load_eval(path):
    with np.load(path) as z:
        return LeadTimeCurves(z["nse"], z["fhv"], int(z["n_samples"])), z["reach_ids"].tolist()


def write_ablation_csv(path, values, extra=None):
    """``values``: enabled-component set -> metric (e.g. median lead-averaged NSE)."""
    extra = extra or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["stat", "temp", "topo", "variant", "nse"] + sorted({k for e in extra.values() for k in e})
    w.writerow(cols)
    for key in _subsets(COMPONENTS):
        if key not in values:
            continue
        row = [int("Stat" in key), int("Temp" in key), int("Topo" in key), _label(key), _fmt(values[key])]
        row += [_fmt(extra.get(key, {}).get(c)) if isinstance(extra.get(key, {}).get(c), float)
                else extra.get(key, {}).get(c, "") for c in cols[5:]]
        w.writerow(row)
    Path(path).write_text(buf.getvalue())
