"""Report figures rendered to PNG files with the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .oracle import VARIABLES  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def leadtime_figure(path, curves_by_exp, variable=0):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curves in sorted(curves_by_exp.items()):
        med = curves.median_curve(variable)
        ax.plot(np.arange(1, med.size + 1), med, marker="o", label=name)
    ax.set_xlabel("lead time (days)")
    ax.set_ylabel(f"median NSE ({VARIABLES[variable]})")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def nse_cdf_figure(path, curves_by_exp, variable=0):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curves in sorted(curves_by_exp.items()):
        v = np.sort(curves.nse_avg[:, variable])
        v = v[~np.isnan(v)]
        if v.size:
            ax.step(v, np.arange(1, v.size + 1) / v.size, where="post", label=name)
    ax.set_xlim(-0.5, 1.0)
    ax.set_xlabel("lead-averaged NSE")
    ax.set_ylabel("fraction of reaches")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def spinup_figure(path, rows):
    s = np.array([r["spinup"] for r in rows], dtype=float)
    m = np.array([np.nan if r.get("median_nse") is None else r["median_nse"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(s, m, marker="o")
    ax.set_xlabel("spin-up length (days)")
    ax.set_ylabel("median day-1 NSE")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def venn_figure(path, venn):
    labels = [k for k in venn if k != "baseline"]
    vals = [venn[k] for k in labels]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.bar(range(len(labels)), vals, color=["C0" if v >= 0 else "C3" for v in vals])
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("NSE region")
    ax.set_title(f"baseline (MLP) = {venn['baseline']:.3f}", fontsize=9)
    return _save(fig, path)


def sweep_figure(path, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in (("foundation_unsup_nse", "fine-tuned"), ("scratch_unsup_nse", "scratch")):
        pts = [(r["ratio"], r[key]) for r in rows if r.get(key) is not None]
        if pts:
            x, y = zip(*pts)
            ax.plot(x, y, marker="o", label=label)
    ax.set_xlabel("supervision ratio")
    ax.set_ylabel("median unsupervised NSE")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def report_figures(out_dir, curves_by_exp, extras):
    """Render every figure the available artefacts support; returns the written paths."""
    out = Path(out_dir)
    paths = []
    if curves_by_exp:
        paths.append(leadtime_figure(out / "leadtime_nse.png", curves_by_exp))
        paths.append(nse_cdf_figure(out / "nse_cdf.png", curves_by_exp))
    if extras.get("spinup"):
        paths.append(spinup_figure(out / "spinup.png", extras["spinup"]))
    venn = extras.get("ablation", {}).get("venn")
    if venn:
        paths.append(venn_figure(out / "venn.png", venn))
    if extras.get("sweep"):
        paths.append(sweep_figure(out / "sweep.png", extras["sweep"]))
    return paths
