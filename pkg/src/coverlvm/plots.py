"""Figure rendering for ordinations, sweep summaries, and metric reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def ordination_scatter(coords, path, groups=None, title=None):
    """Scatter of site scores on the first two axes, optionally colored by group."""
    coords = np.asarray(coords)
    fig, ax = plt.subplots(figsize=(6, 5))
    xs, ys = coords[:, 0], (coords[:, 1] if coords.shape[1] > 1 else np.zeros(len(coords)))
    if groups is None:
        ax.scatter(xs, ys, s=22, alpha=0.8, edgecolor="none")
    else:
        groups = np.asarray(groups)
        for g in sorted(set(groups.tolist())):
            sel = groups == g
            ax.scatter(xs[sel], ys[sel], s=22, alpha=0.8, edgecolor="none", label=str(g))
        ax.legend(frameon=False, fontsize=8, title="group")
    ax.axhline(0.0, color="0.85", lw=0.8, zorder=0)
    ax.axvline(0.0, color="0.85", lw=0.8, zorder=0)
    ax.set_xlabel("axis 1")
    ax.set_ylabel("axis 2")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def sweep_errorbars(summaries, path, title=None):
    """Mean +/- sd Procrustes error against the zero proportion, per method."""
    methods = sorted({s.method for s in summaries})
    fig, ax = plt.subplots(figsize=(7, 5))
    offsets = np.linspace(-0.012, 0.012, max(len(methods), 2))
    for off, method in zip(offsets, methods):
        rows = sorted((s for s in summaries if s.method == method),
                      key=lambda s: s.zero_prop)
        ps = np.array([s.zero_prop for s in rows])
        means = np.array([s.mean_error for s in rows])
        sds = np.array([s.sd_error for s in rows])
        ax.errorbar(ps + off, means, yerr=sds, marker="o", ms=4, capsize=3,
                    lw=1.2, label=method)
    ax.set_xlabel("mean proportion of zeros")
    ax.set_ylabel("Procrustes error")
    ax.set_ylim(bottom=0.0)
    ax.legend(frameon=False, fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def metric_group_figure(report, path, title=None):
    """Group-level MAEP, RMSE, AUC and Tjur R2 against group mean prevalence."""
    panels = [("MAEP", report.group_maep), ("RMSE", report.group_rmse),
              ("AUC", report.group_auc), ("Tjur R$^2$", report.group_tjur)]
    prev = np.asarray(report.group_prevalence)
    fig, axes = plt.subplots(2, 2, figsize=(8, 6), sharex=True)
    for ax, (label, vals) in zip(axes.ravel(), panels):
        pts = [(p, v) for p, v in zip(prev, vals) if v is not None]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", ms=5, lw=1.2)
        else:
            ax.text(0.5, 0.5, "not available", ha="center", va="center",
                    transform=ax.transAxes, color="0.5")
        ax.set_ylabel(label)
    for ax in axes[1]:
        ax.set_xlabel("group mean prevalence")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
