"""Predictive metrics: MAEP, RMSE, AUC, Tjur R2, and prevalence grouping."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError


def maep(pred, obs):
    """Mean absolute error of prediction."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.shape != obs.shape or pred.size == 0:
        raise ConfigurationError("predictions and observations must be equal-length and non-empty")
    return float(np.mean(np.abs(pred - obs)))


def rmse(pred, obs):
    """Root mean square error of prediction."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.shape != obs.shape or pred.size == 0:
        raise ConfigurationError("predictions and observations must be equal-length and non-empty")
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


def auc(scores, labels):
    """Rank-based AUC (Mann-Whitney), ties counted one half.

    Returns None when only one class is present (undefined marker).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    r_pos = ranks[labels].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def tjur_r2(probs, labels):
    """Mean predicted presence probability among presences minus absences."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        return None
    return float(probs[labels].mean() - probs[~labels].mean())


def prevalence(data):
    """Per-species fraction of nonzero observed cells."""
    y = data.values
    mask = data.mask
    out = np.zeros(y.shape[1])
    for j in range(y.shape[1]):
        col = y[mask[:, j], j]
        out[j] = float(np.mean(col > 0.0)) if col.size else 0.0
    return out


def prevalence_groups(data, n_groups):
    """Equal-frequency prevalence bins; ties broken by species name.

    Returns (group assignment per species, group mean prevalence).
    """
    prev = prevalence(data)
    m = prev.size
    if n_groups < 1 or n_groups > m:
        raise ConfigurationError("n_groups must be between 1 and the number of species")
    order = sorted(range(m), key=lambda j: (prev[j], data.species_names[j]))
    assignment = np.empty(m, dtype=int)
    chunks = np.array_split(np.asarray(order), n_groups)
    means = np.empty(n_groups)
    for g, chunk in enumerate(chunks):
        assignment[chunk] = g
        means[g] = prev[chunk].mean()
    return assignment, means


@dataclass(frozen=True)
class MetricReport:
    """Per-species and prevalence-grouped predictive metrics."""

    species: tuple
    species_prevalence: tuple
    species_maep: tuple
    species_rmse: tuple
    species_auc: tuple
    species_tjur: tuple
    species_n_test: tuple
    group_ids: tuple
    group_prevalence: tuple
    group_maep: tuple
    group_rmse: tuple
    group_auc: tuple
    group_tjur: tuple
    group_n_species: tuple
    pooled: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def species_rows(self):
        keys = ("species", "prevalence", "maep", "rmse", "auc", "tjur_r2", "n_test")
        cols = (self.species, self.species_prevalence, self.species_maep, self.species_rmse,
                self.species_auc, self.species_tjur, self.species_n_test)
        return [dict(zip(keys, row)) for row in zip(*cols)]

    def group_rows(self):
        keys = ("group", "mean_prevalence", "maep", "rmse", "auc", "tjur_r2", "n_species")
        cols = (self.group_ids, self.group_prevalence, self.group_maep, self.group_rmse,
                self.group_auc, self.group_tjur, self.group_n_species)
        return [dict(zip(keys, row)) for row in zip(*cols)]

    def to_json(self, path):
        doc = {"species": self.species_rows(), "groups": self.group_rows(),
               "pooled": self.pooled, "metadata": self.metadata}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, default=_jsonable)

    def write_csv(self, species_path, groups_path):
        _write_rows(species_path, self.species_rows())
        _write_rows(groups_path, self.group_rows())


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def build_report(pred_mean, observed, presence_probs=None, prevalence_data=None,
                 n_groups=5, metadata=None):
    """Assemble a MetricReport from predictions against held-out data.

    MAEP/RMSE use expected cover; AUC and Tjur R2 use presence
    probabilities when supplied.  Prevalences come from prevalence_data
    (the complete panel) when given, else from the held-out observations.
    Species whose per-species AUC/Tjur is undefined (single-class test
    column) are flagged and excluded from the pooled group computation.
    """
    pred = np.asarray(pred_mean, dtype=float)
    y, mask = observed.values, observed.mask
    if pred.shape != y.shape:
        raise ConfigurationError("prediction and observation shapes differ")
    probs = None if presence_probs is None else np.asarray(presence_probs, dtype=float)
    prev_src = prevalence_data if prevalence_data is not None else observed
    prev = prevalence(prev_src)
    m = y.shape[1]
    n_groups = min(n_groups, m)
    assignment, group_prev = prevalence_groups(prev_src, n_groups)

    sp_maep, sp_rmse, sp_auc, sp_tjur, sp_n = [], [], [], [], []
    for j in range(m):
        sel = mask[:, j]
        obs_j = y[sel, j]
        sp_n.append(int(obs_j.size))
        if obs_j.size == 0:
            sp_maep.append(None)
            sp_rmse.append(None)
            sp_auc.append(None)
            sp_tjur.append(None)
            continue
        sp_maep.append(maep(pred[sel, j], obs_j))
        sp_rmse.append(rmse(pred[sel, j], obs_j))
        labels = obs_j > 0.0
        if probs is None:
            sp_auc.append(None)
            sp_tjur.append(None)
        else:
            sp_auc.append(auc(probs[sel, j], labels))
            sp_tjur.append(tjur_r2(probs[sel, j], labels))

    g_maep, g_rmse, g_auc, g_tjur, g_n = [], [], [], [], []
    for g in range(n_groups):
        members = [j for j in range(m) if assignment[j] == g]
        g_n.append(len(members))
        vals = [sp_maep[j] for j in members if sp_maep[j] is not None]
        g_maep.append(float(np.mean(vals)) if vals else None)
        vals = [sp_rmse[j] for j in members if sp_rmse[j] is not None]
        g_rmse.append(float(np.mean(vals)) if vals else None)
        if probs is None:
            g_auc.append(None)
            g_tjur.append(None)
            continue
        pooled_scores, pooled_labels = [], []
        for j in members:
            if sp_auc[j] is None and sp_tjur[j] is None:
                continue  # undefined per-species metric: excluded from pooling
            sel = mask[:, j]
            pooled_scores.append(probs[sel, j])
            pooled_labels.append(y[sel, j] > 0.0)
        if pooled_scores:
            pooled_scores = np.concatenate(pooled_scores)
            pooled_labels = np.concatenate(pooled_labels)
            g_auc.append(auc(pooled_scores, pooled_labels))
            g_tjur.append(tjur_r2(pooled_scores, pooled_labels))
        else:
            g_auc.append(None)
            g_tjur.append(None)

    obs_all = y[mask]
    pred_all = pred[mask]
    pooled = {"maep": maep(pred_all, obs_all), "rmse": rmse(pred_all, obs_all)}
    if probs is not None:
        pooled["auc"] = auc(probs[mask], obs_all > 0.0)
        pooled["tjur_r2"] = tjur_r2(probs[mask], obs_all > 0.0)

    return MetricReport(
        species=tuple(observed.species_names),
        species_prevalence=tuple(float(p) for p in prev),
        species_maep=tuple(sp_maep), species_rmse=tuple(sp_rmse),
        species_auc=tuple(sp_auc), species_tjur=tuple(sp_tjur),
        species_n_test=tuple(sp_n),
        group_ids=tuple(range(n_groups)),
        group_prevalence=tuple(float(p) for p in group_prev),
        group_maep=tuple(g_maep), group_rmse=tuple(g_rmse),
        group_auc=tuple(g_auc), group_tjur=tuple(g_tjur),
        group_n_species=tuple(g_n),
        pooled=pooled,
        metadata=dict(metadata or {}),
    )
