"""Ordination tools: Procrustes comparison, dissimilarities and NMDS.

The NMDS implementation minimizes Kruskal stress-1 by alternating isotonic
fits of disparities against dissimilarity ranks with Guttman majorization
steps; a backtracking guard keeps the recorded stress sequence monotone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

METRICS = ("bray-curtis", "jaccard")


@dataclass(frozen=True)
class OrdinationScores:
    """Low-dimensional site configuration from a model or from NMDS."""

    coords: np.ndarray
    source: str
    stress: float = None
    converged: bool = True
    site_names: tuple = ()
    stress_trace: tuple = ()

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] < 1:
            raise ConfigurationError("scores must be an n x d matrix with d >= 1")
        if not np.all(np.isfinite(coords)):
            raise ConfigurationError("scores must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "site_names", tuple(self.site_names))


@dataclass(frozen=True)
class DissimilarityMatrix:
    values: np.ndarray
    metric: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ConfigurationError("dissimilarity matrix must be square")
        if not np.allclose(v, v.T) or np.any(np.diag(v) != 0.0):
            raise ConfigurationError("dissimilarity matrix must be symmetric with zero diagonal")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ConfigurationError("dissimilarities must lie in [0, 1]")
        if self.metric not in METRICS:
            raise ConfigurationError(f"metric must be one of {METRICS}")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# Procrustes
# ---------------------------------------------------------------------------

def procrustes_error(target, candidate):
    """Scale-free residual after optimally superimposing candidate on target.

    Both configurations are column-centered, the target is normalized to
    unit total sum of squares, and the candidate is rotated/reflected and
    isotropically rescaled to minimize the Frobenius discrepancy.  The
    result lies in [0, 1] because zero scale is always admissible.
    """
    X = np.asarray(target, dtype=float)
    Y = np.asarray(candidate, dtype=float)
    if X.shape != Y.shape or X.ndim != 2:
        raise ConfigurationError("configurations must share an n x d shape")
    n, d = X.shape
    if n < d + 1:
        raise ConfigurationError("need at least d + 1 points")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    ss_x = float(np.sum(X ** 2))
    ss_y = float(np.sum(Y ** 2))
    if ss_x <= 0.0 or ss_y <= 0.0:
        raise DomainError("degenerate (zero-variance) configuration")
    X = X / np.sqrt(ss_x)
    sigma = np.linalg.svd(Y.T @ X, compute_uv=False)
    trace = float(sigma.sum())
    return max(0.0, 1.0 - trace ** 2 / ss_y)


# ---------------------------------------------------------------------------
# dissimilarities
# ---------------------------------------------------------------------------

def dissimilarity(data, metric):
    """Pairwise site dissimilarities; Jaccard works on presence-absence.

    Masked cells are ignored pairwise.  A pair of all-zero (or all-empty)
    rows gets distance 0 so extremely sparse panels stay well-defined.
    """
    if metric not in METRICS:
        raise ConfigurationError(f"metric must be one of {METRICS}")
    y = np.where(data.mask, data.values, 0.0)
    w = data.mask.astype(float)
    n = y.shape[0]
    out = np.zeros((n, n))
    if metric == "jaccard":
        y = (y > 0.0).astype(float)
    for a in range(n):
        both = w[a] * w[a + 1:]
        ya = y[a] * both
        yb = y[a + 1:] * both
        if metric == "bray-curtis":
            num = np.abs(ya - yb).sum(axis=1)
            den = (ya + yb).sum(axis=1)
        else:
            num = ((ya != yb) & ((ya > 0) | (yb > 0))).sum(axis=1).astype(float)
            den = ((ya > 0) | (yb > 0)).sum(axis=1).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = np.where(den > 0.0, num / den, 0.0)
        out[a, a + 1:] = vals
        out[a + 1:, a] = vals
    return DissimilarityMatrix(values=np.clip(out, 0.0, 1.0), metric=metric)


# ---------------------------------------------------------------------------
# isotonic regression (pool adjacent violators)
# ---------------------------------------------------------------------------

def isotonic_regression(values, weights=None):
    """Weighted least-squares fit under a non-decreasing constraint."""
    y = np.asarray(values, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if y.shape != w.shape or y.ndim != 1:
        raise ConfigurationError("values and weights must be equal-length vectors")
    if np.any(w <= 0.0):
        raise ConfigurationError("weights must be positive")
    # stack of blocks: (mean, weight, count)
    means, wsum, count = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        wsum.append(wi)
        count.append(1)
        while len(means) > 1 and means[-2] >= means[-1]:
            m2, w2, c2 = means.pop(), wsum.pop(), count.pop()
            m1, w1, c1 = means.pop(), wsum.pop(), count.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            wsum.append(wt)
            count.append(c1 + c2)
    return np.repeat(means, count)


# ---------------------------------------------------------------------------
# NMDS
# ---------------------------------------------------------------------------

def _pair_distances(X, rows, cols):
    diff = X[rows] - X[cols]
    return np.sqrt(np.sum(diff * diff, axis=1))


def _stress1(dist, disp):
    denom = float(np.sum(dist ** 2))
    if denom <= 0.0:
        return np.inf
    return float(np.sqrt(np.sum((dist - disp) ** 2) / denom))


def _classical_start(D, d):
    n = D.shape[0]
    J = np.eye(n) - np.full((n, n), 1.0 / n)
    B = -0.5 * J @ (D ** 2) @ J
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1][:d]
    lam = np.clip(vals[order], 0.0, None)
    return vecs[:, order] * np.sqrt(lam)[None, :]


def nmds(diss, d=2, n_restarts=4, seed=0, max_iter=500, tol=1e-9):
    """Nonmetric MDS minimizing Kruskal stress-1; returns the best restart.

    Restart 0 starts from the classical-scaling configuration, the rest
    from seeded Gaussian draws.  Ties in the dissimilarities are handled by
    the primary approach: tied pairs may receive unequal fitted distances.
    """
    D = np.asarray(diss.values, dtype=float)
    n = D.shape[0]
    rows, cols = np.triu_indices(n, 1)
    dvals = D[rows, cols]
    best = None
    for r in range(n_restarts):
        if r == 0:
            X = _classical_start(D, d)
            if not np.all(np.isfinite(X)) or np.allclose(X, 0.0):
                X = np.random.default_rng([seed, r]).normal(size=(n, d))
        else:
            X = np.random.default_rng([seed, r]).normal(size=(n, d))
        X = X - X.mean(axis=0)
        stress, converged = np.inf, False
        trace = []

        def fitted_stress(cfg):
            dist = _pair_distances(cfg, rows, cols)
            order = np.lexsort((dist, dvals))
            disp = np.empty_like(dist)
            disp[order] = isotonic_regression(dist[order])
            return _stress1(dist, disp), dist, disp

        for _ in range(max_iter):
            new_stress, dist, disp = fitted_stress(X)
            trace.append(new_stress)
            if np.isfinite(stress) and stress - new_stress <= tol * max(stress, 1e-12):
                stress = min(stress, new_stress)
                converged = True
                break
            stress = min(stress, new_stress) if np.isfinite(stress) else new_stress
            # Guttman transform with a backtracking guard so stress never rises
            X_new = _guttman(X, rows, cols, dist, disp, n)
            for _ in range(30):
                if fitted_stress(X_new)[0] <= stress + 1e-15:
                    break
                X_new = 0.5 * (X_new + X)
            else:
                converged = True
                break
            X = X_new
        stress = min(stress, fitted_stress(X)[0])
        if best is None or (stress, r) < (best[0], best[1]):
            best = (stress, r, X, converged, tuple(trace))
    stress, _, X, converged, trace = best
    return OrdinationScores(coords=X, source="nmds", stress=float(stress),
                            converged=bool(converged), stress_trace=trace)


def _guttman(X, rows, cols, dist, disp, n):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dist > 0.0, disp / dist, 0.0)
    B = np.zeros((n, n))
    B[rows, cols] = -ratio
    B[cols, rows] = -ratio
    np.fill_diagonal(B, -B.sum(axis=1))
    return (B @ X) / n


def model_scores(model):
    """Ordination scores of a fitted model: the variational means."""
    if model.spec.latent_dim < 1:
        raise ConfigurationError("the fitted model has no latent variables to plot")
    return OrdinationScores(coords=model.vstate.means, source="model-variational-means",
                            site_names=model.site_names)
