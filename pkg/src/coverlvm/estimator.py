"""Variational maximum likelihood for cover GLLVMs.

The objective is a Gaussian-posterior variational bound with a second-order
curvature correction: each log-density branch is expanded about the linear
predictor at the variational mean, so every observed cell contributes

    l(y; eta~) + 0.5 * Var_q(eta) * d2l/deta2 |_(eta~)

per branch, minus one KL(q || N(0, I_d)) term per site.  Model and
variational parameters are optimized jointly in one free vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import families as fam
from .errors import (ConfigurationError, DataValidationError, FitFailureError,
                     ParameterError, UnsupportedFamilyError)
from .model import (MEAN, ONE, ZERO, CovariateMatrix, ParameterLayout,
                    ParameterSet, VariationalState, validate)

_BIG = 1e20


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    elbo_rel_tol: float = 1e-8
    grad_inf_tol: float = 1e-5
    n_restarts: int = 3
    seed: int = 0
    variational_cov: str = "diagonal"
    optimizer: str = "quasi-newton"

    def __post_init__(self):
        if self.elbo_rel_tol <= 0 or self.grad_inf_tol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.n_restarts < 1:
            raise ConfigurationError("need at least one restart")
        if self.variational_cov not in ("diagonal", "full"):
            raise ConfigurationError("variational_cov must be 'diagonal' or 'full'")
        if self.optimizer not in ("quasi-newton", "first-order-adaptive"):
            raise ConfigurationError("optimizer must be 'quasi-newton' or 'first-order-adaptive'")


@dataclass(frozen=True)
class FitDiagnostics:
    final_elbo: float
    iterations: int
    grad_inf_norm: float
    best_restart: int
    converged: bool
    restart_elbos: tuple = ()


@dataclass(frozen=True)
class FittedModel:
    spec: object
    params: ParameterSet
    vstate: VariationalState
    diagnostics: FitDiagnostics
    species_names: tuple = ()
    site_names: tuple = ()
    covariate_names: tuple = ()
    class_counts: object = None

    @property
    def scores(self):
        return self.vstate.means


# ---------------------------------------------------------------------------
# variational free-parameter layout
# ---------------------------------------------------------------------------

class VariationalLayout:
    """Free encoding of the variational state: means raw, scales via log."""

    def __init__(self, n_sites, latent_dim, kind="diagonal"):
        self.n, self.d, self.kind = int(n_sites), int(latent_dim), kind
        per_site = self.d if kind == "diagonal" else self.d * (self.d + 1) // 2
        self.n_free = self.n * self.d + self.n * per_site

    def pack(self, vstate):
        n, d = self.n, self.d
        if d == 0:
            return np.zeros(0)
        out = [np.asarray(vstate.means).ravel()]
        if self.kind == "diagonal":
            out.append(0.5 * np.log(np.asarray(vstate.covariances)).ravel())
        else:
            L = np.asarray(vstate.covariances)
            rows, cols = np.tril_indices(d)
            block = L[:, rows, cols]
            diag = rows == cols
            block = block.copy()
            block[:, diag] = np.log(block[:, diag])
            out.append(block.ravel())
        return np.concatenate(out)

    def unpack(self, vec):
        n, d = self.n, self.d
        if d == 0:
            return VariationalState(means=np.zeros((n, 0)), covariances=np.zeros((n, 0)),
                                    kind="diagonal")
        means = vec[: n * d].reshape(n, d)
        rest = vec[n * d:]
        if self.kind == "diagonal":
            cov = np.exp(2.0 * rest.reshape(n, d))
            return VariationalState(means=means, covariances=cov, kind="diagonal")
        rows, cols = np.tril_indices(d)
        block = rest.reshape(n, len(rows)).copy()
        diag = rows == cols
        block[:, diag] = np.exp(block[:, diag])
        L = np.zeros((n, d, d))
        L[:, rows, cols] = block
        return VariationalState(means=means, covariances=L, kind="full")

    def pack_gradient(self, g_means, g_cov, vstate):
        n, d = self.n, self.d
        if d == 0:
            return np.zeros(0)
        out = [np.asarray(g_means).ravel()]
        if self.kind == "diagonal":
            out.append((2.0 * np.asarray(g_cov) * np.asarray(vstate.covariances)).ravel())
        else:
            rows, cols = np.tril_indices(d)
            gL = np.asarray(g_cov).copy()
            L = np.asarray(vstate.covariances)
            diag_idx = np.arange(d)
            gL[:, diag_idx, diag_idx] *= L[:, diag_idx, diag_idx]
            out.append(gL[:, rows, cols].ravel())
        return np.concatenate(out)


# ---------------------------------------------------------------------------
# the objective
# ---------------------------------------------------------------------------

class VariationalObjective:
    """Joint objective over model and variational free parameters.

    Branch bookkeeping is precomputed once per dataset: every observed cell
    is routed to the log-density branches it activates, each tagged with
    the predictor part it differentiates against.
    """

    def __init__(self, data, covariates, spec, variational_cov="diagonal"):
        self.spec = spec
        self.data = data
        self.X = np.asarray(covariates.values, dtype=float)
        n, m = data.values.shape
        if self.X.shape[0] != n:
            raise ConfigurationError("covariates and responses disagree on sites")
        class_counts = None
        if spec.family == "cumulative-logit":
            if not data.ordinal:
                raise DataValidationError("cumulative-logit requires ordinal labels")
            labels = np.where(data.mask, data.values, 1).astype(int)
            if spec.cutoff_mode == "common":
                class_counts = int(labels.max())
            else:
                counts = np.array([labels[data.mask[:, j], j].max() for j in range(m)])
                class_counts = counts
        self.layout = ParameterLayout(spec, n, m, self.X.shape[1], class_counts)
        self.vlayout = VariationalLayout(n, spec.latent_dim, variational_cov)
        self.n_free = self.layout.n_free + self.vlayout.n_free
        self._branches = self._build_branches()
        self._cut_width = self._cutoff_width()

    # -- construction ------------------------------------------------------------
    def _cutoff_width(self):
        spec = self.spec
        if spec.family == "ordered-beta":
            return 2
        if spec.family == "cumulative-logit":
            cc = self.layout.class_counts
            return (cc if np.isscalar(cc) else int(max(cc))) - 1
        return 0

    def _build_branches(self):
        spec = self.spec
        y = self.data.values
        gi, gj = np.nonzero(self.data.mask)
        yv = y[gi, gj]
        branches = []

        def sub(sel):
            return gi[sel], gj[sel], yv[sel]

        if spec.family == "bernoulli":
            if np.any((yv != 0.0) & (yv != 1.0)):
                raise DataValidationError("bernoulli responses must be 0 or 1")
            branches.append(("bern", MEAN, None, gi, gj, yv, None))
        elif spec.family == "beta-shifted":
            ys = fam.shift_transform(yv, spec.shift_n)
            branches.append(("beta", MEAN, None, gi, gj, ys, None))
        elif spec.family == "hurdle-beta":
            zero = yv == 0.0
            one = yv == 1.0
            interior = ~zero & ~one
            with_ones = spec.hurdle_parts == "zeros-and-ones"
            if not with_ones and np.any(one):
                raise DataValidationError("y = 1 present but hurdle_parts is zeros-only")
            i0, j0, _ = sub(zero)
            branches.append(("sig", ZERO, 1.0, i0, j0, None, None))
            ip, jp, _ = sub(~zero)
            branches.append(("sig", ZERO, -1.0, ip, jp, None, None))
            if with_ones:
                i1, j1, _ = sub(one)
                branches.append(("sig", ONE, 1.0, i1, j1, None, None))
                ii, ji, yi = sub(interior)
                branches.append(("sig", ONE, -1.0, ii, ji, None, None))
            else:
                ii, ji, yi = sub(interior)
            branches.append(("beta", MEAN, None, ii, ji, yi, None))
        elif spec.family == "ordered-beta":
            zero = yv == 0.0
            one = yv == 1.0
            interior = ~zero & ~one
            i0, j0, _ = sub(zero)
            branches.append(("low", MEAN, None, i0, j0, None,
                             (np.zeros(i0.size, dtype=int),)))
            i1, j1, _ = sub(one)
            branches.append(("high", MEAN, None, i1, j1, None,
                             (np.ones(i1.size, dtype=int),)))
            ii, ji, yi = sub(interior)
            branches.append(("band", MEAN, None, ii, ji, None,
                             (np.zeros(ii.size, dtype=int), np.ones(ii.size, dtype=int))))
            branches.append(("beta", MEAN, None, ii, ji, yi, None))
        elif spec.family == "cumulative-logit":
            labels = yv.astype(int)
            cc = self.layout.class_counts
            k_per_cell = (np.full(gj.size, cc - 1) if np.isscalar(cc)
                          else np.asarray(cc)[gj] - 1)
            low = labels == 1
            top = labels == k_per_cell + 1
            band = ~low & ~top
            il, jl, _ = sub(low)
            branches.append(("low", MEAN, None, il, jl, None,
                             (np.zeros(il.size, dtype=int),)))
            ib, jb, _ = sub(band)
            lb = labels[band]
            branches.append(("band", MEAN, None, ib, jb, None, (lb - 2, lb - 1)))
            it, jt, _ = sub(top)
            branches.append(("high", MEAN, None, it, jt, None, (k_per_cell[top] - 1,)))
        return branches

    # -- shared pieces -----------------------------------------------------------
    def pack(self, params, vstate=None):
        vec_m = self.layout.pack(params)
        if self.vlayout.n_free == 0:
            return vec_m
        if vstate is None:
            raise ConfigurationError("a variational state is required when latent_dim > 0")
        return np.concatenate([vec_m, self.vlayout.pack(vstate)])

    def unpack(self, theta):
        k = self.layout.n_free
        params = self.layout.unpack(theta[:k])
        vstate = self.vlayout.unpack(theta[k:])
        return params, vstate

    def _padded_cutoffs(self, params):
        spec = self.spec
        if spec.family == "ordered-beta":
            return np.asarray(params.cutoffs, dtype=float)
        if spec.family == "cumulative-logit":
            m, w = self.layout.m, self._cut_width
            C = np.zeros((m, w))
            if spec.cutoff_mode == "common":
                C[:] = np.asarray(params.cutoffs)[None, :]
            else:
                for j, c in enumerate(params.cutoffs):
                    C[j, : c.size] = c
            return C
        return None

    def _etas(self, params, means):
        X, U = self.X, means
        etas = {}
        for part in self.spec.parts:
            eta = np.zeros((self.layout.n, self.layout.m))
            b0 = params.intercepts.get(part)
            if b0 is not None:
                eta += np.asarray(b0)[None, :]
            if X.shape[1]:
                eta += X @ np.asarray(params.slopes[part]).T
            if self.layout.d:
                eta += U @ np.asarray(params.loadings[part]).T
            if params.row_effects is not None:
                eta += np.asarray(params.row_effects)[:, None]
            etas[part] = eta
        return etas

    def _branch_terms(self, kind, sign, eta_g, y_g, cols, gj, C, lphi):
        if kind == "bern":
            return fam.bernoulli_terms(y_g, eta_g)
        if kind == "beta":
            return fam.beta_terms(y_g, eta_g, lphi[gj])
        if kind == "sig":
            t = fam.log_sigmoid_terms(sign * eta_g)
            return {"value": t["value"], "d1": sign * t["d1"],
                    "d2": t["d2"], "d3": sign * t["d3"]}
        if kind == "low":
            return fam.mass_low_terms(C[gj, cols[0]], eta_g)
        if kind == "high":
            return fam.mass_high_terms(C[gj, cols[0]], eta_g)
        if kind == "band":
            return fam.mass_band_terms(C[gj, cols[0]], C[gj, cols[1]], eta_g)
        raise AssertionError(kind)

    # -- evaluation --------------------------------------------------------------
    def value_and_grad(self, theta):
        """(-elbo, -gradient); non-finite evaluations return a large value."""
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                value, grad = self._evaluate(theta)
        except (FloatingPointError, ParameterError, np.linalg.LinAlgError):
            return _BIG, np.zeros_like(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return _BIG, np.zeros_like(theta)
        return -value, -grad

    def value(self, theta):
        value, _ = self._evaluate(theta)
        return value

    def _evaluate(self, theta):
        params, vstate = self.unpack(theta)
        return self._evaluate_state(params, vstate)

    def _evaluate_state(self, params, vstate):
        spec, layout, vlayout = self.spec, self.layout, self.vlayout
        n, m, d = layout.n, layout.m, layout.d
        U = vstate.means
        etas = self._etas(params, U)
        C = self._padded_cutoffs(params)
        lphi = None
        if spec.has_precision:
            lp = params.log_precisions
            lphi = np.broadcast_to(lp, (m,)) if lp.size == 1 else lp

        G = {p: np.asarray(params.loadings[p]) for p in spec.parts}
        diag_cov = vlayout.kind == "diagonal"
        if d:
            if diag_cov:
                V = vstate.covariances
                v = {p: V @ (G[p] ** 2).T for p in spec.parts}
            else:
                L = vstate.covariances
                A = L @ np.transpose(L, (0, 2, 1))
                v = {p: np.einsum("nkl,mk,ml->nm", A, G[p], G[p]) for p in spec.parts}
        else:
            v = None

        value = 0.0
        Geta = {p: np.zeros((n, m)) for p in spec.parts}
        Gv = {p: np.zeros((n, m)) for p in spec.parts} if d else None
        glphi = np.zeros(m) if spec.has_precision else None
        gcut = np.zeros((m, self._cut_width)) if self._cut_width else None

        with np.errstate(over="raise", invalid="raise", divide="raise"):
            for kind, part, sign, gi, gj, y_g, cols in self._branches:
                if gi.size == 0:
                    continue
                eta_g = etas[part][gi, gj]
                t = self._branch_terms(kind, sign, eta_g, y_g, cols, gj, C, lphi)
                vv = v[part][gi, gj] if d else 0.0
                value += float(t["value"].sum()) + 0.5 * float(np.sum(vv * t["d2"]))
                Geta[part][gi, gj] += t["d1"] + 0.5 * vv * t["d3"]
                if d:
                    Gv[part][gi, gj] += 0.5 * t["d2"]
                if kind == "beta":
                    glphi += np.bincount(gj, weights=t["d_lphi"] + 0.5 * vv * t["d2_lphi"],
                                         minlength=m)
                elif kind in ("low", "high"):
                    w = self._cut_width
                    flat = gj * w + cols[0]
                    gcut += np.bincount(flat, weights=t["dc"] + 0.5 * vv * t["d2c"],
                                        minlength=m * w).reshape(m, w)
                elif kind == "band":
                    w = self._cut_width
                    gcut += np.bincount(gj * w + cols[0],
                                        weights=t["dlo"] + 0.5 * vv * t["d2lo"],
                                        minlength=m * w).reshape(m, w)
                    gcut += np.bincount(gj * w + cols[1],
                                        weights=t["dhi"] + 0.5 * vv * t["d2hi"],
                                        minlength=m * w).reshape(m, w)

        # KL(q_i || N(0, I)) and its gradients
        g_means = None
        g_cov = None
        if d:
            if diag_cov:
                V = vstate.covariances
                value -= 0.5 * float(V.sum() + (U ** 2).sum() - n * d - np.log(V).sum())
                g_cov = sum(Gv[p] @ (G[p] ** 2) for p in spec.parts)
                g_cov = g_cov - 0.5 * (1.0 - 1.0 / V)
            else:
                L = vstate.covariances
                ldiag = np.diagonal(L, axis1=1, axis2=2)
                value -= 0.5 * float((L ** 2).sum() + (U ** 2).sum() - n * d
                                     - 2.0 * np.log(ldiag).sum())
                M = sum(np.einsum("nm,mk,ml->nkl", Gv[p], G[p], G[p]) for p in spec.parts)
                g_cov = 2.0 * (M @ L)
                kl_L = L.copy()
                idx = np.arange(d)
                kl_L[:, idx, idx] -= 1.0 / ldiag
                g_cov -= kl_L
                g_cov = np.tril(g_cov)
            g_means = sum(Geta[p] @ G[p] for p in spec.parts) - U

        grads = {
            "intercepts": {p: Geta[p].sum(axis=0) for p in spec.parts},
            "slopes": {p: Geta[p].T @ self.X for p in spec.parts},
            "log_precisions": glphi,
            "row_effects": (sum(Geta[p] for p in spec.parts).sum(axis=1)
                            if spec.row_effects else None),
        }
        gload = {}
        for p in spec.parts:
            gl = Geta[p].T @ U if d else np.zeros((m, 0))
            if d:
                if diag_cov:
                    gl = gl + 2.0 * G[p] * (Gv[p].T @ vstate.covariances)
                else:
                    gl = gl + 2.0 * np.einsum("nm,nkl,ml->mk", Gv[p], A, G[p])
            gload[p] = gl
        grads["loadings"] = gload
        if spec.family == "ordered-beta":
            grads["cutoffs"] = gcut
        elif spec.family == "cumulative-logit":
            if spec.cutoff_mode == "common":
                grads["cutoffs"] = gcut.sum(axis=0)
            else:
                grads["cutoffs"] = [gcut[j, : cc - 1]
                                    for j, cc in enumerate(self.layout.class_counts)]

        gvec = self.layout.pack_gradient(grads, params)
        if vlayout.n_free:
            gvec = np.concatenate([gvec, vlayout.pack_gradient(g_means, g_cov, vstate)])
        return value, gvec

    # -- plain log-likelihood fields (quadrature support) -------------------------
    def loglik_fields(self, params, scores, C=None, lphi=None):
        """Per-site log-likelihood and d1/d2 (n, m) arrays at given scores."""
        spec = self.spec
        n, m = self.layout.n, self.layout.m
        etas = self._etas(params, scores)
        C = self._padded_cutoffs(params) if C is None else C
        if lphi is None and spec.has_precision:
            lp = params.log_precisions
            lphi = np.broadcast_to(lp, (m,)) if lp.size == 1 else lp
        total = np.zeros(n)
        D1 = {p: np.zeros((n, m)) for p in spec.parts}
        D2 = {p: np.zeros((n, m)) for p in spec.parts}
        for kind, part, sign, gi, gj, y_g, cols in self._branches:
            if gi.size == 0:
                continue
            t = self._branch_terms(kind, sign, etas[part][gi, gj], y_g, cols, gj, C, lphi)
            total += np.bincount(gi, weights=t["value"], minlength=n)
            D1[part][gi, gj] += t["d1"]
            D2[part][gi, gj] += t["d2"]
        return total, D1, D2


# ---------------------------------------------------------------------------
# public elbo entry points
# ---------------------------------------------------------------------------

def _as_objective(params, vstate, data, covariates, spec, variational_cov):
    if covariates is None:
        covariates = CovariateMatrix.empty(data.n_sites)
    if vstate is None:
        n = data.n_sites
        vstate = VariationalState(means=np.zeros((n, 0)), covariances=np.zeros((n, 0)))
    kind = variational_cov or vstate.kind
    return VariationalObjective(data, covariates, spec, kind), vstate


def elbo(params, vstate, data, covariates, spec, variational_cov=None):
    """Variational objective value at the given parameters and state."""
    obj, vstate = _as_objective(params, vstate, data, covariates, spec, variational_cov)
    value, _ = obj._evaluate_state(params, vstate)
    return value


def elbo_gradient(params, vstate, data, covariates, spec, variational_cov=None):
    """Exact gradient of :func:`elbo` in free-vector coordinates."""
    obj, vstate = _as_objective(params, vstate, data, covariates, spec, variational_cov)
    _, grad = obj._evaluate_state(params, vstate)
    return grad


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _safe_logit(p, eps=0.02):
    return fam.logit(np.clip(p, eps, 1.0 - eps))


def _initial_params(obj, rng):
    spec, layout = obj.spec, obj.layout
    data = obj.data
    n, m, d, q = layout.n, layout.m, layout.d, layout.q
    y, mask = data.values, data.mask

    def col_stat(fn, default=0.5):
        out = np.full(m, default)
        for j in range(m):
            col = y[mask[:, j], j]
            if col.size:
                out[j] = fn(col)
        return out

    intercepts, slopes, loadings = {}, {}, {}
    for part in spec.parts:
        slopes[part] = np.zeros((m, q))
        if d:
            draw = rng.normal(0.0, 0.1, size=(m, d))
            if part == MEAN:
                G = np.tril(draw)
                idx = np.arange(min(m, d))
                G[idx, idx] = np.maximum(np.abs(draw[idx, idx]), 1e-3)
                loadings[part] = G
            else:
                loadings[part] = draw
        else:
            loadings[part] = np.zeros((m, 0))
    if spec.has_intercepts:
        if spec.family == "bernoulli":
            intercepts[MEAN] = _safe_logit(col_stat(np.mean))
        elif spec.family == "cumulative-logit":
            intercepts[MEAN] = np.zeros(m)
        else:
            mean_shift = col_stat(lambda c: float(np.mean(fam.shift_transform(c, spec.shift_n))))
            intercepts[MEAN] = _safe_logit(mean_shift)
        if ZERO in spec.parts:
            intercepts[ZERO] = _safe_logit(col_stat(lambda c: float(np.mean(c == 0.0))))
        if ONE in spec.parts:
            intercepts[ONE] = _safe_logit(col_stat(
                lambda c: float(np.mean(c[c > 0] == 1.0)) if np.any(c > 0) else 0.5))
    else:
        intercepts[MEAN] = None

    log_prec = None
    if spec.has_precision:
        log_prec = np.zeros(1 if spec.pooled_precision else m)

    cutoffs = None
    if spec.family == "ordered-beta":
        p0 = col_stat(lambda c: float(np.mean(c == 0.0)))
        p1 = col_stat(lambda c: float(np.mean(c == 1.0)))
        z0 = _safe_logit(p0)
        z1 = _safe_logit(1.0 - p1)
        z1 = np.maximum(z1, z0 + 0.2)
        if spec.cutoff_mode == "common":
            z1[:] = z1.mean()
            z0 = np.minimum(z0, z1 - 0.2)
        cutoffs = np.column_stack([z0, z1])
    elif spec.family == "cumulative-logit":
        cc = layout.class_counts
        if spec.cutoff_mode == "common":
            labels = y[mask].astype(int)
            freq = np.bincount(labels, minlength=cc + 1)[1:cc + 1] / labels.size
            c = _strictly_increasing(_safe_logit(np.cumsum(freq)[:-1], eps=1e-3))
            cutoffs = c - c[0]
        else:
            cuts = []
            for j, kj1 in enumerate(cc):
                col = y[mask[:, j], j].astype(int)
                freq = np.bincount(col, minlength=kj1 + 1)[1:kj1 + 1] / col.size
                c = _safe_logit(np.cumsum(freq)[:-1], eps=1e-3)
                cuts.append(_strictly_increasing(c))
            cutoffs = tuple(cuts)

    row_effects = np.zeros(n) if spec.row_effects else None
    params = ParameterSet(intercepts=intercepts, slopes=slopes, loadings=loadings,
                          log_precisions=log_prec, cutoffs=cutoffs, row_effects=row_effects)
    if d:
        if obj.vlayout.kind == "diagonal":
            vstate = VariationalState(means=np.zeros((n, d)), covariances=np.ones((n, d)))
        else:
            eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
            vstate = VariationalState(means=np.zeros((n, d)), covariances=eye, kind="full")
    else:
        vstate = VariationalState(means=np.zeros((n, 0)), covariances=np.zeros((n, 0)))
    return params, vstate


def _strictly_increasing(c, gap=1e-3):
    c = np.asarray(c, dtype=float).copy()
    for i in range(1, c.size):
        if c[i] <= c[i - 1] + gap:
            c[i] = c[i - 1] + gap
    return c


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def _run_quasi_newton(obj, theta0, opts):
    res = minimize(obj.value_and_grad, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": opts.max_iterations,
                            "maxfun": max(2 * opts.max_iterations, 1000),
                            "ftol": opts.elbo_rel_tol,
                            "gtol": opts.grad_inf_tol,
                            "maxcor": 20})
    return res.x, int(res.nit), bool(res.status == 0)


def _run_adam(obj, theta0, opts, lr=0.02):
    theta = theta0.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    best_theta, best_f = theta.copy(), np.inf
    prev_f = np.inf
    it = 0
    converged = False
    for it in range(1, opts.max_iterations + 1):
        f, g = obj.value_and_grad(theta)
        if f < best_f:
            best_theta, best_f = theta.copy(), f
        if np.max(np.abs(g)) < opts.grad_inf_tol:
            converged = True
            break
        if np.isfinite(prev_f) and abs(prev_f - f) <= opts.elbo_rel_tol * max(abs(f), 1.0):
            converged = True
            break
        prev_f = f
        m1 = 0.9 * m1 + 0.1 * g
        m2 = 0.999 * m2 + 0.001 * g * g
        mh = m1 / (1.0 - 0.9 ** it)
        vh = m2 / (1.0 - 0.999 ** it)
        theta = theta - lr * mh / (np.sqrt(vh) + 1e-8)
    f, _ = obj.value_and_grad(theta)
    if f < best_f:
        best_theta = theta
    return best_theta, it, converged


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def fit(data, covariates, spec, opts=None):
    """Fit by maximizing the variational objective over several restarts."""
    opts = opts or FitOptions()
    if covariates is None:
        covariates = CovariateMatrix.empty(data.n_sites)
    validate(data, spec).raise_on_fatal()
    obj = VariationalObjective(data, covariates, spec, opts.variational_cov)

    runner = _run_quasi_newton if opts.optimizer == "quasi-newton" else _run_adam
    results = []
    for r in range(opts.n_restarts):
        rng = np.random.default_rng([opts.seed, r])
        params0, vstate0 = _initial_params(obj, rng)
        theta0 = obj.pack(params0, vstate0 if obj.vlayout.n_free else None)
        theta, iters, converged = runner(obj, theta0, opts)
        neg_f, neg_g = obj.value_and_grad(theta)
        final = -neg_f if neg_f < _BIG else -np.inf
        results.append({"restart": r, "theta": theta, "elbo": final,
                        "iterations": iters, "converged": converged,
                        "grad_inf": float(np.max(np.abs(neg_g))) if theta.size else 0.0})

    finite = [r for r in results if np.isfinite(r["elbo"])]
    if not finite:
        raise FitFailureError(
            "all restarts diverged",
            diagnostics=tuple({k: v for k, v in r.items() if k != "theta"} for r in results))
    best = max(finite, key=lambda r: r["elbo"])
    params, vstate = obj.unpack(best["theta"])
    final_elbo = obj.value(best["theta"])  # re-evaluation at returned parameters
    diagnostics = FitDiagnostics(
        final_elbo=float(final_elbo),
        iterations=best["iterations"],
        grad_inf_norm=best["grad_inf"],
        best_restart=best["restart"],
        converged=best["converged"],
        restart_elbos=tuple(float(r["elbo"]) for r in results),
    )
    return FittedModel(spec=spec, params=params, vstate=vstate, diagnostics=diagnostics,
                       species_names=data.species_names, site_names=data.site_names,
                       covariate_names=covariates.names,
                       class_counts=obj.layout.class_counts)


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------

def marginal_loglik_quadrature(params, data, covariates, spec, n_nodes=50):
    """Marginal log-likelihood by adaptive tensor-product Gauss-Hermite.

    Oracle for validating the variational objective; limited to d <= 2.
    Nodes are recentred at each site's posterior mode and rescaled by the
    local curvature before applying the Hermite rule.
    """
    d = spec.latent_dim
    if d > 2:
        raise ConfigurationError("quadrature oracle supports latent_dim <= 2 only")
    if covariates is None:
        covariates = CovariateMatrix.empty(data.n_sites)
    obj = VariationalObjective(data, covariates, spec)
    n = obj.layout.n
    if d == 0:
        total, _, _ = obj.loglik_fields(params, np.zeros((n, 0)))
        return float(total.sum())

    G = {p: np.asarray(params.loadings[p]) for p in spec.parts}

    def posterior_terms(U):
        total, D1, D2 = obj.loglik_fields(params, U)
        val = total - 0.5 * np.sum(U ** 2, axis=1) - 0.5 * d * np.log(2.0 * np.pi)
        grad = sum(D1[p] @ G[p] for p in spec.parts) - U
        hess = sum(np.einsum("nm,mk,ml->nkl", D2[p], G[p], G[p]) for p in spec.parts)
        hess = hess - np.eye(d)[None, :, :]
        return val, grad, hess

    # damped Newton to the per-site mode
    U = np.zeros((n, d))
    val, grad, hess = posterior_terms(U)
    for _ in range(200):
        if np.max(np.abs(grad)) < 1e-10:
            break
        step = np.linalg.solve(-hess + 1e-10 * np.eye(d)[None], grad[..., None])[..., 0]
        scale = np.ones((n, 1))
        for _ in range(40):
            cand = U + scale * step
            val_c, grad_c, hess_c = posterior_terms(cand)
            worse = val_c < val - 1e-12
            if not np.any(worse):
                break
            scale[worse] *= 0.5
        U, val, grad, hess = cand, val_c, grad_c, hess_c

    neg_h = -hess
    # ensure positive definiteness at the mode before taking the inverse factor
    for _ in range(60):
        try:
            np.linalg.cholesky(neg_h)
            break
        except np.linalg.LinAlgError:
            neg_h = neg_h + 1e-6 * np.eye(d)[None]
    sigma = np.linalg.inv(neg_h)
    Ls = np.linalg.cholesky(sigma)

    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    if d == 1:
        Z = nodes[:, None]
        logw = np.log(weights)
    else:
        za, zb = np.meshgrid(nodes, nodes, indexing="ij")
        Z = np.column_stack([za.ravel(), zb.ravel()])
        logw = (np.log(weights)[:, None] + np.log(weights)[None, :]).ravel()
    zz = np.sum(Z ** 2, axis=1)

    log_det_L = np.log(np.abs(np.diagonal(Ls, axis1=1, axis2=2))).sum(axis=1)
    contrib = np.empty((Z.shape[0], n))
    for k in range(Z.shape[0]):
        Uk = U + np.sqrt(2.0) * (Ls @ Z[k])
        total, _, _ = obj.loglik_fields(params, Uk)
        contrib[k] = (total - 0.5 * np.sum(Uk ** 2, axis=1)
                      - 0.5 * d * np.log(2.0 * np.pi) + logw[k] + zz[k])
    peak = contrib.max(axis=0)
    log_site = (0.5 * d * np.log(2.0) + log_det_L + peak
                + np.log(np.sum(np.exp(contrib - peak[None, :]), axis=0)))
    return float(log_site.sum())


def fit_marginal_quadrature(data, covariates, spec, n_nodes=50, seed=0,
                            max_iterations=300, bound=6.0):
    """Maximize the quadrature marginal likelihood over model parameters.

    Test oracle only; uses finite-difference gradients and is restricted to
    the small instances the quadrature itself supports.  Free parameters are
    boxed into [-bound, bound] so quasi-separated binary data cannot push the
    optimum outside the region where the node rule has converged.
    """
    if covariates is None:
        covariates = CovariateMatrix.empty(data.n_sites)
    obj = VariationalObjective(data, covariates, spec)
    rng = np.random.default_rng([seed, 0])
    params0, _ = _initial_params(obj, rng)
    layout = obj.layout

    def neg(theta):
        try:
            p = layout.unpack(theta)
            val = marginal_loglik_quadrature(p, data, covariates, spec, n_nodes)
        except (np.linalg.LinAlgError, FloatingPointError, ParameterError):
            return _BIG
        return -val if np.isfinite(val) else _BIG

    res = minimize(neg, layout.pack(params0), method="L-BFGS-B",
                   bounds=[(-bound, bound)] * layout.n_free,
                   options={"maxiter": max_iterations, "ftol": 1e-12, "gtol": 1e-7})
    return layout.unpack(res.x), -res.fun


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def _site_rows(model, covariates, site_index_map):
    idx = np.asarray(site_index_map, dtype=int)
    n_train = len(model.site_names)
    if idx.ndim != 1 or idx.size != covariates.values.shape[0]:
        raise ConfigurationError("site_index_map must give one training site per new row")
    if np.any(idx < 0) or np.any(idx >= n_train):
        raise ConfigurationError("site_index_map refers to unknown training sites")
    return idx


def _new_etas(model, covariates, idx):
    spec, params = model.spec, model.params
    X = np.asarray(covariates.values, dtype=float)
    U = model.vstate.means[idx] if spec.latent_dim else np.zeros((X.shape[0], 0))
    etas = {}
    for part in spec.parts:
        eta = np.zeros((X.shape[0], len(model.species_names)))
        b0 = params.intercepts.get(part)
        if b0 is not None:
            eta += np.asarray(b0)[None, :]
        if X.shape[1]:
            B = np.asarray(params.slopes[part])
            if B.shape[1] != X.shape[1]:
                raise ConfigurationError("covariate count differs from the fitted model")
            eta += X @ B.T
        if spec.latent_dim:
            eta += U @ np.asarray(params.loadings[part]).T
        if params.row_effects is not None:
            eta += np.asarray(params.row_effects)[idx][:, None]
        etas[part] = eta
    return etas


def predict_expected(model, covariates, site_index_map):
    """Plug-in expected cover for rows mapped onto training sites."""
    spec = model.spec
    idx = _site_rows(model, covariates, site_index_map)
    etas = _new_etas(model, covariates, idx)
    m = len(model.species_names)
    phi = model.params.precision_for(m)
    if spec.family in ("beta-shifted", "bernoulli"):
        return fam.logistic(etas[MEAN])
    if spec.family == "hurdle-beta":
        mu0 = fam.logistic(etas[ZERO])
        mu = fam.logistic(etas[MEAN])
        if spec.hurdle_parts == "zeros-only":
            return (1.0 - mu0) * mu
        mu1 = fam.logistic(etas[ONE])
        return (1.0 - mu0) * (mu1 + (1.0 - mu1) * mu)
    if spec.family == "ordered-beta":
        z = np.asarray(model.params.cutoffs)
        r0 = fam.logistic(z[None, :, 0] - etas[MEAN])
        r1 = fam.logistic(z[None, :, 1] - etas[MEAN])
        return (r1 - r0) * fam.logistic(etas[MEAN]) + (1.0 - r1)
    raise UnsupportedFamilyError("expected cover is not defined for the cumulative-logit family")


def predict_presence(model, covariates, site_index_map):
    """Plug-in presence probabilities; undefined for the shifted beta family."""
    spec = model.spec
    idx = _site_rows(model, covariates, site_index_map)
    etas = _new_etas(model, covariates, idx)
    if spec.family == "hurdle-beta":
        return 1.0 - fam.logistic(etas[ZERO])
    if spec.family == "ordered-beta":
        z = np.asarray(model.params.cutoffs)
        return 1.0 - fam.logistic(z[None, :, 0] - etas[MEAN])
    if spec.family == "cumulative-logit":
        if spec.cutoff_mode == "common":
            first = np.full(len(model.species_names), np.asarray(model.params.cutoffs)[0])
        else:
            first = np.array([c[0] for c in model.params.cutoffs])
        return 1.0 - fam.logistic(first[None, :] - etas[MEAN])
    if spec.family == "bernoulli":
        return fam.logistic(etas[MEAN])
    raise UnsupportedFamilyError("presence probability is not defined for the shifted beta family")
