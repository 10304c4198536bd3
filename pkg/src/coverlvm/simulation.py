"""Synthetic percent-cover data generation and the method-comparison sweep.

Datasets are drawn from ordered-beta or hurdle-beta generators with uniform
intercepts and loadings; cutoffs (or auxiliary hurdle intercepts) are common
offsets calibrated by bisection against Monte Carlo estimates so the mean
zero and one proportions hit their targets.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import estimator, families as fam, ordination
from .errors import CalibrationError, ConfigurationError
from .model import MEAN, ONE, ZERO, ModelSpec, ParameterSet, ResponseMatrix

GENERATORS = ("ordered-beta", "hurdle-beta")
SWEEP_METHODS = ("beta-shifted", "hurdle-beta", "ordered-beta", "cumulative-logit",
                 "bernoulli", "nmds-bray", "nmds-jaccard")

# classical cover-class scale: {0}, (0,.05], (.05,.25], (.25,.5], (.5,.75], (.75,.95], (.95,1]
DAUBENMIRE_BOUNDS = (0.0, 0.05, 0.25, 0.50, 0.75, 0.95, 1.0)


@dataclass(frozen=True)
class SimDesign:
    generator: str = "ordered-beta"
    n: int = 180
    m: int = 240
    d: int = 2
    zero_prop: float = 0.5
    one_prop: float = 0.05
    n_replicates: int = 30
    seed: int = 0
    intercept_range: tuple = (-1.0, 1.0)
    loading_range: tuple = (-2.0, 2.0)
    phi_value: float = 4.0
    calibration_cells: int = 200_000

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigurationError(f"generator must be one of {GENERATORS}")
        if not 0.0 < self.zero_prop < 1.0 or self.zero_prop + self.one_prop >= 1.0:
            raise ConfigurationError("need 0 < zero_prop and zero_prop + one_prop < 1")
        if self.n < 1 or self.m < 1 or self.d < 1:
            raise ConfigurationError("n, m and d must be positive")


def desk_scale(**overrides):
    """Small-study defaults used by the test harness (paper scale is the default)."""
    base = dict(n=60, m=40, n_replicates=30)
    base.update(overrides)
    return SimDesign(**base)


# ---------------------------------------------------------------------------
# generator draws
# ---------------------------------------------------------------------------

def _identifying_rotation(G):
    """Orthogonal Q such that G @ Q.T is lower-triangular with positive diagonal."""
    d = G.shape[1]
    q_r, r = np.linalg.qr(G[:d, :].T)  # G[:d] = r.T @ q_r.T, r.T lower triangular
    s = np.sign(np.diagonal(r))
    s = np.where(s == 0.0, 1.0, s)
    return s[:, None] * q_r.T


def draw_true_model(design, rng):
    """Draw generator parameters and latent scores.

    Intercepts and every loading entry are uniform draws; the configuration
    is then rotated into the identified frame (mean-part loadings lower
    triangular, positive diagonal), which leaves the data distribution
    untouched.  Cutoffs / auxiliary intercepts are placeholders until
    :func:`calibrate_boundary_mass` sets them.
    """
    n, m, d = design.n, design.m, design.d
    lo, hi = design.intercept_range
    b0 = rng.uniform(lo, hi, size=m)
    glo, ghi = design.loading_range
    parts = (MEAN, ZERO, ONE) if design.generator == "hurdle-beta" else (MEAN,)
    raw = {p: rng.uniform(glo, ghi, size=(m, d)) for p in parts}
    scores = rng.normal(size=(n, d))

    Q = _identifying_rotation(raw[MEAN])
    loadings = {p: raw[p] @ Q.T for p in parts}
    tri = np.tril(loadings[MEAN])
    idx = np.arange(min(m, d))
    tri[idx, idx] = np.maximum(tri[idx, idx], 1e-9)
    loadings[MEAN] = tri
    scores = scores @ Q.T

    log_phi = np.full(m, math.log(design.phi_value))
    if design.generator == "ordered-beta":
        params = ParameterSet(
            intercepts={MEAN: b0},
            slopes={p: np.zeros((m, 0)) for p in parts},
            loadings=loadings,
            log_precisions=log_phi,
            cutoffs=np.column_stack([np.zeros(m), np.ones(m)]),
        )
    else:
        params = ParameterSet(
            intercepts={MEAN: b0, ZERO: np.zeros(m), ONE: np.zeros(m)},
            slopes={p: np.zeros((m, 0)) for p in parts},
            loadings=loadings,
            log_precisions=log_phi,
        )
    return params, scores


def expected_boundary_props(params, design, rng, n_cells=None):
    """Monte Carlo estimate of the generator's mean zero and one proportions."""
    n_cells = n_cells or design.calibration_cells
    m, d = design.m, design.d
    u = rng.normal(size=(n_cells, d))
    j = np.arange(n_cells) % m
    if design.generator == "ordered-beta":
        eta = np.asarray(params.intercepts[MEAN])[j] + np.sum(
            u * np.asarray(params.loadings[MEAN])[j], axis=1)
        z = np.asarray(params.cutoffs)
        p0 = float(np.mean(fam.logistic(z[j, 0] - eta)))
        p1 = float(np.mean(fam.logistic(eta - z[j, 1])))
    else:
        eta0 = np.asarray(params.intercepts[ZERO])[j] + np.sum(
            u * np.asarray(params.loadings[ZERO])[j], axis=1)
        eta1 = np.asarray(params.intercepts[ONE])[j] + np.sum(
            u * np.asarray(params.loadings[ONE])[j], axis=1)
        mu0 = fam.logistic(eta0)
        p0 = float(np.mean(mu0))
        p1 = float(np.mean((1.0 - mu0) * fam.logistic(eta1)))
    return p0, p1


def _bisect_offset(prop_fn, target, tol=1e-3, lo=-8.0, hi=8.0, max_widen=2):
    """Find delta with prop_fn(delta) == target; prop_fn must be monotone."""
    f_lo, f_hi = prop_fn(lo), prop_fn(hi)
    increasing = f_hi >= f_lo
    for _ in range(max_widen + 1):
        lo_val, hi_val = (f_lo, f_hi) if increasing else (f_hi, f_lo)
        if lo_val <= target <= hi_val:
            break
        lo *= 2.0
        hi *= 2.0
        f_lo, f_hi = prop_fn(lo), prop_fn(hi)
    else:
        raise CalibrationError(
            f"could not bracket target proportion {target} in [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = prop_fn(mid)
        if abs(f_mid - target) <= tol or hi - lo < 1e-12:
            return mid
        if (f_mid < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_boundary_mass(params, design, rng):
    """Set common boundary offsets so zero/one proportions meet their targets.

    A single Monte Carlo panel of latent draws is shared by every bisection
    evaluation, which makes the estimated proportion a deterministic
    monotone function of the offset.
    """
    m, d = design.m, design.d
    n_cells = design.calibration_cells
    u = rng.normal(size=(n_cells, d))
    j = np.arange(n_cells) % m

    if design.generator == "ordered-beta":
        eta = np.asarray(params.intercepts[MEAN])[j] + np.sum(
            u * np.asarray(params.loadings[MEAN])[j], axis=1)
        delta0 = _bisect_offset(lambda t: float(np.mean(fam.logistic(t - eta))),
                                design.zero_prop)
        delta1 = _bisect_offset(lambda t: float(np.mean(fam.logistic(eta - t))),
                                design.one_prop)
        if delta1 <= delta0:
            raise CalibrationError("calibrated cutoffs collapsed; targets are infeasible")
        cutoffs = np.column_stack([np.full(m, delta0), np.full(m, delta1)])
        return replace_params(params, cutoffs=cutoffs)

    base0 = np.sum(u * np.asarray(params.loadings[ZERO])[j], axis=1)
    base1 = np.sum(u * np.asarray(params.loadings[ONE])[j], axis=1)
    delta0 = _bisect_offset(lambda t: float(np.mean(fam.logistic(t + base0))),
                            design.zero_prop)
    keep = 1.0 - fam.logistic(delta0 + base0)
    delta1 = _bisect_offset(lambda t: float(np.mean(keep * fam.logistic(t + base1))),
                            design.one_prop)
    return replace_params(params,
                          intercepts={MEAN: params.intercepts[MEAN],
                                      ZERO: np.full(m, delta0),
                                      ONE: np.full(m, delta1)})


def replace_params(params, **changes):
    """ParameterSet copy with selected fields replaced."""
    fields = dict(intercepts=params.intercepts, slopes=params.slopes,
                  loadings=params.loadings, log_precisions=params.log_precisions,
                  cutoffs=params.cutoffs, row_effects=params.row_effects)
    fields.update(changes)
    return ParameterSet(**fields)


def draw_calibrated_model(design, rng):
    params, scores = draw_true_model(design, rng)
    return calibrate_boundary_mass(params, design, rng), scores


# ---------------------------------------------------------------------------
# dataset simulation and derived views
# ---------------------------------------------------------------------------

def simulate_dataset(params, scores, design, rng):
    """One response matrix drawn from the generator at the given scores."""
    n, m = design.n, design.m
    phi = params.precision_for(m)

    def beta_draws(eta):
        mu = fam.logistic(eta)
        g1 = rng.standard_gamma(mu * phi[None, :])
        g2 = rng.standard_gamma((1.0 - mu) * phi[None, :])
        return np.clip(g1 / (g1 + g2), 1e-12, 1.0 - 1e-12)

    if design.generator == "ordered-beta":
        eta = params.intercepts[MEAN][None, :] + scores @ params.loadings[MEAN].T
        z = np.asarray(params.cutoffs)
        rho0 = fam.logistic(z[None, :, 0] - eta)
        rho1 = fam.logistic(z[None, :, 1] - eta)
        u = rng.uniform(size=(n, m))
        interior = beta_draws(eta)
        y = np.where(u < rho0, 0.0, np.where(u > rho1, 1.0, interior))
    else:
        eta0 = params.intercepts[ZERO][None, :] + scores @ params.loadings[ZERO].T
        eta1 = params.intercepts[ONE][None, :] + scores @ params.loadings[ONE].T
        eta = params.intercepts[MEAN][None, :] + scores @ params.loadings[MEAN].T
        u0 = rng.uniform(size=(n, m))
        u1 = rng.uniform(size=(n, m))
        interior = beta_draws(eta)
        y = np.where(u0 < fam.logistic(eta0), 0.0,
                     np.where(u1 < fam.logistic(eta1), 1.0, interior))
    return ResponseMatrix(values=y)


def to_daubenmire(data, bounds=DAUBENMIRE_BOUNDS):
    """Convert covers to ordinal classes 1..K+1 using upper class bounds."""
    if data.ordinal:
        raise ConfigurationError("data is already ordinal")
    uppers = np.asarray(bounds, dtype=float)[:-1]
    classes = np.searchsorted(uppers, data.values, side="left") + 1
    return ResponseMatrix(values=classes.astype(float), mask=data.mask,
                          species_names=data.species_names,
                          site_names=data.site_names, ordinal=True)


def to_presence_absence(data):
    """Covers to binary presence-absence."""
    if data.ordinal:
        raise ConfigurationError("presence-absence currently requires cover data")
    return ResponseMatrix(values=(data.values > 0.0).astype(float), mask=data.mask,
                          species_names=data.species_names, site_names=data.site_names)


def true_linear_predictor(params, scores):
    """Mean-part eta of a generator; used by recovery checks."""
    return params.intercepts[MEAN][None, :] + scores @ params.loadings[MEAN].T


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRecord:
    generator: str
    method: str
    zero_prop: float
    replicate: int
    error: float
    seconds: float
    converged: bool


@dataclass(frozen=True)
class SweepSummary:
    method: str
    zero_prop: float
    mean_error: float
    sd_error: float
    n_kept: int


@dataclass(frozen=True)
class SweepResult:
    records: tuple
    summaries: tuple
    metadata: dict


def _method_spec(method, d, shift_n):
    if method == "beta-shifted":
        return ModelSpec(family="beta-shifted", latent_dim=d, shift_n=shift_n)
    if method == "hurdle-beta":
        return ModelSpec(family="hurdle-beta", latent_dim=d)
    if method == "ordered-beta":
        return ModelSpec(family="ordered-beta", latent_dim=d)
    if method == "cumulative-logit":
        return ModelSpec(family="cumulative-logit", latent_dim=d, cutoff_mode="common",
                         ordinal_bounds=DAUBENMIRE_BOUNDS)
    if method == "bernoulli":
        return ModelSpec(family="bernoulli", latent_dim=d)
    raise ConfigurationError(f"unknown method {method!r}")


def _job_seed(seed, ip, rep):
    return int(np.random.SeedSequence([seed, ip, rep]).generate_state(1)[0])


def _sweep_job(args):
    design, methods, ip, rep, fit_options, shift_n = args
    rng = np.random.default_rng([design.seed, ip, rep])
    params, scores = draw_calibrated_model(design, rng)
    data = simulate_dataset(params, scores, design, rng)
    views = {"cover": data}
    records = []
    seed = _job_seed(design.seed, ip, rep)
    for method in methods:
        t0 = time.perf_counter()
        error, converged = np.nan, False
        try:
            if method.startswith("nmds"):
                if method == "nmds-bray":
                    diss = ordination.dissimilarity(views["cover"], "bray-curtis")
                else:
                    if "binary" not in views:
                        views["binary"] = to_presence_absence(data)
                    diss = ordination.dissimilarity(views["binary"], "jaccard")
                sc = ordination.nmds(diss, d=design.d, n_restarts=2, seed=seed, max_iter=300)
                error = ordination.procrustes_error(scores, sc.coords)
                converged = sc.converged
            else:
                spec = _method_spec(method, design.d, shift_n)
                if method == "cumulative-logit":
                    if "ordinal" not in views:
                        views["ordinal"] = to_daubenmire(data)
                    fit_data = views["ordinal"]
                elif method == "bernoulli":
                    if "binary" not in views:
                        views["binary"] = to_presence_absence(data)
                    fit_data = views["binary"]
                else:
                    fit_data = data
                opts = replace(fit_options, seed=seed)
                mod = estimator.fit(fit_data, None, spec, opts)
                error = ordination.procrustes_error(scores, mod.vstate.means)
                converged = mod.diagnostics.converged
        except Exception:
            pass
        records.append(SweepRecord(design.generator, method, design.zero_prop, rep,
                                   float(error), time.perf_counter() - t0, bool(converged)))
    return ip, rep, records


def summarize_records(records, trim=0.05):
    """Per-(method, p) trimmed means: drop the ceil(trim*R) largest errors."""
    cells = {}
    for rec in records:
        cells.setdefault((rec.method, rec.zero_prop), []).append(rec.error)
    out = []
    for (method, p), errors in sorted(cells.items()):
        finite = np.sort(np.asarray([e for e in errors if np.isfinite(e)]))
        k = math.ceil(trim * finite.size)
        kept = finite[: finite.size - k] if k else finite
        if kept.size == 0:
            out.append(SweepSummary(method, p, float("nan"), float("nan"), 0))
            continue
        sd = float(np.std(kept, ddof=1)) if kept.size > 1 else 0.0
        out.append(SweepSummary(method, p, float(np.mean(kept)), sd, int(kept.size)))
    return tuple(out)


def run_sweep(design, methods=SWEEP_METHODS, zero_props=None, fit_options=None,
              threads=1, shift_n=100, trim=0.05):
    """Simulate, fit every method, and summarize Procrustes errors.

    Each (sparsity, replicate) job owns an rng stream derived from the
    design seed, so serial and parallel runs produce identical records.
    """
    for method in methods:
        if method not in SWEEP_METHODS:
            raise ConfigurationError(f"unknown method {method!r}")
    zero_props = tuple(zero_props) if zero_props is not None else (design.zero_prop,)
    fit_options = fit_options or estimator.FitOptions(n_restarts=2, max_iterations=300)
    jobs = []
    for ip, p in enumerate(zero_props):
        d_p = replace(design, zero_prop=float(p))
        for rep in range(design.n_replicates):
            jobs.append((d_p, tuple(methods), ip, rep, fit_options, shift_n))
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_sweep_job, jobs, chunksize=1))
    else:
        raw = [_sweep_job(j) for j in jobs]
    raw.sort(key=lambda t: (t[0], t[1]))
    records = tuple(rec for _, _, recs in raw for rec in recs)
    summaries = summarize_records(records, trim=trim)
    metadata = {
        "generator": design.generator, "n": design.n, "m": design.m, "d": design.d,
        "one_prop": design.one_prop, "phi": design.phi_value,
        "zero_props": list(zero_props), "n_replicates": design.n_replicates,
        "seed": design.seed, "methods": list(methods),
        "trim": trim, "trim_scope": "per method-by-sparsity cell",
        "daubenmire_bounds": list(DAUBENMIRE_BOUNDS), "shift_n": shift_n,
    }
    return SweepResult(records=records, summaries=summaries, metadata=metadata)
