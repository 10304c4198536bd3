"""Data model, model specification, parameter layout and linear predictor.

The free-parameter encoding is the single source of truth for how model
parameters map onto an unconstrained optimization vector: loading diagonals
and precisions through log, ordered cutoffs through first-value plus
log-increments, row effects through n-1 free values completed to sum zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataValidationError, ParameterError
from .families import FAMILIES

MEAN, ZERO, ONE = "mean", "zero", "one"


def _frozen(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResponseMatrix:
    """Sites x species response panel with an observed-cell mask.

    In cover mode values lie in [0,1]; in ordinal mode they are integer
    class labels starting at 1.  Masked (unobserved) cells may hold any
    placeholder value and are dropped from every likelihood sum.
    """

    values: np.ndarray
    mask: np.ndarray = None
    species_names: tuple = ()
    site_names: tuple = ()
    ordinal: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ConfigurationError("response matrix must be 2-d and non-empty")
        mask = self.mask
        mask = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ConfigurationError("mask shape must match values")
        obs = values[mask]
        if self.ordinal:
            if obs.size and (np.any(obs != np.round(obs)) or np.any(obs < 1)):
                raise ConfigurationError("ordinal responses must be integer labels >= 1")
        else:
            if obs.size and (np.any(~np.isfinite(obs)) or np.any(obs < 0) or np.any(obs > 1)):
                raise ConfigurationError("cover responses must lie in [0, 1]")
        n, m = values.shape
        species = tuple(self.species_names) or tuple(f"sp{j + 1}" for j in range(m))
        sites = tuple(self.site_names) or tuple(f"site{i + 1}" for i in range(n))
        if len(species) != m or len(sites) != n:
            raise ConfigurationError("name lengths must match matrix dimensions")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask, bool))
        object.__setattr__(self, "species_names", species)
        object.__setattr__(self, "site_names", sites)

    @property
    def n_sites(self):
        return self.values.shape[0]

    @property
    def n_species(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class CovariateMatrix:
    """Sites x covariates design matrix (q may be zero)."""

    values: np.ndarray
    names: tuple = ()
    site_names: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ConfigurationError("covariate matrix must be 2-d")
        if values.size and not np.all(np.isfinite(values)):
            raise ConfigurationError("covariates must be finite")
        names = tuple(self.names) or tuple(f"x{j + 1}" for j in range(values.shape[1]))
        if len(names) != values.shape[1]:
            raise ConfigurationError("covariate name count must match columns")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "site_names", tuple(self.site_names))

    @classmethod
    def empty(cls, n_sites):
        return cls(values=np.zeros((n_sites, 0)))

    @property
    def n_covariates(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class ModelSpec:
    """Family choice plus the structural options shared by all modules."""

    family: str
    latent_dim: int = 2
    row_effects: bool = False
    hurdle_parts: str = "zeros-and-ones"
    cutoff_mode: str = "species-specific"
    ordinal_bounds: tuple = None
    shift_n: int = 100
    pooled_precision: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.latent_dim < 0:
            raise ConfigurationError("latent_dim must be >= 0")
        if self.hurdle_parts not in ("zeros-only", "zeros-and-ones"):
            raise ConfigurationError("hurdle_parts must be 'zeros-only' or 'zeros-and-ones'")
        if self.cutoff_mode not in ("species-specific", "common"):
            raise ConfigurationError("cutoff_mode must be 'species-specific' or 'common'")
        if self.shift_n < 2:
            raise ConfigurationError("shift_n must be >= 2")
        if self.ordinal_bounds is not None:
            object.__setattr__(self, "ordinal_bounds", tuple(float(b) for b in self.ordinal_bounds))

    @property
    def parts(self):
        if self.family == "hurdle-beta":
            return (MEAN, ZERO, ONE) if self.hurdle_parts == "zeros-and-ones" else (MEAN, ZERO)
        return (MEAN,)

    @property
    def has_precision(self):
        return self.family in ("beta-shifted", "hurdle-beta", "ordered-beta")

    @property
    def has_intercepts(self):
        # species-specific cutoffs absorb the intercept (identifiability)
        return not (self.family == "cumulative-logit" and self.cutoff_mode == "species-specific")


@dataclass(frozen=True)
class ParameterSet:
    """All free model parameters for one fitted (or generating) model.

    The mean-part loading matrix carries the identifiability constraint:
    entries above the diagonal are zero and diagonal entries are positive.
    Auxiliary hurdle parts share the latent variables, so their loadings
    stay unconstrained.
    """

    intercepts: dict
    slopes: dict
    loadings: dict
    log_precisions: np.ndarray = None
    cutoffs: object = None
    row_effects: np.ndarray = None

    def __post_init__(self):
        intercepts = {p: None if v is None else _frozen(v) for p, v in self.intercepts.items()}
        slopes = {p: _frozen(v) for p, v in self.slopes.items()}
        loadings = {p: _frozen(v) for p, v in self.loadings.items()}
        gamma = loadings.get(MEAN)
        if gamma is not None and gamma.size:
            d = gamma.shape[1]
            if not np.all(np.triu(gamma, 1) == 0.0):
                raise ParameterError("mean-part loadings must be zero above the diagonal")
            diag = np.diagonal(gamma)[: min(d, gamma.shape[0])]
            if np.any(diag <= 0.0):
                raise ParameterError("mean-part loading diagonal must be positive")
        for arrs in (intercepts.values(), slopes.values(), loadings.values()):
            for a in arrs:
                if a is not None and a.size and not np.all(np.isfinite(a)):
                    raise ParameterError("parameters must be finite")
        lp = self.log_precisions
        if lp is not None:
            lp = _frozen(np.atleast_1d(lp))
            if not np.all(np.isfinite(lp)):
                raise ParameterError("log precisions must be finite")
        cuts = self.cutoffs
        if cuts is not None:
            if isinstance(cuts, tuple):
                cuts = tuple(_frozen(c) for c in cuts)
                seqs = cuts
            else:
                cuts = _frozen(cuts)
                seqs = cuts if cuts.ndim == 2 else (cuts,)
            for seq in seqs:
                if np.any(np.diff(np.asarray(seq)) <= 0.0):
                    raise ParameterError("cutoff sequences must be strictly increasing")
        alpha = self.row_effects
        if alpha is not None:
            alpha = _frozen(alpha)
            if abs(float(alpha.sum())) > 1e-8 * max(1.0, float(np.abs(alpha).max(initial=0.0))):
                raise ParameterError("row effects must sum to zero")
        object.__setattr__(self, "intercepts", intercepts)
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "loadings", loadings)
        object.__setattr__(self, "log_precisions", lp)
        object.__setattr__(self, "cutoffs", cuts)
        object.__setattr__(self, "row_effects", alpha)

    def precision_for(self, n_species):
        """Per-species precision vector, broadcasting a pooled value."""
        lp = self.log_precisions
        if lp is None:
            return None
        vec = np.broadcast_to(np.exp(lp), (n_species,)) if lp.size == 1 else np.exp(lp)
        return np.asarray(vec, dtype=float)


@dataclass(frozen=True)
class VariationalState:
    """Gaussian variational posterior over each site's latent score."""

    means: np.ndarray
    covariances: np.ndarray
    kind: str = "diagonal"

    def __post_init__(self):
        means = _frozen(self.means)
        cov = _frozen(self.covariances)
        if self.kind == "diagonal":
            if cov.shape != means.shape:
                raise ParameterError("diagonal covariances must match means' shape")
            if cov.size and np.any(cov <= 0.0):
                raise ParameterError("variational variances must be positive")
        elif self.kind == "full":
            n, d = means.shape
            if cov.shape != (n, d, d):
                raise ParameterError("full factors must have shape (n, d, d)")
            if d and np.any(np.diagonal(cov, axis1=1, axis2=2) <= 0.0):
                raise ParameterError("factor diagonals must be positive")
        else:
            raise ParameterError("kind must be 'diagonal' or 'full'")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", cov)

    def site_covariance(self, i):
        if self.kind == "diagonal":
            return np.diag(self.covariances[i])
        L = self.covariances[i]
        return L @ L.T


# ---------------------------------------------------------------------------
# linear predictor
# ---------------------------------------------------------------------------

def linear_predictor(params, covariates, scores, part=MEAN):
    """eta_ij = alpha_i + beta0_j + x_i . beta_j + u_i . gamma_j for one part."""
    if part not in params.loadings:
        raise ConfigurationError(f"part {part!r} not present in parameters")
    X = np.asarray(covariates.values, dtype=float)
    U = np.asarray(scores, dtype=float)
    B = params.slopes[part]
    G = params.loadings[part]
    m = G.shape[0]
    n = U.shape[0] if U.ndim == 2 else X.shape[0]
    if U.ndim != 2 or X.ndim != 2:
        raise ConfigurationError("covariates and scores must be 2-d")
    if X.shape[0] != n:
        raise ConfigurationError("covariates and scores disagree on the number of sites")
    if B.shape != (m, X.shape[1]):
        raise ConfigurationError("slope block shape mismatch")
    if G.shape[1] != U.shape[1]:
        raise ConfigurationError("loadings and scores disagree on the latent dimension")
    eta = np.zeros((n, m))
    b0 = params.intercepts.get(part)
    if b0 is not None:
        eta += np.asarray(b0)[None, :]
    if X.shape[1]:
        eta += X @ B.T
    if U.shape[1]:
        eta += U @ G.T
    if params.row_effects is not None:
        alpha = np.asarray(params.row_effects)
        if alpha.shape != (n,):
            raise ConfigurationError("row effects length mismatch")
        eta += alpha[:, None]
    if not np.all(np.isfinite(eta)):
        raise ConfigurationError("linear predictor is not finite")
    return eta


# ---------------------------------------------------------------------------
# free-parameter layout
# ---------------------------------------------------------------------------

def _tri_free_count(m, d):
    return sum(min(j + 1, d) for j in range(m))


class ParameterLayout:
    """Bijective mapping between a ParameterSet and a free vector.

    Construction needs the data dimensions and, for the cumulative logit
    family, the per-species class counts (K_j + 1 levels per species) or a
    single shared count in common-cutoff mode.
    """

    def __init__(self, spec, n_sites, n_species, n_covariates=0, class_counts=None):
        self.spec = spec
        self.n = int(n_sites)
        self.m = int(n_species)
        self.q = int(n_covariates)
        self.d = int(spec.latent_dim)
        if spec.family == "cumulative-logit":
            if class_counts is None:
                raise ConfigurationError("cumulative logit layout needs class counts")
            if spec.cutoff_mode == "common":
                self.class_counts = int(np.max(class_counts))
                if self.class_counts < 2:
                    raise ConfigurationError("need at least two classes")
            else:
                self.class_counts = tuple(int(c) for c in np.atleast_1d(class_counts))
                if len(self.class_counts) != self.m or min(self.class_counts) < 2:
                    raise ConfigurationError("each species needs at least two observed classes")
        else:
            self.class_counts = None
        self._blocks = self._build_blocks()
        self.n_free = sum(size for _, size in self._blocks)

    def _build_blocks(self):
        spec, m, q, d = self.spec, self.m, self.q, self.d
        blocks = []
        for part in spec.parts:
            if spec.has_intercepts:
                blocks.append((f"b0:{part}", m))
            if q:
                blocks.append((f"B:{part}", m * q))
            if d:
                size = m * d if part != MEAN else _tri_free_count(m, d)
                blocks.append((f"G:{part}", size))
        if spec.has_precision:
            blocks.append(("lphi", 1 if spec.pooled_precision else m))
        if spec.family == "ordered-beta":
            blocks.append(("zeta", m + 1 if spec.cutoff_mode == "common" else 2 * m))
        elif spec.family == "cumulative-logit":
            if spec.cutoff_mode == "common":
                blocks.append(("cuts", self.class_counts - 2))  # c1 pinned at 0
            else:
                blocks.append(("cuts", sum(c - 1 for c in self.class_counts)))
        if spec.row_effects:
            blocks.append(("alpha", self.n - 1))
        return blocks

    def _slices(self):
        out, at = {}, 0
        for name, size in self._blocks:
            out[name] = slice(at, at + size)
            at += size
        return out

    # -- mean-part loading triangle ------------------------------------------------
    def _pack_tri(self, G):
        out = []
        for j in range(self.m):
            for k in range(min(j + 1, self.d)):
                v = G[j, k]
                out.append(np.log(v) if k == j else v)
        return np.asarray(out)

    def _unpack_tri(self, vec):
        G = np.zeros((self.m, self.d))
        at = 0
        for j in range(self.m):
            for k in range(min(j + 1, self.d)):
                G[j, k] = np.exp(vec[at]) if k == j else vec[at]
                at += 1
        return G

    def _grad_tri(self, dG, G):
        out = []
        for j in range(self.m):
            for k in range(min(j + 1, self.d)):
                g = dG[j, k]
                out.append(g * G[j, k] if k == j else g)
        return np.asarray(out)

    # -- cutoffs ---------------------------------------------------------------------
    @staticmethod
    def encode_increasing(c):
        c = np.asarray(c, dtype=float)
        return np.concatenate(([c[0]], np.log(np.diff(c))))

    @staticmethod
    def decode_increasing(t):
        t = np.asarray(t, dtype=float)
        return t[0] + np.concatenate(([0.0], np.cumsum(np.exp(t[1:]))))

    @staticmethod
    def _grad_increasing(gc, t):
        gc = np.asarray(gc, dtype=float)
        out = np.empty_like(gc)
        out[0] = gc.sum()
        rev = np.cumsum(gc[::-1])[::-1]
        out[1:] = rev[1:] * np.exp(t[1:])
        return out

    # -- public API --------------------------------------------------------------------
    def pack(self, params):
        spec = self.spec
        sl = self._slices()
        vec = np.empty(self.n_free)
        for part in spec.parts:
            if spec.has_intercepts:
                vec[sl[f"b0:{part}"]] = params.intercepts[part]
            if self.q:
                vec[sl[f"B:{part}"]] = np.asarray(params.slopes[part]).ravel()
            if self.d:
                G = np.asarray(params.loadings[part])
                vec[sl[f"G:{part}"]] = self._pack_tri(G) if part == MEAN else G.ravel()
        if spec.has_precision:
            vec[sl["lphi"]] = np.atleast_1d(params.log_precisions)
        if spec.family == "ordered-beta":
            z = np.asarray(params.cutoffs)
            if spec.cutoff_mode == "common":
                z1 = z[0, 1]
                if not np.allclose(z[:, 1], z1):
                    raise ParameterError("common cutoff mode requires one shared upper cutoff")
                vec[sl["zeta"]] = np.concatenate(([z1], np.log(z1 - z[:, 0])))
            else:
                vec[sl["zeta"]] = np.column_stack(
                    [z[:, 0], np.log(z[:, 1] - z[:, 0])]).ravel()
        elif spec.family == "cumulative-logit":
            if spec.cutoff_mode == "common":
                c = np.asarray(params.cutoffs)
                if c[0] != 0.0:
                    raise ParameterError("common cutoffs are anchored at c1 = 0")
                vec[sl["cuts"]] = np.log(np.diff(c))
            else:
                vec[sl["cuts"]] = np.concatenate(
                    [self.encode_increasing(c) for c in params.cutoffs])
        if spec.row_effects:
            vec[sl["alpha"]] = np.asarray(params.row_effects)[:-1]
        if not np.all(np.isfinite(vec)):
            raise ParameterError("packed parameter vector is not finite")
        return vec

    def unpack(self, vec):
        spec = self.spec
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_free,):
            raise ConfigurationError(f"expected a free vector of length {self.n_free}")
        sl = self._slices()
        intercepts, slopes, loadings = {}, {}, {}
        for part in spec.parts:
            intercepts[part] = vec[sl[f"b0:{part}"]].copy() if spec.has_intercepts else None
            slopes[part] = (vec[sl[f"B:{part}"]].reshape(self.m, self.q)
                            if self.q else np.zeros((self.m, 0)))
            if self.d:
                block = vec[sl[f"G:{part}"]]
                loadings[part] = (self._unpack_tri(block) if part == MEAN
                                  else block.reshape(self.m, self.d))
            else:
                loadings[part] = np.zeros((self.m, 0))
        log_prec = vec[sl["lphi"]].copy() if spec.has_precision else None
        cutoffs = None
        if spec.family == "ordered-beta":
            z = vec[sl["zeta"]]
            if spec.cutoff_mode == "common":
                z1 = z[0]
                cutoffs = np.column_stack([z1 - np.exp(z[1:]), np.full(self.m, z1)])
            else:
                z = z.reshape(self.m, 2)
                cutoffs = np.column_stack([z[:, 0], z[:, 0] + np.exp(z[:, 1])])
        elif spec.family == "cumulative-logit":
            block = vec[sl["cuts"]]
            if spec.cutoff_mode == "common":
                cutoffs = np.concatenate(([0.0], np.cumsum(np.exp(block))))
            else:
                cutoffs, at = [], 0
                for kj in self.class_counts:
                    cutoffs.append(self.decode_increasing(block[at:at + kj - 1]))
                    at += kj - 1
                cutoffs = tuple(cutoffs)
        row_effects = None
        if spec.row_effects:
            head = vec[sl["alpha"]]
            row_effects = np.concatenate([head, [-head.sum()]])
        return ParameterSet(intercepts=intercepts, slopes=slopes, loadings=loadings,
                            log_precisions=log_prec, cutoffs=cutoffs, row_effects=row_effects)

    def pack_gradient(self, grads, params):
        """Chain-rule a structured gradient into free-vector coordinates."""
        spec = self.spec
        sl = self._slices()
        vec = np.zeros(self.n_free)
        for part in spec.parts:
            if spec.has_intercepts:
                vec[sl[f"b0:{part}"]] = grads["intercepts"][part]
            if self.q:
                vec[sl[f"B:{part}"]] = np.asarray(grads["slopes"][part]).ravel()
            if self.d:
                dG = np.asarray(grads["loadings"][part])
                vec[sl[f"G:{part}"]] = (self._grad_tri(dG, params.loadings[MEAN])
                                        if part == MEAN else dG.ravel())
        if spec.has_precision:
            g = np.atleast_1d(grads["log_precisions"])
            vec[sl["lphi"]] = g.sum(keepdims=True) if spec.pooled_precision else g
        if spec.family == "ordered-beta":
            gz = np.asarray(grads["cutoffs"])  # (m, 2) in zeta coordinates
            z = np.asarray(params.cutoffs)
            if spec.cutoff_mode == "common":
                gap = z[0, 1] - z[:, 0]
                vec[sl["zeta"]] = np.concatenate(
                    ([gz[:, 1].sum() + gz[:, 0].sum()], -gz[:, 0] * gap))
            else:
                gap = z[:, 1] - z[:, 0]
                vec[sl["zeta"]] = np.column_stack(
                    [gz[:, 0] + gz[:, 1], gz[:, 1] * gap]).ravel()
        elif spec.family == "cumulative-logit":
            if spec.cutoff_mode == "common":
                gc = np.asarray(grads["cutoffs"])
                c = np.asarray(params.cutoffs)
                rev = np.cumsum(gc[::-1])[::-1]
                vec[sl["cuts"]] = rev[1:] * np.diff(c)
            else:
                out, at = np.empty(sl["cuts"].stop - sl["cuts"].start), 0
                for j, kj in enumerate(self.class_counts):
                    t = self.encode_increasing(params.cutoffs[j])
                    out[at:at + kj - 1] = self._grad_increasing(grads["cutoffs"][j], t)
                    at += kj - 1
                vec[sl["cuts"]] = out
        if spec.row_effects:
            ga = np.asarray(grads["row_effects"])
            vec[sl["alpha"]] = ga[:-1] - ga[-1]
        return vec


def pack_parameters(params, layout):
    """Encode a valid ParameterSet into its free vector (see ParameterLayout)."""
    return layout.pack(params)


def unpack_parameters(vector, layout):
    """Decode a free vector; any finite vector yields a valid ParameterSet."""
    return layout.unpack(vector)


# ---------------------------------------------------------------------------
# pre-fit validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    level: str  # "fatal" | "warning"
    species: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple

    @property
    def fatal(self):
        return any(f.level == "fatal" for f in self.findings)

    def raise_on_fatal(self):
        if self.fatal:
            bad = "; ".join(f"{f.species}: {f.message}" for f in self.findings if f.level == "fatal")
            raise DataValidationError(f"validation failed: {bad}")


def validate(responses, spec):
    """Check that the data can identify the requested model.

    Species-specific cumulative-logit cutoffs need every class level
    observed per species; beta-type interiors degenerate for species with
    no interior observations.
    """
    findings = []
    vals, mask = responses.values, responses.mask
    if responses.ordinal and spec.family != "cumulative-logit":
        return ValidationReport(findings=(Finding(
            "fatal", "(all)", "ordinal data requires the cumulative-logit family"),))
    for j, name in enumerate(responses.species_names):
        col = vals[mask[:, j], j]
        if col.size == 0:
            findings.append(Finding("fatal", name, "species has no observed cells"))
            continue
        if responses.ordinal:
            levels = np.unique(col.astype(int))
            if spec.cutoff_mode == "species-specific":
                top = int(levels.max())
                missing = sorted(set(range(1, top + 1)) - set(levels.tolist()))
                if top < 2:
                    findings.append(Finding("fatal", name, "species shows a single class level"))
                elif missing:
                    findings.append(Finding(
                        "fatal", name,
                        f"species lacks observations in class(es) {missing}"))
        else:
            if np.all(col == 0.0) and spec.family in ("hurdle-beta", "ordered-beta", "beta-shifted"):
                findings.append(Finding(
                    "warning", name,
                    "species has no nonzero observations; beta part unidentifiable "
                    "(consider pooled precision)"))
    if responses.ordinal and spec.family == "cumulative-logit" and spec.cutoff_mode == "common":
        obs = vals[mask].astype(int)
        top = int(obs.max())
        missing = sorted(set(range(1, top + 1)) - set(np.unique(obs).tolist()))
        if missing:
            findings.append(Finding("warning", "(all)",
                                    f"no observations in class(es) {missing} anywhere"))
    if not responses.ordinal and spec.family == "cumulative-logit":
        findings.append(Finding("fatal", "(all)",
                                "cumulative-logit requires ordinal class labels"))
    return ValidationReport(findings=tuple(findings))
