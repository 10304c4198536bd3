"""Response families for percent cover responses in [0,1].

Each family provides a log-density (or log-mass) kernel together with
analytic derivatives with respect to its linear predictor(s) and auxiliary
parameters (log precision, cutoffs).  Derivatives are carried up to third
order in the predictor because the variational estimator differentiates a
second-order curvature correction.

Notation used throughout: ``mu = logistic(eta)`` for beta-type means,
``rho_k = logistic(cutoff_k - eta)`` for cutoff masses, and ``phi`` is the
beta precision so the interior density has shapes ``(mu*phi, (1-mu)*phi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .errors import DomainError, ParameterError, UnsupportedFamilyError

FAMILIES = ("beta-shifted", "hurdle-beta", "ordered-beta", "cumulative-logit", "bernoulli")

# probability clamp applied inside log() calls only; derivatives stay analytic
_MASS_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# link functions
# ---------------------------------------------------------------------------

def _softplus(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x > 0
    out[pos] = x[pos] + np.log1p(np.exp(-x[pos]))
    out[~pos] = np.log1p(np.exp(x[~pos]))
    return out


def logistic(x):
    """Stable inverse logit; accepts scalars or arrays, |x| up to ~700."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def logit(p):
    """Inverse of :func:`logistic` on the open interval (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("logit requires 0 < p < 1")
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def log_logistic(x):
    """log(logistic(x)) without overflow or premature rounding to 0."""
    x = np.asarray(x, dtype=float)
    out = -_softplus(-x)
    return float(out) if out.ndim == 0 else out


def shift_transform(y, n_shift):
    """Squeeze [0,1] responses into the open interval: (y*(N-1)+0.5)/N."""
    if n_shift < 2:
        raise DomainError("shift_transform requires N >= 2")
    y = np.asarray(y, dtype=float)
    out = (y * (n_shift - 1) + 0.5) / n_shift
    return float(out) if out.ndim == 0 else out


def _sigmoid_chain(s):
    """logistic value and its first three derivatives at s."""
    p = logistic(np.asarray(s, dtype=float))
    a = p * (1.0 - p)
    b = a * (1.0 - 2.0 * p)
    g = a * (1.0 - 6.0 * p + 6.0 * p * p)
    return p, a, b, g


# ---------------------------------------------------------------------------
# vectorized kernels (dicts of arrays); the estimator consumes these directly
# ---------------------------------------------------------------------------

def bernoulli_terms(y, eta):
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    p, a, b, _ = _sigmoid_chain(eta)
    return {
        "value": y * eta - _softplus(eta),
        "d1": y - p,
        "d2": -a,
        "d3": -b,
    }


def beta_terms(y, eta, log_phi):
    """Beta log-density with logit-mean link; derivatives in eta and log phi."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    log_phi = np.broadcast_to(np.asarray(log_phi, dtype=float), eta.shape)
    phi = np.exp(log_phi)
    mu = np.clip(logistic(eta), _MASS_FLOOR, 1.0 - _MASS_FLOOR)
    om = 1.0 - mu
    a1 = mu * phi
    a2 = om * phi
    ly = np.log(y)
    l1y = np.log1p(-y)

    dg1 = digamma(a1)
    dg2 = digamma(a2)
    tg1 = polygamma(1, a1)
    tg2 = polygamma(1, a2)
    qg1 = polygamma(2, a1)
    qg2 = polygamma(2, a2)

    T = -dg1 + dg2 + (ly - l1y)
    S = tg1 + tg2
    U = qg1 - qg2
    mup = mu * om
    mupp = mup * (1.0 - 2.0 * mu)
    muppp = mup * (1.0 - 6.0 * mu + 6.0 * mu * mu)

    value = gammaln(phi) - gammaln(a1) - gammaln(a2) + (a1 - 1.0) * ly + (a2 - 1.0) * l1y
    d1 = phi * T * mup
    d2 = -(phi ** 2) * S * mup ** 2 + phi * T * mupp
    d3 = -(phi ** 3) * U * mup ** 3 - 3.0 * (phi ** 2) * S * mup * mupp + phi * T * muppp

    d_lphi = phi * (digamma(phi) - mu * dg1 - om * dg2 + mu * ly + om * l1y)
    s_phi = mu * qg1 + om * qg2
    t_phi = -mu * tg1 + om * tg2
    d2_lphi = phi * (-2.0 * phi * S * mup ** 2 - (phi ** 2) * s_phi * mup ** 2
                     + T * mupp + phi * t_phi * mupp)
    return {"value": value, "d1": d1, "d2": d2, "d3": d3,
            "d_lphi": d_lphi, "d2_lphi": d2_lphi}


def log_sigmoid_terms(s):
    """log(logistic(s)) and derivatives in s."""
    s = np.asarray(s, dtype=float)
    p, a, b, _ = _sigmoid_chain(s)
    return {"value": -_softplus(-s), "d1": 1.0 - p, "d2": -a, "d3": -b}


def mass_low_terms(c, eta):
    """log P(lowest class) = log logistic(c - eta); aux derivative in c."""
    t = log_sigmoid_terms(np.asarray(c, dtype=float) - np.asarray(eta, dtype=float))
    return {"value": t["value"], "d1": -t["d1"], "d2": t["d2"], "d3": -t["d3"],
            "dc": t["d1"], "d2c": t["d3"]}


def mass_high_terms(c, eta):
    """log P(highest class) = log(1 - logistic(c - eta))."""
    t = log_sigmoid_terms(np.asarray(eta, dtype=float) - np.asarray(c, dtype=float))
    return {"value": t["value"], "d1": t["d1"], "d2": t["d2"], "d3": t["d3"],
            "dc": -t["d1"], "d2c": -t["d3"]}


def mass_band_terms(c_lo, c_hi, eta):
    """log(logistic(c_hi-eta) - logistic(c_lo-eta)) with aux derivatives.

    The difference of logistics is evaluated as rho_hi * (1 - exp(delta))
    with delta = log rho_lo - log rho_hi, which survives c_hi - c_lo small.
    """
    eta = np.asarray(eta, dtype=float)
    s_lo = np.asarray(c_lo, dtype=float) - eta
    s_hi = np.asarray(c_hi, dtype=float) - eta
    p_lo, a_lo, b_lo, g_lo = _sigmoid_chain(s_lo)
    p_hi, a_hi, b_hi, g_hi = _sigmoid_chain(s_hi)

    log_hi = -_softplus(-s_hi)
    delta = -_softplus(-s_lo) - log_hi
    em = -np.expm1(delta)
    value = log_hi + np.log(np.clip(em, _MASS_FLOOR, None))
    D = p_hi * em

    D1 = a_lo - a_hi
    D2 = -b_lo + b_hi
    D3 = g_lo - g_hi
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = D1 / D
        d1 = r1
        d2 = D2 / D - r1 ** 2
        d3 = D3 / D - 3.0 * D1 * D2 / D ** 2 + 2.0 * r1 ** 3
        dlo = -a_lo / D
        dhi = a_hi / D
        d2lo = (-g_lo * D + D2 * a_lo) / D ** 2 - 2.0 * r1 * (b_lo * D + D1 * a_lo) / D ** 2
        d2hi = (g_hi * D - D2 * a_hi) / D ** 2 + 2.0 * r1 * (b_hi * D + D1 * a_hi) / D ** 2
    return {"value": value, "d1": d1, "d2": d2, "d3": d3,
            "dlo": dlo, "dhi": dhi, "d2lo": d2lo, "d2hi": d2hi}


# ---------------------------------------------------------------------------
# scalar cell-level contracts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellParams:
    """Per-cell parameters; only the fields a family reads need to be set."""

    eta: float = 0.0
    eta0: float = 0.0
    eta1: float = 0.0
    phi: float = 1.0
    cutoffs: tuple = ()

    def __post_init__(self):
        if not self.phi > 0.0:
            raise ParameterError("phi must be positive")
        cuts = tuple(float(c) for c in self.cutoffs)
        if any(hi <= lo for lo, hi in zip(cuts, cuts[1:])):
            raise ParameterError("cutoffs must be strictly increasing")
        object.__setattr__(self, "cutoffs", cuts)


@dataclass(frozen=True)
class DerivativeBundle:
    """Log-density value with derivatives keyed by predictor part / aux name.

    d1/d2/d3 hold derivatives with respect to each linear predictor the
    branch depends on ("mean", "zero", "one"); d_aux holds first derivatives
    with respect to auxiliary parameters ("log_phi", "zeta0", "c1", ...);
    d2_aux holds the mixed derivative of d2["mean"] with respect to each aux.
    """

    value: float
    d1: dict = field(default_factory=dict)
    d2: dict = field(default_factory=dict)
    d3: dict = field(default_factory=dict)
    d_aux: dict = field(default_factory=dict)
    d2_aux: dict = field(default_factory=dict)


def _scalars(terms):
    return {k: float(np.asarray(v)) for k, v in terms.items()}


def bernoulli_logpmf(y, eta):
    """Bernoulli log-mass with logit link; y in {0, 1}."""
    t = _scalars(bernoulli_terms(float(y), float(eta)))
    return DerivativeBundle(value=t["value"], d1={"mean": t["d1"]},
                            d2={"mean": t["d2"]}, d3={"mean": t["d3"]})


def beta_logpdf(y, mu, phi):
    """Beta log-density at y with mean mu and precision phi.

    Derivatives are taken with respect to eta = logit(mu) and log(phi).
    """
    y = float(y)
    if not 0.0 < y < 1.0:
        raise DomainError("beta_logpdf requires y in the open interval (0, 1)")
    eta = logit(mu)
    if not phi > 0.0:
        raise ParameterError("phi must be positive")
    t = _scalars(beta_terms(y, eta, np.log(phi)))
    return DerivativeBundle(value=t["value"], d1={"mean": t["d1"]},
                            d2={"mean": t["d2"]}, d3={"mean": t["d3"]},
                            d_aux={"log_phi": t["d_lphi"]},
                            d2_aux={"log_phi": t["d2_lphi"]})


def hurdle_beta_logpdf(y, p, parts="zeros-and-ones"):
    """Hurdle beta log-density: point masses at 0 (and optionally 1).

    Branches touch disjoint predictors: the zero indicator reads eta0, the
    one indicator reads eta1, the interior beta density reads eta.
    """
    y = float(y)
    if not 0.0 <= y <= 1.0:
        raise DomainError("hurdle beta response must lie in [0, 1]")
    with_ones = parts == "zeros-and-ones"
    if y == 1.0 and not with_ones:
        raise DomainError("y = 1 is not representable in zeros-only mode")

    d1, d2, d3, d_aux, d2_aux = {}, {}, {}, {}, {}
    if y == 0.0:
        t = _scalars(log_sigmoid_terms(p.eta0))
        value = t["value"]
        d1["zero"], d2["zero"], d3["zero"] = t["d1"], t["d2"], t["d3"]
        return DerivativeBundle(value, d1, d2, d3, d_aux, d2_aux)

    t0 = _scalars(log_sigmoid_terms(-p.eta0))
    value = t0["value"]
    d1["zero"], d2["zero"], d3["zero"] = -t0["d1"], t0["d2"], -t0["d3"]
    if y == 1.0:
        t1 = _scalars(log_sigmoid_terms(p.eta1))
        value += t1["value"]
        d1["one"], d2["one"], d3["one"] = t1["d1"], t1["d2"], t1["d3"]
        return DerivativeBundle(value, d1, d2, d3, d_aux, d2_aux)

    if with_ones:
        t1 = _scalars(log_sigmoid_terms(-p.eta1))
        value += t1["value"]
        d1["one"], d2["one"], d3["one"] = -t1["d1"], t1["d2"], -t1["d3"]
    tb = _scalars(beta_terms(y, p.eta, np.log(p.phi)))
    value += tb["value"]
    d1["mean"], d2["mean"], d3["mean"] = tb["d1"], tb["d2"], tb["d3"]
    d_aux["log_phi"] = tb["d_lphi"]
    d2_aux["log_phi"] = tb["d2_lphi"]
    return DerivativeBundle(value, d1, d2, d3, d_aux, d2_aux)


def ordered_beta_logpdf(y, p):
    """Ordered beta log-density: cutoff masses at 0/1 around a beta interior."""
    y = float(y)
    if not 0.0 <= y <= 1.0:
        raise DomainError("ordered beta response must lie in [0, 1]")
    if len(p.cutoffs) != 2:
        raise ParameterError("ordered beta needs exactly two cutoffs")
    z0, z1 = p.cutoffs
    if y == 0.0:
        t = _scalars(mass_low_terms(z0, p.eta))
        return DerivativeBundle(t["value"], {"mean": t["d1"]}, {"mean": t["d2"]},
                                {"mean": t["d3"]}, {"zeta0": t["dc"], "zeta1": 0.0},
                                {"zeta0": t["d2c"], "zeta1": 0.0})
    if y == 1.0:
        t = _scalars(mass_high_terms(z1, p.eta))
        return DerivativeBundle(t["value"], {"mean": t["d1"]}, {"mean": t["d2"]},
                                {"mean": t["d3"]}, {"zeta0": 0.0, "zeta1": t["dc"]},
                                {"zeta0": 0.0, "zeta1": t["d2c"]})
    tb = _scalars(mass_band_terms(z0, z1, p.eta))
    ti = _scalars(beta_terms(y, p.eta, np.log(p.phi)))
    return DerivativeBundle(
        tb["value"] + ti["value"],
        {"mean": tb["d1"] + ti["d1"]},
        {"mean": tb["d2"] + ti["d2"]},
        {"mean": tb["d3"] + ti["d3"]},
        {"zeta0": tb["dlo"], "zeta1": tb["dhi"], "log_phi": ti["d_lphi"]},
        {"zeta0": tb["d2lo"], "zeta1": tb["d2hi"], "log_phi": ti["d2_lphi"]},
    )


def cumulative_logit_logpmf(y, p):
    """Cumulative logit (proportional odds) log-mass for class label y."""
    cuts = p.cutoffs
    k = len(cuts)
    if k < 1:
        raise ParameterError("cumulative logit needs at least one cutoff")
    label = int(y)
    if label != y or not 1 <= label <= k + 1:
        raise DomainError(f"class label must be an integer in 1..{k + 1}")
    d_aux = {f"c{i + 1}": 0.0 for i in range(k)}
    d2_aux = {f"c{i + 1}": 0.0 for i in range(k)}
    if label == 1:
        t = _scalars(mass_low_terms(cuts[0], p.eta))
        d_aux["c1"], d2_aux["c1"] = t["dc"], t["d2c"]
    elif label == k + 1:
        t = _scalars(mass_high_terms(cuts[-1], p.eta))
        d_aux[f"c{k}"], d2_aux[f"c{k}"] = t["dc"], t["d2c"]
    else:
        t = _scalars(mass_band_terms(cuts[label - 2], cuts[label - 1], p.eta))
        d_aux[f"c{label - 1}"], d2_aux[f"c{label - 1}"] = t["dlo"], t["d2lo"]
        d_aux[f"c{label}"], d2_aux[f"c{label}"] = t["dhi"], t["d2hi"]
    return DerivativeBundle(t["value"], {"mean": t["d1"]}, {"mean": t["d2"]},
                            {"mean": t["d3"]}, d_aux, d2_aux)


# ---------------------------------------------------------------------------
# means, presence probabilities, samplers
# ---------------------------------------------------------------------------

def mean_response(family, p, hurdle_parts="zeros-and-ones"):
    """Expected cover in [0,1] for one cell."""
    if family in ("beta-shifted",):
        return float(logistic(p.eta))
    if family == "bernoulli":
        return float(logistic(p.eta))
    if family == "hurdle-beta":
        mu0 = logistic(p.eta0)
        mu = logistic(p.eta)
        if hurdle_parts == "zeros-only":
            return float((1.0 - mu0) * mu)
        mu1 = logistic(p.eta1)
        return float((1.0 - mu0) * (mu1 + (1.0 - mu1) * mu))
    if family == "ordered-beta":
        z0, z1 = p.cutoffs
        r0 = logistic(z0 - p.eta)
        r1 = logistic(z1 - p.eta)
        return float((r1 - r0) * logistic(p.eta) + (1.0 - r1))
    raise UnsupportedFamilyError(f"mean_response is not defined for {family!r}")


def presence_probability(family, p, hurdle_parts="zeros-and-ones"):
    """Probability that the response exceeds zero."""
    if family == "hurdle-beta":
        return float(1.0 - logistic(p.eta0))
    if family == "ordered-beta":
        return float(1.0 - logistic(p.cutoffs[0] - p.eta))
    if family == "cumulative-logit":
        return float(1.0 - logistic(p.cutoffs[0] - p.eta))
    if family == "bernoulli":
        return float(logistic(p.eta))
    raise UnsupportedFamilyError(
        "presence probability is not defined for the shifted beta family")


def sample(family, p, rng, hurdle_parts="zeros-and-ones"):
    """Draw one response; the branch is drawn first, then the beta interior."""

    def beta_draw(eta, phi):
        mu = logistic(eta)
        g1 = rng.standard_gamma(mu * phi)
        g2 = rng.standard_gamma((1.0 - mu) * phi)
        return float(np.clip(g1 / (g1 + g2), _MASS_FLOOR, 1.0 - _MASS_FLOOR))

    if family == "beta-shifted":
        return beta_draw(p.eta, p.phi)
    if family == "bernoulli":
        return float(rng.uniform() < logistic(p.eta))
    if family == "hurdle-beta":
        if rng.uniform() < logistic(p.eta0):
            return 0.0
        if hurdle_parts == "zeros-and-ones" and rng.uniform() < logistic(p.eta1):
            return 1.0
        return beta_draw(p.eta, p.phi)
    if family == "ordered-beta":
        z0, z1 = p.cutoffs
        u = rng.uniform()
        if u < logistic(z0 - p.eta):
            return 0.0
        if u > logistic(z1 - p.eta):
            return 1.0
        return beta_draw(p.eta, p.phi)
    if family == "cumulative-logit":
        cuts = np.asarray(p.cutoffs, dtype=float)
        rho = logistic(cuts - p.eta)
        pk = np.diff(np.concatenate(([0.0], rho, [1.0])))
        return float(1 + np.searchsorted(np.cumsum(pk), rng.uniform(), side="right")
                     .clip(0, len(pk) - 1))
    raise UnsupportedFamilyError(f"unknown family {family!r}")
