"""Shared oracles and builders for the test suite."""

import numpy as np

from coverlvm.estimator import VariationalObjective
from coverlvm.model import CovariateMatrix, ModelSpec, ResponseMatrix


def central_diff(f, x, eps=1e-5):
    """Central finite difference of a scalar function at scalar x."""
    return (f(x + eps) - f(x - eps)) / (2.0 * eps)


def second_diff(f, x, eps=1e-4):
    return (f(x + eps) - 2.0 * f(x) + f(x - eps)) / (eps * eps)


def grad_fd(fun, theta, eps=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    g = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += eps
        dn = theta.copy()
        dn[i] -= eps
        g[i] = (fun(up) - fun(dn)) / (2.0 * eps)
    return g


def random_cover_data(rng, n, m, zero_frac=0.25, one_frac=0.08, mask_frac=0.0):
    vals = rng.uniform(0.0, 1.0, size=(n, m))
    vals[rng.uniform(size=(n, m)) < zero_frac] = 0.0
    vals[rng.uniform(size=(n, m)) < one_frac] = 1.0
    mask = rng.uniform(size=(n, m)) >= mask_frac
    mask[0] = True  # keep every species observed at least once
    return ResponseMatrix(values=vals, mask=mask)


def random_ordinal_data(rng, n, m, n_classes=3):
    vals = rng.integers(1, n_classes + 1, size=(n, m)).astype(float)
    vals[:n_classes] = np.arange(1, n_classes + 1)[:, None]  # all classes present
    return ResponseMatrix(values=vals, ordinal=True)


def build_objective(rng, family, n=10, m=5, d=2, q=2, **spec_kw):
    if family == "cumulative-logit":
        data = random_ordinal_data(rng, n, m)
    elif family == "bernoulli":
        data = ResponseMatrix(values=rng.integers(0, 2, size=(n, m)).astype(float))
    else:
        one_frac = 0.0 if spec_kw.get("hurdle_parts") == "zeros-only" else 0.08
        data = random_cover_data(rng, n, m, one_frac=one_frac)
    cov = CovariateMatrix(values=rng.normal(size=(n, q)))
    spec = ModelSpec(family=family, latent_dim=d, **spec_kw)
    obj = VariationalObjective(data, cov, spec)
    return obj, data, cov, spec
