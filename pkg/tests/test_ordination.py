"""Procrustes, dissimilarities, isotonic regression, NMDS."""

import math

import numpy as np
import pytest

from coverlvm.errors import ConfigurationError, DomainError
from coverlvm.model import ResponseMatrix
from coverlvm.ordination import (DissimilarityMatrix, dissimilarity,
                                 isotonic_regression, nmds, procrustes_error)


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestProcrustes:
    def test_identity(self):
        X = np.random.default_rng(0).normal(size=(20, 2))
        assert procrustes_error(X, X) == pytest.approx(0.0, abs=1e-12)

    def test_rotated_translated(self):
        X = np.random.default_rng(1).normal(size=(30, 2))
        Y = X @ rotation(0.5 * math.pi).T + np.array([3.0, -7.0])
        assert procrustes_error(X, Y) == pytest.approx(0.0, abs=1e-10)

    def test_scaling_reflection_invariance(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(25, 2))
        Y = 2.7 * (X @ np.diag([1.0, -1.0]) @ rotation(1.1).T) + rng.normal(size=2)
        assert procrustes_error(X, Y) == pytest.approx(0.0, abs=1e-10)

    def test_error_bounded_by_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            X = rng.normal(size=(15, 2))
            Y = rng.normal(size=(15, 2))
            assert 0.0 <= procrustes_error(X, Y) <= 1.0

    def test_matches_grid_search_oracle(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(100, 2))
        Y = rng.normal(size=(100, 2))
        fast = procrustes_error(X, Y)

        Xc = X - X.mean(0)
        Xc /= np.sqrt((Xc ** 2).sum())
        Yc = Y - Y.mean(0)
        best = np.inf
        for reflect in (1.0, -1.0):
            for theta in np.linspace(0.0, 2.0 * math.pi, 40000, endpoint=False):
                Q = rotation(theta) @ np.diag([1.0, reflect])
                M = Yc @ Q
                # optimal scale for this Q in closed form
                c = max((Xc * M).sum() / (M ** 2).sum(), 0.0)
                best = min(best, ((Xc - c * M) ** 2).sum())
        assert fast == pytest.approx(best, abs=1e-6)

    def test_degenerate_config_rejected(self):
        with pytest.raises(DomainError):
            procrustes_error(np.zeros((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))

    def test_too_few_points(self):
        with pytest.raises(ConfigurationError):
            procrustes_error(np.zeros((2, 2)), np.zeros((2, 2)))


class TestDissimilarity:
    def test_disjoint_support(self):
        data = ResponseMatrix(values=[[1.0, 0.0], [0.0, 1.0]])
        d = dissimilarity(data, "bray-curtis")
        assert d.values[0, 1] == pytest.approx(1.0, abs=0)

    def test_identical_rows(self):
        data = ResponseMatrix(values=[[0.3, 0.6], [0.3, 0.6]])
        for metric in ("bray-curtis", "jaccard"):
            assert dissimilarity(data, metric).values[0, 1] == 0.0

    def test_direct_formula(self):
        data = ResponseMatrix(values=[[0.5, 0.5], [0.5, 0.0]])
        d = dissimilarity(data, "bray-curtis")
        assert d.values[0, 1] == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_all_zero_rows(self):
        data = ResponseMatrix(values=[[0.0, 0.0], [0.0, 0.0], [0.2, 0.0]],
                              mask=[[True, True], [True, True], [True, True]])
        d = dissimilarity(data, "bray-curtis")
        assert d.values[0, 1] == 0.0
        assert d.values[0, 2] == 1.0

    def test_jaccard_counts(self):
        data = ResponseMatrix(values=[[0.2, 0.0, 0.4], [0.1, 0.3, 0.0]])
        d = dissimilarity(data, "jaccard")
        assert d.values[0, 1] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_exact_symmetry(self):
        rng = np.random.default_rng(5)
        vals = rng.uniform(0, 1, size=(12, 6))
        vals[rng.uniform(size=(12, 6)) < 0.4] = 0.0
        data = ResponseMatrix(values=vals)
        for metric in ("bray-curtis", "jaccard"):
            M = dissimilarity(data, metric).values
            assert np.array_equal(M, M.T)

    def test_matrix_invariants_enforced(self):
        with pytest.raises(ConfigurationError):
            DissimilarityMatrix(values=np.array([[0.0, 0.4], [0.5, 0.0]]),
                                metric="bray-curtis")


class TestIsotonic:
    def test_already_monotone(self):
        assert np.array_equal(isotonic_regression([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_pooling_example(self):
        assert np.allclose(isotonic_regression([3.0, 1.0, 2.0]), [2.0, 2.0, 2.0])

    def test_output_monotone_and_mean_preserving(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            y = rng.normal(size=rng.integers(2, 30))
            w = rng.uniform(0.2, 3.0, size=y.size)
            fit = isotonic_regression(y, w)
            assert np.all(np.diff(fit) >= -1e-12)
            assert np.dot(w, fit) == pytest.approx(np.dot(w, y), rel=1e-10)

    def test_matches_qp_oracle(self):
        cvxpy = pytest.importorskip("cvxpy")
        rng = np.random.default_rng(7)
        for _ in range(25):
            k = int(rng.integers(2, 13))
            y = rng.normal(size=k)
            w = rng.uniform(0.5, 2.0, size=k)
            x = cvxpy.Variable(k)
            prob = cvxpy.Problem(cvxpy.Minimize(cvxpy.sum(cvxpy.multiply(w, (x - y) ** 2))),
                                 [x[1:] >= x[:-1]])
            prob.solve(solver="CLARABEL")
            assert np.allclose(isotonic_regression(y, w), x.value, atol=1e-6)


def planted_dissimilarity(n=20, seed=8):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    D = D / D.max()
    return DissimilarityMatrix(values=D, metric="bray-curtis"), X


class TestNmds:
    def test_recovers_planted_configuration(self):
        diss, X = planted_dissimilarity()
        scores = nmds(diss, d=2, n_restarts=2, seed=0, max_iter=400)
        assert scores.stress < 1e-3
        assert procrustes_error(X, scores.coords) < 1e-3

    def test_stress_trace_non_increasing(self):
        rng = np.random.default_rng(9)
        vals = rng.uniform(0, 1, size=(15, 8))
        vals[rng.uniform(size=(15, 8)) < 0.3] = 0.0
        diss = dissimilarity(ResponseMatrix(values=vals), "bray-curtis")
        scores = nmds(diss, d=2, n_restarts=3, seed=1, max_iter=200)
        trace = np.asarray(scores.stress_trace)
        assert trace.size >= 1
        assert np.all(np.diff(trace) <= 1e-12)

    def test_equilateral_triangle(self):
        D = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
        scores = nmds(DissimilarityMatrix(values=D, metric="jaccard"), d=2,
                      n_restarts=2, seed=2, max_iter=200)
        assert scores.stress < 1e-6
        dists = np.sqrt(((scores.coords[:, None] - scores.coords[None]) ** 2).sum(-1))
        off = dists[np.triu_indices(3, 1)]
        assert np.allclose(off, off[0], rtol=1e-3)

    def test_deterministic_given_seed(self):
        diss, _ = planted_dissimilarity(seed=10)
        a = nmds(diss, d=2, n_restarts=2, seed=5, max_iter=100)
        b = nmds(diss, d=2, n_restarts=2, seed=5, max_iter=100)
        assert np.array_equal(a.coords, b.coords)
        assert a.stress == b.stress
