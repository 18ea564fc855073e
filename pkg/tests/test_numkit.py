import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satts.numkit import (EmptyInputError, NumericError, ShapeError, covariance, gauss_logpdf, gaussian,
                          qr_pivot, sym_eig)


def greedy_pivots(M):
    """Independent greedy max-residual pivot order via least squares projections."""
    M = np.asarray(M, dtype=float)
    chosen = []
    rest = list(range(M.shape[1]))
    scale = np.linalg.norm(M, axis=0).max()
    while rest:
        if chosen:
            Q = M[:, chosen]
            coef, *_ = np.linalg.lstsq(Q, M[:, rest], rcond=None)
            res = np.linalg.norm(M[:, rest] - Q @ coef, axis=0)
        else:
            res = np.linalg.norm(M[:, rest], axis=0)
        res[res <= 1e-10 * scale] = 0.0
        j = rest[int(np.argmax(res))]
        chosen.append(j)
        rest.remove(j)
    return chosen


def test_sym_eig_diagonal_sorted():
    e = sym_eig(np.diag([1.0, 3.0, 2.0]))
    assert np.allclose(e.eigenvalues, [3, 2, 1])
    assert np.allclose(np.abs(e.eigenvectors), np.eye(3)[:, [1, 2, 0]])


def test_sym_eig_rotated_2x2():
    e = sym_eig([[2.0, 1.0], [1.0, 2.0]])
    assert np.allclose(e.eigenvalues, [3, 1], atol=1e-12)
    v = e.eigenvectors[:, 0]
    assert abs(abs(v[0]) - 1 / math.sqrt(2)) < 1e-12 and v[0] * v[1] > 0


def test_sym_eig_zero_matrix():
    e = sym_eig(np.zeros((3, 3)))
    assert np.all(e.eigenvalues == 0)
    assert np.allclose(e.eigenvectors, np.eye(3))


def test_sym_eig_rejects_non_psd_and_asymmetric():
    with pytest.raises(NumericError):
        sym_eig([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ShapeError):
        sym_eig([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ShapeError):
        sym_eig(np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(0, 10_000))
def test_sym_eig_reconstruction(d, seed):
    A = np.random.default_rng(seed).standard_normal((d, d + 2))
    S = A @ A.T
    e = sym_eig(S)
    V, w = e.eigenvectors, e.eigenvalues
    assert np.linalg.norm(S - V @ np.diag(w) @ V.T) / np.linalg.norm(S) <= 1e-8
    assert np.max(np.abs(V.T @ V - np.eye(d))) <= 1e-8
    assert np.all(np.diff(w) <= 0)
    assert np.allclose(w, np.sort(np.linalg.eigvalsh(S))[::-1], atol=1e-8 * np.abs(w).max())


def test_qr_pivot_largest_norm_first():
    assert qr_pivot(np.array([[10.0, 0.0, 5.0], [0.0, 1.0, 0.0]]))[0] == 0


def test_qr_pivot_duplicate_columns_tie_lowest_index():
    M = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.5]])
    assert list(qr_pivot(M)) == [0, 2, 1]
    assert list(qr_pivot(np.array([[1.0, 1.0], [0.0, 0.0]]))) == [0, 1]


def test_qr_pivot_empty():
    with pytest.raises(ShapeError):
        qr_pivot(np.zeros((3, 0)))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 10_000))
def test_qr_pivot_matches_greedy_oracle(d, n, seed):
    M = np.random.default_rng(seed).standard_normal((d, n))
    assert list(qr_pivot(M)) == greedy_pivots(M)


def test_covariance_hand_cases():
    mu, cov = covariance([[1.0, 0.0], [-1.0, 0.0]])
    assert np.array_equal(mu, [0, 0]) and np.allclose(cov, [[1, 0], [0, 0]])
    mu, cov = covariance([[2.0, 3.0]])
    assert np.array_equal(mu, [2, 3]) and np.all(cov == 0)
    _, cov = covariance(np.tile([1.0, -2.0, 4.0], (5, 1)))
    assert np.all(cov == 0)
    with pytest.raises(EmptyInputError):
        covariance(np.zeros((0, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10_000))
def test_covariance_two_pass_oracle(n, d, seed):
    Z = np.random.default_rng(seed).standard_normal((n, d)) * 3 + 1
    mu, cov = covariance(Z)
    ref_mu = [sum(Z[:, j]) / n for j in range(d)]
    ref = np.array([[sum((Z[i, a] - ref_mu[a]) * (Z[i, b] - ref_mu[b]) for i in range(n)) / n
                     for b in range(d)] for a in range(d)])
    assert np.max(np.abs(mu - ref_mu)) <= 1e-12
    assert np.max(np.abs(cov - ref)) <= 1e-12


def test_gauss_logpdf_closed_forms():
    g = gaussian([0.0], [[1.0]], ridge=0.0)
    assert abs(gauss_logpdf([0.0], g) - (-0.5 * math.log(2 * math.pi))) < 1e-12
    assert abs(gauss_logpdf([1.0], g) - (-0.5 * math.log(2 * math.pi) - 0.5)) < 1e-12
    shifted = gaussian([3.0, -1.0], np.diag([2.0, 0.5]), ridge=0.0)
    centered = gaussian([0.0, 0.0], np.diag([2.0, 0.5]), ridge=0.0)
    assert gauss_logpdf([3.0, -1.0], shifted) == pytest.approx(gauss_logpdf([0.0, 0.0], centered), abs=1e-12)


def test_gauss_logpdf_shape_error():
    with pytest.raises(ShapeError):
        gauss_logpdf([0.0, 1.0], gaussian([0.0], [[1.0]]))


def test_default_ridge_handles_singular_covariance():
    g = gaussian([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])
    assert math.isfinite(gauss_logpdf([0.0, 0.0], g))
    with pytest.raises(NumericError):
        gaussian([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]], ridge=0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_gauss_logpdf_diagonal_is_sum_of_1d(d, seed):
    rng = np.random.default_rng(seed)
    mu, var, z = rng.standard_normal(d), rng.uniform(0.1, 3.0, d), rng.standard_normal(d)
    g = gaussian(mu, np.diag(var), ridge=0.0)
    ref = sum(-0.5 * math.log(2 * math.pi * v) - 0.5 * (x - m) ** 2 / v for x, m, v in zip(z, mu, var))
    assert abs(gauss_logpdf(z, g) - ref) <= 1e-10


def test_gauss_logpdf_batch_matches_rows():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    g = gaussian(rng.standard_normal(3), A @ A.T + np.eye(3))
    Z = rng.standard_normal((5, 3))
    assert np.allclose(gauss_logpdf(Z, g), [gauss_logpdf(z, g) for z in Z], atol=1e-13)


def test_exhaustive_helper_sanity():
    # two identical columns can never both be independent pivots
    M = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    picks = qr_pivot(M)[:2]
    best = max(itertools.combinations(range(3), 2),
               key=lambda s: abs(np.linalg.det(M[:, list(s)])))
    assert abs(np.linalg.det(M[:, picks])) == pytest.approx(abs(np.linalg.det(M[:, list(best)])))
