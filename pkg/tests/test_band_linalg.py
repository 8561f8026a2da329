import numpy as np
import pytest

from momentis import (InvalidInput, NotPositiveDefinite, SymBandMatrix, factorize,
                      log_density, sample_gaussian, smallest_eigenvalue)
from momentis.band_linalg import linear_combination
from momentis.statespace import Ar1Spec, ar1_precision


def random_block_tridiag(rng, T, m, pd=True):
    """Random symmetric block-tridiagonal matrix, shifted to be PD on request."""
    D = rng.standard_normal((T, m, m))
    D = 0.5 * (D + np.transpose(D, (0, 2, 1)))
    O = 0.3 * rng.standard_normal((max(T - 1, 0), m, m))
    A = SymBandMatrix(D, O if T > 1 else None)
    if pd:
        lam_min = float(np.min(np.linalg.eigvalsh(A.to_dense())))
        A = A.shift_diagonal(0.5 - min(lam_min, 0.0))
    return A


def test_identity_factorization():
    A = SymBandMatrix.from_scalar(np.ones(3))
    fac = factorize(A)
    assert fac.success
    assert fac.log_det == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(fac.factor[-1], 1.0)


def test_ar1_t2_determinant():
    A = SymBandMatrix.from_scalar([1.0, 1.0], [-0.5])
    fac = factorize(A)
    assert fac.success
    assert np.exp(fac.log_det) == pytest.approx(0.75, rel=1e-12)


def test_indefinite_fails_at_second_block_row():
    # dense eigenvalues are (3, -1)
    A = SymBandMatrix.from_scalar([1.0, 1.0], [2.0])
    assert sorted(np.linalg.eigvalsh(A.to_dense())) == pytest.approx([-1.0, 3.0])
    fac = factorize(A)
    assert not fac.success
    assert fac.failed_block == 2
    with pytest.raises(NotPositiveDefinite):
        fac.solve(np.zeros(2))


def test_non_finite_entries_rejected():
    A = SymBandMatrix.from_scalar([1.0, np.nan])
    with pytest.raises(InvalidInput):
        factorize(A)


def test_pd_verdict_matches_dense_eigenvalues():
    rng = np.random.default_rng(42)
    for _ in range(200):
        T = int(rng.integers(1, 13))
        m = int(rng.integers(1, 4))
        if T * m > 60:
            continue
        A = random_block_tridiag(rng, T, m, pd=bool(rng.random() < 0.5))
        dense_pd = bool(np.min(np.linalg.eigvalsh(A.to_dense())) > 0)
        assert factorize(A).success == dense_pd


def test_log_det_matches_dense():
    rng = np.random.default_rng(7)
    for _ in range(50):
        T = int(rng.integers(1, 10))
        m = int(rng.integers(1, 4))
        A = random_block_tridiag(rng, T, m)
        fac = factorize(A)
        assert fac.success
        sign, ld = np.linalg.slogdet(A.to_dense())
        assert sign > 0
        assert fac.log_det == pytest.approx(ld, rel=1e-8)


def test_factor_reconstructs_input():
    rng = np.random.default_rng(3)
    for _ in range(20):
        T = int(rng.integers(1, 8))
        m = int(rng.integers(1, 4))
        A = random_block_tridiag(rng, T, m)
        fac = factorize(A)
        d = A.d
        U = np.zeros((d, d))
        for r in range(fac.bandwidth + 1):
            U += np.diag(fac.factor[fac.bandwidth - r, r:], r)
        dense = A.to_dense()
        assert np.allclose(U.T @ U, dense, rtol=1e-10, atol=1e-10 * np.abs(dense).max())


def test_sample_standard_normal_moments():
    d, S = 3, 10 ** 5
    A = SymBandMatrix.from_scalar(np.ones(d))
    xs = sample_gaussian(np.zeros(d), A, np.random.default_rng(0), S)
    se = 1.0 / np.sqrt(S)
    assert np.all(np.abs(xs.mean(axis=0)) < 5 * se)
    cov = np.cov(xs.T)
    assert np.all(np.abs(cov - np.eye(d)) < 5 * np.sqrt(2.0 / S))


def test_sample_ar1_lag_one_autocorrelation():
    spec = Ar1Spec(0.0, 0.8, 0.36, 50)
    mean, Q = ar1_precision(spec)
    xs = sample_gaussian(mean, Q, np.random.default_rng(11), 4000)
    x0 = xs[:, :-1].ravel()
    x1 = xs[:, 1:].ravel()
    rho = np.corrcoef(x0, x1)[0, 1]
    assert rho == pytest.approx(0.8, abs=0.02)


def test_sample_deterministic_given_seed():
    A = SymBandMatrix.from_scalar([2.0, 2.0, 2.0], [-0.5, -0.5])
    a = sample_gaussian(np.zeros(3), A, np.random.default_rng(5), 7)
    b = sample_gaussian(np.zeros(3), A, np.random.default_rng(5), 7)
    assert np.array_equal(a, b)


def test_sample_covariance_consistency():
    rng = np.random.default_rng(21)
    S = 10 ** 5
    for _ in range(3):
        T = int(rng.integers(1, 5))
        A = random_block_tridiag(rng, T, 1)
        cov_true = np.linalg.inv(A.to_dense())
        xs = sample_gaussian(np.zeros(A.d), A, np.random.default_rng(2), S)
        emp = np.cov(xs.T).reshape(A.d, A.d)
        v = np.diag(cov_true)
        se = np.sqrt((np.outer(v, v) + cov_true ** 2) / S)
        assert np.all(np.abs(emp - cov_true) < 6 * se)


def test_log_density_closed_forms():
    one = SymBandMatrix.from_scalar([1.0])
    assert log_density(np.zeros(1), np.zeros(1), one) == pytest.approx(
        -0.5 * np.log(2 * np.pi), rel=1e-14)
    two = SymBandMatrix.from_scalar(np.ones(2))
    assert log_density(np.ones(2), np.zeros(2), two) == pytest.approx(
        -np.log(2 * np.pi) - 1.0, rel=1e-14)


def test_log_density_matches_dense_oracle():
    rng = np.random.default_rng(17)
    for _ in range(20):
        T = int(rng.integers(1, 8))
        m = int(rng.integers(1, 3))
        A = random_block_tridiag(rng, T, m)
        d = A.d
        mean = rng.standard_normal(d)
        x = rng.standard_normal(d)
        Qd = A.to_dense()
        sign, ld = np.linalg.slogdet(Qd)
        ref = -0.5 * d * np.log(2 * np.pi) + 0.5 * ld - 0.5 * (x - mean) @ Qd @ (x - mean)
        assert log_density(x, mean, A) == pytest.approx(ref, abs=1e-10 * max(1, abs(ref)))


def test_log_density_dimension_mismatch():
    A = SymBandMatrix.from_scalar(np.ones(3))
    with pytest.raises(InvalidInput):
        log_density(np.zeros(2), np.zeros(3), A)


def test_smallest_eigenvalue_identity_and_diagonal():
    assert smallest_eigenvalue(SymBandMatrix.from_scalar(np.ones(4))) == pytest.approx(1.0, abs=1e-9)
    D = SymBandMatrix.from_scalar([3.0, -2.0, 5.0])
    assert smallest_eigenvalue(D) == pytest.approx(-2.0, abs=1e-9)


def test_smallest_eigenvalue_matches_dense_oracle():
    rng = np.random.default_rng(13)
    tol = 1e-8
    for _ in range(30):
        T = int(rng.integers(1, 16))
        m = int(rng.integers(1, 4))
        if T * m > 60:
            continue
        A = random_block_tridiag(rng, T, m, pd=bool(rng.random() < 0.5))
        ref = float(np.min(np.linalg.eigvalsh(A.to_dense())))
        assert smallest_eigenvalue(A, tol=tol) == pytest.approx(ref, abs=10 * tol)


def test_linear_combination_mixed_layout():
    a = SymBandMatrix.from_scalar([2.0, 2.0], [-0.3])
    b = SymBandMatrix.from_dense([[1.0, 0.1], [0.1, 1.0]])
    c = linear_combination(1.0, a, -0.5, b)
    assert np.allclose(c.to_dense(), a.to_dense() - 0.5 * b.to_dense())
    with pytest.raises(InvalidInput):
        linear_combination(1.0, a, 1.0, SymBandMatrix.from_scalar(np.ones(3)))


def test_matvec_matches_dense():
    rng = np.random.default_rng(29)
    for m in (1, 2):
        A = random_block_tridiag(rng, 4, m)
        x = rng.standard_normal((5, A.d))
        assert np.allclose(A.matvec(x), x @ A.to_dense().T)
