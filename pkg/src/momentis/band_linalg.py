"""Symmetric (block-)tridiagonal matrices and banded Cholesky machinery.

Precision matrices of stationary AR(1) latent processes are block
tridiagonal, which keeps factorization, log-determinants, linear solves and
Gaussian sampling at O(T) cost in the series length. Dense matrices (small
random-effect precisions, modified proposal precisions) travel through the
same interface as a single-block instance tagged ``dense``.

The factorization is a banded Cholesky A = U'U (upper band storage, LAPACK
``pbtrf`` via scipy). A matrix counts as positive definite only when every
Schur pivot clears a relative threshold, so numerically singular inputs are
reported as failures rather than as barely-positive-definite successes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded
from scipy.linalg import lapack as _lapack

from .errors import InvalidInput, NotPositiveDefinite

# Pivots at or below PIVOT_RTOL * max|diag(A)| abort the factorization.
PIVOT_RTOL = 1e-12

_LOG_2PI = float(np.log(2.0 * np.pi))


class SymBandMatrix:
    """Symmetric block-tridiagonal matrix stored by block rows.

    Parameters
    ----------
    diag_blocks : array_like, shape (T, m, m)
        Symmetric diagonal blocks, ordered by block-row index.
    off_blocks : array_like, shape (T-1, m, m), optional
        Sub-diagonal blocks; ``off_blocks[t]`` is the block at block row
        t+1, block column t. Omitted or empty for block-diagonal matrices
        and for dense (single-block) instances.
    dense : bool
        Storage tag. Dense instances hold the whole matrix in one block
        (T=1, m=d) and exist so that small dense precisions share one code
        path with genuinely banded ones.
    """

    __slots__ = ("diag_blocks", "off_blocks", "m", "n_blocks", "dense")

    def __init__(self, diag_blocks, off_blocks=None, dense=False):
        D = np.atleast_3d(np.asarray(diag_blocks, dtype=float))
        if D.ndim != 3 or D.shape[1] != D.shape[2]:
            raise InvalidInput("diag_blocks must have shape (T, m, m)")
        T, m, _ = D.shape
        if off_blocks is None or (hasattr(off_blocks, "__len__") and len(off_blocks) == 0):
            O = np.zeros((T - 1, m, m)) if T > 1 else np.zeros((0, m, m))
        else:
            O = np.asarray(off_blocks, dtype=float).reshape(T - 1, m, m)
        if O.shape != (T - 1, m, m):
            raise InvalidInput("off_blocks must have shape (T-1, m, m)")
        # store exactly symmetric diagonal blocks
        self.diag_blocks = 0.5 * (D + np.transpose(D, (0, 2, 1)))
        self.off_blocks = O
        self.m = m
        self.n_blocks = T
        self.dense = bool(dense) or T == 1

    # -- constructors --------------------------------------------------

    @classmethod
    def from_scalar(cls, diag, off=None):
        """Tridiagonal matrix from its diagonal (T,) and sub-diagonal (T-1,)."""
        diag = np.asarray(diag, dtype=float)
        T = diag.shape[0]
        D = diag.reshape(T, 1, 1)
        O = None if off is None else np.asarray(off, dtype=float).reshape(T - 1, 1, 1)
        return cls(D, O)

    @classmethod
    def from_dense(cls, A):
        """Wrap a full symmetric matrix as a single dense-tagged block."""
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise InvalidInput("dense input must be a square matrix")
        return cls(A[None, :, :], None, dense=True)

    # -- basic properties ----------------------------------------------

    @property
    def d(self):
        """Total dimension T*m."""
        return self.n_blocks * self.m

    @property
    def bandwidth(self):
        """Scalar bandwidth of the stored pattern."""
        return self.m - 1 if self.n_blocks == 1 else 2 * self.m - 1

    def diagonal(self):
        """Main diagonal as a vector of length d."""
        return np.einsum("tii->ti", self.diag_blocks).reshape(-1)

    def max_abs_diag(self):
        dg = self.diagonal()
        return float(np.max(np.abs(dg))) if dg.size else 0.0

    def to_dense(self):
        T, m = self.n_blocks, self.m
        A = np.zeros((self.d, self.d))
        for t in range(T):
            A[t * m:(t + 1) * m, t * m:(t + 1) * m] = self.diag_blocks[t]
        for t in range(T - 1):
            A[(t + 1) * m:(t + 2) * m, t * m:(t + 1) * m] = self.off_blocks[t]
            A[t * m:(t + 1) * m, (t + 1) * m:(t + 2) * m] = self.off_blocks[t].T
        return A

    def band_upper(self):
        """LAPACK upper band storage: ab[kd + i - j, j] = A[i, j], i <= j."""
        T, m, kd = self.n_blocks, self.m, self.bandwidth
        ab = np.zeros((kd + 1, self.d))
        if m == 1:
            ab[kd] = self.diag_blocks[:, 0, 0]
            if T > 1:
                ab[0, 1:] = self.off_blocks[:, 0, 0]
            return ab
        for r in range(m):
            for c in range(r, m):
                ab[kd + r - c, c::m] = self.diag_blocks[:, r, c]
        for r in range(m):
            for c in range(m):
                # A[t*m + c, (t+1)*m + r] = off_blocks[t][r, c] (upper image)
                ab[kd + c - m - r, m + r::m] = self.off_blocks[:, r, c]
        return ab

    def matvec(self, x):
        """A @ x along the last axis of x."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise InvalidInput("matvec dimension mismatch")
        T, m = self.n_blocks, self.m
        if m == 1:
            dg = self.diag_blocks[:, 0, 0]
            y = dg * x
            if T > 1:
                off = self.off_blocks[:, 0, 0]
                y[..., :-1] += off * x[..., 1:]
                y[..., 1:] += off * x[..., :-1]
            return y
        xb = x.reshape(x.shape[:-1] + (T, m))
        y = np.einsum("tij,...tj->...ti", self.diag_blocks, xb)
        if T > 1:
            y[..., 1:, :] += np.einsum("tij,...tj->...ti", self.off_blocks, xb[..., :-1, :])
            y[..., :-1, :] += np.einsum("tji,...tj->...ti", self.off_blocks, xb[..., 1:, :])
        return y.reshape(x.shape)

    def shift_diagonal(self, s):
        """Return A + s*I with the same storage tag."""
        D = self.diag_blocks.copy()
        idx = np.arange(self.m)
        D[:, idx, idx] += s
        return SymBandMatrix(D, self.off_blocks.copy(), dense=self.dense)

    def scaled(self, a):
        """Return a*A."""
        return SymBandMatrix(a * self.diag_blocks, a * self.off_blocks, dense=self.dense)

    def gershgorin_bounds(self):
        """(lo, hi) with every eigenvalue in [lo, hi]."""
        ab = self.band_upper()
        kd = self.bandwidth
        dg = ab[kd]
        R = np.zeros(self.d)
        for r in range(1, kd + 1):
            v = np.abs(ab[kd - r, r:])
            R[:self.d - r] += v
            R[r:] += v
        return float(np.min(dg - R)), float(np.max(dg + R))

    def to_json_dict(self):
        return {
            "m": self.m,
            "diag_blocks": self.diag_blocks.tolist(),
            "off_blocks": self.off_blocks.tolist(),
            "dense": self.dense,
        }

    @classmethod
    def from_json_dict(cls, doc):
        off = np.asarray(doc["off_blocks"], dtype=float)
        if off.size == 0:
            off = None
        return cls(np.asarray(doc["diag_blocks"], dtype=float), off, dense=doc.get("dense", False))


def linear_combination(a, A, b, B):
    """a*A + b*B for symmetric banded matrices.

    Matching block layouts combine blockwise; mixed layouts fall back to a
    dense-tagged result.
    """
    if not isinstance(A, SymBandMatrix) or not isinstance(B, SymBandMatrix):
        raise InvalidInput("linear_combination expects SymBandMatrix operands")
    if A.d != B.d:
        raise InvalidInput(f"dimension mismatch: {A.d} vs {B.d}")
    if A.m == B.m and A.n_blocks == B.n_blocks:
        return SymBandMatrix(
            a * A.diag_blocks + b * B.diag_blocks,
            a * A.off_blocks + b * B.off_blocks,
            dense=A.dense or B.dense,
        )
    return SymBandMatrix.from_dense(a * A.to_dense() + b * B.to_dense())


@dataclass
class BandCholesky:
    """Result of :func:`factorize`: A = U'U in upper band storage.

    ``pivot_signs`` records the sign of each completed Schur pivot; the
    factorization aborts at the first non-positive pivot, whose (1-based)
    block-row index lands in ``failed_block``.
    """

    success: bool
    dim: int
    block_size: int
    bandwidth: int
    factor: np.ndarray | None
    log_det: float
    failed_block: int | None
    pivot_signs: np.ndarray

    def _require_success(self):
        if not self.success:
            raise NotPositiveDefinite(
                f"matrix is not positive definite (block row {self.failed_block})",
                failed_block=self.failed_block,
            )

    def solve(self, b):
        """Solve A x = b for b of shape (d,) or (d, k)."""
        self._require_success()
        return cho_solve_banded((self.factor, False), b)

    def solve_upper(self, z, overwrite=False):
        """Solve U x = z; for z ~ N(0, I) the solution is N(0, A^{-1}).

        Pass a Fortran-ordered right-hand side (and ``overwrite=True`` when
        the buffer is disposable) to avoid copies on large draw blocks.
        """
        self._require_success()
        z2 = z[:, None] if z.ndim == 1 else z
        x, info = _lapack.dtbtrs(self.factor, z2, uplo="U", trans="N",
                                 overwrite_b=overwrite)
        if info != 0:
            raise NotPositiveDefinite(f"triangular solve failed (info={info})")
        return x[:, 0] if z.ndim == 1 else x

    def factor_matvec(self, x):
        """U @ x along the last axis; (x'Ax) = ||Ux||^2."""
        self._require_success()
        ab, kd = self.factor, self.bandwidth
        d = self.dim
        y = ab[kd] * x
        for r in range(1, kd + 1):
            y[..., :d - r] += ab[kd - r, r:] * x[..., r:]
        return y


def _pivot_scan(A, tol):
    """Dense scan locating the first pivot <= tol. Slow path, failures only."""
    M = A.to_dense()
    d = A.d
    signs = np.ones(d)
    for j in range(d):
        p = M[j, j]
        if not p > tol:
            return j // A.m + 1, signs[:j]
        r = M[j + 1:, j] / p
        M[j + 1:, j + 1:] -= np.outer(r, M[j + 1:, j])
    return None, signs


def factorize(A):
    """Banded Cholesky of a symmetric block-tridiagonal matrix.

    Returns a :class:`BandCholesky`; ``success`` is False (never an
    exception) when the matrix is not positive definite, with the failing
    block row recorded. The log-determinant is read off the pivots.
    """
    if not isinstance(A, SymBandMatrix):
        raise InvalidInput("factorize expects a SymBandMatrix")
    if not (np.all(np.isfinite(A.diag_blocks)) and np.all(np.isfinite(A.off_blocks))):
        raise InvalidInput("matrix has non-finite entries")
    ab = A.band_upper()
    kd = A.bandwidth
    tol = PIVOT_RTOL * A.max_abs_diag()
    try:
        cb = cholesky_banded(ab, lower=False)
    except LinAlgError:
        cb = None
    if cb is not None:
        pivots = cb[kd] ** 2
        if np.min(pivots) > tol:
            log_det = 2.0 * float(np.sum(np.log(cb[kd])))
            return BandCholesky(True, A.d, A.m, kd, cb, log_det, None, np.ones(A.d))
    failed, signs = _pivot_scan(A, tol)
    if failed is None:
        # LAPACK/threshold disagreement on a borderline pivot: treat as failure
        # at the last block to stay conservative.
        failed = A.n_blocks
    return BandCholesky(False, A.d, A.m, kd, None, np.nan, failed, signs)


def log_det(A):
    """Log-determinant of a positive definite banded matrix."""
    fac = factorize(A)
    fac._require_success()
    return fac.log_det


def sample_gaussian(mean, precision, rng, count):
    """Draw ``count`` vectors from N(mean, precision^{-1}).

    Uses the banded factor: x = mean + U^{-1} z, z ~ N(0, I). Deterministic
    given the caller-owned ``rng``; O(T m^2 count) once factorized.
    """
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (precision.d,):
        raise InvalidInput(f"mean has shape {mean.shape}, expected ({precision.d},)")
    fac = factorize(precision)
    fac._require_success()
    z = rng.standard_normal((int(count), precision.d)).T
    x = fac.solve_upper(z, overwrite=True)
    x += mean[:, None]
    return x.T


def log_density(x, mean, precision, factor=None):
    """Multivariate normal log-density, normalizing constant included.

    ``x`` may be a single vector (d,) or a batch (..., d). Pass a cached
    :class:`BandCholesky` as ``factor`` to skip refactorization.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    d = precision.d
    if x.shape[-1] != d or mean.shape != (d,):
        raise InvalidInput("dimension mismatch in log_density")
    fac = factorize(precision) if factor is None else factor
    fac._require_success()
    u = fac.factor_matvec(x - mean)
    quad = np.sum(u * u, axis=-1)
    return -0.5 * d * _LOG_2PI + 0.5 * fac.log_det - 0.5 * quad


def _is_pd_shifted(ab0, kd, s, scale):
    """Positive definiteness of A - s*I given A's band storage."""
    ab = ab0.copy()
    ab[kd] -= s
    tol = PIVOT_RTOL * max(np.max(np.abs(ab[kd])), scale)
    try:
        cb = cholesky_banded(ab, lower=False)
    except LinAlgError:
        return False
    return bool(np.min(cb[kd] ** 2) > tol)


def smallest_eigenvalue(A, tol=1e-10):
    """Smallest eigenvalue of a symmetric banded matrix, to absolute ``tol``.

    Bisects on the shift s at which A - s*I stops factorizing, starting
    from Gershgorin brackets. Deterministic and O(T) per trial shift.
    """
    if not isinstance(A, SymBandMatrix):
        raise InvalidInput("smallest_eigenvalue expects a SymBandMatrix")
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    lo, hi = A.gershgorin_bounds()
    if hi - lo <= tol:
        return 0.5 * (lo + hi)
    ab0 = A.band_upper()
    kd = A.bandwidth
    scale = max(A.max_abs_diag(), abs(lo), abs(hi))
    # invariant: lambda_min in (lo, hi]; A - lo*I is PSD by Gershgorin
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _is_pd_shifted(ab0, kd, mid, scale):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
