"""Gaussian, Student-t and two-component mixture importance densities.

The weight-moment condition for a Gaussian proposal N(mu*, Q*^{-1}) against a
Gaussian latent density N(mu, Q^{-1}) is positive definiteness of
Q* - n (Q* - Q). :func:`check_moment_condition` decides it by factorization;
:func:`modify_precision` repairs a failing Q* by clamping the eigenvalues of
A^{-1} Q* A^{-T} (with n Q = A A') below 1/(n-1), which guarantees
n Q - (n-1) Q_tilde > 0. :func:`build_mixture` packages the repaired density
as the heavy component of a two-component mixture so the moment guarantee is
kept while most of the mass stays on the better-fitting original density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky as dense_cholesky
from scipy.linalg import LinAlgError, solve_triangular
from scipy.special import gammaln

from . import band_linalg as bl
from .band_linalg import SymBandMatrix, linear_combination
from .errors import InvalidInput, NotPositiveDefinite


@dataclass(frozen=True)
class MomentOrder:
    """Requested weight-moment order n with clamp margin and smoothing width.

    n may be any real >= 1 (integer in all shipped experiments). ``eps``
    keeps the clamped eigenvalues strictly below 1/(n-1); ``delta`` is the
    width of the C^1 blending interval of the smooth clamp.
    """

    n: float
    eps: float = 1e-5
    delta: float = 1e-5

    def __post_init__(self):
        if not self.n >= 1:
            raise InvalidInput("moment order n must be >= 1")
        if not 0 < self.eps < 1:
            raise InvalidInput("eps must lie in (0, 1)")
        if not self.delta > 0:
            raise InvalidInput("delta must be positive")

    @property
    def tau(self):
        """Clamp target (1 - eps)/(n - 1); requires n > 1."""
        return (1.0 - self.eps) / (self.n - 1.0)


def _as_order(n):
    return n if isinstance(n, MomentOrder) else MomentOrder(float(n))


class GaussianProposal:
    """Importance density N(mean, precision^{-1}) with a cached factorization."""

    def __init__(self, mean, precision):
        mean = np.asarray(mean, dtype=float)
        if not isinstance(precision, SymBandMatrix):
            precision = SymBandMatrix.from_dense(np.asarray(precision, dtype=float))
        if mean.shape != (precision.d,):
            raise InvalidInput("mean/precision dimension mismatch")
        factor = bl.factorize(precision)
        if not factor.success:
            raise NotPositiveDefinite(
                f"proposal precision failed factorization at block row {factor.failed_block}",
                failed_block=factor.failed_block,
            )
        self.mean = mean
        self.precision = precision
        self.factor = factor

    @property
    def dim(self):
        return self.precision.d

    def log_density(self, x):
        return bl.log_density(x, self.mean, self.precision, factor=self.factor)

    def sample(self, rng, count):
        z = rng.standard_normal((int(count), self.dim)).T
        x = self.factor.solve_upper(z, overwrite=True)
        x += self.mean[:, None]
        return x.T

    def to_json_dict(self):
        return {"kind": "gaussian", "mean": self.mean.tolist(),
                "precision": self.precision.to_json_dict()}

    @classmethod
    def from_json_dict(cls, doc):
        return cls(np.asarray(doc["mean"], dtype=float),
                   SymBandMatrix.from_json_dict(doc["precision"]))


class MixtureProposal:
    """pi * heavy + (1 - pi) * fitted, both Gaussian.

    The heavy component carries the moment guarantee; the fitted component
    carries the fit. Component order is fixed (heavy first) so serialized
    proposals replay identically.
    """

    def __init__(self, pi, heavy, fitted):
        if not 0.0 < pi < 1.0:
            raise InvalidInput("mixture weight pi must lie in (0, 1)")
        if heavy.dim != fitted.dim:
            raise InvalidInput("mixture components must share dimension")
        self.pi = float(pi)
        self.heavy = heavy
        self.fitted = fitted

    @property
    def dim(self):
        return self.heavy.dim

    def log_density(self, x):
        l1 = self.heavy.log_density(x)
        l2 = self.fitted.log_density(x)
        return np.logaddexp(np.log(self.pi) + l1, np.log1p(-self.pi) + l2)

    def sample(self, rng, count):
        """Component pick then location-scale transform of shared normals.

        The base draws (count uniforms, count x d normals) are consumed in a
        fixed layout so common-random-number reuse across parameter values
        stays smooth.
        """
        count = int(count)
        u = rng.random(count)
        z = rng.standard_normal((count, self.dim)).T
        pick = u < self.pi
        x = np.empty((count, self.dim))
        for comp, cols in ((self.heavy, pick), (self.fitted, ~pick)):
            if cols.any():
                zc = np.array(z[:, cols], order="F")
                x[cols] = comp.mean + comp.factor.solve_upper(zc, overwrite=True).T
        return x

    def to_json_dict(self):
        return {"kind": "mixture", "pi": self.pi,
                "components": [self.heavy.to_json_dict(), self.fitted.to_json_dict()]}

    @classmethod
    def from_json_dict(cls, doc):
        g1, g2 = (GaussianProposal.from_json_dict(c) for c in doc["components"])
        return cls(doc["pi"], g1, g2)


class StudentTProposal:
    """Multivariate Student-t with location, precision-form scale and df nu.

    The conventional comparison sampler: same mean and scale matrix as a
    Gaussian proposal but polynomial tails. Weight moments are not
    guaranteed under it.
    """

    def __init__(self, mean, precision, nu=5.0):
        if not nu > 0:
            raise InvalidInput("degrees of freedom must be positive")
        self._gauss = GaussianProposal(mean, precision)
        self.nu = float(nu)

    @property
    def mean(self):
        return self._gauss.mean

    @property
    def precision(self):
        return self._gauss.precision

    @property
    def dim(self):
        return self._gauss.dim

    def log_density(self, x):
        d, nu = self.dim, self.nu
        u = self._gauss.factor.factor_matvec(np.asarray(x, dtype=float) - self.mean)
        quad = np.sum(u * u, axis=-1)
        return (gammaln(0.5 * (nu + d)) - gammaln(0.5 * nu)
                - 0.5 * d * np.log(nu * np.pi) + 0.5 * self._gauss.factor.log_det
                - 0.5 * (nu + d) * np.log1p(quad / nu))

    def sample(self, rng, count):
        count = int(count)
        z = rng.standard_normal((count, self.dim)).T
        g = rng.chisquare(self.nu, count) / self.nu
        x = self._gauss.factor.solve_upper(z, overwrite=True)
        x /= np.sqrt(g)[None, :]
        x += self.mean[:, None]
        return x.T

    def to_json_dict(self):
        return {"kind": "student_t", "nu": self.nu, "mean": self.mean.tolist(),
                "precision": self.precision.to_json_dict()}

    @classmethod
    def from_json_dict(cls, doc):
        return cls(np.asarray(doc["mean"], dtype=float),
                   SymBandMatrix.from_json_dict(doc["precision"]), nu=doc["nu"])


def proposal_from_json_dict(doc):
    kinds = {"gaussian": GaussianProposal, "mixture": MixtureProposal,
             "student_t": StudentTProposal}
    try:
        cls = kinds[doc["kind"]]
    except KeyError:
        raise InvalidInput(f"unknown proposal kind {doc.get('kind')!r}") from None
    return cls.from_json_dict(doc)


def check_moment_condition(qstar, q, n):
    """True iff Q* - n (Q* - Q) is positive definite.

    n = 1 always holds for valid inputs (the matrix reduces to Q); larger n
    tightens the requirement on how much sharper than the latent density the
    proposal may be.
    """
    order = _as_order(n)
    m = linear_combination(1.0 - order.n, qstar, order.n, q)
    return bl.factorize(m).success


def hard_clamp(lam, order):
    """Eigenvalue clamp: identity below 1/(n-1), (1-eps)/(n-1) at or above."""
    lam = np.asarray(lam, dtype=float)
    cut = 1.0 / (order.n - 1.0)
    return np.where(lam < cut, lam, (1.0 - order.eps) / (order.n - 1.0))


def smooth_clamp(lam, order):
    """C^1 monotone clamp: identity below tau-delta, constant tau above tau.

    On [tau-delta, tau) the cubic tau - 2u^2/delta - u^3/delta^2 (u = lam -
    tau) interpolates with f(tau-delta) = tau-delta, f'(tau-delta) = 1,
    f(tau) = tau, f'(tau) = 0. Evaluating in the shifted variable u avoids
    the catastrophic cancellation of the expanded-coefficient form.
    """
    lam = np.asarray(lam, dtype=float)
    tau, delta = order.tau, order.delta
    u = lam - tau
    blend = tau - 2.0 * u * u / delta - u * u * u / (delta * delta)
    return np.where(lam < tau - delta, lam, np.where(lam >= tau, tau, blend))


def modify_precision(qstar, q, n, smooth=False):
    """Repair Q* so the first n weight moments exist: returns Q_tilde.

    With nQ = AA' (Cholesky) and V diagonalizing A^{-1} Q* A^{-T} with
    eigenvalues lam_j, the clamped matrix Q_tilde = A V Lam_tilde V' A'
    satisfies n Q - (n-1) Q_tilde > 0. Directions in which the proposal is
    already diffuse enough are untouched; if no eigenvalue needed clamping
    the input object is returned unchanged. The output is generally dense
    and carries the dense tag.
    """
    order = _as_order(n)
    if order.n <= 1.0:
        return qstar
    if qstar.d != q.d:
        raise InvalidInput("Q* and Q dimension mismatch")
    nQ = order.n * q.to_dense()
    try:
        A = dense_cholesky(nQ, lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefinite(f"n*Q is not positive definite: {exc}") from exc
    X = solve_triangular(A, qstar.to_dense(), lower=True)
    M = solve_triangular(A, X.T, lower=True).T
    M = 0.5 * (M + M.T)
    lam, V = np.linalg.eigh(M)
    clamp = smooth_clamp if smooth else hard_clamp
    lam_t = clamp(lam, order)
    if np.array_equal(lam_t, lam):
        return qstar
    W = A @ V
    qt = (W * lam_t) @ W.T
    return SymBandMatrix.from_dense(0.5 * (qt + qt.T))


def build_mixture(mean, qstar, q, n, pi=0.1, smooth=False):
    """Moment-constrained mixture: heavy N(mean, Q_tilde^{-1}) with weight pi,
    fitted N(mean, Q*^{-1}) with the rest.

    The default pi = 0.1 keeps most draws on the fitted component; the heavy
    component alone already guarantees the first n moments, and mixing
    preserves that guarantee.
    """
    qt = modify_precision(qstar, q, n, smooth=smooth)
    heavy = GaussianProposal(mean, qt)
    fitted = heavy if qt is qstar else GaussianProposal(mean, qstar)
    return MixtureProposal(pi, heavy, fitted)


def mixture_log_density(g, x):
    """Log-density of a mixture proposal via log-sum-exp."""
    return g.log_density(x)


def sample_mixture(g, rng, count):
    """Draw ``count`` vectors from a mixture proposal."""
    return g.sample(rng, count)
