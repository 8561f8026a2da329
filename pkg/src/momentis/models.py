"""Measurement densities l(alpha) = log p(y|alpha) with derivatives, plus the
latent-Gaussian priors they pair with.

Every model exposes the same surface: ``dim``, ``log_meas`` (vectorized over
leading axes), ``grad``, ``hess`` (a diagonal or block-diagonal
:class:`SymBandMatrix`), and the ``concave`` / ``linear_bound`` certificate
flags that the weight-moment theory relies on. All shipped models are
canonical exponential families, so both flags hold everywhere.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from . import band_linalg as bl
from .band_linalg import SymBandMatrix
from .errors import Diverged, InvalidInput
from .proposal import GaussianProposal


class TruncatedGaussianKernel:
    """Unnormalized Gaussian prior kernel restricted to an open interval.

    log-density is the plain quadratic kernel inside (lo, hi) and -inf
    outside; the missing normalizer cancels in self-normalized (ratio)
    estimators, which is the only place this prior is used.
    """

    def __init__(self, mean, precision, lo=0.0, hi=1.0):
        if not hi > lo:
            raise InvalidInput("empty truncation interval")
        self.mean = float(mean)
        self.precision = float(precision)
        self.lo = float(lo)
        self.hi = float(hi)

    @property
    def dim(self):
        return 1

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        v = x[..., 0] if x.ndim > 0 and x.shape[-1:] == (1,) else x
        inside = (v > self.lo) & (v < self.hi)
        kern = -0.5 * self.precision * (v - self.mean) ** 2
        return np.where(inside, kern, -np.inf)


class PoissonSsmModel:
    """Poisson counts with log-intensity beta + alpha_t.

    ``intercept`` may be a scalar (time-series case) or a length-T offset
    vector, which is how panel measurements with regression terms x'beta
    reuse this class. l_t = y_t (beta + alpha_t) - exp(beta + alpha_t) -
    log(y_t!); the Hessian is diagonal, so fits stay O(T).
    """

    concave = True
    linear_bound = True

    def __init__(self, y, intercept=0.0):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or y.size == 0:
            raise InvalidInput("y must be a non-empty vector")
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise InvalidInput("Poisson observations must be non-negative integers")
        self.y = y
        self.intercept = np.broadcast_to(np.asarray(intercept, dtype=float), y.shape).copy()
        self._log_fact = gammaln(y + 1.0)

    @property
    def dim(self):
        return self.y.size

    def log_meas(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        eta = self.intercept + alpha
        return np.sum(self.y * eta - np.exp(eta) - self._log_fact, axis=-1)

    def grad(self, alpha):
        return self.y - np.exp(self.intercept + np.asarray(alpha, dtype=float))

    def hess(self, alpha):
        return SymBandMatrix.from_scalar(-np.exp(self.intercept + np.asarray(alpha, dtype=float)))

    def hess_diag(self, alpha):
        """Diagonal of the Hessian as a plain vector (fast path for fits)."""
        return -np.exp(self.intercept + np.asarray(alpha, dtype=float))


class BernoulliToyModel:
    """N Bernoulli trials with k successes and a truncated-normal prior on
    the success probability.

    l(alpha) = k log alpha + (N-k) log(1-alpha) on (0,1), -inf outside; the
    prior is N(0.5, 1/prior_precision) truncated to (0,1), kept as an
    unnormalized kernel.
    """

    concave = True
    linear_bound = True

    def __init__(self, trials, successes, prior_precision=0.1):
        if trials < 0 or not 0 <= successes <= trials:
            raise InvalidInput("need 0 <= successes <= trials")
        self.trials = int(trials)
        self.successes = int(successes)
        self.prior_precision = float(prior_precision)

    @property
    def dim(self):
        return 1

    @property
    def prior(self):
        return TruncatedGaussianKernel(0.5, self.prior_precision, 0.0, 1.0)

    def _flat(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        return alpha[..., 0] if alpha.ndim > 0 and alpha.shape[-1:] == (1,) else alpha

    def log_meas(self, alpha):
        a = self._flat(alpha)
        inside = (a > 0.0) & (a < 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = self.successes * np.log(a) + (self.trials - self.successes) * np.log1p(-a)
        return np.where(inside, val, -np.inf)

    def grad(self, alpha):
        a = self._flat(alpha)
        g = self.successes / a - (self.trials - self.successes) / (1.0 - a)
        return np.reshape(np.asarray(g, dtype=float), np.shape(alpha))

    def hess(self, alpha):
        a = float(self._flat(alpha))
        h = -self.successes / a ** 2 - (self.trials - self.successes) / (1.0 - a) ** 2
        return SymBandMatrix.from_scalar(np.array([h]))


class GlmmPoissonModel:
    """One cluster of a Poisson mixed model: y_j ~ Poisson(exp(eta_j)),
    eta = X beta + Z alpha, random effect alpha ~ N(0, Q^{-1}).

    The latent dimension is the random-effect dimension u, so Hessians are
    small and dense. Multi-cluster likelihoods are products over instances
    of this class.
    """

    concave = True
    linear_bound = True

    def __init__(self, y, X, Z, beta, precision, dispersion=1.0):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        Z = np.asarray(Z, dtype=float)
        beta = np.asarray(beta, dtype=float)
        Q = np.asarray(precision, dtype=float)
        if y.ndim != 1 or X.shape != (y.size, beta.size) or Z.shape[0] != y.size:
            raise InvalidInput("inconsistent GLMM cluster shapes")
        if Q.shape != (Z.shape[1], Z.shape[1]):
            raise InvalidInput("random-effect precision must be u x u")
        if dispersion <= 0:
            raise InvalidInput("dispersion must be positive")
        self.y = y
        self.X = X
        self.Z = Z
        self.beta = beta
        self.precision = Q
        self.dispersion = float(dispersion)
        self.offset = X @ beta
        self._log_fact = gammaln(y + 1.0)

    @property
    def dim(self):
        return self.Z.shape[1]

    def eta(self, alpha):
        return self.offset + np.asarray(alpha, dtype=float) @ self.Z.T

    def log_meas(self, alpha):
        eta = self.eta(alpha)
        return np.sum((self.y * eta - np.exp(eta)) / self.dispersion - self._log_fact, axis=-1)

    def grad(self, alpha):
        eta = self.eta(alpha)
        return (self.y - np.exp(eta)) @ self.Z / self.dispersion

    def hess(self, alpha):
        eta = self.eta(alpha)
        H = -(self.Z * np.exp(eta)[:, None]).T @ self.Z / self.dispersion
        return SymBandMatrix.from_dense(H)


class PanelAr1Model:
    """Poisson panel with an AR(1) latent path per panel.

    y[i] and x[i] are the observations and design rows of panel i (possibly
    ragged); eta_it = x_it' beta + alpha_it. ``ar1`` carries the shared
    latent dynamics. Each panel behaves as an independent state-space model,
    so likelihoods multiply across panels.
    """

    def __init__(self, y, x, beta, ar1):
        self.y = [np.asarray(v, dtype=float) for v in y]
        self.x = [np.asarray(v, dtype=float) for v in x]
        if len(self.y) == 0 or len(self.y) != len(self.x):
            raise InvalidInput("need matching, non-empty y and x panel lists")
        beta = np.asarray(beta, dtype=float)
        for yi, xi in zip(self.y, self.x):
            if xi.shape != (yi.size, beta.size):
                raise InvalidInput("panel design shape mismatch")
        self.beta = beta
        self.ar1 = ar1

    @property
    def n_panels(self):
        return len(self.y)

    def lengths(self):
        return [yi.size for yi in self.y]

    def measurement(self, i, beta=None):
        """Panel i as a Poisson state-space measurement with offset x'beta."""
        b = self.beta if beta is None else np.asarray(beta, dtype=float)
        return PoissonSsmModel(self.y[i], intercept=self.x[i] @ b)

    def with_params(self, beta, ar1):
        return PanelAr1Model(self.y, self.x, beta, ar1)


def log_joint(model, prior, alpha):
    """l(alpha) + log p(alpha); -inf outside the measurement support.

    ``prior`` is anything with a ``log_density`` (a GaussianProposal doubles
    as a Gaussian prior, the Bernoulli toy uses its truncated kernel).
    """
    return model.log_meas(alpha) + prior.log_density(alpha)


def glmm_newton_mode(model, tol=1e-8, max_iter=100):
    """Newton maximizer of the cluster joint F(alpha), with halving line
    search; returns (alpha_star, Q_star) where Q_star = -Hessian of F.

    Q_star is positive definite by construction for canonical links. Raises
    :class:`Diverged` (carrying the last iterate) on hitting ``max_iter``.
    """
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    Q = model.precision
    u = model.dim

    def value(a):
        return model.log_meas(a) - 0.5 * a @ Q @ a

    def grad_f(a):
        return model.grad(a) - Q @ a

    alpha = np.zeros(u)
    f = value(alpha)
    for _ in range(int(max_iter)):
        g = grad_f(alpha)
        if np.max(np.abs(g)) <= tol:
            eta = model.eta(alpha)
            qstar = (model.Z * np.exp(eta)[:, None]).T @ model.Z / model.dispersion + Q
            return alpha, SymBandMatrix.from_dense(qstar)
        eta = model.eta(alpha)
        neg_h = (model.Z * np.exp(eta)[:, None]).T @ model.Z / model.dispersion + Q
        step = np.linalg.solve(neg_h, g)
        t = 1.0
        while t > 1e-12:
            cand = alpha + t * step
            fc = value(cand)
            if fc >= f:
                alpha, f = cand, fc
                break
            t *= 0.5
        else:
            alpha = alpha + 1e-12 * step
            f = value(alpha)
    raise Diverged(f"Newton mode search did not converge in {max_iter} iterations", last=alpha)


def bernoulli_taylor_proposal(model):
    """Gaussian proposal from a second-order expansion of l at k/N.

    D = l''(a_hat), Q* = Q - D, mean = (0.5 Q - D a_hat)/Q*. Boundary counts
    k in {0, N} clamp a_hat into [1/(2N), 1 - 1/(2N)] where the curvature is
    still finite.
    """
    N, k, Q = model.trials, model.successes, model.prior_precision
    if N == 0:
        raise InvalidInput("Taylor proposal needs at least one trial")
    a_hat = k / N
    a_hat = min(max(a_hat, 1.0 / (2 * N)), 1.0 - 1.0 / (2 * N))
    D = -k / a_hat ** 2 - (N - k) / (1.0 - a_hat) ** 2
    qstar = Q - D
    mean = (0.5 * Q - D * a_hat) / qstar
    return GaussianProposal(np.array([mean]), SymBandMatrix.from_scalar(np.array([qstar])))
