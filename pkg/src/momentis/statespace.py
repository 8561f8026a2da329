"""AR(1) latent dynamics, the iterated-Newton (SPDK) proposal, and O(T)
moment-condition checking and repair for state-space targets.

The weight-moment condition for an SPDK proposal Q* = C + Q reduces to
positive definiteness of Q - (n-1) C. For scalar states that matrix is
tridiagonal, so the leading principal minors obey a three-term recursion
(Sylvester's criterion) and the whole check runs in O(T). Repair inflates
the approximating measurement variances: entrywise toward the
constant-variance bound for scalar states, or by globally shrinking C for
block states.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import band_linalg as bl
from .band_linalg import SymBandMatrix, linear_combination
from .errors import Diverged, InvalidInput, NotPositiveDefinite
from .proposal import GaussianProposal, MixtureProposal


@dataclass(frozen=True)
class Ar1Spec:
    """Stationary scalar AR(1): alpha_{t+1} = mu (1-phi) + phi alpha_t + eta_t,
    eta_t ~ N(0, sigma2), alpha_1 ~ N(mu, sigma2/(1-phi^2))."""

    mu: float
    phi: float
    sigma2: float
    T: int

    def __post_init__(self):
        if not abs(self.phi) < 1:
            raise InvalidInput("need |phi| < 1 for stationarity")
        if not self.sigma2 > 0:
            raise InvalidInput("innovation variance must be positive")
        if self.T < 1:
            raise InvalidInput("series length must be >= 1")

    @property
    def sigma_alpha2(self):
        """Stationary variance sigma2 / (1 - phi^2)."""
        return self.sigma2 / (1.0 - self.phi ** 2)


def _stationary_cov(Phi, Sigma, tol=1e-12, max_doublings=200):
    """Fixed point of S = Phi S Phi' + Sigma by doubling iteration."""
    S = Sigma.copy()
    A = Phi.copy()
    for _ in range(max_doublings):
        inc = A @ S @ A.T
        S = S + inc
        A = A @ A
        if np.max(np.abs(inc)) <= tol * max(1.0, np.max(np.abs(S))):
            return 0.5 * (S + S.T)
    raise Diverged("stationary covariance iteration did not converge", last=S)


@dataclass(frozen=True)
class BlockAr1Spec:
    """Stationary vector AR(1): alpha_{t+1} = d + Phi alpha_t + eta_t,
    eta_t ~ N(0, Sigma), with alpha_1 drawn from the stationary law.

    ``Z`` and ``c`` optionally carry the observation link theta_t = c + Z
    alpha_t for models whose signal is a linear map of the state.
    """

    d: np.ndarray
    Phi: np.ndarray
    Sigma: np.ndarray
    T: int
    Z: np.ndarray | None = None
    c: np.ndarray | None = None
    Sigma_alpha: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        Phi = np.asarray(self.Phi, dtype=float)
        Sigma = np.asarray(self.Sigma, dtype=float)
        m = d.size
        if Phi.shape != (m, m) or Sigma.shape != (m, m):
            raise InvalidInput("Phi and Sigma must be m x m")
        if np.max(np.abs(np.linalg.eigvals(Phi))) >= 1.0:
            raise InvalidInput("spectral radius of Phi must be < 1")
        if self.T < 1:
            raise InvalidInput("series length must be >= 1")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "Sigma", 0.5 * (Sigma + Sigma.T))
        object.__setattr__(self, "Sigma_alpha", _stationary_cov(Phi, self.Sigma))

    @property
    def m(self):
        return self.d.size

    @property
    def stationary_mean(self):
        return np.linalg.solve(np.eye(self.m) - self.Phi, self.d)


def ar1_precision(spec):
    """(mean, Q) of the stacked latent path under an AR(1) spec.

    Scalar case: tridiagonal with diagonal (1, 1+phi^2, ..., 1+phi^2, 1)/sigma2
    and off-diagonal -phi/sigma2. Block case: assembled from the conditional
    densities, Q_11 = Sigma_alpha^{-1} + Phi' Sigma^{-1} Phi, interior
    Sigma^{-1} + Phi' Sigma^{-1} Phi, Q_TT = Sigma^{-1}, off-diagonal
    -Sigma^{-1} Phi, which inverts the stationary covariance exactly for any
    Phi (and reduces to the commuting closed form when Sigma_alpha^{-1} Phi
    is symmetric).
    """
    if isinstance(spec, Ar1Spec):
        T, phi, s2 = spec.T, spec.phi, spec.sigma2
        mean = np.full(T, spec.mu)
        if T == 1:
            return mean, SymBandMatrix.from_scalar(np.array([1.0 / spec.sigma_alpha2]))
        diag = np.full(T, (1.0 + phi ** 2) / s2)
        diag[0] = diag[-1] = 1.0 / s2
        off = np.full(T - 1, -phi / s2)
        return mean, SymBandMatrix.from_scalar(diag, off)
    if isinstance(spec, BlockAr1Spec):
        T, m = spec.T, spec.m
        Sinv = np.linalg.inv(spec.Sigma)
        Sainv = np.linalg.inv(spec.Sigma_alpha)
        cross = spec.Phi.T @ Sinv @ spec.Phi
        mean = np.tile(spec.stationary_mean, T)
        if T == 1:
            return mean, SymBandMatrix(Sainv[None])
        D = np.empty((T, m, m))
        D[0] = Sainv + cross
        D[1:-1] = Sinv + cross
        D[-1] = Sinv
        O = np.tile(-(Sinv @ spec.Phi), (T - 1, 1, 1))
        return mean, SymBandMatrix(D, O)
    raise InvalidInput(f"unsupported spec type {type(spec).__name__}")


def ar1_prior(spec):
    """The stacked latent prior as a Gaussian density object."""
    mean, Q = ar1_precision(spec)
    return GaussianProposal(mean, Q)


@dataclass
class SpdkFit:
    """Local-approximation importance parameters for a state-space target.

    B stacks the linear terms b_t, C holds the per-time curvature blocks
    C_t = -hess l_t at the mode; the fitted proposal is N(mode, (C+Q)^{-1}).
    For scalar states v = 1/C_t are the approximating measurement variances
    and yhat = C_t^{-1} b_t the pseudo-observations.
    """

    B: np.ndarray
    C_blocks: np.ndarray
    mode: np.ndarray
    iterations: int
    converged: bool

    @property
    def m(self):
        return self.C_blocks.shape[1]

    @property
    def C(self):
        return SymBandMatrix(self.C_blocks)

    @property
    def v(self):
        """Approximating measurement variances (scalar states only)."""
        if self.m != 1:
            raise InvalidInput("v is defined for scalar states only")
        return 1.0 / self.C_blocks[:, 0, 0]

    @property
    def yhat(self):
        """Pseudo-observations C_t^{-1} b_t."""
        if self.m == 1:
            return self.B / self.C_blocks[:, 0, 0]
        return np.linalg.solve(self.C_blocks, self.B.reshape(-1, self.m)[..., None])[..., 0].reshape(-1)


def _proposal_from(fit_B, C_blocks, prior_mean, Q):
    qstar = linear_combination(1.0, SymBandMatrix(C_blocks), 1.0, Q)
    fac = bl.factorize(qstar)
    if not fac.success:
        raise NotPositiveDefinite(
            f"approximating precision C + Q failed at block row {fac.failed_block}",
            failed_block=fac.failed_block,
        )
    rhs = fit_B + Q.matvec(prior_mean)
    mode = fac.solve(rhs)
    return mode, qstar, fac


def spdk_fit(model, prior, tol=1e-8, max_iter=100):
    """Iterated second-order approximation of the target at its mode.

    Repeats C <- -hess l(a), B <- grad l(a) + C a, a <- (C+Q)^{-1} (B + Q mu)
    from a = prior mean until the mode stops moving (sup-norm <= tol).
    Returns (SpdkFit, GaussianProposal); the proposal precision C + Q keeps
    the prior's banded structure.

    Raises :class:`Diverged` (carrying the last fit) past ``max_iter`` and
    :class:`NotPositiveDefinite` if some iterate's C makes C + Q indefinite,
    which cannot happen for concave measurements.
    """
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    mean, Q = prior
    T, m = Q.n_blocks, Q.m
    if model.dim != Q.d:
        raise InvalidInput("model/prior dimension mismatch")
    alpha = mean.copy()
    fit = None
    for it in range(1, int(max_iter) + 1):
        H = model.hess(alpha)
        C_blocks = -H.diag_blocks
        B = model.grad(alpha) + SymBandMatrix(C_blocks).matvec(alpha)
        fit = SpdkFit(B, C_blocks, alpha, it, False)
        new_alpha, qstar, fac = _proposal_from(B, C_blocks, mean, Q)
        delta = np.max(np.abs(new_alpha - alpha))
        alpha = new_alpha
        if delta <= tol:
            fit = SpdkFit(B, C_blocks, alpha, it, True)
            return fit, GaussianProposal(alpha, qstar)
    raise Diverged(f"SPDK iteration did not converge in {max_iter} steps", last=fit)


@dataclass
class SylvesterResult:
    """Pivot trace of the tridiagonal moment-condition matrix.

    ``pivots`` are the Cholesky-style pivots d_t = a_t - b^2/d_{t-1}; the
    leading principal minors are their running products, recovered here in
    log-magnitude/sign form so T ~ 500 traces neither overflow nor
    underflow.
    """

    ok: bool
    pivots: np.ndarray

    @property
    def minor_signs(self):
        return np.cumprod(np.sign(self.pivots))

    @property
    def log_abs_minors(self):
        with np.errstate(divide="ignore"):
            return np.cumsum(np.log(np.abs(self.pivots)))

    @property
    def sign_changes(self):
        """Number of sign flips along the minor sequence (0 when PD)."""
        s = self.minor_signs
        return int(np.sum(s[1:] != s[:-1])) + int(s[0] < 0)


def sylvester_check(Q, v, n, sigma2=None):
    """Positive definiteness of Q - (n-1) diag(1/v) for scalar-state Q.

    Runs the pivot recursion once over the tridiagonal entries; all minors
    positive (equivalently all pivots positive) is Sylvester's criterion.
    When ``sigma2`` is given the trace is reported for the sigma2-scaled
    matrix (the conventional normalization with interior diagonal
    1 + phi^2 - sigma2 (n-1)/v_t), which rescales minors but cannot change
    any sign or the verdict.
    """
    if Q.m != 1:
        raise InvalidInput("sylvester_check requires scalar states")
    v = np.asarray(v, dtype=float)
    if v.shape != (Q.n_blocks,):
        raise InvalidInput("v must have one entry per time point")
    n = n.n if hasattr(n, "n") else float(n)
    scale = 1.0 if sigma2 is None else float(sigma2)
    a = scale * (Q.diag_blocks[:, 0, 0] - (n - 1.0) / v)
    b = scale * Q.off_blocks[:, 0, 0] if Q.n_blocks > 1 else np.zeros(0)
    T = a.size
    pivots = np.empty(T)
    d = a[0]
    pivots[0] = d
    for t in range(1, T):
        d = a[t] - b[t - 1] ** 2 / d
        pivots[t] = d
    return SylvesterResult(bool(np.all(pivots > 0.0)), pivots)


def constant_variance_bound(spec, n, eps=1e-5):
    """Constant approximating variance guaranteeing the first n moments.

    (n-1) sigma_alpha^2 (1+|phi|)/(1-|phi|) for phi != 0; for phi = 0 the
    bound is open, so (n-1) sigma_alpha^2 + eps with a small eps.
    """
    n = n.n if hasattr(n, "n") else float(n)
    if n <= 1:
        raise InvalidInput("the bound is defined for n > 1")
    sa2 = spec.sigma_alpha2
    if spec.phi == 0.0:
        return (n - 1.0) * sa2 + eps
    ap = abs(spec.phi)
    return (n - 1.0) * sa2 * (1.0 + ap) / (1.0 - ap)


def _refit(fit, new_v, spec):
    """Rebuild a scalar-state fit around new variances, keeping yhat fixed."""
    yhat = fit.yhat
    B = yhat / new_v
    C_blocks = (1.0 / new_v).reshape(-1, 1, 1)
    mean, Q = ar1_precision(spec)
    mode, _, _ = _proposal_from(B, C_blocks, mean, Q)
    return SpdkFit(B, C_blocks, mode, fit.iterations, fit.converged)


def impose_scalar(fit, spec, n, eps_inflate=0.05):
    """Entrywise variance inflation until the n-th-moment check passes.

    Each round multiplies every v_t still below the constant-variance bound
    by (1 + eps_inflate); rounds k = 0, 1, ... stop at the first passing
    check. Terminates because eventually all v_t reach the bound. Returns
    (imposed fit, k); k = 0 means the original fit already passed.
    """
    if eps_inflate <= 0:
        raise InvalidInput("eps_inflate must be positive")
    if fit.m != 1:
        raise InvalidInput("impose_scalar requires scalar states")
    _, Q = ar1_precision(spec)
    bound = constant_variance_bound(spec, n)
    v = fit.v.copy()
    k_cap = int(np.ceil(np.log(bound / max(v.min(), 1e-300)) / np.log1p(eps_inflate))) + 2
    k = 0
    while not sylvester_check(Q, v, n, sigma2=spec.sigma2).ok:
        v = np.where(v < bound, v * (1.0 + eps_inflate), v)
        k += 1
        if k > max(k_cap, 1):
            raise Diverged("variance inflation failed to reach a passing check", last=v)
    if k == 0:
        return fit, 0
    return _refit(fit, v, spec), k


def impose_block(C, Q, n, eps_inflate=0.05, eig_tol=1e-10):
    """Global curvature shrinkage until Q - (n-1) C^{(k)} has a positive
    smallest eigenvalue, with C^{(k)} = C / (1+eps)^k.

    Returns (C_star, k); k > 0 flags that the original C failed the
    condition.
    """
    if eps_inflate <= 0:
        raise InvalidInput("eps_inflate must be positive")
    if C.d != Q.d:
        raise InvalidInput("C and Q dimension mismatch")
    n = n.n if hasattr(n, "n") else float(n)
    lam_min_q = bl.smallest_eigenvalue(Q, tol=eig_tol)
    if lam_min_q <= 0:
        raise InvalidInput("Q must be positive definite")
    _, hi = C.gershgorin_bounds()
    needed = (n - 1.0) * max(hi, 0.0) / lam_min_q
    k_cap = int(np.ceil(np.log(max(needed, 1.0)) / np.log1p(eps_inflate))) + 2
    shrink = 1.0
    k = 0
    while True:
        M = linear_combination(1.0, Q, -(n - 1.0) * shrink, C)
        if bl.smallest_eigenvalue(M, tol=eig_tol) > 0.0:
            return C.scaled(shrink), k
        k += 1
        shrink /= 1.0 + eps_inflate
        if k > max(k_cap, 1):
            raise Diverged("curvature shrinkage failed to reach a passing check", last=shrink)


def build_ssm_mixture(fit, imposed_fit, prior, pi=0.1):
    """Mixture of the original and moment-imposed approximating models.

    The heavy component (weight pi) comes from the imposed variances, the
    fitted one from the original SPDK fit; both means solve
    (C_variant + Q)^{-1} (B_variant + Q mu), so each component is the
    coherent posterior of its own approximating model.
    """
    mean, Q = prior
    mode2, qstar2, _ = _proposal_from(fit.B, fit.C_blocks, mean, Q)
    fitted = GaussianProposal(mode2, qstar2)
    if imposed_fit is fit:
        return MixtureProposal(pi, fitted, fitted)
    mode1, qstar1, _ = _proposal_from(imposed_fit.B, imposed_fit.C_blocks, mean, Q)
    heavy = GaussianProposal(mode1, qstar1)
    return MixtureProposal(pi, heavy, fitted)
