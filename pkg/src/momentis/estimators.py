"""Importance-sampling estimators and weight diagnostics.

Everything runs on log-weights: likelihood estimates through log-sum-exp,
ratio estimates and variance ratios through max-normalized weights, so
log-weights anywhere in [-1e6, 1e6] stay representable. The tail diagnostic
fits a generalized Pareto distribution to threshold exceedances of the
weights and Wald-tests the shape against 1/2, the infinite-variance
boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, ndtr

from .errors import ConstantChain, DegenerateSample, InsufficientTail, InvalidInput
from .models import log_joint
from .seeding import derived_rng


@dataclass
class WeightSample:
    """S log-weights with an optional scalar payload h(alpha_s) per draw."""

    log_weights: np.ndarray
    payload: np.ndarray | None = None
    proposal_tag: str = ""
    seed: int | None = None

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        if lw.ndim != 1 or lw.size < 1:
            raise InvalidInput("log_weights must be a non-empty vector")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise InvalidInput("log-weights must be finite or -inf")
        self.log_weights = lw
        if self.payload is not None:
            p = np.asarray(self.payload, dtype=float)
            if p.shape != lw.shape:
                raise InvalidInput("payload must align with log_weights")
            self.payload = p

    @property
    def size(self):
        return self.log_weights.size

    def normalized_weights(self):
        """Weights divided by their mean, computed through log-space."""
        lw = self.log_weights
        if np.all(np.isneginf(lw)):
            raise DegenerateSample("all weights are zero")
        log_mean = logsumexp(lw) - np.log(lw.size)
        return np.exp(lw - log_mean)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            header = ["log_weight"] + (["payload"] if self.payload is not None else [])
            w.writerow(header)
            for i in range(self.size):
                row = [repr(self.log_weights[i])]
                if self.payload is not None:
                    row.append(repr(self.payload[i]))
                w.writerow(row)


@dataclass
class LikelihoodEstimate:
    """Mean-of-weights likelihood estimate on both scales."""

    value: float
    log_value: float
    weights: WeightSample


@dataclass
class GpdFit:
    """Generalized Pareto fit to weight exceedances.

    ``scale`` is reported on the max-normalized weight scale (weights are
    divided by their maximum before thresholding to avoid overflow); the
    shape and the test are invariant to that normalization.
    """

    shape: float
    scale: float
    threshold: float
    count: int
    shape_se: float
    p_value: float

    @property
    def reject(self):
        """Infinite-variance verdict at the 1% level."""
        return bool(self.p_value < 0.01)


@dataclass
class IactResult:
    """Integrated autocorrelation time with its truncation bookkeeping."""

    estimate: float
    cutoff: int
    first_insignificant_lag: int
    autocorrelations: np.ndarray


_LOG_2PI = float(np.log(2.0 * np.pi))


def _tridiag_log_density_dots(sq, cp, draws, mean, precision, log_det):
    """Gaussian log-density from precomputed x*x and x_t*x_{t+1} products.

    (x-mu)'M(x-mu) = x'Mx - 2 x'(M mu) + mu'M mu, and for tridiagonal M the
    first term is sq @ diag + 2 cp @ off. Everything reduces to matrix-vector
    products over the draw block, avoiding per-density temporaries of the
    draws' size.
    """
    dg = precision.diag_blocks[:, 0, 0]
    off = precision.off_blocks[:, 0, 0] if precision.n_blocks > 1 else None
    mv = precision.matvec(mean)
    quad = sq @ dg - 2.0 * (draws @ mv) + mean @ mv
    if off is not None:
        quad += 2.0 * (cp @ off)
    return -0.5 * mean.size * _LOG_2PI + 0.5 * log_det - 0.5 * quad


def _fused_ssm_log_weights(model, prior, proposal, draws):
    """Fast log-weight path for Poisson state-space targets with
    scalar-tridiagonal prior and proposal precisions.

    Numerically equivalent to the generic path (same quantities, reduction
    order aside); exists because likelihood studies at T ~ 500, S ~ 1e4 are
    memory-bound on the generic per-density passes.
    """
    from .models import PoissonSsmModel
    from .proposal import GaussianProposal, MixtureProposal

    if not isinstance(model, PoissonSsmModel):
        return None
    if not (isinstance(prior, GaussianProposal) and prior.precision.m == 1):
        return None
    comps = []
    if isinstance(proposal, GaussianProposal):
        comps = [proposal]
    elif isinstance(proposal, MixtureProposal):
        comps = [proposal.heavy, proposal.fitted]
    else:
        return None
    if any(c.precision.m != 1 for c in comps):
        return None

    sq = draws * draws
    cp = draws[:, :-1] * draws[:, 1:] if draws.shape[1] > 1 else None
    eta = draws + model.intercept
    with np.errstate(over="ignore"):
        np.exp(eta, out=eta)
    lmeas = draws @ model.y + float(model.intercept @ model.y - model._log_fact.sum()) - eta.sum(axis=1)
    lprior = _tridiag_log_density_dots(sq, cp, draws, prior.mean, prior.precision,
                                       prior.factor.log_det)
    dens = [_tridiag_log_density_dots(sq, cp, draws, c.mean, c.precision, c.factor.log_det)
            for c in comps]
    if isinstance(proposal, MixtureProposal):
        lg = np.logaddexp(np.log(proposal.pi) + dens[0],
                          np.log1p(-proposal.pi) + dens[1])
    else:
        lg = dens[0]
    return lmeas + lprior - lg


def estimate_likelihood(model, prior, proposal, S, seed, payload_fn=None):
    """Importance-sampling likelihood estimate with S draws.

    log w_s = log p(y|a_s) + log p(a_s) - log g(a_s); the estimate is the
    weight mean, returned on linear and log scale together with the weight
    sample. ``payload_fn(draws) -> (S,)`` optionally attaches per-draw
    values for downstream ratio estimators. Deterministic given ``seed``.
    """
    if proposal.dim != model.dim:
        raise InvalidInput("proposal/model dimension mismatch")
    S = int(S)
    if S < 1:
        raise InvalidInput("need at least one draw")
    rng = derived_rng(seed)
    draws = proposal.sample(rng, S)
    lw = _fused_ssm_log_weights(model, prior, proposal, draws)
    if lw is None:
        lw = log_joint(model, prior, draws) - proposal.log_density(draws)
    if np.all(np.isneginf(lw)):
        raise DegenerateSample("every draw fell outside the target support")
    payload = None if payload_fn is None else np.asarray(payload_fn(draws), dtype=float)
    ws = WeightSample(lw, payload, proposal_tag=type(proposal).__name__, seed=int(seed))
    log_value = float(logsumexp(lw) - np.log(S))
    with np.errstate(over="ignore"):
        value = float(np.exp(log_value))
    return LikelihoodEstimate(value, log_value, ws)


def ratio_estimate(ws):
    """Self-normalized estimate of E[h] and its asymptotic variance.

    I_hat = sum h_s w_s / sum w_s and Var_hat = S sum (h_s - I_hat)^2 w_s^2
    / (sum w_s)^2, computed with max-log normalization; both are invariant
    to rescaling all weights.
    """
    if ws.payload is None:
        raise InvalidInput("ratio_estimate needs a payload")
    lw = ws.log_weights
    finite = ~np.isneginf(lw)
    if not np.any(finite):
        raise DegenerateSample("all weights are zero")
    w = np.exp(lw - np.max(lw[finite]))
    h = ws.payload
    total = np.sum(w)
    i_hat = float(np.sum(h * w) / total)
    var_hat = float(ws.size * np.sum((h - i_hat) ** 2 * w ** 2) / total ** 2)
    return i_hat, var_hat


def _gpd_nll(params, z):
    xi, log_beta = params
    beta = np.exp(log_beta)
    t = xi * z / beta
    if np.any(t <= -1.0):
        return np.inf
    r = z.size
    if abs(xi) < 1e-10:
        return r * log_beta + np.sum(z) / beta
    return r * log_beta + (1.0 + 1.0 / xi) * np.sum(np.log1p(t))


def _hessian_2d(f, x, h=1e-4):
    H = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            ei = np.zeros(2)
            ej = np.zeros(2)
            ei[i] = h
            ej[j] = h
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return 0.5 * (H + H.T)


def ksc_test(ws, percentile=90.0):
    """Tail test on the importance weights via a generalized Pareto fit.

    Exceedances over the given percentile of the max-normalized weights are
    fit by maximum likelihood over (shape, log scale); the one-sided Wald
    statistic (shape_hat - 1/2)/se tests shape <= 1/2 (finite variance),
    with the standard error from numerically differentiated observed
    information. Sensitive to the threshold choice, which is why the
    percentile stays a parameter.
    """
    lw = ws.log_weights
    finite = lw[~np.isneginf(lw)]
    if finite.size < 100:
        raise InvalidInput("need at least 100 finite weights")
    w = np.exp(lw - np.max(finite))
    u = float(np.percentile(w, percentile))
    z = w[w > u] - u
    if z.size < 10:
        raise InsufficientTail(f"only {z.size} exceedances over the {percentile}th percentile")

    zbar = float(np.mean(z))
    zvar = float(np.var(z))
    xi_mom = 0.5 * (1.0 - zbar * zbar / zvar) if zvar > 0 else 0.1
    starts = {xi_mom, 0.1, 0.5, 1.0}
    best = None
    for xi0 in starts:
        beta0 = max(zbar * (1.0 - min(xi0, 0.9)), 1e-12 * zbar) if xi0 < 1 else zbar
        res = minimize(_gpd_nll, x0=np.array([xi0, np.log(beta0)]), args=(z,),
                       method="Nelder-Mead",
                       options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    xi_hat, log_beta_hat = best.x
    H = _hessian_2d(lambda p: _gpd_nll(p, z), best.x)
    se = np.nan
    try:
        cov = np.linalg.inv(H)
        if cov[0, 0] > 0:
            se = float(np.sqrt(cov[0, 0]))
    except np.linalg.LinAlgError:
        pass
    if not np.isfinite(se):
        # fall back to the asymptotic GPD information, (1+xi)^2/r
        se = (1.0 + max(xi_hat, -0.5)) / np.sqrt(z.size)
    stat = (xi_hat - 0.5) / se
    p_value = float(1.0 - ndtr(stat))
    return GpdFit(float(xi_hat), float(np.exp(log_beta_hat)), u, int(z.size), se, p_value)


def autocorrelations(x):
    """Sample autocorrelations rho_1.. via FFT, biased normalization."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    if acov[0] <= 0:
        raise ConstantChain("chain variance is zero")
    return acov / acov[0]


def iact(chain):
    """Integrated autocorrelation time 1 + 2 sum_{j<=L*} rho_j.

    L is the first lag whose sample autocorrelation drops inside the
    +-2/sqrt(K) noise band and the sum truncates at L* = min(1000, L).
    Chains dominated by negative lag-1 correlation legitimately give
    estimates below 1.
    """
    chain = np.asarray(chain, dtype=float)
    K = chain.size
    if K < 50:
        raise InvalidInput("need a chain of length >= 50")
    rho = autocorrelations(chain)
    thresh = 2.0 / np.sqrt(K)
    small = np.nonzero(np.abs(rho[1:]) <= thresh)[0]
    L = int(small[0]) + 1 if small.size else K - 1
    L_star = min(1000, L)
    est = 1.0 + 2.0 * float(np.sum(rho[1:L_star + 1]))
    return IactResult(est, L_star, L, rho[1:L_star + 1].copy())


def normalized_weight_variance(ws):
    """Sample variance of weights scaled to unit mean."""
    w = ws.normalized_weights()
    if w.size < 2:
        raise InvalidInput("variance needs at least two weights")
    return float(np.var(w, ddof=1))


def weight_variance_ratio(a, b):
    """Variance of a's normalized weights over b's.

    Mean-normalization makes proposals with different normalizing constants
    comparable; equal samples give exactly 1.
    """
    va = normalized_weight_variance(a)
    vb = normalized_weight_variance(b)
    if vb == 0.0:
        raise ZeroDivisionError("benchmark weights have zero variance")
    return va / vb
