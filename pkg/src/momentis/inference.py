"""Pseudo-marginal adaptive random-walk Metropolis-Hastings over model
parameters, with importance-sampling likelihood estimators for panel and
state-space models.

The chain walks an unconstrained space (beta unchanged, phi through arctanh,
sigma2 through log) with the transform Jacobians folded into the prior. Each
proposal's likelihood is estimated with a fresh counter-derived sub-seed and
the estimate of the current state is reused verbatim until an acceptance
replaces it, which is what keeps the noisy-likelihood chain exact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, logsumexp

from . import estimators
from .errors import DegenerateSample, Diverged, InvalidInput, MomentisError, NotPositiveDefinite
from .estimators import estimate_likelihood
from .models import PanelAr1Model, PoissonSsmModel
from .proposal import GaussianProposal, StudentTProposal, build_mixture, hard_clamp, smooth_clamp, _as_order
from .seeding import derived_rng, derived_seed
from .statespace import Ar1Spec, ar1_precision, build_ssm_mixture, impose_scalar, spdk_fit

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ParameterVector:
    """Model parameters (beta, phi, sigma2) with their chain transforms."""

    beta: np.ndarray
    phi: float
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not abs(self.phi) < 1:
            raise InvalidInput("|phi| must be < 1")
        if not self.sigma2 > 0:
            raise InvalidInput("sigma2 must be positive")

    @property
    def names(self):
        return [f"beta_{i}" for i in range(self.beta.size)] + ["phi", "sigma2"]

    def to_array(self):
        return np.concatenate([self.beta, [self.phi, self.sigma2]])

    def to_unconstrained(self):
        return np.concatenate([self.beta, [np.arctanh(self.phi), np.log(self.sigma2)]])

    @classmethod
    def from_unconstrained(cls, x, n_beta):
        x = np.asarray(x, dtype=float)
        return cls(x[:n_beta].copy(), float(np.tanh(x[n_beta])), float(np.exp(x[n_beta + 1])))


def log_prior(psi, tau0=100.0):
    """Log prior kernel in natural space: N(0, tau0 I) on beta, a
    (1-phi^2)^{-1/2} reference kernel on phi and 1/sigma2 on sigma2."""
    p = psi.beta.size
    lp = -0.5 * p * np.log(2.0 * np.pi * tau0) - 0.5 * psi.beta @ psi.beta / tau0
    lp += -0.5 * np.log1p(-psi.phi ** 2)
    lp += -np.log(psi.sigma2)
    return float(lp)


def log_prior_unconstrained(x, n_beta, tau0=100.0):
    """Prior density of the transformed chain state, Jacobians included.

    The sigma2 reference prior is exactly flat in log sigma2; the phi
    kernel becomes 0.5 log(1-phi^2).
    """
    x = np.asarray(x, dtype=float)
    phi = np.tanh(x[n_beta])
    psi = ParameterVector(x[:n_beta], float(phi), float(np.exp(x[n_beta + 1])))
    jac = np.log1p(-phi ** 2) + x[n_beta + 1]
    return log_prior(psi, tau0) + float(jac)


@dataclass(frozen=True)
class SamplerSpec:
    """Which importance density estimates the likelihood.

    kind 'normal' is the plain fitted Gaussian, 't' the Student-t
    comparison sampler, 'mixture' the n-th-moment constrained two-component
    mixture.
    """

    kind: str = "mixture"
    n: float = 2.0
    pi: float = 0.1
    nu: float = 5.0
    eps_inflate: float = 0.05
    smooth: bool = False

    def __post_init__(self):
        if self.kind not in ("normal", "t", "mixture"):
            raise InvalidInput(f"unknown sampler kind {self.kind!r}")


@dataclass
class PanelLikelihood:
    """Sum of per-panel log estimates plus optional per-panel detail."""

    log_value: float
    per_panel: np.ndarray
    weight_samples: list | None = None
    impose_rounds: list | None = None


def _panel_proposal(sampler, gauss, Q):
    if sampler.kind == "normal":
        return gauss
    if sampler.kind == "t":
        return StudentTProposal(gauss.mean, gauss.precision, nu=sampler.nu)
    return build_mixture(gauss.mean, gauss.precision, Q, sampler.n,
                         pi=sampler.pi, smooth=sampler.smooth)


def _tri_chol_batch(dg, off):
    """LDL' pivots and multipliers for tridiag(dg_i, off), batched over rows.

    dg has shape (m, T); off (T-1,) is shared across the batch. Raises
    :class:`NotPositiveDefinite` on a non-positive or non-finite pivot.
    """
    m, T = dg.shape
    piv = np.empty_like(dg)
    w = np.empty((m, max(T - 1, 0)))
    piv[:, 0] = dg[:, 0]
    for t in range(1, T):
        w[:, t - 1] = off[t - 1] / piv[:, t - 1]
        piv[:, t] = dg[:, t] - off[t - 1] * w[:, t - 1]
    if not np.all(np.isfinite(piv)) or np.any(piv <= 0.0):
        raise NotPositiveDefinite("batched tridiagonal factorization failed")
    return piv, w


def _tri_solve_batch(piv, w, b):
    """Solve the factored tridiagonal systems for right-hand sides (m, T)."""
    x = b.copy()
    T = piv.shape[1]
    for t in range(1, T):
        x[:, t] -= w[:, t - 1] * x[:, t - 1]
    x /= piv
    for t in range(T - 2, -1, -1):
        x[:, t] -= w[:, t] * x[:, t + 1]
    return x


def _tri_sample_transform(piv, w, z):
    """Map z ~ N(0, I) to N(0, A^{-1}) draws, z shaped (m, T, S).

    With A = U'U and U = D^{1/2} L', this is the same backward solve the
    banded-factor sampler performs, batched over panels.
    """
    x = z / np.sqrt(piv)[:, :, None]
    T = piv.shape[1]
    for t in range(T - 2, -1, -1):
        x[:, t, :] -= w[:, t, None] * x[:, t + 1, :]
    return x


def _estimate_panel_batched(model, psi, sampler, S, seed, collect_weights):
    """Equal-length scalar-state panels evaluated in one vectorized sweep.

    Same estimator as the per-panel route (same per-panel derived seeds and
    base-draw layout, same SPDK/mixture construction); panels are stacked so
    the work per MCMC iteration is a few dozen array ops instead of
    thousands of small ones. Agrees with the per-panel route to floating
    point reduction order.
    """
    m = model.n_panels
    T = model.y[0].size
    S = int(S)
    y = np.stack(model.y)
    offsets = np.stack([x @ psi.beta for x in model.x])
    spec = Ar1Spec(model.ar1.mu, psi.phi, psi.sigma2, T)
    mean, Q = ar1_precision(spec)
    qd = Q.diag_blocks[:, 0, 0]
    qo = Q.off_blocks[:, 0, 0] if T > 1 else np.zeros(0)
    ppiv, _ = _tri_chol_batch(qd[None, :], qo)
    prior_logdet = float(np.sum(np.log(ppiv[0])))
    q_mu = Q.matvec(mean)

    # iterated Newton fit, all panels at once
    alpha = np.tile(mean, (m, 1))
    lam = piv = w = None
    with np.errstate(over="ignore"):
        for _ in range(100):
            lam = np.exp(offsets + alpha)
            if not np.all(np.isfinite(lam)):
                raise NotPositiveDefinite("measurement curvature overflowed")
            piv, w = _tri_chol_batch(qd + lam, qo)
            new_alpha = _tri_solve_batch(piv, w, y - lam + lam * alpha + q_mu)
            delta = np.max(np.abs(new_alpha - alpha))
            alpha = new_alpha
            if delta <= 1e-8:
                break
        else:
            raise Diverged("panel SPDK iteration did not converge", last=alpha)
    logdet_qstar = np.sum(np.log(piv), axis=1)

    heavy_chol = heavy_logdet = qt = None
    order = _as_order(sampler.n)
    if sampler.kind == "mixture":
        q_dense = Q.to_dense()
        qs = np.broadcast_to(q_dense, (m, T, T)).copy()
        idx = np.arange(T)
        qs[:, idx, idx] += lam
        if order.n > 1.0:
            a_chol = np.linalg.cholesky(order.n * q_dense)
            a_inv = solve_triangular(a_chol, np.eye(T), lower=True)
            mmat = a_inv @ qs @ a_inv.T
            mmat = 0.5 * (mmat + mmat.transpose(0, 2, 1))
            evals, vecs = np.linalg.eigh(mmat)
            clamp = smooth_clamp if sampler.smooth else hard_clamp
            evals_t = clamp(evals, order)
            untouched = np.all(evals_t == evals, axis=1)
            wmat = a_chol @ vecs
            qt = (wmat * evals_t[:, None, :]) @ wmat.transpose(0, 2, 1)
            qt = 0.5 * (qt + qt.transpose(0, 2, 1))
            qt[untouched] = qs[untouched]
        else:
            qt = qs
        try:
            heavy_chol = np.linalg.cholesky(qt)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(f"modified panel precision failed: {exc}") from exc
        heavy_logdet = 2.0 * np.sum(np.log(np.diagonal(heavy_chol, axis1=1, axis2=2)), axis=1)

    # per-panel base draws, consumed in the same layout as the proposals'
    # own samplers so common-random-number reuse is preserved
    z = np.empty((m, T, S))
    pick = np.empty((m, S), dtype=bool) if sampler.kind == "mixture" else None
    scale_g = np.empty((m, S)) if sampler.kind == "t" else None
    for i in range(m):
        rng = derived_rng(derived_seed(seed, i))
        if sampler.kind == "mixture":
            pick[i] = rng.random(S) < sampler.pi
        z[i] = rng.standard_normal((S, T)).T
        if sampler.kind == "t":
            scale_g[i] = rng.chisquare(sampler.nu, S) / sampler.nu

    fitted_draws = _tri_sample_transform(piv, w, z)
    if sampler.kind == "t":
        fitted_draws /= np.sqrt(scale_g)[:, None, :]
    draws = fitted_draws.transpose(0, 2, 1) + alpha[:, None, :]
    if sampler.kind == "mixture":
        hx = np.empty_like(z)
        for i in range(m):
            hx[i] = solve_triangular(heavy_chol[i], z[i], lower=True, trans="T")
        heavy_draws = hx.transpose(0, 2, 1) + alpha[:, None, :]
        draws = np.where(pick[:, :, None], heavy_draws, draws)

    # log weights
    with np.errstate(over="ignore"):
        expeta = np.exp(offsets[:, None, :] + draws)
    lmeas = (np.matmul(draws, y[:, :, None])[:, :, 0]
             + (np.sum(y * offsets, axis=1) - gammaln(y + 1.0).sum(axis=1))[:, None]
             - expeta.sum(axis=2))
    u = draws - mean
    usq = u * u
    quad_p = usq @ qd
    if T > 1:
        quad_p += 2.0 * ((u[:, :, :-1] * u[:, :, 1:]) @ qo)
    lprior = -0.5 * T * _LOG_2PI + 0.5 * prior_logdet - 0.5 * quad_p
    u = draws - alpha[:, None, :]
    np.multiply(u, u, out=usq)
    quad_f = np.matmul(usq, (qd + lam)[:, :, None])[:, :, 0]
    if T > 1:
        quad_f += 2.0 * ((u[:, :, :-1] * u[:, :, 1:]) @ qo)
    if sampler.kind == "t":
        nu = sampler.nu
        lg = (gammaln(0.5 * (nu + T)) - gammaln(0.5 * nu)
              - 0.5 * T * np.log(nu * np.pi) + 0.5 * logdet_qstar[:, None]
              - 0.5 * (nu + T) * np.log1p(quad_f / nu))
    else:
        lg = -0.5 * T * _LOG_2PI + 0.5 * logdet_qstar[:, None] - 0.5 * quad_f
        if sampler.kind == "mixture":
            quad_h = np.sum(np.matmul(u, qt) * u, axis=2)
            lheavy = -0.5 * T * _LOG_2PI + 0.5 * heavy_logdet[:, None] - 0.5 * quad_h
            lg = np.logaddexp(np.log(sampler.pi) + lheavy, np.log1p(-sampler.pi) + lg)
    lw = lmeas + lprior - lg
    if np.any(np.all(np.isneginf(lw), axis=1)):
        bad = int(np.nonzero(np.all(np.isneginf(lw), axis=1))[0][0])
        raise DegenerateSample(f"panel {bad}: every draw fell outside the target support")
    logs = logsumexp(lw, axis=1) - np.log(S)
    weight_samples = None
    if collect_weights:
        weight_samples = [estimators.WeightSample(lw[i], proposal_tag=sampler.kind,
                                                  seed=int(derived_seed(seed, i)))
                          for i in range(m)]
    return PanelLikelihood(float(np.sum(logs)), logs, weight_samples)


def estimate_panel_likelihood(model, psi, sampler, S, seed, collect_weights=False):
    """Panel likelihood: sum over panels of per-panel IS estimates.

    Each panel gets an SPDK fit and its own derived sub-seed; passing the
    same ``seed`` across calls therefore reuses the same base draws (common
    random numbers), which keeps the estimated likelihood smooth in psi.
    Equal-length scalar-state panels run through a vectorized sweep; ragged
    panels fall back to a per-panel loop. Failures carry the panel index.
    """
    lengths = model.lengths()
    if all(t == lengths[0] for t in lengths):
        return _estimate_panel_batched(model, psi, sampler, S, seed, collect_weights)
    beta = psi.beta
    prior_cache = {}
    logs = np.empty(model.n_panels)
    weight_samples = [] if collect_weights else None
    for i in range(model.n_panels):
        T = model.y[i].size
        if T not in prior_cache:
            spec = Ar1Spec(model.ar1.mu, psi.phi, psi.sigma2, T)
            mean, Q = ar1_precision(spec)
            prior_cache[T] = (mean, Q, GaussianProposal(mean, Q))
        mean, Q, prior = prior_cache[T]
        meas = model.measurement(i, beta)
        try:
            fit, gauss = spdk_fit(meas, (mean, Q))
            prop = _panel_proposal(sampler, gauss, Q)
            est = estimate_likelihood(meas, prior, prop, S, derived_seed(seed, i))
        except MomentisError as exc:
            raise type(exc)(f"panel {i}: {exc}") from exc
        logs[i] = est.log_value
        if collect_weights:
            weight_samples.append(est.weights)
    return PanelLikelihood(float(np.sum(logs)), logs, weight_samples)


def estimate_ssm_likelihood(y, psi, sampler, S, seed, collect_weights=False,
                            mu=0.0, intercept_from_beta=True):
    """State-space likelihood for a Poisson series under one psi.

    The mixture sampler goes through the O(T) scalar imposition (entrywise
    variance inflation) rather than the dense eigenvalue route. Returns
    (log estimate, detail dict).
    """
    y = np.asarray(y, dtype=float)
    T = y.size
    beta0 = float(psi.beta[0]) if intercept_from_beta else 0.0
    spec = Ar1Spec(mu, psi.phi, psi.sigma2, T)
    mean, Q = ar1_precision(spec)
    from .proposal import GaussianProposal
    prior = GaussianProposal(mean, Q)
    meas = PoissonSsmModel(y, intercept=beta0)
    fit, gauss = spdk_fit(meas, (mean, Q))
    detail = {"impose_rounds": 0, "condition_holds": None}
    if sampler.kind == "t":
        prop = StudentTProposal(gauss.mean, gauss.precision, nu=sampler.nu)
    elif sampler.kind == "mixture":
        imposed, k = impose_scalar(fit, spec, sampler.n, eps_inflate=sampler.eps_inflate)
        detail["impose_rounds"] = k
        detail["condition_holds"] = bool(k == 0)
        prop = build_ssm_mixture(fit, imposed, (mean, Q), pi=sampler.pi)
    else:
        prop = gauss
    est = estimate_likelihood(meas, prior, prop, S, seed)
    if collect_weights:
        detail["weights"] = est.weights
    return est.log_value, detail


@dataclass
class McmcConfig:
    """Chain length, estimator settings and adaptation knobs."""

    iterations: int
    burn_in: int
    S: int
    seed: int
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    adapt_start: int = 1000
    init_step: float = 0.1
    jitter: float = 1e-8
    tau0: float = 100.0
    psi0: ParameterVector | None = None


@dataclass
class McmcResult:
    """Chain in natural parameter space plus acceptance/IACT diagnostics."""

    chain: np.ndarray
    log_post: np.ndarray
    accepted: np.ndarray
    param_names: list
    burn_in: int
    acceptance_rate: float
    iact_per_param: np.ndarray
    iact_mean: float
    n_estimator_failures: int
    runtime_s: float

    def post_burn_chain(self):
        return self.chain[self.burn_in:]


def run_pmmh_core(loglik, logprior, x0, iterations, burn_in, seed,
                  to_natural=None, adapt_start=1000, init_step=0.1, jitter=1e-8):
    """Generic pseudo-marginal adaptive RWMH engine.

    ``loglik(x, iteration)`` may be noisy; its value for the current state
    is stored and never recomputed (the pseudo-marginal contract), and a
    failure (any MomentisError) rejects the proposal. Adaptation follows
    the usual scheme: a fixed diagonal proposal (init_step^2/dim) for the
    first ``adapt_start`` iterations, then 2.38^2/dim times the running
    empirical covariance plus jitter.
    """
    x = np.asarray(x0, dtype=float).copy()
    dim = x.size
    total = int(iterations) + int(burn_in)
    to_natural = to_natural or (lambda z: z)
    rng = derived_rng(seed, 0)

    lp = logprior(x)
    if not np.isfinite(lp):
        raise InvalidInput("initial state has zero prior density")
    ll = loglik(x, -1)
    cur = lp + ll

    nat0 = np.asarray(to_natural(x), dtype=float)
    chain = np.empty((total, nat0.size))
    log_post = np.empty(total)
    accepted = np.zeros(total, dtype=bool)

    run_mean = np.zeros(dim)
    run_m2 = np.zeros((dim, dim))
    n_seen = 0
    base_cov = (init_step ** 2 / dim) * np.eye(dim)
    chol_prop = np.linalg.cholesky(base_cov)
    n_fail = 0

    t0 = time.perf_counter()
    for it in range(total):
        prop = x + chol_prop @ rng.standard_normal(dim)
        lp_prop = logprior(prop)
        if np.isfinite(lp_prop):
            try:
                ll_prop = loglik(prop, it)
                cand = lp_prop + ll_prop
                if np.log(rng.random()) < cand - cur:
                    x = prop
                    cur = cand
                    accepted[it] = True
            except MomentisError:
                n_fail += 1
        chain[it] = to_natural(x)
        log_post[it] = cur
        # running covariance over every visited state
        n_seen += 1
        delta = x - run_mean
        run_mean += delta / n_seen
        run_m2 += np.outer(delta, x - run_mean)
        if it + 1 >= adapt_start and n_seen > 1:
            emp_cov = run_m2 / (n_seen - 1)
            chol_prop = np.linalg.cholesky(
                (2.38 ** 2 / dim) * emp_cov + jitter * np.eye(dim))
    runtime = time.perf_counter() - t0
    return chain, log_post, accepted, n_fail, runtime


def run_pmmh(model, config):
    """Pseudo-marginal MCMC over psi = (beta, phi, sigma2) for a panel or
    Poisson state-space model.

    Every iteration estimates the proposed psi's likelihood with a fresh
    counter-derived sub-seed through the configured sampler, accepts by the
    usual ratio on the estimated posterior, and adapts the random-walk
    covariance. Returns chain and diagnostics (acceptance rate and IACT
    computed after burn-in).
    """
    if isinstance(model, PanelAr1Model):
        n_beta = model.beta.size

        def loglik(x, it):
            psi = ParameterVector.from_unconstrained(x, n_beta)
            sub = derived_seed(config.seed, 1, it + 2)
            return estimate_panel_likelihood(model, psi, config.sampler, config.S, sub).log_value
    elif isinstance(model, PoissonSsmModel):
        n_beta = 1

        def loglik(x, it):
            psi = ParameterVector.from_unconstrained(x, n_beta)
            sub = derived_seed(config.seed, 1, it + 2)
            val, _ = estimate_ssm_likelihood(model.y, psi, config.sampler, config.S, sub)
            return val
    else:
        raise InvalidInput(f"unsupported model type {type(model).__name__}")

    psi0 = config.psi0 or ParameterVector(np.zeros(n_beta), 0.0, 1.0)
    x0 = psi0.to_unconstrained()

    def to_natural(x):
        return ParameterVector.from_unconstrained(x, n_beta).to_array()

    chain, log_post, accepted, n_fail, runtime = run_pmmh_core(
        loglik, lambda x: log_prior_unconstrained(x, n_beta, config.tau0), x0,
        config.iterations, config.burn_in, config.seed,
        to_natural=to_natural, adapt_start=config.adapt_start,
        init_step=config.init_step, jitter=config.jitter)

    names = psi0.names
    post = chain[config.burn_in:]
    iacts = np.array([estimators.iact(post[:, j]).estimate for j in range(post.shape[1])])
    return McmcResult(
        chain=chain, log_post=log_post, accepted=accepted, param_names=names,
        burn_in=config.burn_in,
        acceptance_rate=float(np.mean(accepted[config.burn_in:])),
        iact_per_param=iacts, iact_mean=float(np.mean(iacts)),
        n_estimator_failures=n_fail, runtime_s=runtime)
