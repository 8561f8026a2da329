import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import gammaln

from momentis import (BernoulliToyModel, GaussianProposal, GlmmPoissonModel,
                      InvalidInput, PanelAr1Model, PoissonSsmModel, SymBandMatrix,
                      bernoulli_taylor_proposal, factorize, glmm_newton_mode,
                      log_joint)
from momentis.errors import Diverged
from momentis.statespace import Ar1Spec, ar1_prior


def finite_diff_grad(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_derivatives(model, points, grad_rtol=1e-5, hess_rtol=1e-4):
    for x in points:
        g = model.grad(x)
        g_fd = finite_diff_grad(model.log_meas, x)
        scale = max(1.0, np.max(np.abs(g)))
        assert np.allclose(g, g_fd, rtol=grad_rtol, atol=grad_rtol * scale)
        H = model.hess(x).to_dense()
        H_fd = np.column_stack([
            finite_diff_grad(lambda v, j=j: model.grad(v)[j], x) for j in range(x.size)
        ]).T
        hscale = max(1.0, np.max(np.abs(H)))
        assert np.allclose(H, H_fd, rtol=hess_rtol, atol=hess_rtol * hscale)


def random_glmm(rng, n=8, p=2, u=2):
    X = rng.standard_normal((n, p))
    Z = rng.standard_normal((n, u))
    beta = 0.3 * rng.standard_normal(p)
    A = rng.standard_normal((u, u))
    Q = A @ A.T + u * np.eye(u)
    eta = X @ beta + Z @ (0.2 * rng.standard_normal(u))
    y = rng.poisson(np.exp(np.clip(eta, -10, 3)))
    return GlmmPoissonModel(y, X, Z, beta, Q)


def test_poisson_ssm_log_meas_all_zero_counts():
    T = 11
    model = PoissonSsmModel(np.zeros(T), intercept=0.0)
    assert model.log_meas(np.zeros(T)) == pytest.approx(-T, rel=1e-14)


def test_poisson_ssm_derivatives():
    rng = np.random.default_rng(0)
    y = rng.poisson(1.0, size=6).astype(float)
    model = PoissonSsmModel(y, intercept=-0.3)
    check_derivatives(model, [0.5 * rng.standard_normal(6) for _ in range(10)])


def test_poisson_validates_counts():
    with pytest.raises(InvalidInput):
        PoissonSsmModel(np.array([1.0, -2.0]))
    with pytest.raises(InvalidInput):
        PoissonSsmModel(np.array([0.5]))


def test_bernoulli_log_joint_trivial_cases():
    model = BernoulliToyModel(0, 0, prior_precision=0.1)
    a = np.array([0.5])
    assert model.log_meas(a) == pytest.approx(0.0)
    assert model.prior.log_density(a) == pytest.approx(0.0)
    assert log_joint(model, model.prior, a) == pytest.approx(0.0)


def test_bernoulli_outside_support_is_minus_inf():
    model = BernoulliToyModel(10, 4)
    for bad in (np.array([-0.2]), np.array([0.0]), np.array([1.0]), np.array([1.5])):
        assert log_joint(model, model.prior, bad) == -np.inf
    xs = np.array([[0.5], [2.0], [-1.0]])
    vals = log_joint(model, model.prior, xs)
    assert np.isfinite(vals[0]) and np.isneginf(vals[1]) and np.isneginf(vals[2])


def test_bernoulli_derivatives_interior():
    model = BernoulliToyModel(30, 11)
    pts = [np.array([v]) for v in (0.2, 0.37, 0.5, 0.8)]
    check_derivatives(model, pts)


def test_glmm_log_joint_matches_naive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        model = random_glmm(rng)
        prior = GaussianProposal(np.zeros(model.dim), SymBandMatrix.from_dense(model.precision))
        alpha = 0.4 * rng.standard_normal(model.dim)
        naive = 0.0
        for j in range(model.y.size):
            eta_j = model.X[j] @ model.beta + model.Z[j] @ alpha
            naive += model.y[j] * eta_j - np.exp(eta_j) - gammaln(model.y[j] + 1.0)
        u = model.dim
        Q = model.precision
        sign, ld = np.linalg.slogdet(Q)
        naive += -0.5 * u * np.log(2 * np.pi) + 0.5 * ld - 0.5 * alpha @ Q @ alpha
        assert log_joint(model, prior, alpha) == pytest.approx(naive, abs=1e-10 * max(1, abs(naive)))


def test_glmm_derivatives():
    rng = np.random.default_rng(9)
    model = random_glmm(rng)
    check_derivatives(model, [0.3 * rng.standard_normal(model.dim) for _ in range(10)])


def test_glmm_newton_mode_zero_design():
    y = np.array([2.0, 1.0])
    X = np.ones((2, 1))
    Z = np.zeros((2, 2))
    Q = np.array([[2.0, 0.3], [0.3, 1.0]])
    model = GlmmPoissonModel(y, X, Z, np.array([0.1]), Q)
    alpha, qstar = glmm_newton_mode(model)
    assert np.allclose(alpha, 0.0)
    assert np.allclose(qstar.to_dense(), Q)


def test_glmm_newton_mode_scalar_root():
    # maximizing y*a - e^a - a^2/2 solves 1 - e^a - a = 0
    model = GlmmPoissonModel(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1)),
                             np.array([0.0]), np.array([[1.0]]))
    alpha, qstar = glmm_newton_mode(model, tol=1e-12)
    root = brentq(lambda a: 1.0 - np.exp(a) - a, -1.0, 1.0, xtol=1e-14)
    assert root == pytest.approx(0.4428544, abs=1e-6)
    assert alpha[0] == pytest.approx(root, abs=1e-10)
    assert qstar.to_dense()[0, 0] == pytest.approx(np.exp(root) + 1.0, rel=1e-10)


def test_glmm_newton_mode_gradient_small_on_random_instances():
    rng = np.random.default_rng(13)
    for _ in range(10):
        model = random_glmm(rng)
        alpha, _ = glmm_newton_mode(model, tol=1e-9)
        g = model.grad(alpha) - model.precision @ alpha
        assert np.max(np.abs(g)) <= 1e-9


def test_glmm_newton_mode_diverged_carries_iterate():
    model = random_glmm(np.random.default_rng(1))
    with pytest.raises(Diverged) as exc:
        glmm_newton_mode(model, tol=1e-16, max_iter=1)
    assert exc.value.last is not None


def test_bernoulli_taylor_hard_case_numbers():
    model = BernoulliToyModel(100, 7, 0.1)
    prop = bernoulli_taylor_proposal(model)
    a_hat = 0.07
    D = -7 / a_hat ** 2 - 93 / (1 - a_hat) ** 2
    assert D == pytest.approx(-1536.0983102918585, rel=1e-12)
    qstar = 0.1 - D
    assert prop.precision.to_dense()[0, 0] == pytest.approx(qstar, rel=1e-12)
    assert prop.mean[0] == pytest.approx((0.05 - D * a_hat) / qstar, rel=1e-12)
    assert prop.mean[0] == pytest.approx(0.0700279912, abs=1e-9)
    # the unmodified proposal fails the n=2 condition: 2Q - Q* < 0
    assert 2 * 0.1 - qstar < 0


def test_bernoulli_taylor_easy_case_symmetric():
    model = BernoulliToyModel(100, 50, 0.1)
    prop = bernoulli_taylor_proposal(model)
    assert prop.precision.to_dense()[0, 0] == pytest.approx(400.1, rel=1e-12)
    assert abs(prop.mean[0] - 0.5) <= 1e-12


def test_bernoulli_taylor_boundary_clamp_and_errors():
    with pytest.raises(InvalidInput):
        bernoulli_taylor_proposal(BernoulliToyModel(0, 0))
    prop = bernoulli_taylor_proposal(BernoulliToyModel(50, 0, 0.1))
    assert np.isfinite(prop.mean[0])
    assert prop.mean[0] < 0.05


def test_concavity_certificates():
    rng = np.random.default_rng(2)
    y = rng.poisson(1.0, size=5).astype(float)
    ssm = PoissonSsmModel(y, intercept=0.2)
    toy = BernoulliToyModel(20, 9)
    glmm = random_glmm(rng, n=8, u=2)
    for model, pts in ((ssm, rng.standard_normal((5, 5))),
                       (toy, np.array([[0.3], [0.6], [0.9]])),
                       (glmm, 0.3 * rng.standard_normal((5, 2)))):
        assert model.concave and model.linear_bound
        for x in pts:
            neg_h = SymBandMatrix(-model.hess(x).diag_blocks, -model.hess(x).off_blocks)
            assert factorize(neg_h).success


def test_poisson_linear_bound_witness():
    rng = np.random.default_rng(6)
    y = rng.poisson(2.0, size=7).astype(float)
    model = PoissonSsmModel(y, intercept=0.1)
    for _ in range(50):
        alpha = 3.0 * rng.standard_normal(7)
        bound = np.sum(y * (model.intercept + alpha) - gammaln(y + 1.0))
        assert bound - model.log_meas(alpha) >= 0.0


def test_panel_model_measurement_offsets():
    rng = np.random.default_rng(10)
    m, T = 3, 6
    z = rng.random((m, T))
    x = np.stack([np.ones_like(z), z], axis=-1)
    y = rng.poisson(1.0, size=(m, T)).astype(float)
    beta = np.array([0.5, -1.0])
    model = PanelAr1Model(list(y), list(x), beta, Ar1Spec(0.0, 0.8, 0.18, T))
    meas = model.measurement(1)
    assert np.allclose(meas.intercept, x[1] @ beta)
    assert meas.dim == T
    other = model.measurement(1, np.array([0.0, 2.0]))
    assert np.allclose(other.intercept, 2.0 * z[1])
    assert model.lengths() == [T, T, T]


def test_log_joint_with_ar1_prior_matches_parts():
    y = np.array([0.0, 1.0, 2.0])
    model = PoissonSsmModel(y, intercept=-0.5)
    prior = ar1_prior(Ar1Spec(0.0, 0.6, 0.4, 3))
    alpha = np.array([0.1, -0.2, 0.05])
    assert log_joint(model, prior, alpha) == pytest.approx(
        model.log_meas(alpha) + prior.log_density(alpha), rel=1e-14)
