import numpy as np
import pytest
from scipy import stats

from momentis import (GaussianProposal, InvalidInput, MixtureProposal, MomentOrder,
                      NotPositiveDefinite, StudentTProposal, SymBandMatrix,
                      build_mixture, check_moment_condition, factorize,
                      modify_precision)
from momentis.band_linalg import linear_combination
from momentis.proposal import hard_clamp, proposal_from_json_dict, smooth_clamp

from .test_band_linalg import random_block_tridiag


def scalar(v):
    return SymBandMatrix.from_scalar(np.atleast_1d(np.asarray(v, dtype=float)))


def test_moment_condition_scalar_cases():
    q = scalar(1.0)
    assert check_moment_condition(scalar(3.0), q, 2) is False     # 2*1 - 3 < 0
    assert check_moment_condition(scalar(1.5), q, 2) is True      # 2*1 - 1.5 > 0


def test_moment_condition_n1_always_holds():
    # at n = 1 the matrix reduces to Q itself
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = random_block_tridiag(rng, int(rng.integers(1, 6)), 1)
        qs = random_block_tridiag(rng, q.n_blocks, 1)
        assert check_moment_condition(qs, q, 1) is True


def test_moment_condition_dimension_mismatch():
    with pytest.raises(InvalidInput):
        check_moment_condition(scalar([1.0, 1.0]), scalar(1.0), 2)


def test_modify_precision_untouched_below_threshold():
    q, qs = scalar(1.0), scalar(1.2)
    out = modify_precision(qs, q, 2)   # lambda = 0.6 < 1/(n-1)
    assert out is qs


def test_modify_precision_hard_clamp_scalar():
    q, qs = scalar(1.0), scalar(3.0)
    out = modify_precision(qs, q, 2)   # lambda = 1.5 >= 1
    val = out.to_dense()[0, 0]
    assert val == pytest.approx(2.0 * (1.0 - 1e-5), rel=1e-12)
    assert 2.0 * 1.0 - val == pytest.approx(2e-5, rel=1e-6)
    assert out.dense


def test_modify_precision_guarantee_random():
    rng = np.random.default_rng(5)
    for _ in range(50):
        d = int(rng.integers(1, 9))
        q = random_block_tridiag(rng, d, 1)
        qs = random_block_tridiag(rng, d, 1)
        n = float(rng.choice([1.5, 2.0, 3.0]))
        qt = modify_precision(qs, q, n)
        guard = linear_combination(n, q, -(n - 1.0), qt)
        assert factorize(guard).success


def test_modify_precision_idempotent_when_condition_holds():
    rng = np.random.default_rng(8)
    for _ in range(20):
        d = int(rng.integers(1, 7))
        q = random_block_tridiag(rng, d, 1)
        # qs slightly softer than q guarantees the n=2 condition
        qs = SymBandMatrix(0.8 * q.diag_blocks, 0.8 * q.off_blocks)
        assert check_moment_condition(qs, q, 2)
        assert modify_precision(qs, q, 2) is qs


def test_modify_precision_n_leq_one_returns_input():
    q, qs = scalar(1.0), scalar(7.0)
    assert modify_precision(qs, q, 1.0) is qs


def test_modify_precision_requires_pd_q():
    with pytest.raises(NotPositiveDefinite):
        modify_precision(scalar(1.0), scalar(-1.0), 2)


def test_smooth_clamp_boundary_values_and_derivative():
    order = MomentOrder(2.0)
    tau, delta = order.tau, order.delta
    assert smooth_clamp(tau - delta, order) == pytest.approx(tau - delta, rel=1e-12)
    assert smooth_clamp(tau, order) == pytest.approx(tau, rel=1e-12)
    # C1 junctions: slope 1 at tau-delta, slope 0 at tau
    h = delta * 1e-3
    left = (smooth_clamp(tau - delta + h, order) - smooth_clamp(tau - delta - h, order)) / (2 * h)
    right = (smooth_clamp(tau + h, order) - smooth_clamp(tau - h, order)) / (2 * h)
    assert left == pytest.approx(1.0, abs=5e-3)
    assert right == pytest.approx(0.0, abs=5e-3)


def test_smooth_clamp_monotone_and_capped():
    order = MomentOrder(2.0, eps=1e-3, delta=1e-3)
    lam = np.linspace(order.tau - 5 * order.delta, order.tau + 5 * order.delta, 4001)
    out = smooth_clamp(lam, order)
    assert np.all(np.diff(out) >= -1e-15)
    assert np.all(out <= order.tau + 1e-15)
    assert np.all(out[lam >= order.tau] == order.tau)
    cut = 1.0 / (order.n - 1.0)
    assert np.all(out < cut)


def test_smooth_clamp_matches_expanded_cubic_coefficients():
    # blending cubic in expanded form: a l^3 + b l^2 + c l + d with
    # a=-1/delta^2, b=3 tau/delta^2 - 2/delta, c=4 tau/delta - 3 tau^2/delta^2,
    # d=tau + tau^3/delta^2 - 2 tau^2/delta
    order = MomentOrder(3.0, eps=1e-3, delta=1e-3)
    tau, delta = order.tau, order.delta
    a = -1.0 / delta ** 2
    b = 3.0 * tau / delta ** 2 - 2.0 / delta
    c = 4.0 * tau / delta - 3.0 * tau ** 2 / delta ** 2
    d = tau + tau ** 3 / delta ** 2 - 2.0 * tau ** 2 / delta
    lam = np.linspace(tau - delta, tau, 101)
    expanded = a * lam ** 3 + b * lam ** 2 + c * lam + d
    assert np.allclose(smooth_clamp(lam, order), expanded, atol=1e-8)


def test_hard_clamp_values():
    order = MomentOrder(2.0)
    lam = np.array([0.3, 0.999, 1.0, 5.0])
    out = hard_clamp(lam, order)
    assert out[0] == 0.3 and out[1] == 0.999
    assert out[2] == out[3] == (1.0 - order.eps)


def test_mixture_log_density_identical_components():
    g = GaussianProposal(np.zeros(2), scalar([1.0, 1.0]))
    mix = MixtureProposal(0.1, g, g)
    x = np.array([0.3, -0.7])
    assert mix.log_density(x) == pytest.approx(g.log_density(x), rel=1e-14)


def test_mixture_log_density_matches_naive_sum():
    rng = np.random.default_rng(3)
    g1 = GaussianProposal(rng.standard_normal(2), scalar([2.0, 1.0]))
    g2 = GaussianProposal(rng.standard_normal(2), scalar([0.5, 3.0]))
    mix = MixtureProposal(0.1, g1, g2)
    for _ in range(20):
        x = rng.standard_normal(2)
        naive = np.log(0.1 * np.exp(g1.log_density(x)) + 0.9 * np.exp(g2.log_density(x)))
        assert mix.log_density(x) == pytest.approx(naive, abs=1e-12)


def test_mixture_component_pick_fraction():
    g1 = GaussianProposal(np.zeros(1), scalar(4.0))
    g2 = GaussianProposal(np.ones(1), scalar(1.0))
    mix = MixtureProposal(0.1, g1, g2)
    S = 10 ** 5
    xs = mix.sample(np.random.default_rng(4), S)
    # replay the base streams: uniforms first, then the shared normals
    rng = np.random.default_rng(4)
    u = rng.random(S)
    z = rng.standard_normal((S, 1))
    pick = u < 0.1
    assert np.abs(np.mean(pick) - 0.1) < 0.006
    expect = np.where(pick[:, None], z / 2.0, 1.0 + z)
    assert np.allclose(xs, expect, rtol=1e-12)


def test_mixture_identical_components_match_single_gaussian_distribution():
    g = GaussianProposal(np.zeros(1), scalar(1.0))
    mix = MixtureProposal(0.1, g, g)
    xs = mix.sample(np.random.default_rng(9), 20000)[:, 0]
    assert stats.kstest(xs, "norm").pvalue > 0.01


def test_sampling_deterministic():
    g1 = GaussianProposal(np.zeros(2), scalar([2.0, 1.0]))
    g2 = GaussianProposal(np.zeros(2), scalar([0.5, 3.0]))
    mix = MixtureProposal(0.1, g1, g2)
    a = mix.sample(np.random.default_rng(6), 50)
    b = mix.sample(np.random.default_rng(6), 50)
    assert np.array_equal(a, b)


def test_build_mixture_degenerate_and_weight():
    q, qs = scalar(1.0), scalar(1.2)
    mix = build_mixture(np.zeros(1), qs, q, 2, pi=0.1)
    assert mix.pi == 0.1
    assert mix.heavy is mix.fitted
    x = np.array([0.4])
    g = GaussianProposal(np.zeros(1), qs)
    assert mix.log_density(x) == pytest.approx(g.log_density(x), rel=1e-14)


def test_build_mixture_hard_case_component():
    q, qs = scalar(1.0), scalar(3.0)
    mix = build_mixture(np.zeros(1), qs, q, 2)
    assert mix.heavy.precision.to_dense()[0, 0] == pytest.approx(1.99998, rel=1e-6)
    assert mix.fitted.precision is qs


def test_gaussian_proposal_validates_pd():
    with pytest.raises(NotPositiveDefinite):
        GaussianProposal(np.zeros(2), SymBandMatrix.from_scalar([1.0, 1.0], [2.0]))


def test_moment_order_validation():
    with pytest.raises(InvalidInput):
        MomentOrder(0.5)
    with pytest.raises(InvalidInput):
        MomentOrder(2.0, eps=2.0)
    assert MomentOrder(3.0).tau == pytest.approx((1 - 1e-5) / 2.0)


def test_one_dim_analytic_moment_oracle():
    # pure Gaussian target (l == 0): E_g[w^n] has the closed form
    # (q/q*)^{n/2} * sqrt(q*/(n q - (n-1) q*)), finite iff n q - (n-1) q* > 0
    rng = np.random.default_rng(12)
    S = 10 ** 6

    def mc_moment(qv, qsv, n, seed):
        g = GaussianProposal(np.zeros(1), scalar(qsv))
        p = GaussianProposal(np.zeros(1), scalar(qv))
        xs = g.sample(np.random.default_rng(seed), S)
        lw = p.log_density(xs) - g.log_density(xs)
        w = np.exp(n * lw)
        return w

    # finite branch: estimate converges to the closed form
    qv, qsv, n = 1.0, 1.5, 2.0
    assert check_moment_condition(scalar(qsv), scalar(qv), n)
    closed = (qv / qsv) ** (n / 2) * np.sqrt(qsv / (n * qv - (n - 1) * qsv))
    w = mc_moment(qv, qsv, n, 1)
    assert np.mean(w) == pytest.approx(closed, rel=0.05)
    half = np.mean(w[:S // 2])
    assert half == pytest.approx(np.mean(w), rel=0.1)

    # infinite branch: single-draw dominance reveals instability
    qv, qsv = 1.0, 3.0
    assert not check_moment_condition(scalar(qsv), scalar(qv), n)
    w = mc_moment(qv, qsv, n, 2)
    assert np.max(w) / np.sum(w) > 0.2


def test_student_t_log_density_matches_scipy():
    rng = np.random.default_rng(15)
    prec = random_block_tridiag(rng, 3, 1)
    mean = rng.standard_normal(3)
    prop = StudentTProposal(mean, prec, nu=5.0)
    ref = stats.multivariate_t(loc=mean, shape=np.linalg.inv(prec.to_dense()), df=5.0)
    for _ in range(10):
        x = rng.standard_normal(3)
        assert prop.log_density(x) == pytest.approx(ref.logpdf(x), rel=1e-10)


def test_student_t_sampling_moments():
    prec = scalar(4.0)  # scale sd = 0.5; t(5) variance = (5/3) * 0.25
    prop = StudentTProposal(np.array([1.0]), prec, nu=5.0)
    xs = prop.sample(np.random.default_rng(8), 200_000)[:, 0]
    assert np.mean(xs) == pytest.approx(1.0, abs=0.01)
    assert np.var(xs) == pytest.approx(5.0 / 3.0 * 0.25, rel=0.05)


def test_proposal_json_round_trip():
    q, qs = scalar(1.0), scalar(3.0)
    mix = build_mixture(np.array([0.2]), qs, q, 2, pi=0.1)
    doc = mix.to_json_dict()
    back = proposal_from_json_dict(doc)
    x = np.array([0.7])
    assert back.log_density(x) == pytest.approx(mix.log_density(x), rel=1e-14)
    a = mix.sample(np.random.default_rng(2), 11)
    b = back.sample(np.random.default_rng(2), 11)
    assert np.array_equal(a, b)

    t = StudentTProposal(np.array([0.0]), qs, nu=4.0)
    t2 = proposal_from_json_dict(t.to_json_dict())
    assert t2.log_density(x) == pytest.approx(t.log_density(x), rel=1e-14)
