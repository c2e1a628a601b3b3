import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import spatialfrailty as sf
from spatialfrailty.model import CompleteDerivatives

from oracles import direct_complete_loglik, fd_gradient, rel_err, step_cumulative


@pytest.fixture
def paper_baseline():
    return sf.PiecewiseBaseline((0.0, 0.2, 0.8), (2.0, 0.5, 1.0))


def random_instance(seed, n=5, g=3, m=2, p=2, kernel="exp"):
    rng = np.random.default_rng(seed)
    cuts = np.concatenate([[0.0], np.sort(rng.uniform(0.1, 1.5, m - 1))]) if m > 1 else np.array([0.0])
    baseline = sf.PiecewiseBaseline(cuts, rng.uniform(0.3, 2.0, m))
    beta = rng.uniform(-1.0, 1.0, p)
    params = sf.ModelParams(baseline, beta, rng.uniform(0.5, 2.0),
                            rng.uniform(0.5, 2.0), kernel)
    pts = rng.uniform(0.0, 3.0, (g, 2)) / 111.0
    distances = sf.build_distance_matrix(pts)
    groups = np.concatenate([np.arange(g), rng.integers(0, g, n - g)])
    data = sf.Dataset(rng.uniform(0.05, 2.0, n), rng.integers(0, 2, n),
                      rng.normal(0.0, 0.7, (n, p)), groups, g)
    b = rng.normal(0.0, 0.7, g)
    corr = sf.correlation_matrix(distances, params.rho, kernel)
    return params, data, b, corr, distances


# ---------------------------------------------------------------------------
# hazard and cumulative hazard
# ---------------------------------------------------------------------------

def test_hazard_interval_lookup(paper_baseline):
    params = sf.ModelParams(paper_baseline, np.zeros(1), 1.0, 1.0)
    assert sf.hazard_at(params, 0.5, [0.0], 0.0) == pytest.approx(0.5)


def test_hazard_first_interval(paper_baseline):
    params = sf.ModelParams(paper_baseline, (0.3, -0.2), 1.0, 1.0)
    assert sf.hazard_at(params, 0.05, (0.0, 0.0), 0.0) == pytest.approx(2.0)


def test_hazard_scalar_arithmetic():
    baseline = sf.PiecewiseBaseline((0.0,), (1.0,))
    params = sf.ModelParams(baseline, (2.0, 3.0), 1.0, 1.0)
    assert sf.hazard_at(params, 1.0, (1.0, 1.0), 0.5) == pytest.approx(np.exp(5.5))


def test_hazard_right_continuous_at_cutpoint(paper_baseline):
    assert paper_baseline.hazard(0.2) == pytest.approx(0.5)
    assert paper_baseline.hazard(0.8) == pytest.approx(1.0)


def test_cumulative_hazard_at_zero(paper_baseline):
    assert sf.cumulative_hazard(paper_baseline, 0.0) == 0.0


def test_cumulative_hazard_paper_values(paper_baseline):
    # frozen from the Riemann-sum oracle
    assert step_cumulative((0, 0.2, 0.8), (2, 0.5, 1), 1.0) == pytest.approx(0.9, abs=1e-4)
    assert step_cumulative((0, 0.2, 0.8), (2, 0.5, 1), 0.1) == pytest.approx(0.2, abs=1e-4)
    assert sf.cumulative_hazard(paper_baseline, 1.0) == pytest.approx(0.9)
    assert sf.cumulative_hazard(paper_baseline, 0.1) == pytest.approx(0.2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.05, 3.0), min_size=1, max_size=5),
       st.lists(st.floats(0.05, 4.0), min_size=6, max_size=6),
       st.floats(0.0, 10.0))
def test_cumulative_hazard_matches_riemann_oracle(widths, hazards, t):
    cuts = np.concatenate([[0.0], np.cumsum(widths)])
    h = np.asarray(hazards[: len(cuts)])
    baseline = sf.PiecewiseBaseline(cuts, h)
    expected = step_cumulative(cuts, h, t, n_grid=100_001)
    assert baseline.cumulative_hazard(t) == pytest.approx(expected, abs=2e-3, rel=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.05, 3.0), min_size=1, max_size=5),
       st.lists(st.floats(0.05, 4.0), min_size=6, max_size=6))
def test_cumulative_hazard_nondecreasing(widths, hazards):
    cuts = np.concatenate([[0.0], np.cumsum(widths)])
    baseline = sf.PiecewiseBaseline(cuts, np.asarray(hazards[: len(cuts)]))
    grid = np.linspace(0.0, float(cuts[-1]) * 1.7 + 1.0, 200)
    values = baseline.cumulative_hazard(grid)
    assert np.all(np.diff(values) >= -1e-12)
    survival = np.exp(-values)
    assert np.all((survival > 0.0) & (survival <= 1.0))


# ---------------------------------------------------------------------------
# complete log-likelihood
# ---------------------------------------------------------------------------

def test_complete_loglik_censored_single_subject(paper_baseline):
    params = sf.ModelParams(paper_baseline, np.zeros(1), 1.0, 1.0, "identity")
    data = sf.Dataset([1.0], [0], np.zeros((1, 1)), [0], 1)
    corr = sf.identity_factor(1)
    b = np.zeros(1)
    expected = -0.9 - 0.5 * np.log(2.0 * np.pi)
    assert sf.complete_log_likelihood(params, data, b, corr) == pytest.approx(expected)


def test_complete_loglik_direct_summation_oracle():
    params, data, b, corr, _ = random_instance(3, n=2, g=2, m=2, p=1)
    ours = sf.complete_log_likelihood(params, data, b, corr)
    oracle = direct_complete_loglik(params, data, b, corr.matrix)
    assert abs(ours - oracle) < 1e-10


def test_complete_loglik_matches_identity_when_single_group(paper_baseline):
    params_exp = sf.ModelParams(paper_baseline, (0.5,), 1.2, 1.0, "exp")
    params_id = params_exp.replace(kernel="identity")
    data = sf.Dataset([0.5, 1.2], [1, 0], [[1.0], [0.0]], [0, 0], 1)
    b = np.array([0.3])
    # a single group has trivial correlation structure for any kernel
    exp_factor = sf.CorrelationFactor(np.eye(1), np.eye(1), 0.0, 1.0, "exp",
                                      distances=np.zeros((1, 1)))
    value_exp = sf.complete_log_likelihood(params_exp, data, b, exp_factor)
    value_id = sf.complete_log_likelihood(params_id, data, b, sf.identity_factor(1))
    assert value_exp == pytest.approx(value_id, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_complete_loglik_permutation_invariance(seed):
    params, data, b, corr, _ = random_instance(seed, n=7, g=3)
    rng = np.random.default_rng(seed + 1)
    perm = rng.permutation(data.n)
    permuted = sf.Dataset(data.times[perm], data.status[perm],
                          data.covariates[perm], data.groups[perm], data.n_groups)
    before = sf.complete_log_likelihood(params, data, b, corr)
    after = sf.complete_log_likelihood(params, permuted, b, corr)
    assert before == pytest.approx(after, rel=1e-12)


# ---------------------------------------------------------------------------
# score and hessian
# ---------------------------------------------------------------------------

def flat_loglik(params, data, b, distances):
    corr = sf.correlation_matrix(distances, params.rho, params.kernel,
                                 n_groups=data.n_groups)
    return sf.complete_log_likelihood(params, data, b, corr)


def with_theta(params, theta, m, p):
    baseline = sf.PiecewiseBaseline(params.baseline.cutpoints, theta[:m])
    tail = theta[m + p:]
    rho = tail[1] if params.has_rho else params.rho
    return sf.ModelParams(baseline, theta[m:m + p], tail[0], rho, params.kernel)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kernel", ["exp", "pol", "identity"])
def test_gradient_matches_finite_differences(seed, kernel):
    params, data, b, corr, distances = random_instance(seed, kernel=kernel)
    bundle = sf.score_and_hessian(params, data, b, corr)
    m, p = params.baseline.n_intervals, data.p

    def f(theta):
        return flat_loglik(with_theta(params, theta, m, p), data, b, distances)

    numeric = fd_gradient(f, params.flatten())
    assert rel_err(bundle.gradient(), numeric) < 1e-6


def test_sigma2_score_at_zero_frailty():
    params, data, _, corr, _ = random_instance(5)
    bundle = sf.score_and_hessian(params, data, np.zeros(data.n_groups), corr)
    assert bundle.grad_sigma2 == pytest.approx(-data.n_groups / (2.0 * params.sigma2))


@pytest.mark.parametrize("kernel", ["exp", "pol"])
def test_second_derivatives_match_fd_of_gradient(kernel):
    params, data, b, corr, distances = random_instance(7, kernel=kernel)
    bundle = sf.score_and_hessian(params, data, b, corr)
    m, p = params.baseline.n_intervals, data.p
    theta0 = params.flatten()

    def grad_at(theta):
        prm = with_theta(params, theta, m, p)
        fac = sf.correlation_matrix(distances, prm.rho, prm.kernel)
        return sf.score_and_hessian(prm, data, b, fac).gradient()

    dim = theta0.size
    numeric = np.zeros((dim, dim))
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = 1e-6 * max(1.0, abs(theta0[j]))
        numeric[:, j] = (grad_at(theta0 + e) - grad_at(theta0 - e)) / (2.0 * e[j])
    assert rel_err(bundle.hessian(), 0.5 * (numeric + numeric.T)) < 1e-6


def test_cross_beta_hazard_matches_fd():
    params, data, b, corr, distances = random_instance(9)
    bundle = sf.score_and_hessian(params, data, b, corr)
    m, p = params.baseline.n_intervals, data.p
    theta0 = params.flatten()
    for j in range(m):
        e = np.zeros_like(theta0)
        e[j] = 1e-6 * max(1.0, theta0[j])
        hi = with_theta(params, theta0 + e, m, p)
        lo = with_theta(params, theta0 - e, m, p)
        fd = (sf.score_and_hessian(hi, data, b, corr).grad_beta
              - sf.score_and_hessian(lo, data, b, corr).grad_beta) / (2.0 * e[j])
        assert rel_err(bundle.hess_beta_hazards[:, j], fd) < 1e-6


def test_zero_cross_blocks_are_materialized():
    params, data, b, corr, _ = random_instance(11)
    hess = sf.score_and_hessian(params, data, b, corr).hessian()
    m, p = params.baseline.n_intervals, data.p
    assert hess.shape == (m + p + 2, m + p + 2)
    # h-h off-diagonal, h-sigma2, h-rho, beta-sigma2, beta-rho all exactly zero
    h_block = hess[:m, :m]
    assert np.all(h_block[~np.eye(m, dtype=bool)] == 0.0)
    assert np.all(hess[:m, m + p:] == 0.0)
    assert np.all(hess[m:m + p, m + p:] == 0.0)


def test_bundle_context_reuse_matches_single_shot():
    params, data, b, corr, _ = random_instance(13)
    context = CompleteDerivatives(params, data, corr)
    rng = np.random.default_rng(0)
    for _ in range(3):
        bb = b + rng.normal(0, 0.2, b.shape)
        one = context.bundle(bb)
        two = sf.score_and_hessian(params, data, bb, corr)
        assert np.allclose(one.gradient(), two.gradient())
        assert np.allclose(one.hessian(), two.hessian())


def test_dataset_invariants():
    with pytest.raises(ValueError):
        sf.Dataset([1.0, -0.5], [1, 0], np.zeros((2, 1)), [0, 1], 2)
    with pytest.raises(ValueError):
        sf.Dataset([1.0, 0.5], [1, 2], np.zeros((2, 1)), [0, 1], 2)
    with pytest.raises(ValueError):  # empty group 1
        sf.Dataset([1.0, 0.5], [1, 0], np.zeros((2, 1)), [0, 2], 3)


def test_baseline_invariants():
    with pytest.raises(ValueError):
        sf.PiecewiseBaseline((0.1, 0.5), (1.0, 1.0))
    with pytest.raises(ValueError):
        sf.PiecewiseBaseline((0.0, 0.5), (1.0, -1.0))
    with pytest.raises(ValueError):
        sf.PiecewiseBaseline((0.0, 0.5, 0.4), (1.0, 1.0, 1.0))
