import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import minimize_scalar
from scipy.stats import multivariate_normal

from oracles import bernoulli_toy, bernoulli_toy_truth, quadrature_log_marginal
from surveyfusion.data_io import DesignIndex
from surveyfusion.errors import ConvergenceError, ValidationError
from surveyfusion.gmrf import SparsePrecision
from surveyfusion.inference import (
    SubmodelProblem,
    compute_waic,
    explore_hyper,
    fit_submodel,
    gaussian_approx,
    hessian_fd,
    latent_marginals,
    log_posterior_hyper,
    mixture_quantile,
    optimize_hyper,
    summarize_hyper,
)
from surveyfusion.model import (
    BernoulliLikelihood,
    GaussianLikelihood,
    HurdleModelSpec,
    HyperParams,
    PriorTerms,
    design_matrix,
    latent_prior_precision,
    log_prior_hyper,
)


# --- inner Gaussian approximation --------------------------------------------------


def test_conjugate_one_step():
    ap = gaussian_approx(GaussianLikelihood([2.0], 1.0), SparsePrecision(np.eye(1)), np.eye(1))
    assert ap.mode[0] == pytest.approx(1.0, abs=1e-14)
    assert ap.marginal_variances()[0] == pytest.approx(0.5, abs=1e-14)
    assert ap.iterations == 1


def test_no_observations_recovers_prior():
    Q = SparsePrecision(np.array([[2.0, 0.5], [0.5, 1.0]]))
    ap = gaussian_approx(GaussianLikelihood([], 1.0), Q, sp.csr_matrix((0, 2)))
    assert np.allclose(ap.mode, 0.0)
    assert np.allclose(ap.precision.toarray(), Q.toarray())
    assert ap.log_marginal == pytest.approx(0.0, abs=1e-12)


def test_single_bernoulli_mode():
    # scalar Newton oracle on -x^2/2 + log sigma(x): x = 1 - sigma(x)
    x = 0.0
    for _ in range(100):
        s = 1 / (1 + math.exp(-x))
        x -= (x - (1 - s)) / (1 + s * (1 - s))
    ap = gaussian_approx(BernoulliLikelihood([1]), SparsePrecision(np.eye(1)), np.eye(1))
    assert ap.mode[0] == pytest.approx(x, abs=1e-6)  # gradient tolerance 1e-6, curvature > 1
    assert ap.mode[0] == pytest.approx(0.4011, abs=1e-4)
    assert max(abs(g) for g in ap.grad_trace[-1:]) < 1e-6


def test_inner_nonconvergence_reports_trace():
    with pytest.raises(ConvergenceError) as err:
        gaussian_approx(BernoulliLikelihood([1, 0, 1]), SparsePrecision(np.eye(3)), np.eye(3), max_iter=1)
    assert len(err.value.trace) == 2


# --- linear-Gaussian exactness --------------------------------------------------------


def _toy_index(rng, n, K, T=1, L=1):
    return DesignIndex(
        rng.integers(0, L, n), rng.integers(0, K, n), rng.integers(0, T, n),
        np.zeros(n), np.zeros(n), tuple(f"S{i}" for i in range(L)), tuple(f"G{i}" for i in range(K)),
        tuple(range(2000, 2000 + T)),
    )


@pytest.fixture(scope="module")
def gaussian_problem():
    rng = np.random.default_rng(11)
    spec = HurdleModelSpec(("S0", "S1"), ("G0", "G1", "G2"), (2000, 2001, 2002, 2003), "temporal")
    idx = _toy_index(rng, 60, 3, 4, 2)
    X = design_matrix(spec, idx)
    y = X @ rng.normal(0, 0.8, spec.layout().size) + rng.normal(0, 0.5, 60)
    return SubmodelProblem(spec, "abundance", X, y)


def _analytic(problem, hyper):
    X = problem.design.toarray()
    Q = latent_prior_precision(problem.spec, hyper).toarray()
    S = np.linalg.inv(Q)
    cov = X @ S @ X.T + hyper.sigma_e ** 2 * np.eye(len(problem.response))
    logml = multivariate_normal(np.zeros(len(cov)), cov).logpdf(problem.response)
    post_cov = np.linalg.inv(Q + X.T @ X / hyper.sigma_e ** 2)
    post_mean = post_cov @ X.T @ problem.response / hyper.sigma_e ** 2
    return logml, post_mean, np.diag(post_cov)


@pytest.mark.parametrize("hyper", [
    HyperParams(sigma_e=0.5, sigma_f=0.7, sigma_omega=1.2, rho=0.6),
    HyperParams(sigma_e=2.0, sigma_f=0.1, sigma_omega=0.3, rho=-0.4),
])
def test_laplace_exact_for_gaussian(gaussian_problem, hyper):
    logml, mean, var = _analytic(gaussian_problem, hyper)
    lp = log_posterior_hyper(gaussian_problem, hyper)
    assert lp == pytest.approx(logml + log_prior_hyper(hyper, names=gaussian_problem.names), abs=1e-8)
    ap = gaussian_problem.approx(np.array([math.log(hyper.sigma_e), math.log(hyper.sigma_f),
                                           math.log(hyper.sigma_omega), math.atanh(hyper.rho)]))
    assert np.allclose(ap.mode, mean, rtol=0, atol=1e-8)
    assert np.allclose(ap.marginal_variances(), var, rtol=0, atol=1e-8)


def test_log_prior_shift_is_additive(gaussian_problem):
    from dataclasses import replace

    h = HyperParams(sigma_e=0.6, sigma_f=0.5, sigma_omega=1.0, rho=0.2)
    a = log_posterior_hyper(gaussian_problem, h)
    spec2 = replace(gaussian_problem.spec, priors=replace(gaussian_problem.spec.priors, log_kappa_mean=3.0))
    # kappa is not a hyperparameter here, so the prior change must not matter
    p2 = SubmodelProblem(spec2, "abundance", gaussian_problem.design, gaussian_problem.response)
    assert log_posterior_hyper(p2, h) == pytest.approx(a, abs=1e-12)
    # a constant added to the log prior shifts the output by that constant
    theta = np.array([math.log(0.6), math.log(0.5), 0.0, math.atanh(0.2)])
    laplace = gaussian_problem.approx(theta).log_marginal
    assert a == pytest.approx(laplace + log_prior_hyper(h, names=gaussian_problem.names), abs=1e-10)


def test_monotone_data_effect():
    spec = HurdleModelSpec(("S0",), ("G0",), (2000, 2001), "temporal")
    rng = np.random.default_rng(3)
    base = _toy_index(rng, 10, 1, 2)
    sds = []
    for extra in range(4):
        idx = DesignIndex(*(np.concatenate([a, np.full(extra, v)]) for a, v in
                            ((base.species, 0), (base.gear, 0), (base.year, 1), (base.x, 0.0), (base.y, 0.0))),
                          base.species_catalog, base.gear_catalog, base.years)
        X = design_matrix(spec, idx)
        prob = SubmodelProblem(spec, "abundance", X, rng.normal(size=X.shape[0]))
        ap = prob.approx(np.log([0.5, 1.0]).tolist() + [0.3])
        sds.append(math.sqrt(ap.marginal_variances()[2]))
    assert all(b <= a + 1e-15 for a, b in zip(sds, sds[1:]))


# --- optimizer, Hessian, grid -------------------------------------------------------------


def test_optimizer_matches_golden_section():
    rng = np.random.default_rng(5)
    spec = HurdleModelSpec(("S0",), ("G0", "G1", "G2", "G3"), (2000,), "none")
    idx = _toy_index(rng, 40, 4)
    X = design_matrix(spec, idx)
    y = X @ np.array([1.0, 0.5, -0.5, 0.8, -0.2]) + rng.normal(0, 0.3, 40)
    prob = SubmodelProblem(spec, "abundance", X, y)
    sig_e = math.log(0.3)
    f = lambda t: prob.evaluate(np.array([sig_e, t]))[0]  # noqa: E731
    oracle = minimize_scalar(lambda t: -f(t), bracket=(-3, 0, 2), method="golden", tol=1e-10).x
    res = optimize_hyper(lambda th: f(th[0]), [0.5])
    assert res.converged
    assert res.theta[0] == pytest.approx(oracle, abs=1e-3)
    again = optimize_hyper(lambda th: f(th[0]), res.theta)
    assert again.converged and again.n_steps == 0


def test_optimizer_reports_budget():
    res = optimize_hyper(lambda t: -float(np.sum((t - 3.0) ** 2)), [0.0, 0.0], max_evals=2, max_step=0.1)
    assert not res.converged and "exceeded" in res.message


def test_hessian_fd_quadratic():
    A = np.array([[-2.0, 0.3], [0.3, -1.0]])
    H = hessian_fd(lambda t: 0.5 * t @ A @ t + 1.0, np.array([0.4, -0.7]))
    assert np.allclose(H, A, atol=1e-6)


def _gauss_eval(mean, cov):
    P = np.linalg.inv(cov)
    return lambda th, hint: (-0.5 * (th - mean) @ P @ (th - mean), None)


def test_grid_gaussian_1d_and_symmetry():
    mean, sd = np.array([0.7]), 0.4
    g = explore_hyper(_gauss_eval(mean, np.array([[sd ** 2]])), mean, np.array([[-1 / sd ** 2]]))
    w = np.array([p.weight for p in g.points])
    th = np.array([p.theta[0] for p in g.points])
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w >= 0)
    assert abs(w @ th - 0.7) < 0.05 * sd
    assert np.allclose(w, w[::-1])
    assert all(0.5 * p.z[0] ** 2 <= 5.0 for p in g.points)


def test_grid_summary_recovers_gaussian_moments():
    mean = np.array([0.3, -1.0])
    cov = np.array([[0.2, 0.05], [0.05, 0.1]])
    g = explore_hyper(_gauss_eval(mean, cov), mean, -np.linalg.inv(cov))
    s = summarize_hyper(("sigma_f", "sigma_omega"), g)
    assert s["sigma_f"].internal_mean == pytest.approx(0.3, abs=1e-10)
    assert s["sigma_f"].internal_sd == pytest.approx(math.sqrt(0.2), rel=1e-8)
    assert s["sigma_omega"].internal_sd == pytest.approx(math.sqrt(0.1), rel=1e-8)
    lo, hi = s["sigma_f"].lo, s["sigma_f"].hi
    assert lo < s["sigma_f"].mean < hi
    assert s["variance"].lo == pytest.approx(s["sigma_omega"].lo ** 2)


def test_grid_threads_deterministic():
    mean = np.array([0.1, 0.2, -0.3])
    cov = np.diag([0.3, 0.2, 0.5]) + 0.05
    a = explore_hyper(_gauss_eval(mean, cov), mean, -np.linalg.inv(cov), threads=1)
    b = explore_hyper(_gauss_eval(mean, cov), mean, -np.linalg.inv(cov), threads=3)
    assert [p.z for p in a.points] == [p.z for p in b.points]
    assert [p.weight for p in a.points] == [p.weight for p in b.points]


def test_grid_indefinite_falls_back():
    with pytest.warns(RuntimeWarning, match="empirical Bayes"):
        g = explore_hyper(_gauss_eval(np.zeros(2), np.eye(2)), np.zeros(2), np.diag([-1.0, 1.0]))
    assert g.fallback and len(g.points) == 1 and g.points[0].weight == 1.0


# --- mixtures and WAIC ----------------------------------------------------------------------


def test_latent_marginal_examples():
    m, s = latent_marginals([1.0], [[0.3, 1.0]], [[0.04, 0.25]])
    assert np.allclose(m, [0.3, 1.0]) and np.allclose(s, [0.2, 0.5])
    m, s = latent_marginals([0.5, 0.5], [[1.0], [-1.0]], [[0.0], [0.0]])
    assert m[0] == pytest.approx(0.0) and s[0] == pytest.approx(1.0)
    m, s = latent_marginals([1.0, 0.0], [[2.0], [-5.0]], [[0.09], [4.0]])
    assert m[0] == 2.0 and s[0] == pytest.approx(0.3)


def test_mixture_quantile_single_gaussian():
    assert mixture_quantile(0.975, [1.0], [1.0], [2.0]) == pytest.approx(1 + 2 * 1.959963984540054, abs=1e-9)
    assert mixture_quantile(0.5, [0.5, 0.5], [-1.0, 1.0], [0.3, 0.3]) == pytest.approx(0.0, abs=1e-9)


def test_waic_examples():
    assert compute_waic([[-1.0]]) == pytest.approx((2.0, 0.0))
    w, p = compute_waic([[-0.5, -2.0], [-0.5, -2.0]])
    assert p == 0.0 and w == pytest.approx(5.0)
    lpd = np.array([[-1.0, -0.2, -3.0], [-1.5, -0.4, -2.0]])
    lppd = sum(math.log(0.5 * (math.exp(lpd[0, i]) + math.exp(lpd[1, i]))) for i in range(3))
    pe = sum(((lpd[0, i] - lpd[1, i]) / 2) ** 2 for i in range(3))
    w, p = compute_waic(lpd)
    assert p == pytest.approx(pe, abs=1e-12) and w == pytest.approx(-2 * (lppd - pe), abs=1e-12)
    with pytest.raises(ValidationError):
        compute_waic([[-np.inf]])


# --- Bernoulli toy against quadrature --------------------------------------------------------


def test_bernoulli_toy_marginal_within_two_percent():
    spec, counts, hits, prob = bernoulli_toy()
    for s in (0.4, 1.0, 2.0, 8.0):
        lap = prob.evaluate(np.array([math.log(s)]))[0] - log_prior_hyper(HyperParams(sigma_f=s), names=prob.names)
        exact = quadrature_log_marginal(counts, hits, s)
        assert abs(math.expm1(lap - exact)) < 0.02


def test_bernoulli_toy_posterior_mean_within_two_percent():
    spec, counts, hits, prob = bernoulli_toy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fitted = fit_submodel(prob)
    truth = bernoulli_toy_truth(counts, hits)
    assert fitted.hyper["sigma_f"].mean == pytest.approx(truth, rel=0.02)


def test_prior_terms_match_generic_builders():
    from surveyfusion.gmrf import Ar1Params, MaternParams, ar1_precision, kronecker_precision, spde_precision
    from surveyfusion.mesh import fem_matrices, regular_mesh

    mesh = regular_mesh(0, 4, 0, 4, 1.0)
    spec = HurdleModelSpec(("S0",), ("G0", "G1"), (1, 2, 3), "spatiotemporal", mesh=mesh)
    h = HyperParams(sigma_f=0.7, sigma_omega=1.3, rho=0.4, kappa=0.9)
    Q = PriorTerms(spec).precision(h).toarray()
    tau = 1 / (math.sqrt(4 * math.pi) * h.kappa * h.sigma_omega)
    qs = spde_precision(fem_matrices(mesh), MaternParams(h.kappa, tau))
    qst = kronecker_precision(ar1_precision(Ar1Params(h.rho, 3)), qs).toarray()
    lay = spec.layout()
    assert np.allclose(Q[lay.field, lay.field], qst, rtol=1e-12, atol=1e-12)
    assert np.allclose(np.diag(Q)[lay.gear], 1 / 0.49)
