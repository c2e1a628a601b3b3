"""Marginal likelihood, observed Fisher information and test helpers.

The marginal likelihood is a Monte Carlo average of the conditional
likelihood over prior frailty draws, combined in log-sum-exp form.  The
observed information follows Louis's missing-information principle using
post-burn-in draws of the frailty chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .errors import NumericalError
from .model import CompleteDerivatives
from .sampler import FrailtyGibbs
from .spatial import correlation_matrix


def _conditional_terms(params, data):
    """Per-group event counts v and exposure weights w plus the b-free constant."""
    baseline = params.baseline
    e_lin = np.exp(data.covariates @ params.beta)
    cum = baseline.cumulative_hazard(data.times)
    v = np.bincount(data.groups, weights=data.status, minlength=data.n_groups)
    w = np.bincount(data.groups, weights=cum * e_lin, minlength=data.n_groups)
    const = float(np.sum(data.status * (np.log(baseline.hazard(data.times))
                                        + data.covariates @ params.beta)))
    return v, w, const


def marginal_log_likelihood_mc(params, data, distances, n_draws, rng=None, chunk=4096):
    """Monte Carlo marginal log-likelihood and its delta-method standard error.

    Draws b_c ~ N(0, sigma2 * Sigma(rho)) via the Cholesky factor, averages
    the conditional likelihood in log-sum-exp form with a fixed reduction
    order, and returns (log of the average, MC standard error of the log).
    """
    if n_draws < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(rng)
    factor = correlation_matrix(distances, params.rho, params.kernel,
                                n_groups=data.n_groups)
    v, w, const = _conditional_terms(params, data)
    scale = np.sqrt(params.sigma2)
    logs = np.empty(n_draws)
    done = 0
    while done < n_draws:
        size = min(chunk, n_draws - done)
        eps = rng.standard_normal((size, factor.n_groups))
        b = scale * (eps @ factor.chol.T)
        logs[done:done + size] = b @ v - np.exp(b) @ w
        done += size
    logs += const
    peak = float(np.max(logs))
    if not np.isfinite(peak):
        raise NumericalError(f"all marginal-likelihood draws underflowed "
                             f"(max log-weight {peak})")
    u = np.exp(logs - peak)
    mean_u = float(np.mean(u))
    if mean_u <= 0.0 or not np.isfinite(mean_u):
        raise NumericalError(f"all marginal-likelihood draws underflowed "
                             f"(max log-weight {peak})")
    estimate = peak + float(np.log(mean_u))
    std_err = float(np.std(u, ddof=1) / (np.sqrt(n_draws) * mean_u)) if n_draws > 1 else np.inf
    return estimate, std_err


def posterior_chain(params, data, distances, n_burn, n_draws, gibbs_config=None,
                    rng=None, init_b=None):
    """Frailty draws from the posterior at fixed parameters (one per sweep)."""
    from .sampler import BlockGibbsConfig

    rng = np.random.default_rng(rng)
    factor = correlation_matrix(distances, params.rho, params.kernel,
                                n_groups=data.n_groups)
    config = gibbs_config or BlockGibbsConfig()
    gibbs = FrailtyGibbs(data, params, factor, config, b0=init_b)
    for _ in range(n_burn):
        gibbs.sweep(rng)
        gibbs.adapt()
    return gibbs.run(n_draws, rng, collect=n_draws)


@dataclass
class FisherMatrix:
    """Observed information estimate with its parameter ordering."""

    labels: list
    matrix: np.ndarray
    n_draws: int


def fisher_information(params, data, distances, draws, require_pd=True):
    """Louis-principle observed information from posterior frailty draws.

    Three Monte Carlo terms: minus the averaged complete-data Hessian, minus
    the averaged outer product of complete-data scores, plus the outer
    product of the averaged score.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] < 2:
        raise ValueError("need at least two frailty draws")
    factor = correlation_matrix(distances, params.rho, params.kernel,
                                n_groups=data.n_groups)
    context = CompleteDerivatives(params, data, factor)
    n = draws.shape[0]
    dim = len(params.labels())
    mean_hess = np.zeros((dim, dim))
    mean_outer = np.zeros((dim, dim))
    mean_score = np.zeros(dim)
    for b in draws:
        bundle = context.bundle(b)
        score = bundle.gradient()
        mean_hess += bundle.hessian()
        mean_outer += np.outer(score, score)
        mean_score += score
    mean_hess /= n
    mean_outer /= n
    mean_score /= n
    matrix = -mean_hess - mean_outer + np.outer(mean_score, mean_score)
    matrix = 0.5 * (matrix + matrix.T)
    if require_pd:
        eigmin = float(np.min(np.linalg.eigvalsh(matrix)))
        if eigmin <= 0.0:
            raise NumericalError(
                f"observed information is not positive definite "
                f"(smallest eigenvalue {eigmin:.3e}); increase the chain length "
                "or check convergence")
    return FisherMatrix(params.labels(), matrix, n)


@dataclass
class ParameterSummary:
    """Estimates with standard errors and 95% confidence intervals.

    hazard_ratio_* rows cover the regression coefficients only, transformed
    by exponentiating the CI endpoints.
    """

    labels: list
    estimates: np.ndarray
    std_errors: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    hr_labels: list
    hazard_ratios: np.ndarray
    hr_lower: np.ndarray
    hr_upper: np.ndarray


def standard_errors(fisher, params, z_value=1.959963984540054):
    """Invert the information matrix into SEs, CIs and hazard ratios."""
    try:
        cov = np.linalg.inv(fisher.matrix)
    except np.linalg.LinAlgError as e:
        raise NumericalError("Fisher information matrix is singular") from e
    variances = np.diag(cov)
    if np.any(variances < 0):
        raise NumericalError("Fisher inverse has negative diagonal entries")
    ses = np.sqrt(variances)
    estimates = params.flatten()
    lower = estimates - z_value * ses
    upper = estimates + z_value * ses
    beta_idx = [i for i, lab in enumerate(fisher.labels) if lab.startswith("beta_")]
    hr_labels = [fisher.labels[i] for i in beta_idx]
    hr = np.exp(estimates[beta_idx])
    hr_lo = np.exp(lower[beta_idx])
    hr_hi = np.exp(upper[beta_idx])
    return ParameterSummary(list(fisher.labels), estimates, ses, lower, upper,
                            hr_labels, hr, hr_lo, hr_hi)


def lrt_boundary_pvalue(loglik_full, loglik_null, slack=1e-6):
    """Boundary likelihood-ratio test against a 50:50 mix of a point mass at
    zero and chi-square(1).

    Returns (statistic, p-value) with the statistic clamped at zero; a full
    log-likelihood below the null one by more than the numerical slack is an
    error.
    """
    statistic = 2.0 * (loglik_full - loglik_null)
    if statistic < -2.0 * slack:
        raise ValueError("full model log-likelihood is below the null model's")
    statistic = max(statistic, 0.0)
    p_value = 1.0 if statistic == 0.0 else 0.5 * float(chi2.sf(statistic, 1))
    return statistic, p_value
