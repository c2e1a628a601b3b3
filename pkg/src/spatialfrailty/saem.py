"""Stochastic-approximation EM driver.

One iteration: draw a frailty vector from the block Gibbs kernel, smooth the
sufficient statistics (pairwise products and exponentials of the frailty),
optionally apply the truncation safeguard, then maximize the smoothed
surrogate over the parameters (beta by damped Newton, baseline hazards and
sigma2 in closed form, rho by gradient ascent on log rho).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NotPositiveDefiniteError, NumericalError
from .model import ModelParams, PiecewiseBaseline
from .sampler import BlockGibbsConfig, FrailtyGibbs
from .spatial import correlation_matrix, validate_distance_matrix

_RHO_LOG_BOUNDS = (-15.0, 15.0)


@dataclass(frozen=True)
class SufficientStats:
    """Smoothed statistics: outer products s_bb (G, G) and exponentials s_exp (G,)."""

    s_bb: np.ndarray
    s_exp: np.ndarray

    @classmethod
    def from_frailty(cls, b):
        b = np.asarray(b, dtype=float)
        return cls(np.outer(b, b), np.exp(b))

    def as_vector(self):
        return np.concatenate([self.s_bb.ravel(), self.s_exp])


@dataclass
class SaemConfig:
    """Algorithm settings.

    burn_in is the memoryless phase length K0 (step size 1 up to and
    including K0, then 1/(k - K0)).  The stopping rule requires the relative
    parameter change to stay below tolerance for consecutive_hits iterations.
    Truncation restarts are off by default; they are only needed for the
    convergence theory.
    """

    burn_in: int = 200
    max_iterations: int = 2000
    tolerance: float = 1e-3
    consecutive_hits: int = 3
    rho_step: float = 0.25
    rho_max_inner: int = 10
    newton_max_inner: int = 5
    truncation: bool = False
    truncation_radius: float = 1e3
    truncation_growth: float = 10.0
    gibbs: BlockGibbsConfig = field(default_factory=BlockGibbsConfig)

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.burn_in < self.max_iterations:
            raise ValueError("need 0 < burn_in < max_iterations")


@dataclass
class FitResult:
    """Fitted parameters plus the per-iteration trace.

    trace rows are (iteration, theta..., mean acceptance rate); labels names
    the theta columns.  params always equals the last trace entry.
    """

    params: ModelParams
    labels: list
    trace: np.ndarray
    converged: bool
    n_iterations: int
    acceptance_rates: np.ndarray
    n_restarts: int = 0

    def theta_trace(self):
        return self.trace[:, 1:-1]

    def save_trace_csv(self, path):
        header = ",".join(["iteration"] + self.labels + ["acceptance_rate"])
        np.savetxt(path, self.trace, delimiter=",", header=header, comments="")


def step_size(k, burn_in):
    """Step schedule: 1 during the first burn_in iterations, then 1/(k - burn_in)."""
    if k < 1:
        raise ValueError("iteration index starts at 1")
    return 1.0 if k <= burn_in else 1.0 / (k - burn_in)


def sa_update(stats, b, mu):
    """Stochastic approximation: s + mu * (S(b) - s)."""
    if not 0.0 < mu <= 1.0:
        raise ValueError("mu must lie in (0, 1]")
    b = np.asarray(b, dtype=float)
    return SufficientStats(stats.s_bb + mu * (np.outer(b, b) - stats.s_bb),
                           stats.s_exp + mu * (np.exp(b) - stats.s_exp))


def truncation_check(candidate, previous, kappa, radius_schedule, eps_k):
    """True to accept the candidate statistics, False to restart.

    Restart when the sup-norm leaves the active compact set (radius
    radius_schedule(kappa)) or the RMS move from the previous value exceeds
    eps_k.  RMS rather than plain Euclidean keeps the threshold comparable
    across group counts.
    """
    cand = candidate.as_vector()
    prev = previous.as_vector()
    if np.max(np.abs(cand)) > radius_schedule(kappa):
        return False
    rms = float(np.sqrt(np.mean((cand - prev) ** 2)))
    return rms <= eps_k


def data_surrogate(data, baseline, beta, sexp_subject):
    """Observation part of L(theta, s): event terms minus smoothed exposure."""
    lin = data.covariates @ beta
    cum = baseline.cumulative_hazard(data.times)
    log_h0 = np.log(baseline.hazard(data.times))
    return float(np.sum(data.status * (log_h0 + lin)) - np.sum(cum * np.exp(lin) * sexp_subject))


def prior_surrogate(stats, sigma2, corr):
    """Frailty part of L(theta, s) with b b' replaced by the smoothed s_bb."""
    g = stats.s_exp.shape[0]
    trace = float(np.sum(corr.inverse * stats.s_bb))
    return -0.5 * (g * np.log(2.0 * np.pi * sigma2) + corr.log_det + trace / sigma2)


def surrogate_objective(params, data, stats, corr):
    """Full smoothed objective maximized by the M-step (up to a theta-free constant)."""
    return data_surrogate(data, params.baseline, params.beta, stats.s_exp[data.groups]) + \
        prior_surrogate(stats, params.sigma2, corr)


def beta_update(data, baseline, beta0, sexp_subject, max_inner=5, tol=1e-9):
    """Damped Newton-Raphson on the smoothed regression score."""
    if data.p == 0:
        return beta0.copy()
    z = data.covariates
    cum = baseline.cumulative_hazard(data.times)
    weight0 = cum * sexp_subject

    def objective(beta):
        lin = z @ beta
        if np.max(lin) > 700.0:
            return -np.inf
        return float(np.sum(data.status * lin) - np.sum(weight0 * np.exp(lin)))

    beta = beta0.copy()
    f_cur = objective(beta)
    for _ in range(max_inner):
        w = weight0 * np.exp(z @ beta)
        grad = z.T @ (data.status - w)
        if np.max(np.abs(grad)) < tol:
            break
        hess = (z * w[:, None]).T @ z
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as e:
            raise NumericalError("singular Hessian in the regression update") from e
        scale = 1.0
        for _ in range(40):
            f_new = objective(beta + scale * step)
            if np.isfinite(f_new) and f_new >= f_cur:
                beta = beta + scale * step
                f_cur = f_new
                break
            scale *= 0.5
        else:
            raise NumericalError("regression Newton update failed to improve")
    return beta


def hazard_update(data, baseline_prev, beta, sexp_subject):
    """Closed-form baseline update; intervals without events or exposure keep
    their previous value (a warning flags them)."""
    risk = baseline_prev.exposure(data.times)
    denom = risk.T @ (np.exp(data.covariates @ beta) * sexp_subject)
    idx = baseline_prev.interval_index(data.times)
    events = np.bincount(idx[data.status == 1], minlength=baseline_prev.n_intervals).astype(float)
    h = baseline_prev.hazards.copy()
    ok = (denom > 0) & (events > 0)
    h[ok] = events[ok] / denom[ok]
    if not np.all(ok):
        bad = np.flatnonzero(~ok) + 1
        warnings.warn(f"baseline intervals {bad.tolist()} have no events or no "
                      "risk exposure; keeping previous hazard values")
    return h


def sigma2_update(stats, corr):
    """Closed form: trace(Sigma^{-1} s_bb) / G at the previous rho."""
    g = stats.s_exp.shape[0]
    return max(float(np.sum(corr.inverse * stats.s_bb)) / g, 1e-12)


def _rho_objective(factor, stats, sigma2):
    trace = float(np.sum(factor.solve(stats.s_bb).diagonal()))
    return -0.5 * (factor.log_det + trace / sigma2)


def _rho_derivatives(factor, stats, sigma2):
    """Objective plus first/second derivative in lambda = log rho."""
    from .spatial import correlation_derivatives

    d_sig, d2_sig = correlation_derivatives(factor.distances, factor.rho, factor.kernel)
    inv = factor.inverse
    a = inv @ d_sig
    m = inv @ stats.s_bb
    a2 = inv @ d2_sig
    aa = a @ a
    value = -0.5 * (factor.log_det + float(np.trace(m)) / sigma2)
    d1 = -0.5 * float(np.trace(a)) + float(np.sum(a * m.T)) / (2.0 * sigma2)
    d2 = -0.5 * (float(np.trace(a2)) - float(np.sum(a * a.T))) + \
        (float(np.sum(a2 * m.T)) - 2.0 * float(np.sum(aa * m.T))) / (2.0 * sigma2)
    rho = factor.rho
    grad_lam = rho * d1
    hess_lam = grad_lam + rho * rho * d2
    return value, grad_lam, hess_lam


def rho_update(stats, sigma2, corr, distances, kernel, step0=0.25, max_inner=10):
    """Ascent on log rho for the smoothed range objective.

    Maximizes -log det Sigma(rho)/2 - trace(Sigma^{-1} s_bb)/(2 sigma2) using
    the analytic first derivative, a curvature-scaled step when the local
    second derivative is negative (plain step0 otherwise) and backtracking
    halving on objective decrease.  Factorization failures at a candidate rho
    reject the step.  Returns (rho, factor at rho, last accepted step).
    """
    factor = corr
    lam = np.log(factor.rho)
    f_cur, grad, hess = _rho_derivatives(factor, stats, sigma2)
    scale = max(abs(f_cur), 1.0)
    step = step0
    for _ in range(max_inner):
        if abs(grad) < 1e-9 * scale:
            break
        if hess < 0:
            delta = np.clip(-grad / hess, -1.0, 1.0)
        else:
            delta = np.sign(grad) * step
        moved = False
        for _ in range(30):
            lam_new = np.clip(lam + delta, *_RHO_LOG_BOUNDS)
            if lam_new == lam:
                break
            try:
                trial = correlation_matrix(distances, float(np.exp(lam_new)), kernel)
                f_new = _rho_objective(trial, stats, sigma2)
            except NotPositiveDefiniteError:
                f_new = -np.inf
            if np.isfinite(f_new) and f_new >= f_cur:
                lam, factor = lam_new, trial
                step = min(max(abs(delta), 1e-3), 10.0)
                moved = True
                break
            delta *= 0.5
        if not moved:
            break
        improvement = f_new - f_cur
        f_cur, grad, hess = _rho_derivatives(factor, stats, sigma2)
        if improvement < 1e-10 * scale:
            break
    return factor.rho, factor, step


def _maximize(stats, data, params, distances, config, corr, rho_step=None):
    """One M-step cycle (beta, then hazards, then sigma2, then rho)."""
    rho_step = config.rho_step if rho_step is None else rho_step
    sexp_subject = stats.s_exp[data.groups]
    beta = beta_update(data, params.baseline, params.beta, sexp_subject,
                       max_inner=config.newton_max_inner)
    hazards = hazard_update(data, params.baseline, beta, sexp_subject)
    baseline = PiecewiseBaseline(params.baseline.cutpoints, hazards)
    sigma2 = sigma2_update(stats, corr)
    if params.has_rho:
        rho, factor, step = rho_update(stats, sigma2, corr, distances, params.kernel,
                                       step0=rho_step, max_inner=config.rho_max_inner)
    else:
        rho, factor, step = params.rho, corr, rho_step
    new = ModelParams(baseline, beta, sigma2, rho, params.kernel)
    return new, factor, step


def m_step(stats, data, params_prev, distances=None, config=None, corr=None):
    """Maximization step of the smoothed surrogate; returns updated parameters."""
    config = config or SaemConfig()
    if np.any(stats.s_exp <= 0):
        raise ValueError("smoothed exponential statistics must be positive")
    if corr is None:
        corr = correlation_matrix(distances, params_prev.rho, params_prev.kernel,
                                  n_groups=data.n_groups)
    params, _, _ = _maximize(stats, data, params_prev, distances, config, corr)
    return params


def fit(data, distances, kernel, config=None, init=None, cutpoints=None, rng=None):
    """Run the full algorithm and return a FitResult.

    init may be omitted when cutpoints are given, in which case the baseline
    and regression start from a no-frailty piecewise proportional-hazards fit
    and (sigma2, rho) start at (1, 1).
    """
    config = config or SaemConfig()
    rng = np.random.default_rng(rng)
    if kernel != "identity":
        distances = validate_distance_matrix(distances)
        if distances.shape[0] != data.n_groups:
            raise ValueError("distance matrix size must equal the number of groups")
    if init is None:
        if cutpoints is None:
            raise ValueError("provide either init parameters or baseline cutpoints")
        from .baselines import fit_ph

        ph = fit_ph(data, cutpoints)
        init = ModelParams(ph.baseline, ph.beta, 1.0, 1.0, kernel)
    params = init if init.kernel == kernel else init.replace(kernel=kernel)

    corr = correlation_matrix(distances, params.rho, kernel, n_groups=data.n_groups)
    # Start the chain from a (bounded) prior draw: a zero start makes the
    # first smoothed s_bb vanish and collapses the variance update.
    b0 = np.clip(np.sqrt(params.sigma2) * (corr.chol @ rng.standard_normal(data.n_groups)),
                 -10.0, 10.0)
    gibbs = FrailtyGibbs(data, params, corr, config.gibbs, b0=b0)
    stats = SufficientStats.from_frailty(gibbs.state.b)
    labels = params.labels()
    trace = np.empty((config.max_iterations, len(labels) + 2))
    theta_prev = params.flatten()
    rho_step = config.rho_step
    hits = 0
    kappa = 0
    restarts = 0
    converged = False
    n_done = 0

    def radius(q):
        return config.truncation_radius * config.truncation_growth ** q

    for k in range(1, config.max_iterations + 1):
        try:
            for _ in range(config.gibbs.sweeps_per_iteration):
                b = gibbs.sweep(rng)
            rates = gibbs.state.acceptance_rates()
            if k <= config.burn_in:
                gibbs.adapt()
            candidate = sa_update(stats, b, step_size(k, config.burn_in))
            if config.truncation and not truncation_check(
                    candidate, stats, kappa, radius, 10.0 / np.sqrt(k)):
                kappa += 1
                restarts += 1
                stats = SufficientStats.from_frailty(np.zeros(data.n_groups))
                bounded = np.clip(
                    np.sqrt(params.sigma2) * (corr.chol @ rng.standard_normal(data.n_groups)),
                    -10.0, 10.0)
                gibbs.state.b[:] = bounded
                trace[n_done] = [k, *theta_prev, np.nan]
                n_done += 1
                hits = 0
                continue
            stats = candidate
            params_new, corr_new, rho_step = _maximize(
                stats, data, params, distances, config, corr, rho_step=rho_step)
            gibbs.set_params(params_new, corr_new)
        except NumericalError as e:
            raise NumericalError(f"fit failed at iteration {k}: {e}") from e
        theta = params_new.flatten()
        trace[n_done] = [k, *theta, float(np.nanmean(rates))]
        n_done += 1
        denom = max(float(np.linalg.norm(theta_prev)), 1e-300)
        rel = float(np.linalg.norm(theta - theta_prev)) / denom
        hits = hits + 1 if rel < config.tolerance else 0
        params, corr, theta_prev = params_new, corr_new, theta
        if hits >= config.consecutive_hits:
            converged = True
            break

    return FitResult(params, labels, trace[:n_done].copy(), converged, n_done,
                     gibbs.state.acceptance_rates(), restarts)
