"""Core data types, hazard/likelihood evaluation and analytic derivatives.

The model: conditional hazard h_i(t | b) = h0(t) * exp(z_i' beta + b_{g(i)})
with a piecewise-constant baseline h0 and a latent frailty vector
b ~ N(0, sigma2 * Sigma(rho)) over the G distinct-location groups.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError

KERNELS = ("exp", "pol", "identity")


def _as_1d_float(x, name):
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Right-censored survival data with a frailty-group mapping.

    times: observed times X_i = min(T_i, C_i), nonnegative.
    status: event indicators in {0, 1}.
    covariates: (n, p) design matrix (p may be 0).
    groups: integer group index per subject, covering 0..n_groups-1.
    """

    times: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    groups: np.ndarray
    n_groups: int

    def __post_init__(self):
        times = _as_1d_float(self.times, "times")
        status = np.atleast_1d(np.asarray(self.status, dtype=int))
        groups = np.atleast_1d(np.asarray(self.groups, dtype=int))
        covs = np.asarray(self.covariates, dtype=float)
        if covs.ndim == 1:
            covs = covs[:, None]
        n = times.shape[0]
        if covs.shape[0] != n or status.shape[0] != n or groups.shape[0] != n:
            raise ValueError("times, status, covariates and groups must share length")
        if np.any(times < 0) or not np.all(np.isfinite(times)):
            raise ValueError("times must be finite and nonnegative")
        if not np.all((status == 0) | (status == 1)):
            raise ValueError("status must be 0 or 1")
        present = np.unique(groups)
        if self.n_groups > n:
            raise ValueError("n_groups cannot exceed the number of subjects")
        if present.size != self.n_groups or present[0] != 0 or present[-1] != self.n_groups - 1:
            raise ValueError("group indices must cover 0..n_groups-1 with no empty group")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "groups", groups)

    @property
    def n(self):
        return self.times.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    def subset(self, keep):
        """Row subset with groups relabelled compactly (first-appearance order)."""
        keep = np.asarray(keep)
        g = self.groups[keep]
        uniq, inv = np.unique(g, return_inverse=True)
        order = np.argsort([np.argmax(g == u) for u in uniq], kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(uniq.size)
        return Dataset(self.times[keep], self.status[keep], self.covariates[keep],
                       rank[inv], uniq.size)


@dataclass(frozen=True)
class PiecewiseBaseline:
    """Piecewise-constant baseline hazard.

    cutpoints: (m,) with cutpoints[0] == 0, strictly increasing; the last
    interval extends to +inf.  hazards: (m,) positive interval hazards.
    Interval lookup is right-continuous: t == cutpoints[j] belongs to
    interval j.
    """

    cutpoints: np.ndarray
    hazards: np.ndarray

    def __post_init__(self):
        cuts = _as_1d_float(self.cutpoints, "cutpoints")
        haz = _as_1d_float(self.hazards, "hazards")
        if cuts.shape != haz.shape:
            raise ValueError("cutpoints and hazards must have equal length")
        if cuts[0] != 0.0 or np.any(np.diff(cuts) <= 0):
            raise ValueError("cutpoints must start at 0 and be strictly increasing")
        if np.any(haz <= 0) or not np.all(np.isfinite(haz)):
            raise ValueError("hazards must be positive and finite")
        object.__setattr__(self, "cutpoints", cuts)
        object.__setattr__(self, "hazards", haz)

    @property
    def n_intervals(self):
        return self.hazards.shape[0]

    def interval_index(self, t):
        return np.searchsorted(self.cutpoints, t, side="right") - 1

    def hazard(self, t):
        return self.hazards[self.interval_index(t)]

    def exposure(self, t):
        """Time at risk spent in each interval: (len(t), m) matrix.

        Row i, column m holds (tau_m - tau_{m-1}) if t_i >= tau_m,
        (t_i - tau_{m-1}) if t_i falls in interval m, else 0.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        upper = np.append(self.cutpoints[1:], np.inf)
        return np.maximum(0.0, np.minimum(t[:, None], upper[None, :]) - self.cutpoints[None, :])

    def cumulative_hazard(self, t):
        scalar = np.isscalar(t) or np.ndim(t) == 0
        out = self.exposure(t) @ self.hazards
        return float(out[0]) if scalar else out


@dataclass(frozen=True)
class ModelParams:
    """Full parameter vector: baseline, regression, frailty variance and range."""

    baseline: PiecewiseBaseline
    beta: np.ndarray
    sigma2: float
    rho: float
    kernel: str = "exp"

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.kernel != "identity" and self.rho <= 0:
            raise ValueError("rho must be positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def has_rho(self):
        return self.kernel != "identity"

    def labels(self):
        m = self.baseline.n_intervals
        p = self.beta.shape[0]
        out = [f"h_{j + 1}" for j in range(m)] + [f"beta_{j + 1}" for j in range(p)]
        out.append("sigma2")
        if self.has_rho:
            out.append("rho")
        return out

    def flatten(self):
        tail = [self.sigma2, self.rho] if self.has_rho else [self.sigma2]
        return np.concatenate([self.baseline.hazards, self.beta, tail])

    def replace(self, **kw):
        return replace(self, **kw)


def hazard_at(params, t, z, b_i):
    """Conditional hazard h0(t) * exp(z' beta + b_i) at a single time."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return float(params.baseline.hazard(t) * np.exp(z @ params.beta + b_i))


def cumulative_hazard(baseline, t):
    """Integral of the baseline hazard from 0 to t."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    return baseline.cumulative_hazard(t)


def gaussian_log_density(b, sigma2, corr):
    """Log density of N(0, sigma2 * Sigma) using the cached factorization."""
    g = b.shape[0]
    quad = float(b @ corr.solve(b))
    return -0.5 * (g * np.log(2.0 * np.pi * sigma2) + corr.log_det + quad / sigma2)


def conditional_log_likelihood(params, data, b):
    """Data part of the complete log-likelihood (frailty prior excluded)."""
    baseline = params.baseline
    lin = data.covariates @ params.beta + b[data.groups]
    cum = baseline.cumulative_hazard(data.times)
    log_h0 = np.log(baseline.hazard(data.times))
    return float(np.sum(data.status * (log_h0 + lin) - cum * np.exp(lin)))


def complete_log_likelihood(params, data, b, corr):
    """Joint log-likelihood of observations and frailties."""
    out = conditional_log_likelihood(params, data, b) + gaussian_log_density(
        b, params.sigma2, corr)
    if not np.isfinite(out):
        raise NumericalError("complete log-likelihood is not finite")
    return out


@dataclass(frozen=True)
class DerivativeBundle:
    """First and second/cross derivatives of the complete log-likelihood.

    Parameter order is h_1..h_m, beta_1..beta_p, sigma2 and, for spatial
    kernels, rho.  Cross blocks that vanish identically (h-h off-diagonal,
    beta-sigma2, beta-rho, h-sigma2, h-rho) are materialized as zeros when
    the full Hessian is assembled.
    """

    labels: tuple
    grad_hazards: np.ndarray
    grad_beta: np.ndarray
    grad_sigma2: float
    grad_rho: float | None
    hess_hazards: np.ndarray
    hess_beta: np.ndarray
    hess_beta_hazards: np.ndarray
    hess_sigma2: float
    hess_rho: float | None
    hess_rho_sigma2: float | None

    def gradient(self):
        tail = [self.grad_sigma2] if self.grad_rho is None else [self.grad_sigma2, self.grad_rho]
        return np.concatenate([self.grad_hazards, self.grad_beta, tail])

    def hessian(self):
        m = self.grad_hazards.shape[0]
        p = self.grad_beta.shape[0]
        dim = m + p + (1 if self.grad_rho is None else 2)
        out = np.zeros((dim, dim))
        out[:m, :m] = np.diag(self.hess_hazards)
        out[m:m + p, m:m + p] = self.hess_beta
        out[m:m + p, :m] = self.hess_beta_hazards
        out[:m, m:m + p] = self.hess_beta_hazards.T
        out[m + p, m + p] = self.hess_sigma2
        if self.grad_rho is not None:
            out[m + p + 1, m + p + 1] = self.hess_rho
            out[m + p, m + p + 1] = out[m + p + 1, m + p] = self.hess_rho_sigma2
        return out


class CompleteDerivatives:
    """Evaluation context for the complete-data score and Hessian.

    Everything that does not depend on the frailty value is precomputed once,
    so repeated calls to bundle() over MCMC draws are cheap.
    """

    def __init__(self, params, data, corr):
        if params.has_rho and corr.distances is None:
            raise ValueError("spatial kernels need a factor carrying its distance matrix")
        self.params = params
        self.data = data
        self.corr = corr
        baseline = params.baseline
        self.risk = baseline.exposure(data.times)
        self.cum = self.risk @ baseline.hazards
        self.e_lin = np.exp(data.covariates @ params.beta)
        idx = baseline.interval_index(data.times)
        self.event_counts = np.bincount(idx[data.status == 1],
                                        minlength=baseline.n_intervals).astype(float)
        self.precision = corr.inverse
        if params.has_rho:
            from .spatial import correlation_derivatives

            d_sig, d2_sig = correlation_derivatives(corr.distances, params.rho, params.kernel)
            a1 = self.precision @ d_sig
            self.w1 = a1 @ self.precision
            self.w2 = (self.precision @ d2_sig) @ self.precision
            self.w3 = a1 @ self.w1
            self.tr_first = float(np.trace(a1))
            self.tr_second = float(np.sum(self.precision * d2_sig))
            self.tr_sq = float(np.sum(a1 * a1.T))

    def bundle(self, b):
        params, data = self.params, self.data
        g = data.n_groups
        s2 = params.sigma2
        eb = np.exp(b)
        relative = self.e_lin * eb[data.groups]
        weighted = self.cum * relative

        grad_h = self.event_counts / params.baseline.hazards - self.risk.T @ relative
        grad_beta = data.covariates.T @ (data.status - weighted)
        quad = float(b @ self.precision @ b)
        grad_s2 = -g / (2.0 * s2) + quad / (2.0 * s2 * s2)

        hess_h = -self.event_counts / params.baseline.hazards ** 2
        hess_beta = -(data.covariates * weighted[:, None]).T @ data.covariates
        hess_beta_h = -data.covariates.T @ (relative[:, None] * self.risk)
        hess_s2 = g / (2.0 * s2 * s2) - quad / s2 ** 3

        if params.has_rho:
            q1 = float(b @ self.w1 @ b)
            q2 = float(b @ self.w2 @ b)
            q3 = float(b @ self.w3 @ b)
            grad_rho = -0.5 * self.tr_first + q1 / (2.0 * s2)
            hess_rho = -0.5 * (self.tr_second - self.tr_sq) + (q2 - 2.0 * q3) / (2.0 * s2)
            hess_rho_s2 = -q1 / (2.0 * s2 * s2)
        else:
            grad_rho = hess_rho = hess_rho_s2 = None

        return DerivativeBundle(tuple(params.labels()), grad_h, grad_beta, grad_s2,
                                grad_rho, hess_h, hess_beta, hess_beta_h, hess_s2,
                                hess_rho, hess_rho_s2)


def score_and_hessian(params, data, b, corr):
    """Analytic derivatives of complete_log_likelihood at a frailty value."""
    return CompleteDerivatives(params, data, corr).bundle(b)
