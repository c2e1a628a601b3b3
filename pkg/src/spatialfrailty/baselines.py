"""Comparison models: piecewise PH without frailty, univariate frailty and
the grouped-jackknife variance correction for the marginal model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .model import Dataset, ModelParams, PiecewiseBaseline
from .saem import SaemConfig, beta_update, data_surrogate, hazard_update
from . import saem


@dataclass
class PhFit:
    """No-frailty piecewise proportional-hazards estimate."""

    baseline: PiecewiseBaseline
    beta: np.ndarray
    information: np.ndarray
    labels: list
    log_likelihood: float
    converged: bool
    n_rounds: int

    def flatten(self):
        return np.concatenate([self.baseline.hazards, self.beta])


def fit_ph(data, cutpoints, max_rounds=200, tol=1e-8):
    """Alternate closed-form hazards and Newton regression steps.

    This is the smoothed M-step machinery with unit frailty weights, so the
    spatial fit initialized from it shares all conventions.
    """
    cutpoints = np.atleast_1d(np.asarray(cutpoints, dtype=float))
    ones = np.ones(data.n)
    idx = PiecewiseBaseline(cutpoints, np.ones(cutpoints.shape[0])).interval_index(data.times)
    events = np.bincount(idx[data.status == 1], minlength=cutpoints.shape[0])
    if np.any(events == 0):
        warnings.warn(f"intervals {(np.flatnonzero(events == 0) + 1).tolist()} contain "
                      "no events; their hazard estimates are not identified")
    baseline = PiecewiseBaseline(cutpoints, np.maximum(
        events / np.maximum(baseline_exposure_totals(cutpoints, data.times), 1e-300), 1e-6))
    beta = np.zeros(data.p)
    converged = False
    rounds = 0
    prev = np.concatenate([baseline.hazards, beta])
    for rounds in range(1, max_rounds + 1):
        beta = beta_update(data, baseline, beta, ones, max_inner=25)
        baseline = PiecewiseBaseline(cutpoints, hazard_update(data, baseline, beta, ones))
        cur = np.concatenate([baseline.hazards, beta])
        if np.linalg.norm(cur - prev) <= tol * max(np.linalg.norm(prev), 1.0):
            converged = True
            break
        prev = cur
    if not converged:
        raise NumericalError(f"piecewise PH fit did not converge in {max_rounds} rounds")
    labels = [f"h_{j + 1}" for j in range(cutpoints.shape[0])] + \
             [f"beta_{j + 1}" for j in range(data.p)]
    info = _ph_information(data, baseline, beta)
    loglik = data_surrogate(data, baseline, beta, ones)
    return PhFit(baseline, beta, info, labels, loglik, converged, rounds)


def baseline_exposure_totals(cutpoints, times):
    return PiecewiseBaseline(cutpoints, np.ones(len(np.atleast_1d(cutpoints)))).exposure(
        times).sum(axis=0)


def _ph_information(data, baseline, beta):
    """Observed information for (h, beta), i.e. minus the Hessian at b = 0."""
    m = baseline.n_intervals
    risk = baseline.exposure(data.times)
    e_lin = np.exp(data.covariates @ beta)
    cum = risk @ baseline.hazards
    idx = baseline.interval_index(data.times)
    events = np.bincount(idx[data.status == 1], minlength=m).astype(float)
    dim = m + data.p
    info = np.zeros((dim, dim))
    info[:m, :m] = np.diag(events / baseline.hazards ** 2)
    info[m:, m:] = (data.covariates * (cum * e_lin)[:, None]).T @ data.covariates
    cross = data.covariates.T @ (e_lin[:, None] * risk)
    info[m:, :m] = cross
    info[:m, m:] = cross.T
    return info


def fit_univariate_frailty(data, cutpoints, config=None, rng=None, init=None):
    """Independent-frailty model: the spatial fit with an identity kernel,
    one frailty per group and the range update skipped."""
    return saem.fit(data, None, "identity", config=config, init=init,
                    cutpoints=cutpoints, rng=rng)


@dataclass
class JackknifeResult:
    labels: list
    estimates: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    n_clusters: int


def grouped_jackknife(data, cutpoints, clusters):
    """Leave-one-cluster-out variance for the piecewise PH estimates.

    covariance = (n_c - 1)/n_c * sum_c (theta_(-c) - theta_bar)(...)^T over
    the n_c leave-one-out refits.
    """
    clusters = np.asarray(clusters)
    if clusters.shape[0] != data.n:
        raise ValueError("clusters must assign every subject")
    unique = np.unique(clusters)
    if unique.size < 2:
        raise ValueError("grouped jackknife needs at least two clusters")
    full = fit_ph(data, cutpoints)
    leave_out = []
    for c in unique:
        keep = np.flatnonzero(clusters != c)
        try:
            part = fit_ph(data.subset(keep), cutpoints)
        except (NumericalError, ValueError) as e:
            raise NumericalError(f"leave-out fit failed for cluster {c!r}: {e}") from e
        leave_out.append(part.flatten())
    leave_out = np.asarray(leave_out)
    center = leave_out.mean(axis=0)
    resid = leave_out - center
    n_c = unique.size
    cov = (n_c - 1) / n_c * resid.T @ resid
    return JackknifeResult(full.labels, full.flatten(), cov,
                           np.sqrt(np.diag(cov)), n_c)
