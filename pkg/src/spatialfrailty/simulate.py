"""Data generation for the simulation studies (models M1-M4).

M1: spatial frailties with the exp kernel; M2: spatial frailties with the
pol kernel; M3: no frailty; M4: independent frailties.  Censoring times are
exponential with a rate calibrated against pilot draws of the uncensored
event-time distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset, ModelParams, PiecewiseBaseline
from .spatial import build_distance_matrix, correlation_matrix

MODELS = ("M1", "M2", "M3", "M4")

# Side of the square (km) on which synthetic locations are drawn.  Chosen so
# that exp-kernel correlations at rho = 1 span a wide range (the grouped
# malaria coordinates are similarly concentrated); see scripts/run_table1.py.
DEFAULT_REGION_KM = 2.0

DEFAULT_CUTPOINTS = (0.0, 0.2, 0.8)
DEFAULT_HAZARDS = (2.0, 0.5, 1.0)
DEFAULT_BETA = (2.0, 3.0)
DEFAULT_SIGMA2 = 1.5
DEFAULT_RHO = 1.0

_MODEL_KERNELS = {"M1": "exp", "M2": "pol", "M3": "exp", "M4": "identity"}


def default_true_params(model="M1"):
    """The generating parameter values of the simulation studies."""
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    return ModelParams(PiecewiseBaseline(DEFAULT_CUTPOINTS, DEFAULT_HAZARDS),
                       DEFAULT_BETA, DEFAULT_SIGMA2, DEFAULT_RHO,
                       kernel=_MODEL_KERNELS[model])


def draw_frailties(sigma2, factor, rng):
    """b = sigma * L * eps for the factor's lower-triangular L."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    eps = rng.standard_normal(factor.n_groups)
    return np.sqrt(sigma2) * (factor.chol @ eps)


def draw_event_times(baseline, eta, rng):
    """Inverse-transform draws: T = H0^{-1}(-log(U) * exp(-eta)).

    The piecewise-linear cumulative hazard is inverted exactly; the last
    interval has positive hazard so the inversion always terminates.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    u = rng.random(eta.shape[0])
    return invert_cumulative_hazard(baseline, -np.log(u) * np.exp(-eta))


def draw_event_time(baseline, eta, rng):
    return float(draw_event_times(baseline, np.atleast_1d(eta)[:1], rng)[0])


def invert_cumulative_hazard(baseline, target):
    """Exact inverse of H0 at nonnegative targets."""
    target = np.atleast_1d(np.asarray(target, dtype=float))
    cuts = baseline.cutpoints
    widths = np.diff(cuts)
    edges = np.concatenate([[0.0], np.cumsum(baseline.hazards[:-1] * widths)])
    idx = np.searchsorted(edges, target, side="right") - 1
    return cuts[idx] + (target - edges[idx]) / baseline.hazards[idx]


def calibrate_censoring(target, draw_times, rng, n_pilot=10_000, max_steps=60, tol=0.01):
    """Exponential censoring rate giving the requested censoring proportion.

    draw_times(n, rng) must return n uncensored event times from the
    scenario.  Bisection runs on the pilot-averaged censoring probability
    mean_i(1 - exp(-rate * T_i)) until it is within tol of the target.
    """
    if not 0.0 <= target < 1.0:
        raise ValueError("target censoring must lie in [0, 1)")
    if target == 0.0:
        return 0.0
    times = np.asarray(draw_times(n_pilot, rng), dtype=float)

    def frac(rate):
        return float(np.mean(-np.expm1(-rate * times)))

    lo, hi = 0.0, 1.0
    steps = 0
    while frac(hi) < target:
        hi *= 2.0
        steps += 1
        if steps > max_steps:
            raise RuntimeError(f"censoring target {target} not reachable")
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        value = frac(mid)
        if abs(value - target) <= tol:
            return mid
        if value < target:
            lo = mid
        else:
            hi = mid
    raise RuntimeError(f"censoring calibration did not settle within {max_steps} bisection steps")


def sample_locations(n, rng, region_km=DEFAULT_REGION_KM, n_clusters=None, cluster_sd_km=0.1):
    """Synthetic (lon, lat) pairs covering roughly a region_km square.

    Uniform by default; with n_clusters the points scatter around uniform
    cluster centers, mimicking households grouped in villages.  Coordinates
    sit near the equator so a degree is a fixed 111.19 km in both axes.
    """
    deg_per_km = 1.0 / 111.19492664455873
    if n_clusters is None:
        xy = rng.uniform(0.0, region_km, size=(n, 2))
    else:
        centers = rng.uniform(0.0, region_km, size=(n_clusters, 2))
        which = rng.integers(0, n_clusters, size=n)
        xy = centers[which] + cluster_sd_km * rng.standard_normal((n, 2))
    return xy * deg_per_km


@dataclass
class SimulatedData:
    """A generated dataset plus everything needed to refit or audit it."""

    dataset: Dataset
    locations: np.ndarray
    distances: np.ndarray
    frailties: np.ndarray
    event_times: np.ndarray
    censoring_rate: float
    params: ModelParams
    model: str


def _scenario_times(model, params, n, distances, groups, rng, factor=None):
    """Covariates, frailties and uncensored times for one replication."""
    p = params.beta.shape[0]
    covariates = rng.binomial(1, 0.5, size=(n, p)).astype(float)
    n_groups = int(groups.max()) + 1 if groups.size else 0
    if model == "M3":
        frailties = np.zeros(n_groups)
    elif model == "M4":
        frailties = np.sqrt(params.sigma2) * rng.standard_normal(n_groups)
    else:
        if factor is None:
            factor = correlation_matrix(distances, params.rho, params.kernel)
        frailties = draw_frailties(params.sigma2, factor, rng)
    eta = covariates @ params.beta + frailties[groups]
    times = draw_event_times(params.baseline, eta, rng)
    return covariates, frailties, times


def generate_scenario(model, n, params=None, censoring=0.0, rng=None,
                      region_km=DEFAULT_REGION_KM, locations=None, distances=None,
                      groups=None, censoring_rate=None):
    """Generate one dataset under the requested model.

    Locations default to fresh uniform draws (every subject its own group);
    pass locations/groups to reuse a roster, or distances to skip coordinate
    handling entirely.  censoring is the target proportion; censoring_rate
    short-circuits calibration when the rate is already known.
    """
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    rng = np.random.default_rng(rng)
    params = params if params is not None else default_true_params(model)
    if groups is None:
        groups = np.arange(n)
    else:
        groups = np.asarray(groups, dtype=int)
        if groups.shape[0] != n:
            raise ValueError("groups must have one entry per subject")
    n_groups = int(groups.max()) + 1
    if distances is None and model not in ("M4",):
        if locations is None:
            locations = sample_locations(n_groups, rng, region_km=region_km)
        distances = build_distance_matrix(locations)
    factor = None
    if model in ("M1", "M2"):
        factor = correlation_matrix(distances, params.rho, params.kernel)

    covariates, frailties, event_times = _scenario_times(
        model, params, n, distances, groups, rng, factor)

    if censoring_rate is None:
        def pilot(n_pilot, prng):
            out = []
            total = 0
            while total < n_pilot:
                _, _, t = _scenario_times(model, params, n, distances, groups, prng, factor)
                out.append(t)
                total += t.shape[0]
            return np.concatenate(out)[:n_pilot]

        censoring_rate = calibrate_censoring(censoring, pilot, rng)
    if censoring_rate > 0.0:
        censor_times = rng.exponential(1.0 / censoring_rate, size=n)
        observed = np.minimum(event_times, censor_times)
        status = (event_times <= censor_times).astype(int)
    else:
        observed = event_times.copy()
        status = np.ones(n, dtype=int)

    dataset = Dataset(observed, status, covariates, groups, n_groups)
    return SimulatedData(dataset, locations, distances, frailties, event_times,
                         censoring_rate, params, model)


def malaria_shape_roster(rng, n_subjects=2000):
    """Group sizes mimicking the duplicate-coordinate clusters of the malaria
    study: sizes 1..11, heavily skewed toward 1-3, about 1200 groups for
    about 2000 subjects.  Returns the subject->group map."""
    sizes = []
    total = 0
    # proportions roughly matching 760/364/89 groups of sizes 1/2/3 plus a
    # small tail of bigger households
    pool = [1] * 760 + [2] * 364 + [3] * 89
    tail = list(range(4, 12))
    i = 0
    while total < n_subjects - 11:
        if i < len(pool):
            size = pool[i]
            i += 1
        else:
            size = tail[int(rng.integers(0, len(tail)))]
        sizes.append(size)
        total += size
    if total < n_subjects:
        sizes.append(n_subjects - total)
    sizes = np.asarray(sizes)
    rng.shuffle(sizes)
    return np.repeat(np.arange(sizes.shape[0]), sizes)
