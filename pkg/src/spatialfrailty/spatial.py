"""Distances, identical-location grouping and correlation kernels.

Distances are in kilometers, so for the "exp" kernel rho has units 1/km
while for "pol" it is a dimensionless exponent.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NotPositiveDefiniteError

EARTH_RADIUS_KM = 6371.0

# Escalating shrink-toward-identity applied when a factorization fails.
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in kilometers, Earth radius 6371.0 km."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=float))
                              for v in (lon1, lat1, lon2, lat2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def group_identical_locations(coordinates, tolerance_km=0.0):
    """Map subjects sharing a location to a common frailty group.

    With the default zero tolerance, only bitwise-equal (lon, lat) pairs are
    merged.  A positive tolerance merges a subject into the first group whose
    representative lies within tolerance_km (great-circle).

    Returns (groups, locations): integer group per subject in first-appearance
    order, and the (G, 2) array of one representative coordinate per group.
    """
    coords = np.asarray(coordinates, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coordinates must be an (n, 2) array of (lon, lat)")
    groups = np.empty(coords.shape[0], dtype=int)
    reps = []
    if tolerance_km == 0.0:
        seen = {}
        for i, (lon, lat) in enumerate(coords):
            key = (lon, lat)
            if key not in seen:
                seen[key] = len(reps)
                reps.append((lon, lat))
            groups[i] = seen[key]
    else:
        for i, (lon, lat) in enumerate(coords):
            assigned = -1
            for j, (rlon, rlat) in enumerate(reps):
                if haversine_km(lon, lat, rlon, rlat) <= tolerance_km:
                    assigned = j
                    break
            if assigned < 0:
                assigned = len(reps)
                reps.append((lon, lat))
            groups[i] = assigned
    return groups, np.asarray(reps, dtype=float)


def build_distance_matrix(locations):
    """Great-circle distance matrix over deduplicated locations.

    Locations must already be pairwise distinct (run
    group_identical_locations first); duplicates are rejected because they
    would make the correlation matrix singular.
    """
    locs = np.asarray(locations, dtype=float)
    if locs.ndim != 2 or locs.shape[1] != 2:
        raise ValueError("locations must be an (G, 2) array of (lon, lat)")
    if not np.all(np.isfinite(locs)):
        raise ValueError("coordinates must be finite")
    lon, lat = locs[:, 0], locs[:, 1]
    if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0):
        raise ValueError("longitude must lie in [-180, 180] and latitude in [-90, 90]")
    d = haversine_km(lon[:, None], lat[:, None], lon[None, :], lat[None, :])
    np.fill_diagonal(d, 0.0)
    d = 0.5 * (d + d.T)
    off = ~np.eye(locs.shape[0], dtype=bool)
    if np.any(d[off] <= 0.0):
        raise ValueError("duplicate locations found; group identical locations first")
    return d


def validate_distance_matrix(d):
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    if not np.all(np.isfinite(d)):
        raise ValueError("distance matrix must be finite")
    if not np.allclose(d, d.T):
        raise ValueError("distance matrix must be symmetric")
    if np.any(np.diag(d) != 0.0):
        raise ValueError("distance matrix diagonal must be zero")
    off = ~np.eye(d.shape[0], dtype=bool)
    if np.any(d[off] <= 0.0):
        raise ValueError("off-diagonal distances must be positive (group duplicates first)")
    return d


class CorrelationFactor:
    """A correlation matrix together with its Cholesky factor.

    Immutable value: matrix, lower factor, log-determinant, plus the (rho,
    kernel, distances) it was built from so derivative matrices can be
    recomputed on demand.  jitter records the shrink applied to force the
    factorization (0.0 in the usual case).
    """

    def __init__(self, matrix, chol, log_det, rho, kernel, distances=None, jitter=0.0):
        self.matrix = matrix
        self.chol = chol
        self.log_det = float(log_det)
        self.rho = rho
        self.kernel = kernel
        self.distances = distances
        self.jitter = jitter
        self._cho = (chol, True)

    @property
    def n_groups(self):
        return self.matrix.shape[0]

    def solve(self, x):
        return cho_solve(self._cho, x, check_finite=False)

    @cached_property
    def inverse(self):
        return cho_solve(self._cho, np.eye(self.n_groups), check_finite=False)


def _kernel_matrix(d, rho, kernel):
    if kernel == "exp":
        s = np.exp(-rho * d)
    elif kernel == "pol":
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + d ** rho)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    np.fill_diagonal(s, 1.0)
    return s


def identity_factor(n_groups):
    eye = np.eye(n_groups)
    return CorrelationFactor(eye, eye.copy(), 0.0, None, "identity")


def correlation_matrix(d, rho, kernel, n_groups=None):
    """Build Sigma(rho) and factorize it, shrinking toward identity if needed.

    exp kernel: Sigma_ij = exp(-rho * d_ij).  pol kernel:
    Sigma_ij = 1 / (1 + d_ij ** rho).  identity: the G x G identity, rho
    ignored.  On factorization failure the matrix is replaced by
    (Sigma + eps*I) / (1 + eps) for eps on an escalating ladder up to 1e-6,
    which keeps the diagonal exactly 1; if the largest eps still fails the
    error propagates.
    """
    if kernel == "identity":
        if n_groups is None:
            if d is None:
                raise ValueError("identity kernel needs n_groups when no distances are given")
            n_groups = np.asarray(d).shape[0]
        return identity_factor(n_groups)
    if rho <= 0:
        raise ValueError("rho must be positive")
    d = np.asarray(d, dtype=float)
    base = _kernel_matrix(d, rho, kernel)
    for eps in JITTER_LADDER:
        s = base if eps == 0.0 else (base + eps * np.eye(base.shape[0])) / (1.0 + eps)
        try:
            chol, _ = cho_factor(s, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        chol = np.tril(chol)
        log_det = float(2.0 * np.sum(np.log(np.diag(chol))))
        return CorrelationFactor(s, chol, log_det, rho, kernel, distances=d, jitter=eps)
    raise NotPositiveDefiniteError(
        f"{kernel} correlation matrix not positive definite at rho={rho:g} "
        f"even with jitter {JITTER_LADDER[-1]:g}")


def correlation_derivatives(d, rho, kernel):
    """First and second elementwise derivatives of Sigma(rho) in rho.

    Written in terms of s = Sigma_ij to stay stable when d**rho overflows:
    for the pol kernel d Sigma/d rho = -ln(d) * s * (1 - s) and
    d2 Sigma/d rho2 = (ln d)^2 * s * (1 - s) * (1 - 2 s).  Diagonals (and any
    zero-distance entry) are exactly zero.
    """
    if kernel == "identity":
        raise ValueError("identity kernel has no rho derivative")
    if rho <= 0:
        raise ValueError("rho must be positive")
    d = np.asarray(d, dtype=float)
    if kernel == "exp":
        e = np.exp(-rho * d)
        first = -d * e
        second = d * d * e
    elif kernel == "pol":
        positive = d > 0
        log_d = np.zeros_like(d)
        np.log(d, out=log_d, where=positive)
        with np.errstate(over="ignore"):
            s = np.where(positive, 1.0 / (1.0 + d ** rho), 0.0)
        first = -log_d * s * (1.0 - s)
        second = log_d ** 2 * s * (1.0 - s) * (1.0 - 2.0 * s)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    np.fill_diagonal(first, 0.0)
    np.fill_diagonal(second, 0.0)
    return first, second
