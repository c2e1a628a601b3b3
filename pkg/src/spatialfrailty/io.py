"""CSV and flat key=value file formats used by the command line tools.

Canonical dataset columns: id, time, status, z1..zp, lon, lat.  The
coordinate columns may be omitted when a precomputed distance matrix file is
supplied; in that case an optional integer `group` column maps subjects to
matrix rows (defaults to one row per subject).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class RawDataset:
    ids: list
    times: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    covariate_names: list
    locations: np.ndarray | None
    groups: np.ndarray | None


def read_dataset_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        cols = {name: i for i, name in enumerate(header)}
        for required in ("id", "time", "status"):
            if required not in cols:
                raise ValidationError(
                    f"{path}: missing column {required!r}; expected columns "
                    "id,time,status,z1..zp[,lon,lat][,group]")
        z_names = sorted((c for c in cols if c.startswith("z") and c[1:].isdigit()),
                         key=lambda c: int(c[1:]))
        expected = [f"z{i + 1}" for i in range(len(z_names))]
        if z_names != expected:
            raise ValidationError(f"{path}: covariate columns must be z1..zp, found {z_names}")
        has_coords = "lon" in cols and "lat" in cols
        has_group = "group" in cols
        ids, times, status, covs, locs, groups = [], [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, "
                                      f"found {len(row)}")

            def grab(col, kind=float, line=lineno, cells=row):
                raw = cells[cols[col]].strip()
                try:
                    return kind(raw)
                except ValueError:
                    raise ValidationError(
                        f"{path}:{line}: column {col!r} has invalid value {raw!r}") from None

            ids.append(row[cols["id"]].strip())
            t = grab("time")
            if t < 0:
                raise ValidationError(f"{path}:{lineno}: time must be nonnegative")
            times.append(t)
            s = grab("status", int)
            if s not in (0, 1):
                raise ValidationError(f"{path}:{lineno}: status must be 0 or 1")
            status.append(s)
            covs.append([grab(c) for c in z_names])
            if has_coords:
                locs.append((grab("lon"), grab("lat")))
            if has_group:
                groups.append(grab("group", int))
    if not times:
        raise ValidationError(f"{path}: no data rows")
    return RawDataset(ids, np.asarray(times), np.asarray(status, dtype=int),
                      np.asarray(covs, dtype=float).reshape(len(times), len(z_names)),
                      z_names,
                      np.asarray(locs) if has_coords else None,
                      np.asarray(groups, dtype=int) if has_group else None)


def write_dataset_csv(path, times, status, covariates, locations=None, groups=None):
    covariates = np.asarray(covariates, dtype=float)
    n, p = covariates.shape
    header = ["id", "time", "status"] + [f"z{j + 1}" for j in range(p)]
    if locations is not None:
        header += ["lon", "lat"]
    if groups is not None:
        header += ["group"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            row = [i + 1, repr(float(times[i])), int(status[i])]
            row += [repr(float(v)) for v in covariates[i]]
            if locations is not None:
                row += [repr(float(locations[i][0])), repr(float(locations[i][1]))]
            if groups is not None:
                row += [int(groups[i])]
            writer.writerow(row)


def read_distance_csv(path):
    """G x G matrix, row-major, optional header row/column labels."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            rows.append((lineno, [cell.strip() for cell in row]))
    if not rows:
        raise ValidationError(f"{path}: empty distance file")

    def numeric(cell):
        try:
            float(cell)
            return True
        except ValueError:
            return False

    if not all(numeric(c) for c in rows[0][1]):
        rows = rows[1:]
    values = []
    for lineno, row in rows:
        if not numeric(row[0]):
            row = row[1:]
        try:
            values.append([float(c) for c in row])
        except ValueError as e:
            raise ValidationError(f"{path}:{lineno}: non-numeric distance entry") from e
    lengths = {len(r) for r in values}
    if len(lengths) != 1 or lengths.pop() != len(values):
        raise ValidationError(f"{path}: distance matrix must be square")
    return np.asarray(values, dtype=float)


def write_distance_csv(path, distances):
    np.savetxt(path, np.asarray(distances, dtype=float), delimiter=",", fmt="%.17g")


def read_keyvalue(path):
    """Flat `key = value` file; '#' starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key} = {value}\n")


def _fmt_vector(values):
    return ",".join(repr(float(v)) for v in np.atleast_1d(values))


def write_params_file(path, params, extra=None):
    record = {
        "kernel": params.kernel,
        "cutpoints": _fmt_vector(params.baseline.cutpoints),
        "hazards": _fmt_vector(params.baseline.hazards),
        "beta": _fmt_vector(params.beta) if params.beta.size else "",
        "sigma2": repr(float(params.sigma2)),
        "rho": repr(float(params.rho)),
    }
    if extra:
        record.update(extra)
    write_keyvalue(path, record)


def read_params_file(path):
    from .model import ModelParams, PiecewiseBaseline

    raw = read_keyvalue(path)
    try:
        kernel = raw["kernel"]
        cuts = [float(v) for v in raw["cutpoints"].split(",")]
        hazards = [float(v) for v in raw["hazards"].split(",")]
        beta = [float(v) for v in raw["beta"].split(",")] if raw.get("beta") else []
        sigma2 = float(raw["sigma2"])
        rho = float(raw.get("rho", 1.0))
    except (KeyError, ValueError) as e:
        raise ValidationError(f"{path}: malformed parameter file ({e})") from e
    return ModelParams(PiecewiseBaseline(cuts, hazards), np.asarray(beta), sigma2,
                       rho, kernel)


def write_report_csv(path, summary):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "estimate", "std_error", "ci_low", "ci_high"])
        for i, label in enumerate(summary.labels):
            writer.writerow([label, f"{summary.estimates[i]:.6g}",
                             f"{summary.std_errors[i]:.6g}",
                             f"{summary.ci_lower[i]:.6g}", f"{summary.ci_upper[i]:.6g}"])
        for i, label in enumerate(summary.hr_labels):
            writer.writerow([f"hr({label})", f"{summary.hazard_ratios[i]:.6g}", "",
                             f"{summary.hr_lower[i]:.6g}", f"{summary.hr_upper[i]:.6g}"])


def format_report(summary, title, preamble=None):
    lines = [title, "=" * len(title)]
    if preamble:
        lines += list(preamble)
    lines.append("")
    lines.append(f"{'parameter':<12} {'estimate':>12} {'std error':>12} "
                 f"{'95% CI':>24}")
    for i, label in enumerate(summary.labels):
        ci = f"[{summary.ci_lower[i]:.4g}; {summary.ci_upper[i]:.4g}]"
        lines.append(f"{label:<12} {summary.estimates[i]:>12.4g} "
                     f"{summary.std_errors[i]:>12.4g} {ci:>24}")
    if summary.hr_labels:
        lines.append("")
        lines.append(f"{'hazard ratio':<12} {'estimate':>12} {'95% CI':>24}")
        for i, label in enumerate(summary.hr_labels):
            ci = f"[{summary.hr_lower[i]:.2f}; {summary.hr_upper[i]:.2f}]"
            lines.append(f"{label:<12} {summary.hazard_ratios[i]:>12.2f} {ci:>24}")
    return "\n".join(lines) + "\n"
