"""Command line interface: simulate, fit, compare, curves.

Every flag has a twin key in a flat `key = value` config file passed with
--config; explicit flags win over the file.  Exit codes: 0 success, 1
usage/validation error, 2 the fit hit its iteration cap, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io
from .errors import NumericalError, ValidationError
from .inference import (fisher_information, lrt_boundary_pvalue,
                        marginal_log_likelihood_mc, posterior_chain, standard_errors)
from .model import Dataset, ModelParams, PiecewiseBaseline
from .sampler import BlockGibbsConfig
from .saem import SaemConfig, fit as saem_fit
from .simulate import (DEFAULT_REGION_KM, default_true_params, generate_scenario,
                       malaria_shape_roster, sample_locations)
from .spatial import (build_distance_matrix, correlation_matrix,
                      group_identical_locations, validate_distance_matrix)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NO_CONVERGENCE = 2
EXIT_NUMERICAL = 3


def _parse_floats(text):
    return [float(v) for v in str(text).split(",") if str(v).strip()]


def _layer(args, parser_defaults):
    """Apply config-file values under explicit flags: flags > file > defaults."""
    merged = dict(parser_defaults)
    if getattr(args, "config", None):
        raw = io.read_keyvalue(args.config)
        unknown = set(raw) - set(parser_defaults)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        for key, value in raw.items():
            merged[key] = value
    for key in parser_defaults:
        flag_value = getattr(args, key)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _require(cfg, key):
    if cfg.get(key) in (None, ""):
        raise ValidationError(f"missing required option '{key}'")
    return cfg[key]


# ----------------------------------------------------------------------
# simulate
# ----------------------------------------------------------------------

SIMULATE_DEFAULTS = {
    "model": "M1", "n": 300, "censoring": 0.0, "seed": 0, "out": "sim",
    "region_km": DEFAULT_REGION_KM, "cutpoints": "0,0.2,0.8", "hazards": "2,0.5,1",
    "beta": "2,3", "sigma2": 1.5, "rho": 1.0, "roster": "independent",
}


def cmd_simulate(cfg):
    model = cfg["model"]
    if model not in ("M1", "M2", "M3", "M4"):
        raise ValidationError(f"model must be M1..M4, got {model!r}")
    censoring = float(cfg["censoring"])
    if not 0.0 <= censoring < 1.0:
        raise ValidationError(f"censoring must lie in [0, 1), got {censoring}")
    n = int(cfg["n"])
    rng = np.random.default_rng(int(cfg["seed"]))
    base = default_true_params(model)
    params = ModelParams(
        PiecewiseBaseline(_parse_floats(cfg["cutpoints"]), _parse_floats(cfg["hazards"])),
        np.asarray(_parse_floats(cfg["beta"])), float(cfg["sigma2"]), float(cfg["rho"]),
        base.kernel)
    if cfg["roster"] == "malaria":
        groups = malaria_shape_roster(rng, n)
        locations = sample_locations(int(groups.max()) + 1, rng,
                                     region_km=float(cfg["region_km"]),
                                     n_clusters=max(int(groups.max()) // 75, 4))
    elif cfg["roster"] == "independent":
        groups = None
        locations = None
    else:
        raise ValidationError(f"roster must be 'independent' or 'malaria', got {cfg['roster']!r}")
    sim = generate_scenario(model, n, params=params, censoring=censoring, rng=rng,
                            region_km=float(cfg["region_km"]), locations=locations,
                            groups=groups)
    out = cfg["out"]
    subject_locations = (sim.locations[sim.dataset.groups]
                         if sim.locations is not None else None)
    io.write_dataset_csv(f"{out}_data.csv", sim.dataset.times, sim.dataset.status,
                         sim.dataset.covariates, locations=subject_locations)
    if sim.distances is not None:
        io.write_distance_csv(f"{out}_distances.csv", sim.distances)
    truth = {"model": model, "censoring_target": censoring,
             "censoring_rate": repr(sim.censoring_rate), "seed": cfg["seed"],
             "n": n, "region_km": cfg["region_km"], "roster": cfg["roster"]}
    io.write_params_file(f"{out}_truth.txt", params, extra=truth)
    print(f"wrote {out}_data.csv ({sim.dataset.n} subjects, "
          f"{sim.dataset.n_groups} groups, "
          f"{1.0 - sim.dataset.status.mean():.1%} censored)")
    return EXIT_OK


# ----------------------------------------------------------------------
# fit
# ----------------------------------------------------------------------

FIT_DEFAULTS = {
    "data": None, "distances": None, "kernel": "exp", "cutpoints": None,
    "seed": 0, "out": "fit", "block_size": 10, "target_acceptance": 0.3,
    "sweeps": 1, "burn_in": 200, "max_iterations": 2000, "tolerance": 1e-3,
    "sigma2_init": 1.0, "rho_init": 1.0, "fisher_draws": 5000,
    "fisher_burnin": 500, "merge_km": 0.0, "skip_se": False, "replications": 1,
}


def load_dataset(cfg):
    """Read the canonical CSV, group locations, and build distances."""
    raw = io.read_dataset_csv(_require(cfg, "data"))
    if cfg.get("distances"):
        distances = validate_distance_matrix(io.read_distance_csv(cfg["distances"]))
        if raw.groups is not None:
            groups = raw.groups
        elif distances.shape[0] == raw.times.shape[0]:
            groups = np.arange(raw.times.shape[0])
        else:
            raise ValidationError(
                "distance matrix size differs from the subject count; add a "
                "'group' column mapping subjects to matrix rows")
        n_groups = distances.shape[0]
        if groups.min() < 0 or groups.max() >= n_groups:
            raise ValidationError("group indices must index distance matrix rows")
    elif raw.locations is not None:
        groups, unique = group_identical_locations(raw.locations,
                                                   tolerance_km=float(cfg["merge_km"]))
        distances = build_distance_matrix(unique)
        n_groups = unique.shape[0]
    elif cfg["kernel"] == "identity":
        groups = np.arange(raw.times.shape[0])
        n_groups = raw.times.shape[0]
        distances = None
    else:
        raise ValidationError("need lon/lat columns or a distance matrix file "
                              "for a spatial kernel")
    dataset = Dataset(raw.times, raw.status, raw.covariates, groups, n_groups)
    return dataset, distances


def _saem_config(cfg):
    return SaemConfig(
        burn_in=int(cfg["burn_in"]), max_iterations=int(cfg["max_iterations"]),
        tolerance=float(cfg["tolerance"]),
        gibbs=BlockGibbsConfig(block_size=int(cfg["block_size"]),
                               target_acceptance=float(cfg["target_acceptance"]),
                               sweeps_per_iteration=int(cfg["sweeps"])))


def _run_single_fit(cfg, dataset, distances, seed, out):
    from .baselines import fit_ph

    kernel = cfg["kernel"]
    cutpoints = _parse_floats(_require(cfg, "cutpoints"))
    ph = fit_ph(dataset, cutpoints)
    init = ModelParams(ph.baseline, ph.beta, float(cfg["sigma2_init"]),
                       float(cfg["rho_init"]), kernel)
    rng = np.random.default_rng(seed)
    result = saem_fit(dataset, distances, kernel, config=_saem_config(cfg),
                      init=init, rng=rng)
    result.save_trace_csv(f"{out}_trace.csv")
    io.write_params_file(f"{out}_params.txt", result.params,
                         extra={"converged": result.converged,
                                "iterations": result.n_iterations, "seed": seed})
    preamble = [f"seed = {seed}", f"kernel = {kernel}",
                f"converged = {result.converged} after {result.n_iterations} iterations",
                f"mean acceptance rate = {np.nanmean(result.acceptance_rates):.3f}"]
    preamble += [f"{key} = {cfg[key]}" for key in sorted(FIT_DEFAULTS) if key != "data"]
    if not cfg["skip_se"]:
        draws = posterior_chain(result.params, dataset, distances,
                                int(cfg["fisher_burnin"]), int(cfg["fisher_draws"]),
                                gibbs_config=BlockGibbsConfig(
                                    block_size=int(cfg["block_size"]),
                                    target_acceptance=float(cfg["target_acceptance"])),
                                rng=rng)
        fisher = fisher_information(result.params, dataset, distances, draws)
        summary = standard_errors(fisher, result.params)
        io.write_report_csv(f"{out}_report.csv", summary)
        text = io.format_report(summary, "spatial frailty model fit", preamble)
    else:
        text = "\n".join(["spatial frailty model fit"] + preamble) + "\n"
    with open(f"{out}_report.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text)
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_fit(cfg):
    dataset, distances = load_dataset(cfg)
    reps = int(cfg["replications"])
    if reps == 1:
        return _run_single_fit(cfg, dataset, distances, int(cfg["seed"]), cfg["out"])
    seeds = np.random.SeedSequence(int(cfg["seed"])).spawn(reps)
    codes = []
    for r in range(reps):
        sub_seed = int(seeds[r].generate_state(1)[0])
        codes.append(_run_single_fit(cfg, dataset, distances, sub_seed,
                                     f"{cfg['out']}_rep{r}"))
    return max(codes)


# ----------------------------------------------------------------------
# compare
# ----------------------------------------------------------------------

COMPARE_DEFAULTS = {
    "data": None, "distances": None, "fit_a": None, "fit_b": None,
    "draws": 10_000, "seed": 0, "c_sweep": "", "out": "", "merge_km": 0.0,
    "kernel": "exp",  # only used to satisfy load_dataset when no coords given
}


def cmd_compare(cfg):
    params_a = io.read_params_file(_require(cfg, "fit_a"))
    params_b = io.read_params_file(_require(cfg, "fit_b"))
    dataset, distances = load_dataset(cfg)
    seed = int(cfg["seed"])
    n_draws = int(cfg["draws"])
    lines = [f"model comparison over {n_draws} prior draws, seed {seed}"]
    sweep_counts = [int(v) for v in _parse_floats(cfg["c_sweep"])] if cfg["c_sweep"] else []
    results = {}
    for name, params in (("A", params_a), ("B", params_b)):
        est, err = marginal_log_likelihood_mc(params, dataset, distances, n_draws,
                                              rng=np.random.default_rng(seed))
        results[name] = est
        lines.append(f"model {name} ({params.kernel} kernel): marginal log-likelihood "
                     f"{est:.3f} (MC error {err:.3f})")
        for c in sweep_counts:
            e, s = marginal_log_likelihood_mc(params, dataset, distances, c,
                                              rng=np.random.default_rng(seed))
            lines.append(f"  C = {c}: {e:.3f} (MC error {s:.3f})")
    preferred = "A" if results["A"] >= results["B"] else "B"
    lines.append(f"preferred model: {preferred}")
    nested = (params_a.kernel == "identity") != (params_b.kernel == "identity")
    if nested:
        if params_a.kernel == "identity":
            full, null = results["B"], results["A"]
        else:
            full, null = results["A"], results["B"]
        try:
            stat, p_value = lrt_boundary_pvalue(full, null)
            lines.append(f"boundary LRT: statistic {stat:.3f}, p-value {p_value:.3f}")
        except ValueError:
            lines.append("boundary LRT skipped: full model log-likelihood below the "
                         "null model's (Monte Carlo noise)")
    elif params_a.kernel == params_b.kernel and np.allclose(
            params_a.flatten(), params_b.flatten()):
        stat, p_value = lrt_boundary_pvalue(results["A"], results["B"])
        lines.append(f"boundary LRT: statistic {stat:.3f}, p-value {p_value:.3f}")
    text = "\n".join(lines) + "\n"
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------
# curves
# ----------------------------------------------------------------------

CURVES_DEFAULTS = {
    "params": None, "out": "curves", "t_max": None, "d_max": 5.0, "points": 200,
}


def cmd_curves(cfg):
    params = io.read_params_file(_require(cfg, "params"))
    out = cfg["out"]
    baseline = params.baseline
    t_max = float(cfg["t_max"]) if cfg["t_max"] is not None else \
        float(baseline.cutpoints[-1] * 1.5 if baseline.cutpoints[-1] > 0 else 1.0)
    t_grid = np.linspace(0.0, t_max, int(cfg["points"]))
    h_values = baseline.hazard(t_grid)
    np.savetxt(f"{out}_hazard.csv", np.column_stack([t_grid, h_values]),
               delimiter=",", header="t,h0", comments="")
    d_grid = np.linspace(0.0, float(cfg["d_max"]), int(cfg["points"]))
    if params.kernel == "identity":
        corr = np.where(d_grid == 0.0, 1.0, 0.0)
    elif params.kernel == "exp":
        corr = np.exp(-params.rho * d_grid)
    else:
        corr = 1.0 / (1.0 + d_grid ** params.rho)
        corr[d_grid == 0.0] = 1.0
    np.savetxt(f"{out}_correlation.csv", np.column_stack([d_grid, corr]),
               delimiter=",", header="d,correlation", comments="")
    print(f"wrote {out}_hazard.csv and {out}_correlation.csv")
    return EXIT_OK


# ----------------------------------------------------------------------
# wiring
# ----------------------------------------------------------------------

def _add_options(sub, defaults):
    sub.add_argument("--config", default=None, help="flat key=value config file")
    for key, value in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            sub.add_argument(flag, default=None, action="store_const", const=True)
        else:
            sub.add_argument(flag, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spatialfrailty",
        description="Spatially correlated frailty models for right-censored "
                    "survival data (distances in km; for the exp kernel rho has "
                    "units 1/km, for pol it is a dimensionless exponent)")
    subs = parser.add_subparsers(dest="command", required=True)
    _add_options(subs.add_parser("simulate", help="generate a synthetic dataset"),
                 SIMULATE_DEFAULTS)
    _add_options(subs.add_parser("fit", help="fit the spatial frailty model"),
                 FIT_DEFAULTS)
    _add_options(subs.add_parser("compare", help="compare two fitted models"),
                 COMPARE_DEFAULTS)
    _add_options(subs.add_parser("curves", help="export hazard and correlation curves"),
                 CURVES_DEFAULTS)
    return parser


_COMMANDS = {
    "simulate": (cmd_simulate, SIMULATE_DEFAULTS),
    "fit": (cmd_fit, FIT_DEFAULTS),
    "compare": (cmd_compare, COMPARE_DEFAULTS),
    "curves": (cmd_curves, CURVES_DEFAULTS),
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    command, defaults = _COMMANDS[args.command]
    try:
        cfg = _layer(args, defaults)
        return command(cfg)
    except (ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
