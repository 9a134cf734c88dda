"""Command-line entry point: ``entroherd {bimodal|boltzmann|wine|selftest|fetch}``.

Every command writes a ``report.json`` plus CSV series into ``--out``. Configs
are ``key = value`` files. Keys without a prefix apply to the main run; a
``point.`` prefix addresses the point-herding runs of the bimodal experiment.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .core import (
    PRESETS, ConfigError, EmptyData, EntroherdError, FeatureMap, HerdingConfig, NumericalFailure,
    StateSpaceTooLarge, ZeroVarianceFeature, load_kv, make_rng, spin_states, standardize_from_data,
    standardize_from_model,
)
from .data import (
    WINE_COLUMNS, DataError, GaussianBaseline, auc, load_wine, make_bimodal_target,
    make_boltzmann_instance, mh_sample_bimodal, quantile_coverage, split_train_validation,
)
from .engine import run_entropic, run_point, run_point_metropolis
from .evaluate import histogram_compare, kl_discrete, moment_sse, write_state_table_csv
from .families import Gauss1D, PointMass
from .mixture import MixtureModel

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

METRIC_KEYS = ("sse", "entropy", "kl", "tv", "auc", "coverage")

REPORT_SCHEMA = {
    "type": "object",
    "required": ["experiment", "version", "seed", "config", "metrics", "extra", "artifacts", "wall_clock_s"],
    "properties": {
        "experiment": {"type": "string"},
        "version": {"type": "string"},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "metrics": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": list(METRIC_KEYS),
                "properties": {k: {"type": ["number", "string", "null"]} for k in METRIC_KEYS},
            },
        },
        "extra": {"type": "object"},
        "artifacts": {"type": "object", "additionalProperties": {"type": "string"}},
        "wall_clock_s": {"type": "number"},
    },
}

WINE_URLS = {
    "red": "https://archive.ics.uci.edu/ml/machine-learning-databases/wine-quality/winequality-red.csv",
    "white": "https://archive.ics.uci.edu/ml/machine-learning-databases/wine-quality/winequality-white.csv",
}
WINE_FILES = {"red": "winequality-red.csv", "white": "winequality-white.csv"}
DEFAULT_LAMBDAS = (1.0, 3.0, 13.0, 50.0, 100.0, 200.0)
DEFAULT_OUTPUTS = (20, 40, 80, 160, 320)


# ---------------------------------------------------------------------------
# Report plumbing
# ---------------------------------------------------------------------------

def metric_row(**values):
    """A metrics record with every key present; missing values are ``None``."""
    unknown = set(values) - set(METRIC_KEYS)
    if unknown:
        raise KeyError(f"unknown metrics {sorted(unknown)}")
    return {k: values.get(k) for k in METRIC_KEYS}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no infinities; they are written as strings
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=1, allow_nan=False) + "\n")


def validate_report(report):
    """Check a report against :data:`REPORT_SCHEMA` (keys and basic types)."""
    missing = [k for k in REPORT_SCHEMA["required"] if k not in report]
    if missing:
        raise ValueError(f"report lacks {missing}")
    for name, row in report["metrics"].items():
        if set(row) != set(METRIC_KEYS):
            raise ValueError(f"metrics row {name!r} must have exactly {METRIC_KEYS}")
        for k, v in row.items():
            if not (v is None or isinstance(v, (int, float, str))):
                raise ValueError(f"metric {name}.{k} has type {type(v).__name__}")
    for k, v in report["artifacts"].items():
        if not isinstance(v, str):
            raise ValueError(f"artifact {k!r} must be a path string")
    return True


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


class Experiment:
    """Collects metrics and artifacts for one command and writes the report."""

    def __init__(self, name, out_dir, seed, config):
        self.name = name
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.config = config
        self.metrics = {}
        self.extra = {}
        self.artifacts = {}
        self._t0 = time.perf_counter()

    def path(self, key, filename):
        self.artifacts[key] = filename
        return self.out / filename

    def finish(self):
        report = {
            "experiment": self.name,
            "version": __version__,
            "seed": int(self.seed),
            "config": self.config,
            "metrics": self.metrics,
            "extra": self.extra,
            "artifacts": self.artifacts,
            "wall_clock_s": round(time.perf_counter() - self._t0, 3),
        }
        report = _jsonable(report)
        validate_report(report)
        write_json(self.out / "report.json", report)
        return report


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_HERDING_KEYS = set(HerdingConfig().to_kv())


def _split_config(kv, allowed_extra, prefixes=()):
    """Separate herding keys (per prefix) from experiment keys; reject unknowns."""
    groups = {"": {}}
    groups.update({p: {} for p in prefixes})
    extra = {}
    for key, value in kv.items():
        prefix, _, bare = key.rpartition(".")
        if prefix in groups and bare in _HERDING_KEYS:
            groups[prefix][bare] = value
        elif not prefix and key in allowed_extra:
            extra[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return groups, extra


def _floats(s):
    try:
        return tuple(float(t) for t in str(s).split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of numbers, got {s!r}") from exc


def _as(fn, value, key):
    try:
        return fn(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def _config_echo(**configs):
    return {name: cfg.to_kv() if isinstance(cfg, HerdingConfig) else cfg for name, cfg in configs.items()}


# ---------------------------------------------------------------------------
# Bimodal experiment
# ---------------------------------------------------------------------------

def _bin_masses_of(component, edges):
    if isinstance(component, PointMass):
        return np.histogram(component.x, bins=edges)[0].astype(float)
    return np.diff(norm.cdf(edges, loc=component.mu[0], scale=component.sigma[0]))


def _write_colormap(path, run, edges):
    header = ["T", "burnin"] + [f"{e:.1f}" for e in edges[:-1]]
    rows = []
    for r in run.trajectory:
        rows.append([r.T, int(r.T <= run.config.t_burnin)] + list(_bin_masses_of(r.component, edges)))
    _write_csv(path, header, rows)


def cmd_bimodal(kv, out_dir, seed=None):
    groups, extra = _split_config(kv, {"mh_samples", "grid_step", "bin_width", "entropy_samples"}, ("point",))
    ent_cfg = HerdingConfig.from_kv(groups[""], PRESETS["bimodal"])
    pt_cfg = HerdingConfig.from_kv(groups["point"], PRESETS["bimodal_point"])
    if seed is not None:
        ent_cfg, pt_cfg = ent_cfg.replace(seed=seed), pt_cfg.replace(seed=seed)
    n_mh = _as(int, extra.get("mh_samples", 10_000), "mh_samples")
    step = _as(float, extra.get("grid_step", 1e-3), "grid_step")
    width = _as(float, extra.get("bin_width", 0.1), "bin_width")
    n_ent = _as(int, extra.get("entropy_samples", 100_000), "entropy_samples")
    if n_mh < 1 or not step > 0 or not width > 0:
        raise ConfigError("mh_samples, grid_step and bin_width must be positive")

    exp = Experiment("bimodal", out_dir, ent_cfg.seed, _config_echo(
        entropic=ent_cfg, point=pt_cfg,
        experiment={"mh_samples": n_mh, "grid_step": step, "bin_width": width}))
    target = make_bimodal_target()
    x = mh_sample_bimodal(n_mh, ent_cfg.seed)
    features = FeatureMap.poly1d(4)
    spec = standardize_from_data(features, x[:, None], ent_cfg.lam)
    pt_spec = spec.with_lambda(pt_cfg.lam)
    n_grid = int(round((target.hi - target.lo) / step))
    grid = target.lo + step * np.arange(n_grid + 1)

    runs = {
        "point": run_point(features, pt_spec, pt_cfg, grid),
        "entropic": run_entropic(features, spec, ent_cfg),
        "point_metropolis": run_point_metropolis(features, pt_spec, pt_cfg, grid),
        "entropic_jump": run_entropic(features, spec, ent_cfg.replace(p_jump=0.1)),
    }
    hist = {}
    edges = None
    for name, run in runs.items():
        cmp = histogram_compare(run.output, target.pdf, bin_width=width, lo=target.lo, hi=target.hi)
        edges = cmp.edges
        hist[name] = cmp.source
        hist["target"] = cmp.target
        ent = run.output.entropy_mc(n_ent, make_rng(run.config.seed, "entropy"))[0] if run.output.is_gaussian else None
        exp.metrics[name] = metric_row(sse=moment_sse(run.output, run.spec, features), entropy=ent, tv=cmp.tv)
        run.output.save(exp.path(f"mixture_{name}", f"mixture_{name}.json"))
        run.save_trajectory_csv(exp.path(f"trajectory_{name}", f"trajectory_{name}.csv"))
        _write_colormap(exp.path(f"colormap_{name}", f"colormap_{name}.csv"), run, edges)
    mh_cmp = histogram_compare(x, target.pdf, bin_width=width, lo=target.lo, hi=target.hi)
    exp.metrics["mh_samples"] = metric_row(tv=mh_cmp.tv)
    cols = ["target", "point", "entropic", "point_metropolis", "entropic_jump"]
    _write_csv(exp.path("histograms", "histograms.csv"), ["bin_lo", "bin_hi"] + cols + ["mh_samples"],
               [[edges[k], edges[k + 1]] + [hist[c][k] for c in cols] + [mh_cmp.source[k]]
                for k in range(edges.size - 1)])
    exp.extra = {
        "n_components": {k: len(r.output) for k, r in runs.items()},
        "lambda": ent_cfg.lam,
        "raw_moment_targets": spec.raw_mean,
        "note": "color-map rows are unnormalized per-bin masses of each step's component",
    }
    return exp.finish()


# ---------------------------------------------------------------------------
# Boltzmann experiment
# ---------------------------------------------------------------------------

def _top_mass_states(p, fraction=0.5):
    order = np.argsort(-p, kind="stable")
    k = int(np.searchsorted(np.cumsum(p[order]), fraction)) + 1
    return order[:k]


def boltzmann_metrics(model, target, spec):
    """SSE, exact entropy and KL of a spin mixture against the Gibbs target."""
    return metric_row(
        sse=moment_sse(model, spec, target.features),
        entropy=model.entropy_exact_discrete(),
        kl=kl_discrete(target.probs, model, target.states),
    )


def _sweep_one(target, spec, cfg, lam, trial, outputs):
    cfg = cfg.replace(lam=lam, seed=cfg.seed + trial, t_output=max(outputs))
    run = run_entropic(target.features, spec.with_lambda(lam), cfg)
    rows = []
    for T in outputs:
        comps = [r.component for r in run.trajectory[cfg.t_burnin:cfg.t_burnin + T]]
        m = boltzmann_metrics(MixtureModel(comps), target, spec.with_lambda(lam))
        rows.append((lam, T, trial, m["sse"], m["entropy"], m["kl"]))
    return rows


def boltzmann_sweep(target, spec, cfg, lambdas=DEFAULT_LAMBDAS, outputs=DEFAULT_OUTPUTS, trials=10, workers=None):
    """Runs every (lambda, trial) pair once and scores the T_output prefixes.

    The run does not depend on ``t_output``, so a shorter output is exactly
    a prefix of the longest one. Rows come back sorted by (lambda, T, trial).
    """
    jobs = [(lam, tr) for lam in lambdas for tr in range(trials)]
    workers = workers or min(8, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda j: _sweep_one(target, spec, cfg, j[0], j[1], outputs), jobs)
        rows = [r for part in parts for r in part]
    return sorted(rows, key=lambda r: (r[0], r[1], r[2]))


def sweep_means(rows):
    out = {}
    for lam, T, _, sse, h, kl in rows:
        out.setdefault((lam, T), []).append((sse, h, kl))
    return {key: tuple(float(np.mean(col)) for col in zip(*vals)) for key, vals in sorted(out.items())}


def cmd_boltzmann(kv, out_dir, seed=None, sweep=False):
    groups, extra = _split_config(kv, {"n_spins", "instance_seed", "n_exact_samples", "sweep_lambdas",
                                       "sweep_outputs", "sweep_trials", "workers"})
    cfg = HerdingConfig.from_kv(groups[""], PRESETS["boltzmann"])
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    N = _as(int, extra.get("n_spins", 10), "n_spins")
    if N < 2:
        raise ConfigError("n_spins must be at least 2")
    if 2**N > 2**20:
        raise StateSpaceTooLarge(2**N)
    inst_seed = _as(int, extra.get("instance_seed", 0), "instance_seed")
    n_exact = _as(int, extra.get("n_exact_samples", 320), "n_exact_samples")
    lambdas = _floats(extra.get("sweep_lambdas", ",".join(map(str, DEFAULT_LAMBDAS))))
    outputs = tuple(int(v) for v in _floats(extra.get("sweep_outputs", ",".join(map(str, DEFAULT_OUTPUTS)))))
    trials = _as(int, extra.get("sweep_trials", 10), "sweep_trials")
    workers = _as(int, extra.get("workers", 0), "workers") or None

    exp = Experiment("boltzmann", out_dir, cfg.seed, _config_echo(herding=cfg, experiment={
        "n_spins": N, "instance_seed": inst_seed, "n_exact_samples": n_exact,
        "sweep": sweep, "sweep_lambdas": list(lambdas), "sweep_outputs": list(outputs), "sweep_trials": trials}))
    target = make_boltzmann_instance(N, inst_seed)
    spec = standardize_from_model(target.features, target, cfg.lam)
    run = run_entropic(target.features, spec, cfg)
    model = run.output

    draws = target.sample(n_exact, make_rng(cfg.seed, "exact_samples"))
    empirical = MixtureModel([PointMass(s, discrete=True) for s in draws])
    p_model = np.exp(model.log_density(target.states))
    p_emp = np.exp(empirical.log_density(target.states))
    exp.metrics["entropic"] = boltzmann_metrics(model, target, spec)
    exp.metrics["exact_samples"] = metric_row(
        sse=moment_sse(empirical, spec, target.features), entropy=empirical.entropy_exact_discrete(),
        kl=kl_discrete(target.probs, empirical, target.states))
    top = _top_mass_states(target.probs)
    ratio = p_model[top] / target.probs[top]
    exp.extra = {
        "lambda": cfg.lam,
        "target_entropy": target.entropy(),
        "coupling": target.coupling,
        "states_zero_mass_model": int(np.sum(p_model == 0)),
        "states_zero_mass_empirical": int(np.sum(p_emp == 0)),
        "kl_empirical_infinite": bool(math.isinf(exp.metrics["exact_samples"]["kl"])),
        "top_half_mass_states": int(top.size),
        "top_half_within_factor_1_5": float(np.mean((ratio <= 1.5) & (ratio >= 1 / 1.5))),
    }
    write_state_table_csv(exp.path("scatter", "scatter.csv"), target.states,
                          {"p_target": target.probs, "p_model": p_model, "p_empirical": p_emp})
    model.save(exp.path("mixture", "mixture.json"))
    run.save_trajectory_csv(exp.path("trajectory", "trajectory.csv"))

    if sweep:
        rows = boltzmann_sweep(target, spec, cfg, lambdas, outputs, trials, workers)
        _write_csv(exp.path("sweep", "sweep.csv"), ["lambda", "t_output", "trial", "sse", "entropy", "kl"], rows)
        means = sweep_means(rows)
        _write_csv(exp.path("sweep_means", "sweep_means.csv"), ["lambda", "t_output", "sse", "entropy", "kl"],
                   [[lam, T, *vals] for (lam, T), vals in means.items()])
    return exp.finish()


# ---------------------------------------------------------------------------
# Wine experiment
# ---------------------------------------------------------------------------

def wine_paths(kv_dir=None):
    base = Path(kv_dir or os.environ.get("ENTROHERD_DATA_DIR", "."))
    return base / WINE_FILES["red"], base / WINE_FILES["white"]


def _grid_masses_model(model, i, j, edges):
    st = model.stacked
    cdf_i = norm.cdf(edges[:, None], st["mu"][:, i], np.exp(st["log_sigma"][:, i]))
    if j is None:
        return np.diff(cdf_i, axis=0) @ model.weights
    cdf_j = norm.cdf(edges[:, None], st["mu"][:, j], np.exp(st["log_sigma"][:, j]))
    mi, mj = np.diff(cdf_i, axis=0), np.diff(cdf_j, axis=0)
    return np.einsum("at,bt,t->ab", mi, mj, model.weights)


def _grid_masses_data(rows, i, j, edges):
    if j is None:
        return np.histogram(rows[:, i], bins=edges)[0] / rows.shape[0]
    return np.histogram2d(rows[:, i], rows[:, j], bins=[edges, edges])[0] / rows.shape[0]


def _write_pairplot(path, sources, n_vars, edges):
    rows = []
    for label, kind, obj in sources:
        fn = _grid_masses_model if kind == "model" else _grid_masses_data
        for i in range(n_vars):
            for j in range(i, n_vars):
                m = fn(obj, i, None if i == j else j, edges)
                if i == j:
                    for a in range(edges.size - 1):
                        rows.append([label, i + 1, j + 1, edges[a], "", m[a]])
                else:
                    for a in range(edges.size - 1):
                        for b in range(edges.size - 1):
                            rows.append([label, i + 1, j + 1, edges[a], edges[b], m[a, b]])
    _write_csv(path, ["source", "var_i", "var_j", "cell_i_lo", "cell_j_lo", "mass"], rows)


def wine_conditionals(model, baseline, rows, target=3):
    """Conditional distributions of one variable for the mixture and the baseline."""
    mix, base = [], []
    for r in rows:
        mix.append(model.conditional_univariate(target, r))
        m, s = baseline.conditional(target, r)
        base.append(MixtureModel([Gauss1D(m, math.log(s))]))
    return mix, base


def cmd_wine(kv, out_dir, seed=None):
    groups, extra = _split_config(kv, {"data_dir", "validation_fraction", "split_seed", "n_violin",
                                       "pairplot_lo", "pairplot_hi", "cell_width", "entropy_samples"})
    cfg = HerdingConfig.from_kv(groups[""], PRESETS["wine"])
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    frac = _as(float, extra.get("validation_fraction", 0.2), "validation_fraction")
    split_seed = _as(int, extra.get("split_seed", 0), "split_seed")
    n_violin = _as(int, extra.get("n_violin", 50), "n_violin")
    lo = _as(float, extra.get("pairplot_lo", -4.0), "pairplot_lo")
    hi = _as(float, extra.get("pairplot_hi", 4.0), "pairplot_hi")
    width = _as(float, extra.get("cell_width", 0.5), "cell_width")
    n_ent = _as(int, extra.get("entropy_samples", 20_000), "entropy_samples")
    red_path, white_path = wine_paths(extra.get("data_dir"))
    for p in (red_path, white_path):
        if not p.is_file():
            raise DataError(f"missing data file {p} (set ENTROHERD_DATA_DIR or run 'entroherd fetch')")

    exp = Experiment("wine", out_dir, cfg.seed, _config_echo(herding=cfg, experiment={
        "validation_fraction": frac, "split_seed": split_seed, "n_violin": n_violin, "cell_width": width,
        "data_files": [red_path.name, white_path.name]}))
    datasets = dict(zip(("red", "white"), load_wine(red_path, white_path)))
    features = FeatureMap.centered_moments(len(WINE_COLUMNS))
    edges = lo + width * np.arange(int(round((hi - lo) / width)) + 1)
    models, baselines, splits = {}, {}, {}
    for color, ds in datasets.items():
        train, val = split_train_validation(ds, frac, split_seed)
        splits[color] = (train, val)
        spec = standardize_from_data(features, train.rows, cfg.lam)
        run = run_entropic(features, spec, cfg)
        models[color] = run.output
        baselines[color] = GaussianBaseline(train.rows)
        ent = run.output.entropy_mc(n_ent, make_rng(cfg.seed, "entropy"))[0]
        exp.metrics[f"entropic_{color}"] = metric_row(sse=moment_sse(run.output, spec, features), entropy=ent)
        run.output.save(exp.path(f"mixture_{color}", f"mixture_{color}.json"))
        run.save_trajectory_csv(exp.path(f"trajectory_{color}", f"trajectory_{color}.csv"))
        train.save(exp.path(f"train_{color}", f"train_{color}.csv"),
                   exp.path(f"preprocessing_{color}", f"preprocessing_{color}.json"))
        _write_pairplot(exp.path(f"pairplot_{color}", f"pairplot_{color}.csv"),
                        [("data", "data", train.rows), ("herding", "model", run.output)], features.n_vars, edges)

    # classification by log-likelihood difference; each model scores data in its own z-coordinates
    nll_rows, scores, base_scores = [], {"red": [], "white": []}, {"red": [], "white": []}
    for color, (_, val) in splits.items():
        raw = val.rows * _zstd(val) + _zmean(val)
        ll = {}
        ll_base = {}
        for mcolor, (mtrain, _) in splits.items():
            z = (raw - _zmean(mtrain)) / _zstd(mtrain)
            jac = -np.sum(np.log(_zstd(mtrain)))
            ll[mcolor] = models[mcolor].log_density(z) + jac
            ll_base[mcolor] = baselines[mcolor].log_density(z) + jac
        scores[color] = ll["red"] - ll["white"]
        base_scores[color] = ll_base["red"] - ll_base["white"]
        nll_rows += [[color, k, -ll["red"][k], -ll["white"][k]] for k in range(raw.shape[0])]
    _write_csv(exp.path("validation_nll", "validation_nll.csv"), ["true_color", "row", "nll_red_model", "nll_white_model"],
               nll_rows)
    auc_h = auc(scores["red"], scores["white"])
    auc_b = auc(base_scores["red"], base_scores["white"])

    # conditional inference of x4 on white validation rows
    val_w = splits["white"][1].rows
    mix, base = wine_conditionals(models["white"], baselines["white"], val_w)
    truths = val_w[:, 3]
    cov_h = quantile_coverage(mix, truths)
    cov_b = quantile_coverage(base, truths)
    pick = np.sort(make_rng(cfg.seed, "violin").choice(val_w.shape[0], size=min(n_violin, val_w.shape[0]),
                                                       replace=False))
    qs = [0.1, 0.25, 0.5, 0.75, 0.9]
    violin = []
    for k in pick:
        for label, cond in (("herding", mix[k]), ("gaussian", base[k])):
            violin.append([int(k), label, truths[k]] + list(cond.quantiles(qs)))
    _write_csv(exp.path("violin_x4", "violin_x4.csv"), ["row", "model", "truth"] + [f"q{int(q * 100)}" for q in qs],
               violin)
    exp.metrics["entropic"] = metric_row(auc=auc_h, coverage=cov_h)
    exp.metrics["gaussian_baseline"] = metric_row(auc=auc_b, coverage=cov_b)
    exp.extra = {"lambda": cfg.lam, "n_features": features.size,
                 "n_validation": {c: int(v.n_rows) for c, (_, v) in splits.items()},
                 "coverage_interval": [0.1, 0.9], "conditional_variable": "x4"}
    return exp.finish()


def _zmean(ds):
    return np.array([ds.preprocessing_log["variables"][n]["zscore_mean"] for n in ds.var_names])


def _zstd(ds):
    return np.array([ds.preprocessing_log["variables"][n]["zscore_std"] for n in ds.var_names])


# ---------------------------------------------------------------------------
# Self-test
# ---------------------------------------------------------------------------

def _fd_jacobian(fn, x, h=1e-6):
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.array(cols).T


def selftest_checks(corrupt=None):
    """Oracle checks; ``corrupt="moments"`` perturbs the moment formula used
    by the gradient check (negative control)."""
    from .engine import point_equivalence_transform
    from .evaluate import entropy_gap, fixed_point_residual, fixed_point_solve, loss_L
    from .families import GaussDiag, SpinBernoulli

    rng = np.random.default_rng(12345)
    results = []

    def moments_of(comp, feats):
        m = comp.moments(feats)
        return m * (1 + 1e-3 * np.arange(1, m.size + 1)) if corrupt == "moments" else m

    # gradient checks
    worst = 0.0
    cases = [(Gauss1D(0.3, -0.2), FeatureMap.poly1d(4)),
             (GaussDiag(rng.normal(size=3), rng.normal(scale=0.3, size=3)), FeatureMap.centered_moments(3, [0.1, -0.2, 0.3]))]
    for comp, feats in cases:
        fd = _fd_jacobian(lambda v: moments_of(comp.with_coords(v), feats), comp.coords)
        worst = max(worst, float(np.max(np.abs(fd - comp.jacobian(feats)) / (np.abs(fd) + 1e-3))))
    sp = SpinBernoulli(rng.normal(size=4))
    fs = FeatureMap.spin_pairwise(4)
    fd = _fd_jacobian(lambda p: moments_of(SpinBernoulli.from_p(p), fs), sp.p)
    worst = max(worst, float(np.max(np.abs(fd - sp.jacobian(fs)) / (np.abs(fd) + 1e-3))))
    results.append(("moment gradients vs finite differences", worst <= 1e-4, worst))

    # entropy-gap identity
    states = spin_states(4)
    res = max(abs(entropy_gap(MixtureModel([SpinBernoulli(rng.normal(scale=2, size=4)) for _ in range(5)],
                                           rng.dirichlet(np.ones(5))), states).residual) for _ in range(20))
    results.append(("entropy gap identity", res <= 1e-10, res))

    # fixed-point optimality
    W = np.triu(rng.normal(scale=0.5, size=(4, 4)), 1)
    from .evaluate import GibbsModel
    g = GibbsModel.boltzmann(W + W.T)
    spec = standardize_from_model(fs, g, 5.0)
    phi = fs.evaluate(states)
    theta = fixed_point_solve(phi, spec.raw_mean, spec.effective_weight)
    resid = fixed_point_residual(theta, phi, spec.raw_mean, spec.effective_weight)
    from .evaluate import gibbs_table
    l_star = loss_L(gibbs_table(theta, phi)[1], spec, fs, states)
    worst_gap = min(loss_L(MixtureModel([SpinBernoulli(rng.normal(scale=2, size=4)) for _ in range(5)]), spec, fs, states)
                    - l_star for _ in range(20))
    results.append(("fixed point optimality", resid <= 1e-8 and worst_gap >= -1e-9, resid))

    # point-herding equivalence
    domain = rng.normal(size=(30, 1))
    f1 = FeatureMap.poly1d(2)
    sp1 = standardize_from_data(f1, rng.normal(size=(200, 1)), 3.0)
    cfg = HerdingConfig(t_output=300, t_burnin=0, lam=3.0, schedule="harmonic")
    x0 = PointMass(domain[0])
    ent = run_entropic(f1, sp1, cfg, init=x0, domain=domain)
    from .engine import _domain_features
    _, phi_d = _domain_features(f1, sp1, domain)
    pt = run_point(f1, sp1, cfg, domain, w0=-phi_d[0])
    same = all(np.array_equal(a.component.x, b.component.x) for a, b in zip(ent.trajectory, pt.trajectory))
    wprime = point_equivalence_transform(ent)
    w = np.array([pt.initial_weights] + [r.weights for r in pt.trajectory])
    diff = float(np.max(np.abs(wprime - w)))
    results.append(("point herding equivalence", same and diff <= 1e-12, diff))
    return results


def cmd_selftest(out_dir=None, corrupt=None):
    results = selftest_checks(corrupt)
    for name, ok, value in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({value:.3e})")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_json(Path(out_dir) / "selftest.json",
                   [{"check": n, "passed": bool(ok), "value": v} for n, ok, v in results])
    return all(ok for _, ok, _ in results)


# ---------------------------------------------------------------------------
# Fetch
# ---------------------------------------------------------------------------

def cmd_fetch(kv, out_dir=None):
    _, extra = _split_config(kv, {"data_dir", "sha256_red", "sha256_white", "url_red", "url_white"})
    target = Path(out_dir or extra.get("data_dir") or os.environ.get("ENTROHERD_DATA_DIR", "."))
    target.mkdir(parents=True, exist_ok=True)
    fetched = {}
    for color in ("red", "white"):
        url = extra.get(f"url_{color}", WINE_URLS[color])
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                payload = resp.read()
        except OSError as exc:
            raise DataError(f"could not download {url}: {exc}") from exc
        digest = hashlib.sha256(payload).hexdigest()
        want = extra.get(f"sha256_{color}")
        if want and want.lower() != digest:
            raise DataError(f"checksum mismatch for {url}: got {digest}")
        (target / WINE_FILES[color]).write_bytes(payload)
        fetched[color] = digest
        print(f"{WINE_FILES[color]}  sha256={digest}")
    return fetched


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="entroherd", description="Entropic herding experiments.")
    p.add_argument("--version", action="version", version=f"entroherd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("bimodal", "boltzmann", "wine", "selftest", "fetch"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="key = value config file")
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--seed", type=int, help="override the run seed")
        if name == "boltzmann":
            s.add_argument("--sweep", action="store_true", help="run the lambda x T_output sweep")
        if name == "selftest":
            s.add_argument("--corrupt", choices=["moments"], help=argparse.SUPPRESS)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        kv = load_kv(args.config) if args.config else {}
        out = args.out or Path("entroherd-out") / args.command
        if args.command == "bimodal":
            report = cmd_bimodal(kv, out, args.seed)
        elif args.command == "boltzmann":
            report = cmd_boltzmann(kv, out, args.seed, args.sweep)
        elif args.command == "wine":
            report = cmd_wine(kv, out, args.seed)
        elif args.command == "selftest":
            return EXIT_OK if cmd_selftest(args.out, args.corrupt) else 1
        else:
            cmd_fetch(kv, args.out)
            return EXIT_OK
        print(json.dumps(report["metrics"], indent=1))
        return EXIT_OK
    except (ConfigError, StateSpaceTooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptyData, ZeroVarianceFeature, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except EntroherdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
