"""Experiment inputs: the bimodal target, Boltzmann instances and the wine data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.stats import rankdata

from .core import EntroherdError, make_rng
from .evaluate import GibbsModel


class DataError(EntroherdError):
    pass


class MissingColumn(DataError):
    pass


class NonNumericCell(DataError):
    def __init__(self, row, col, value):
        self.row, self.col = row, col
        super().__init__(f"row {row}, column {col!r}: non-numeric value {value!r}")


class RangeSanityFail(DataError):
    pass


# ---------------------------------------------------------------------------
# One-dimensional bimodal target
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BimodalTarget:
    """``p(x) ∝ exp(-(x**4 - 3 x**2 + 0.5 x))`` normalized over ``[lo, hi]``."""

    lo: float = -4.0
    hi: float = 4.0

    @staticmethod
    def log_unnormalized(x):
        x = np.asarray(x, dtype=float)
        x2 = x * x
        return -(x2 * x2 - 3 * x2 + 0.5 * x)

    @cached_property
    def log_z(self):
        z, _ = integrate.quad(lambda x: math.exp(self.log_unnormalized(x)), self.lo, self.hi,
                              epsabs=1e-14, epsrel=1e-13, limit=200)
        return math.log(z)

    def pdf(self, x):
        return np.exp(self.log_unnormalized(x) - self.log_z)

    def moment(self, k):
        lz = self.log_z
        val, _ = integrate.quad(lambda x: x**k * math.exp(self.log_unnormalized(x) - lz),
                                self.lo, self.hi, epsabs=1e-14, epsrel=1e-13, limit=200)
        return val


def make_bimodal_target():
    return BimodalTarget()


def mh_sample_bimodal(n=10_000, seed=0, step=0.5, burnin=1000, thin=1, chains=1):
    """Random-walk Metropolis-Hastings draws from the bimodal target.

    With ``chains > 1`` that many independent chains advance in lockstep and
    their draws are concatenated chain by chain.
    """
    if n < 1 or chains < 1:
        raise ValueError("n and chains must be positive")
    rng = make_rng(seed, "mh")
    log_p = BimodalTarget.log_unnormalized
    if chains > 1:
        return _mh_vectorized(rng, n, chains, step, burnin, thin)
    x = 0.0
    lp = float(log_p(x))
    total = burnin + n * thin
    steps = rng.normal(0.0, step, size=total)
    unif = rng.random(total)
    out = np.empty(n)
    k = 0
    for t in range(total):
        y = x + steps[t]
        ly = float(log_p(y))
        if ly >= lp or unif[t] < math.exp(ly - lp):
            x, lp = y, ly
        if t >= burnin and (t - burnin) % thin == thin - 1:
            out[k] = x
            k += 1
    return out


def _mh_vectorized(rng, n, chains, step, burnin, thin):
    log_p = BimodalTarget.log_unnormalized
    per_chain = -(-n // chains)
    x = np.zeros(chains)
    lp = log_p(x)
    out = np.empty((per_chain, chains))
    k = 0
    for t in range(burnin + per_chain * thin):
        y = x + rng.normal(0.0, step, size=chains)
        ly = log_p(y)
        with np.errstate(over="ignore"):
            accept = (ly >= lp) | (rng.random(chains) < np.exp(ly - lp))
        x = np.where(accept, y, x)
        lp = np.where(accept, ly, lp)
        if t >= burnin and (t - burnin) % thin == thin - 1:
            out[k] = x
            k += 1
    return out.T.ravel()[:n]


# ---------------------------------------------------------------------------
# Boltzmann machine instances
# ---------------------------------------------------------------------------

def make_boltzmann_instance(N=10, seed=0):
    """Random couplings ``W_ij ~ N(0, 0.2**2 / N)`` plus a chain of ``-0.3``
    couplings between neighbours, broken between variables 4 and 5."""
    if N < 2:
        raise ValueError("need N >= 2")
    rng = make_rng(seed, "boltzmann")
    W = np.zeros((N, N))
    iu = np.triu_indices(N, 1)
    W[iu] = rng.normal(0.0, 0.2 / math.sqrt(N), size=iu[0].size)
    for i in range(N - 1):
        W[i, i + 1] = -0.3
    if N >= 5:
        W[3, 4] = 0.0
    W = W + W.T
    return GibbsModel.boltzmann(W)


# ---------------------------------------------------------------------------
# Wine quality data
# ---------------------------------------------------------------------------

WINE_COLUMNS = (
    "fixed acidity", "volatile acidity", "citric acid", "residual sugar", "chlorides",
    "free sulfur dioxide", "total sulfur dioxide", "density", "pH", "sulphates", "alcohol",
)
# published raw ranges, pre-transform
WINE_RANGES = (
    (3.80, 15.90), (0.08, 1.58), (0.00, 1.66), (0.60, 65.80), (0.01, 0.61), (1.00, 289.00),
    (6.00, 440.00), (0.99, 1.04), (2.72, 4.01), (0.22, 2.00), (8.00, 14.90),
)
LOG_COLUMNS = (2, 3, 4, 5, 6)
LOG_ZERO_VALUE = -5.0


@dataclass
class Dataset:
    rows: np.ndarray
    var_names: list
    preprocessing_log: dict = field(default_factory=dict)

    @property
    def n_rows(self):
        return self.rows.shape[0]

    def subset(self, idx):
        return Dataset(self.rows[idx].copy(), list(self.var_names), dict(self.preprocessing_log))

    def save(self, csv_path, log_path=None):
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.var_names)
            for r in self.rows:
                wr.writerow([repr(float(v)) for v in r])
        if log_path is not None:
            Path(log_path).write_text(json.dumps(self.preprocessing_log, indent=1))


def read_wine_csv(path):
    """Read a semicolon-delimited wine file; the quality column is dropped."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=";")
        try:
            header = [h.strip().strip('"') for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        cols = []
        for name in WINE_COLUMNS:
            if name not in header:
                raise MissingColumn(f"{path}: column {name!r} missing")
            cols.append(header.index(name))
        rows = []
        for r, rec in enumerate(reader, start=2):
            if not rec:
                continue
            vals = []
            for name, c in zip(WINE_COLUMNS, cols):
                cell = rec[c].strip() if c < len(rec) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericCell(r, name, cell) from None
                if not math.isfinite(v):
                    raise NonNumericCell(r, name, cell)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path} has no data rows")
    return np.array(rows)


def check_wine_ranges(raw, slack=0.1):
    for k, (lo, hi) in enumerate(WINE_RANGES):
        pad = slack * (hi - lo)
        cmin, cmax = raw[:, k].min(), raw[:, k].max()
        if cmin < lo - pad or cmax > hi + pad:
            raise RangeSanityFail(f"{WINE_COLUMNS[k]}: observed [{cmin}, {cmax}] vs [{lo}, {hi}]")


def log_transform_wine(raw):
    """Apply log10 to columns 3..7; zeros map to -5.0. Returns (values, log)."""
    out = raw.astype(float).copy()
    log = {}
    for k, name in enumerate(WINE_COLUMNS):
        entry = {"log10": k in LOG_COLUMNS, "zero_substitutions": 0}
        if k in LOG_COLUMNS:
            zero = out[:, k] <= 0
            entry["zero_substitutions"] = int(zero.sum())
            with np.errstate(divide="ignore"):
                out[:, k] = np.where(zero, LOG_ZERO_VALUE, np.log10(np.where(zero, 1.0, out[:, k])))
        log[name] = entry
    return out, log


def load_wine(path_red, path_white):
    """Read both colours and apply the log transforms (z-scoring happens at split time)."""
    out = []
    for path in (path_red, path_white):
        raw = read_wine_csv(path)
        check_wine_ranges(raw)
        values, log = log_transform_wine(raw)
        out.append(Dataset(values, list(WINE_COLUMNS), {"source": str(path), "variables": log}))
    return tuple(out)


def zscore_stats(rows):
    return rows.mean(axis=0), rows.std(axis=0)


def apply_zscore(dataset, mean, std):
    ds = Dataset((dataset.rows - mean) / std, list(dataset.var_names), json.loads(json.dumps(dataset.preprocessing_log)))
    for k, name in enumerate(ds.var_names):
        ds.preprocessing_log.setdefault("variables", {}).setdefault(name, {})
        ds.preprocessing_log["variables"][name].update({"zscore_mean": float(mean[k]), "zscore_std": float(std[k])})
    return ds


def invert_preprocessing(rows, dataset_log):
    """Undo z-scoring and log10 (substituted zeros come back as 1e-5)."""
    rows = np.array(rows, dtype=float)
    for k, name in enumerate(WINE_COLUMNS):
        entry = dataset_log["variables"][name]
        rows[:, k] = rows[:, k] * entry["zscore_std"] + entry["zscore_mean"]
        if entry["log10"]:
            rows[:, k] = 10.0 ** rows[:, k]
    return rows


def split_train_validation(dataset, fraction=0.2, seed=0):
    """Seeded random split; ``floor(fraction * n)`` rows go to validation.

    Both parts are z-scored with statistics of the training part.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = dataset.n_rows
    n_val = int(math.floor(fraction * n))
    perm = make_rng(seed, "split").permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    train, val = dataset.subset(train_idx), dataset.subset(val_idx)
    mean, std = zscore_stats(train.rows)
    if np.any(std == 0):
        raise DataError("a variable is constant on the training split")
    train, val = apply_zscore(train, mean, std), apply_zscore(val, mean, std)
    train.preprocessing_log["split"] = {"part": "train", "rows": train_idx.tolist()}
    val.preprocessing_log["split"] = {"part": "validation", "rows": val_idx.tolist()}
    return train, val


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auc(scores_pos, scores_neg):
    """Rank-based ROC AUC; ties count one half."""
    pos = np.asarray(scores_pos, dtype=float)
    neg = np.asarray(scores_neg, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score lists must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def quantile_coverage(conditionals, truths, lo=0.10, hi=0.90):
    """Fraction of truths inside the ``[lo, hi]`` quantile band of their conditional."""
    if len(conditionals) != len(truths):
        raise ValueError("conditionals and truths differ in length")
    hits = 0
    for cond, t in zip(conditionals, truths):
        q_lo, q_hi = cond.quantiles([lo, hi]) if hasattr(cond, "quantiles") else cond(lo, hi)
        hits += q_lo <= t <= q_hi
    return hits / len(truths)


class GaussianBaseline:
    """Multivariate normal fitted to training moments."""

    def __init__(self, rows):
        rows = np.asarray(rows, dtype=float)
        self.mean = rows.mean(axis=0)
        self.cov = np.cov(rows, rowvar=False, bias=True)
        self.prec = np.linalg.inv(self.cov)
        sign, logdet = np.linalg.slogdet(self.cov)
        self._norm = -0.5 * (rows.shape[1] * math.log(2 * math.pi) + logdet)

    def log_density(self, x):
        d = np.atleast_2d(x) - self.mean
        return self._norm - 0.5 * np.einsum("ni,ij,nj->n", d, self.prec, d)

    def conditional(self, target, observed):
        """Mean and std of coordinate ``target`` given the others."""
        keep = np.arange(self.mean.size) != target
        # conditional of a Gaussian through the precision matrix
        var = 1.0 / self.prec[target, target]
        m = self.mean[target] - var * self.prec[target, keep] @ (observed[keep] - self.mean[keep])
        return m, math.sqrt(var)
