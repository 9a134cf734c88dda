"""Exact small-instance oracles and diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate, optimize
from scipy.special import logsumexp, xlogy

from .core import MAX_ENUMERABLE_STATES, NumericalFailure, StateSpaceTooLarge, logsumexp_fsum
from .mixture import MixtureModel


class NoConvergence(NumericalFailure):
    def __init__(self, residuals):
        self.residuals = list(residuals)
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(f"fixed-point iteration did not converge (last residual {last:.3e})")


def _check_states(states):
    states = np.asarray(states, dtype=float)
    if states.shape[0] > MAX_ENUMERABLE_STATES:
        raise StateSpaceTooLarge(states.shape[0])
    return states


def gibbs_table(theta, phi):
    """log Z, probabilities and feature means of ``exp(-phi @ theta) / Z``."""
    logits = -(phi @ theta)
    log_z = logsumexp_fsum(logits)
    probs = np.exp(logits - log_z)
    eta = np.sum(np.ascontiguousarray(phi.T) * probs, axis=1)
    return log_z, probs, eta


def enumerate_gibbs(theta, features, states):
    states = _check_states(states)
    return gibbs_table(np.asarray(theta, dtype=float), features.evaluate(states))


@dataclass(eq=False)
class GibbsModel:
    """An enumerable Gibbs distribution ``exp(-sum_m theta_m phi_m(x)) / Z``."""

    theta: np.ndarray
    features: object
    states: np.ndarray
    log_Z: float = None
    probs: np.ndarray = None
    eta: np.ndarray = None
    coupling: np.ndarray = None

    def __post_init__(self):
        self.states = _check_states(self.states)
        self.theta = np.asarray(self.theta, dtype=float)
        self.log_Z, self.probs, self.eta = enumerate_gibbs(self.theta, self.features, self.states)

    @classmethod
    def boltzmann(cls, W):
        """Boltzmann machine ``exp(-sum_{i<j} W_ij x_i x_j) / Z`` without biases."""
        from .core import FeatureMap, spin_states
        W = np.asarray(W, dtype=float)
        n = W.shape[0]
        if not np.allclose(W, W.T) or np.any(np.diag(W) != 0):
            raise ValueError("coupling matrix must be symmetric with zero diagonal")
        features = FeatureMap.spin_pairwise(n)
        theta = np.array([W[i, j] for _, i, j in features.ids])
        return cls(theta, features, spin_states(n), coupling=W)

    def entropy(self):
        return float(-np.sum(xlogy(self.probs, self.probs)))

    def log_prob(self):
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def sample(self, n, seed=0):
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        idx = rng.choice(self.states.shape[0], size=n, p=self.probs)
        return self.states[idx]


def _state_table(q, states):
    """Probability table of ``q`` (a mixture or an explicit table) over ``states``."""
    if isinstance(q, MixtureModel):
        return np.exp(q.log_density(states))
    if isinstance(q, GibbsModel):
        return q.probs
    return np.asarray(q, dtype=float)


def kl_discrete(p, q, states=None):
    """KL(p || q) over an enumerated state space; ``inf`` when q misses mass of p."""
    p = _state_table(p, states)
    if isinstance(q, MixtureModel):
        log_q = q.log_density(states)
    else:
        with np.errstate(divide="ignore"):
            log_q = np.log(_state_table(q, states))
    support = p > 0
    if np.any(~np.isfinite(log_q[support])):
        return math.inf
    terms = p[support] * (np.log(p[support]) - log_q[support])
    return math.fsum(terms)


def _entropy_of_table(p):
    return float(-math.fsum(xlogy(p, p)))


def loss_L(p, spec, features, states):
    """``0.5 * lam * sum_m eta'_m(p)**2 - H(p)`` with exact entropy by enumeration."""
    states = _check_states(states)
    if isinstance(p, MixtureModel):
        eta = spec.standardize(p.feature_moments(features))
        table = np.exp(p.log_density(states))
    else:
        table = _state_table(p, states)
        eta = spec.standardize(table @ features.evaluate(states))
    return 0.5 * spec.lam * float(eta @ eta) - _entropy_of_table(table)


def moment_sse(p, spec, features):
    """Sum of squared standardized moment errors."""
    eta = spec.standardize(p.feature_moments(features))
    return float(eta @ eta)


class EntropyGap(NamedTuple):
    gap: float
    h_rho: float
    mean_h_c: float
    residual: float


def entropy_gap(model, states):
    """Exact ``H(p) - H~`` and its decomposition ``H_rho - E_p[H_c]``."""
    states = _check_states(states)
    lc = model.component_log_densities(states)
    with np.errstate(divide="ignore"):
        log_rho = np.log(model.weights)
        joint = lc + log_rho[None]
        log_p = logsumexp(joint, axis=1)
    p = np.exp(log_p)
    h = _entropy_of_table(p)
    h_tilde = model.component_entropy_mean()
    h_rho = float(-math.fsum(xlogy(model.weights, model.weights)))
    live = p > 0
    post = np.exp(joint[live] - log_p[live, None])
    h_c = -np.sum(xlogy(post, post), axis=1)
    mean_h_c = math.fsum(p[live] * h_c)
    gap = h - h_tilde
    return EntropyGap(gap, h_rho, mean_h_c, gap - (h_rho - mean_h_c))


# ---------------------------------------------------------------------------
# Fixed point theta = Lambda (eta(theta) - mu)
# ---------------------------------------------------------------------------

def fixed_point_residual(theta, phi, mu, lam):
    _, _, eta = gibbs_table(theta, phi)
    return float(np.max(np.abs(theta - lam * (eta - mu))))


def fixed_point_solve(phi, mu, lam, method="newton", tol=1e-10, max_iter=100_000, alpha=0.1):
    """Solve ``theta = lam * (eta(theta) - mu)`` on an enumerated domain.

    ``phi`` holds feature values per state. ``method="newton"`` minimizes the
    strictly convex function ``log Z(theta) + theta . mu + sum theta**2 / (2 lam)``
    whose stationary points are exactly the fixed points. ``method="damped"``
    runs ``theta <- (1 - alpha) theta + alpha lam (eta(theta) - mu)``.
    """
    phi = np.asarray(phi, dtype=float)
    M = phi.shape[1]
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (M,))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (M,))
    theta = np.zeros(M)
    trace = []

    if method == "damped":
        for _ in range(max_iter):
            _, _, eta = gibbs_table(theta, phi)
            target = lam * (eta - mu)
            res = float(np.max(np.abs(theta - target)))
            trace.append(res)
            if res <= tol:
                return theta
            if not np.isfinite(res):
                break
            theta = (1 - alpha) * theta + alpha * target
        raise NoConvergence(trace)

    def dual(t):
        log_z, _, _ = gibbs_table(t, phi)
        return log_z + t @ mu + 0.5 * np.sum(t * t / lam)

    for _ in range(200):
        _, probs, eta = gibbs_table(theta, phi)
        grad = -eta + mu + theta / lam
        res = float(np.max(np.abs(theta - lam * (eta - mu))))
        trace.append(res)
        if res <= tol:
            return theta
        centered = phi - eta
        hess = (centered.T * probs) @ centered + np.diag(1.0 / lam)
        step = np.linalg.solve(hess, grad)
        f0, t = dual(theta), 1.0
        while t > 1e-12 and dual(theta - t * step) > f0 - 1e-4 * t * (grad @ step):
            t *= 0.5
        theta = theta - t * step
    raise NoConvergence(trace)


def gaussian_fixed_point(mu, lam):
    """Fixed point for features ``(x, x**2)`` on the real line.

    With ``m = -theta1 / (2 theta2)`` and ``s**2 = 1 / (2 theta2)``, the
    conditions reduce to ``m = lam1 mu1 / (lam1 + 2 theta2)`` and a scalar
    equation in ``theta2``; for ``mu1 = 0`` it is the quadratic
    ``2 theta2**2 + 2 lam2 mu2 theta2 - lam2 = 0``.
    """
    mu1, mu2 = map(float, mu)
    lam1, lam2 = map(float, lam)
    if mu1 == 0.0:
        b = lam2 * mu2
        theta2 = (-b + math.sqrt(b * b + 2 * lam2)) / 2
        return np.array([0.0, theta2])

    def f(t2):
        m = lam1 * mu1 / (lam1 + 2 * t2)
        return t2 - lam2 * (m * m + 1 / (2 * t2) - mu2)

    hi = 1.0
    while f(hi) < 0:
        hi *= 2
    theta2 = optimize.brentq(f, 1e-300, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    m = lam1 * mu1 / (lam1 + 2 * theta2)
    return np.array([-2 * theta2 * m, theta2])


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

def _bin_masses(obj, edges):
    if isinstance(obj, MixtureModel):
        if obj.is_gaussian:
            return np.diff(obj.cdf(edges))
        x = obj.stacked["x"][:, 0]
        return np.histogram(x, bins=edges, weights=obj.weights)[0]
    if callable(obj):
        return np.array([integrate.quad(obj, a, b, epsabs=1e-13, epsrel=1e-10)[0]
                         for a, b in zip(edges[:-1], edges[1:])])
    x = np.asarray(obj, dtype=float).ravel()
    return np.histogram(x, bins=edges)[0] / x.size


class HistogramComparison(NamedTuple):
    edges: np.ndarray
    source: np.ndarray
    target: np.ndarray
    tv: float


def histogram_compare(source, target, bin_width=0.1, lo=-4.0, hi=4.0):
    """Bin two 1-D distributions on a shared grid and report their TV distance.

    ``source``/``target`` may each be a mixture, a sample array or a pdf callable.
    Bins are anchored at ``lo`` with the given width.
    """
    n_bins = int(round((hi - lo) / bin_width))
    edges = lo + bin_width * np.arange(n_bins + 1)
    p = _bin_masses(source, edges)
    q = _bin_masses(target, edges)
    # mass outside the grid counts fully towards the distance
    outside = abs(1 - p.sum()) + abs(1 - q.sum())
    tv = 0.5 * (float(np.sum(np.abs(p - q))) + outside)
    return HistogramComparison(edges, p, q, min(tv, 1.0))


def write_state_table_csv(path, states, columns):
    """One row per state: the state as a +-1 string, then each named column."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["state"] + list(columns))
        cols = [np.asarray(v) for v in columns.values()]
        for k, s in enumerate(states):
            label = "".join("+" if v > 0 else "-" for v in s)
            wr.writerow([label] + [repr(float(c[k])) for c in cols])
