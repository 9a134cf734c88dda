"""Weighted mixtures of components: the probabilistic model a herding run produces."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, ndtr, xlogy

from .core import EntroherdError, StateSpaceTooLarge, MAX_ENUMERABLE_STATES, spin_states
from .families import (
    Gauss1D, GaussDiag, PointMass, SpinBernoulli, UnsupportedForPointMass, component_from_dict,
)


class AllWeightsVanish(EntroherdError):
    def __init__(self, max_log_weight):
        self.max_log_weight = max_log_weight
        super().__init__(f"all conditional weights vanish (max log-weight {max_log_weight})")


class MixtureModel:
    """A finite mixture ``sum_t w_t r_t`` of components from one family.

    Components are kept in the order they were produced, so partial
    aggregates of a run can be rebuilt from a stored file.
    """

    def __init__(self, components, weights=None):
        components = list(components)
        if not components:
            raise ValueError("mixture needs at least one component")
        kinds = {c.variant for c in components}
        dims = {c.dim for c in components}
        if len(kinds) != 1 or len(dims) != 1:
            raise ValueError("components must share family and dimension")
        n = len(components)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float).copy()
        if w.shape != (n,) or np.any(w < 0):
            raise ValueError("weights must be non-negative, one per component")
        w = w / w.sum()
        self.components = components
        self.weights = w
        self.family = components[0].variant
        self.dim = components[0].dim
        self._stack = None

    def __len__(self):
        return len(self.components)

    @property
    def stacked(self):
        """Component parameters stacked into arrays, shape (n_components, dim)."""
        if self._stack is None:
            c0 = self.components[0]
            if isinstance(c0, GaussDiag):
                self._stack = {
                    "mu": np.array([c.mu for c in self.components]),
                    "log_sigma": np.array([c.log_sigma for c in self.components]),
                }
            elif isinstance(c0, SpinBernoulli):
                self._stack = {"s": np.array([c.s for c in self.components])}
            else:
                self._stack = {"x": np.array([c.x for c in self.components])}
        return self._stack

    @property
    def is_gaussian(self):
        return isinstance(self.components[0], GaussDiag)

    @property
    def is_discrete(self):
        c0 = self.components[0]
        return isinstance(c0, SpinBernoulli) or (isinstance(c0, PointMass) and c0.discrete)

    # -- densities ---------------------------------------------------------

    def component_log_densities(self, x):
        """log r_t(x) for a batch of points, shape (n_points, n_components)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or (x.ndim == 1 and self.dim == 1):
            x = x.reshape(-1, 1)
        elif x.ndim == 1:
            x = x[None, :]
        st = self.stacked
        if "mu" in st:
            sig = np.exp(st["log_sigma"])
            z = (x[:, None, :] - st["mu"][None]) / sig[None]
            return np.sum(-0.5 * np.log(2 * np.pi) - st["log_sigma"][None] - 0.5 * z * z, axis=-1)
        if "s" in st:
            xs = x[:, None, :] * st["s"][None]
            return np.sum(-np.logaddexp(0.0, -xs), axis=-1)
        if not self.is_discrete:
            raise UnsupportedForPointMass("density of continuous point masses is undefined")
        eq = np.all(x[:, None, :] == st["x"][None], axis=-1)
        return np.where(eq, 0.0, -np.inf)

    def log_density(self, x):
        """log p(x); a scalar for a single point, else one value per row."""
        lc = self.component_log_densities(x)
        with np.errstate(divide="ignore"):
            out = logsumexp(lc + np.log(self.weights)[None], axis=1)
        single = np.ndim(x) == 0 or (np.ndim(x) == 1 and self.dim > 1)
        return float(out[0]) if single else out

    def feature_moments(self, features):
        """Raw feature means of the mixture (linear in the components)."""
        return self.weights @ np.array([c.moments(features) for c in self.components])

    # -- sampling ----------------------------------------------------------

    def sample(self, n, seed=0):
        """``n`` independent draws, shape (n, dim)."""
        rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
        if n == 0:
            return np.empty((0, self.dim))
        idx = rng.choice(len(self), size=n, p=self.weights)
        st = self.stacked
        if "mu" in st:
            return st["mu"][idx] + np.exp(st["log_sigma"][idx]) * rng.standard_normal((n, self.dim))
        if "s" in st:
            p = 1.0 / (1.0 + np.exp(-st["s"][idx]))
            return np.where(rng.random((n, self.dim)) < p, 1.0, -1.0)
        return st["x"][idx].copy()

    # -- entropy -----------------------------------------------------------

    def entropy_exact_discrete(self):
        """Exact entropy of a spin or discrete point-mass mixture."""
        if isinstance(self.components[0], PointMass):
            if not self.is_discrete:
                raise UnsupportedForPointMass("entropy of continuous point masses is undefined")
            _, inv = np.unique(self.stacked["x"], axis=0, return_inverse=True)
            p = np.bincount(inv.ravel(), weights=self.weights)
            return float(-np.sum(xlogy(p, p)))
        if not isinstance(self.components[0], SpinBernoulli):
            raise ValueError("exact entropy needs a discrete family")
        if 2**self.dim > MAX_ENUMERABLE_STATES:
            raise StateSpaceTooLarge(2**self.dim)
        logp = self.log_density(spin_states(self.dim))
        return float(-np.sum(np.exp(logp) * logp))

    def entropy_mc(self, n_samples=100_000, seed=0):
        """Monte-Carlo entropy estimate and its standard error."""
        x = self.sample(n_samples, seed)
        lp = self.log_density(x)
        return float(-lp.mean()), float(lp.std(ddof=1) / np.sqrt(n_samples))

    def component_entropy_mean(self):
        return float(self.weights @ np.array([c.entropy() for c in self.components]))

    # -- conditionals ------------------------------------------------------

    def conditional_univariate(self, target, observed):
        """Distribution of coordinate ``target`` given every other coordinate.

        ``observed`` is a full-length vector; its entry at ``target`` is ignored.
        Returns a one-dimensional Gaussian mixture.
        """
        if not self.is_gaussian:
            raise ValueError("conditionals need a Gaussian family")
        observed = np.asarray(observed, dtype=float)
        st = self.stacked
        keep = np.arange(self.dim) != target
        sig = np.exp(st["log_sigma"][:, keep])
        z = (observed[keep][None] - st["mu"][:, keep]) / sig
        # overflow to -inf is caught below as vanishing weights
        with np.errstate(over="ignore", divide="ignore"):
            loglik = np.sum(-0.5 * np.log(2 * np.pi) - st["log_sigma"][:, keep] - 0.5 * z * z, axis=1)
            logw = np.log(self.weights) + loglik
        top = np.max(logw)
        if not np.isfinite(top):
            raise AllWeightsVanish(float(top))
        w = np.exp(logw - top)
        comps = [Gauss1D(m, l) for m, l in zip(st["mu"][:, target], st["log_sigma"][:, target])]
        return MixtureModel(comps, w / w.sum())

    def cdf(self, x):
        """CDF of a one-dimensional Gaussian mixture."""
        if not (self.is_gaussian and self.dim == 1):
            raise ValueError("cdf needs a one-dimensional Gaussian mixture")
        st = self.stacked
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - st["mu"][:, 0]) / np.exp(st["log_sigma"][:, 0])
        return ndtr(z) @ self.weights

    def quantiles(self, probs, tol=1e-8, max_iter=200):
        """Invert the CDF of a 1-D Gaussian mixture by bisection."""
        st = self.stacked
        mu, sig = st["mu"][:, 0], np.exp(st["log_sigma"][:, 0])
        probs = np.atleast_1d(np.asarray(probs, dtype=float))
        lo = np.full(probs.shape, np.min(mu - 10 * sig))
        hi = np.full(probs.shape, np.max(mu + 10 * sig))
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            c = self.cdf(mid)
            if np.all(np.abs(c - probs) <= tol) or np.all(hi - lo <= 1e-15 * np.maximum(1, np.abs(mid))):
                break
            below = c < probs
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return {"family": self.family, "dim": self.dim, "weights": self.weights.tolist(),
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d):
        comps = [component_from_dict(c) for c in d["components"]]
        m = cls(comps, d["weights"])
        if m.family != d["family"] or m.dim != d["dim"]:
            raise ValueError("mixture header does not match its components")
        return m

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def log_density(model, x):
    return model.log_density(x)


def sample(model, n, seed=0):
    return model.sample(n, seed)


def conditional_univariate(model, target, observed):
    return model.conditional_univariate(target, observed)


def quantiles_univariate(model_1d, probs):
    return model_1d.quantiles(probs)


def entropy_exact_discrete(model):
    return model.entropy_exact_discrete()


def entropy_mc(model, n_samples=100_000, seed=0):
    return model.entropy_mc(n_samples, seed)
