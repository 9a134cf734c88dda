"""Candidate component families with closed-form moments, entropies and gradients.

Gaussian components are parametrized by ``(mu, l)`` with ``l = log(sigma)``
clamped at ``log(0.01)``. Spin components use logits ``s = log(p / (1 - p))``
but report gradients with respect to ``p``: the chain-rule factor
``p (1 - p)`` is dropped on purpose because it vanishes for large ``|s|``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import comb, expit, log_expit, xlogy

from .core import CENTERED_MOMENTS, POLY1D, SPIN_PAIRWISE, UnsupportedPairing

SIGMA_FLOOR = 0.01
LOG_SIGMA_FLOOR = math.log(SIGMA_FLOOR)
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
_HALF_LOG_2PIE = 0.5 * math.log(2 * math.pi * math.e)


class UnsupportedForPointMass(UnsupportedPairing):
    pass


def _double_factorial_odd(j):
    # (j - 1)!! for even j
    return math.prod(range(j - 1, 0, -2)) if j > 0 else 1


def gaussian_power_moments(order, d, log_sigma):
    """E[y**k], dE/dd and dE/dl for y ~ N(d, exp(l)**2), elementwise."""
    order = np.asarray(order)
    d = np.asarray(d, dtype=float)
    s = np.exp(log_sigma)
    val = np.zeros(np.broadcast(order, d).shape)
    dd = np.zeros_like(val)
    dl = np.zeros_like(val)
    for k in np.unique(order):
        k = int(k)
        sel = order == k
        dk, sk = d[sel], s[sel]
        v = np.zeros(dk.shape)
        gd = np.zeros(dk.shape)
        gl = np.zeros(dk.shape)
        for j in range(0, k + 1, 2):
            c = comb(k, j, exact=True) * _double_factorial_odd(j)
            sj = sk**j
            v += c * dk ** (k - j) * sj
            if k - j >= 1:
                gd += c * (k - j) * dk ** (k - j - 1) * sj
            gl += c * j * dk ** (k - j) * sj
        val[sel], dd[sel], dl[sel] = v, gd, gl
    return val, dd, dl


class Component:
    """A single candidate distribution."""

    variant = "abstract"
    pairs_with = ()

    @property
    def dim(self):
        raise NotImplementedError

    def check_pairing(self, features):
        if features.kind not in self.pairs_with:
            raise UnsupportedPairing(f"{self.variant} cannot be paired with {features.kind}")
        if features.n_vars != self.dim:
            raise UnsupportedPairing(f"{self.variant} has dim {self.dim}, features expect {features.n_vars}")

    def to_dict(self):
        return {"variant": self.variant, "params": self.coords.tolist()}

    def __repr__(self):
        return f"{type(self).__name__}({np.array2string(self.coords, precision=4)})"


class GaussDiag(Component):
    """Independent Gaussians, one per coordinate."""

    variant = "gauss_diag"
    pairs_with = (CENTERED_MOMENTS,)

    def __init__(self, mu, log_sigma):
        mu = np.atleast_1d(np.asarray(mu, dtype=float)).copy()
        ls = np.atleast_1d(np.asarray(log_sigma, dtype=float))
        self.mu = mu
        self.log_sigma = np.maximum(np.broadcast_to(ls, mu.shape), LOG_SIGMA_FLOOR)

    @classmethod
    def from_sigma(cls, mu, sigma):
        return cls(mu, np.log(sigma))

    @property
    def sigma(self):
        return np.exp(self.log_sigma)

    @property
    def dim(self):
        return self.mu.size

    @property
    def coords(self):
        return np.concatenate([self.mu, self.log_sigma])

    def with_coords(self, v):
        n = self.dim
        return type(self)._from_arrays(v[:n], v[n:])

    @classmethod
    def _from_arrays(cls, mu, ls):
        obj = cls.__new__(cls)
        GaussDiag.__init__(obj, mu, ls)
        return obj

    def moments(self, features):
        self.check_pairing(features)
        order, i, j = features._arrays
        d = self.mu - features.center
        pure = i == j
        out = np.empty(features.size)
        out[pure] = gaussian_power_moments(order[pure], d[i[pure]], self.log_sigma[i[pure]])[0]
        out[~pure] = d[i[~pure]] * d[j[~pure]]
        return out

    def jacobian(self, features):
        """d moments / d (mu, l), shape (n_features, 2 * dim)."""
        self.check_pairing(features)
        order, i, j = features._arrays
        n = self.dim
        d = self.mu - features.center
        pure = i == j
        J = np.zeros((features.size, 2 * n))
        rows = np.flatnonzero(pure)
        _, gd, gl = gaussian_power_moments(order[pure], d[i[pure]], self.log_sigma[i[pure]])
        J[rows, i[pure]] = gd
        J[rows, n + i[pure]] = gl
        rows = np.flatnonzero(~pure)
        J[rows, i[~pure]] = d[j[~pure]]
        J[rows, j[~pure]] = d[i[~pure]]
        return J

    def vjp(self, features, w):
        """``jacobian(features).T @ w`` without forming the Jacobian."""
        self.check_pairing(features)
        order, i, j = features._arrays
        n = self.dim
        d = self.mu - features.center
        pure = i == j
        _, gd, gl = gaussian_power_moments(order[pure], d[i[pure]], self.log_sigma[i[pure]])
        wp, wc = w[pure], w[~pure]
        ip, ic, jc = i[pure], i[~pure], j[~pure]
        g_mu = np.zeros(n)
        g_mu += np.bincount(ip, wp * gd, minlength=n)
        g_mu += np.bincount(ic, wc * d[jc], minlength=n) + np.bincount(jc, wc * d[ic], minlength=n)
        g_l = np.zeros(n)
        g_l += np.bincount(ip, wp * gl, minlength=n)
        return np.concatenate([g_mu, g_l])

    def entropy(self):
        return float(self.dim * _HALF_LOG_2PIE + np.sum(self.log_sigma))

    def entropy_grad(self):
        n = self.dim
        return np.concatenate([np.zeros(n), np.ones(n)])

    def sample(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return self.mu + self.sigma * rng.standard_normal(shape)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mu) / self.sigma
        return np.sum(-_HALF_LOG_2PI - self.log_sigma - 0.5 * z * z, axis=-1)


class Gauss1D(GaussDiag):
    """A single Gaussian on the real line."""

    variant = "gauss1d"
    pairs_with = (POLY1D,)

    def __init__(self, mu=0.0, log_sigma=0.0):
        super().__init__([float(np.ravel(mu)[0])], [float(np.ravel(log_sigma)[0])])


class SpinBernoulli(Component):
    """Independent +-1 spins with ``P(x_i = +1) = expit(s_i)``."""

    variant = "spin_bernoulli"
    pairs_with = (SPIN_PAIRWISE,)

    def __init__(self, s):
        self.s = np.atleast_1d(np.asarray(s, dtype=float)).copy()

    @classmethod
    def from_p(cls, p):
        p = np.asarray(p, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(np.log(p) - np.log1p(-p))

    @property
    def p(self):
        return expit(self.s)

    @property
    def dim(self):
        return self.s.size

    @property
    def coords(self):
        return self.s.copy()

    def with_coords(self, v):
        return SpinBernoulli(v)

    def _mean_spin(self):
        # 2p - 1 == tanh(s / 2), accurate for large |s|
        return np.tanh(self.s / 2)

    def moments(self, features):
        self.check_pairing(features)
        order, i, j = features._arrays
        u = self._mean_spin()
        pure = i == j
        out = np.empty(features.size)
        out[pure] = np.where(order[pure] % 2 == 1, u[i[pure]], 1.0)
        out[~pure] = u[i[~pure]] * u[j[~pure]]
        return out

    def jacobian(self, features):
        """d moments / d p (the logit chain factor is deliberately omitted)."""
        self.check_pairing(features)
        order, i, j = features._arrays
        u = self._mean_spin()
        pure = i == j
        J = np.zeros((features.size, self.dim))
        rows = np.flatnonzero(pure)
        J[rows, i[pure]] = np.where(order[pure] % 2 == 1, 2.0, 0.0)
        rows = np.flatnonzero(~pure)
        J[rows, i[~pure]] = 2 * u[j[~pure]]
        J[rows, j[~pure]] = 2 * u[i[~pure]]
        return J

    def vjp(self, features, w):
        self.check_pairing(features)
        order, i, j = features._arrays
        u = self._mean_spin()
        n = self.dim
        pure = i == j
        odd = pure & (order % 2 == 1)
        g = np.zeros(n)
        g += np.bincount(i[odd], 2 * w[odd], minlength=n)
        ic, jc, wc = i[~pure], j[~pure], w[~pure]
        g += np.bincount(ic, 2 * wc * u[jc], minlength=n) + np.bincount(jc, 2 * wc * u[ic], minlength=n)
        return g

    def entropy(self):
        p = self.p
        q = expit(-self.s)
        return float(-np.sum(xlogy(p, p) + xlogy(q, q)))

    def entropy_grad(self):
        """dH/dp = log((1 - p) / p), which is exactly ``-s``."""
        return -self.s

    def sample(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        return np.where(rng.random(shape) < self.p, 1.0, -1.0)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            terms = log_expit(x * self.s)
        # x * s is nan for x = 0 (never a valid spin) and handled as -inf
        terms = np.where(np.isnan(terms), -np.inf, terms)
        return np.sum(terms, axis=-1)


class PointMass(Component):
    """A Dirac mass at ``x``; ``discrete`` enables probability-mass queries."""

    variant = "point"
    pairs_with = (POLY1D, SPIN_PAIRWISE, CENTERED_MOMENTS)

    def __init__(self, x, discrete=False):
        self.x = np.atleast_1d(np.asarray(x, dtype=float)).copy()
        if not np.all(np.isfinite(self.x)):
            raise ValueError("point mass location must be finite")
        self.discrete = bool(discrete)

    @property
    def dim(self):
        return self.x.size

    @property
    def coords(self):
        return self.x.copy()

    def with_coords(self, v):
        return PointMass(v, self.discrete)

    def moments(self, features):
        self.check_pairing(features)
        return features.evaluate(self.x[None, :])[0]

    def jacobian(self, features):
        raise UnsupportedPairing("point masses have no moment gradient")

    def vjp(self, features, w):
        raise UnsupportedPairing("point masses have no moment gradient")

    def entropy(self):
        # the entropy term is dropped for point candidates
        return 0.0

    def entropy_grad(self):
        return np.zeros(self.dim)

    def sample(self, rng, size=None):
        return self.x.copy() if size is None else np.tile(self.x, (size, 1))

    def log_density(self, x):
        if not self.discrete:
            raise UnsupportedForPointMass("density of a continuous point mass is undefined")
        x = np.asarray(x, dtype=float)
        return np.where(np.all(x == self.x, axis=-1), 0.0, -np.inf)

    def to_dict(self):
        return {"variant": self.variant, "params": self.x.tolist(), "discrete": self.discrete}


def component_from_dict(d):
    v, params = d["variant"], np.asarray(d["params"], dtype=float)
    if v == "gauss1d":
        return Gauss1D(params[0], params[1])
    if v == "gauss_diag":
        n = params.size // 2
        return GaussDiag(params[:n], params[n:])
    if v == "spin_bernoulli":
        return SpinBernoulli(params)
    if v == "point":
        return PointMass(params, d.get("discrete", False))
    raise ValueError(f"unknown variant {v!r}")


def default_component(features, rng=None):
    """Starting component: unit Gaussians at the origin, or spins with
    standard-normal logits drawn from ``rng``.

    Fair spins (all logits zero) are a stationary point of the inner problem
    for pairwise features and would never move, hence the random logits.
    """
    if features.kind == POLY1D:
        return Gauss1D(0.0, 0.0)
    if features.kind == CENTERED_MOMENTS:
        return GaussDiag(np.zeros(features.n_vars), np.zeros(features.n_vars))
    rng = np.random.default_rng(0) if rng is None else rng
    return SpinBernoulli(rng.standard_normal(features.n_vars))


# Function-style access mirroring the component methods.

def feature_moments(params, features):
    return params.moments(features)


def moment_gradients(params, features):
    return params.jacobian(features)


def entropy(params):
    return params.entropy()


def entropy_gradient(params):
    return params.entropy_grad()


def sample(params, rng, size=None):
    return params.sample(rng, size)


def log_density(params, x):
    return params.log_density(x)
