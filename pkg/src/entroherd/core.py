"""Shared domain types: feature maps, moment targets, herding weights, run config."""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_ENUMERABLE_STATES = 2**20


class EntroherdError(Exception):
    """Base class for library errors."""


class ConfigError(EntroherdError):
    pass


class EmptyData(EntroherdError):
    pass


class ZeroVarianceFeature(EntroherdError):
    def __init__(self, index, feature_id=None):
        self.index = index
        self.feature_id = feature_id
        label = f"{index}" if feature_id is None else f"{index} {feature_id}"
        super().__init__(f"feature {label} has zero variance")


class StateSpaceTooLarge(EntroherdError):
    def __init__(self, n_states):
        self.n_states = n_states
        super().__init__(f"{n_states} states exceeds the enumeration limit {MAX_ENUMERABLE_STATES}")


class UnsupportedPairing(EntroherdError):
    pass


class NumericalFailure(EntroherdError):
    pass


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------

POLY1D = "poly1d"
SPIN_PAIRWISE = "spin_pairwise"
CENTERED_MOMENTS = "centered_moments"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """An ordered set of polynomial feature functions.

    Every feature is identified by a triple ``(order, i, j)``. When ``i == j``
    the feature is the centered power ``(x_i - c_i) ** order``; otherwise it is
    the cross product ``(x_i - c_i) * (x_j - c_j)`` (order is then 2).

    Use the constructors :meth:`poly1d`, :meth:`spin_pairwise` and
    :meth:`centered_moments` rather than building one by hand.
    """

    kind: str
    n_vars: int
    ids: tuple
    center: np.ndarray = field(repr=False)

    @classmethod
    def poly1d(cls, max_degree=4):
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        ids = tuple((k, 0, 0) for k in range(1, max_degree + 1))
        return cls(POLY1D, 1, ids, np.zeros(1))

    @classmethod
    def spin_pairwise(cls, n_spins):
        if n_spins < 2:
            raise ValueError("need at least two spins")
        ids = tuple((2, i, j) for i in range(n_spins) for j in range(i + 1, n_spins))
        return cls(SPIN_PAIRWISE, n_spins, ids, np.zeros(n_spins))

    @classmethod
    def centered_moments(cls, n_vars, center=None):
        # lexicographic by (order, i, j); second order includes i == j
        ids = [(1, i, i) for i in range(n_vars)]
        ids += [(2, i, j) for i in range(n_vars) for j in range(i, n_vars)]
        ids += [(3, i, i) for i in range(n_vars)]
        ids += [(4, i, i) for i in range(n_vars)]
        c = np.zeros(n_vars) if center is None else np.asarray(center, dtype=float).copy()
        if c.shape != (n_vars,):
            raise ValueError("center must have one entry per variable")
        return cls(CENTERED_MOMENTS, n_vars, tuple(ids), c)

    @property
    def size(self):
        return len(self.ids)

    def __len__(self):
        return len(self.ids)

    def names(self):
        if self.kind == POLY1D:
            return [f"x^{k}" for k, _, _ in self.ids]
        if self.kind == SPIN_PAIRWISE:
            return [f"x{i + 1}x{j + 1}" for _, i, j in self.ids]
        out = []
        for k, i, j in self.ids:
            out.append(f"c{k}_{i + 1}_{j + 1}" if i != j else f"c{k}_{i + 1}")
        return out

    @property
    def _arrays(self):
        ids = np.asarray(self.ids, dtype=int).reshape(-1, 3)
        return ids[:, 0], ids[:, 1], ids[:, 2]

    def evaluate(self, x):
        """Feature values for a batch of points, shape ``(n_points, size)``."""
        x = np.asarray(x, dtype=float)
        if self.n_vars == 1 and x.ndim <= 1:
            x = x.reshape(-1, 1)
        elif x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.n_vars:
            raise ValueError(f"expected {self.n_vars} variables, got {x.shape[1]}")
        d = x - self.center
        order, i, j = self._arrays
        pure = i == j
        out = np.empty((x.shape[0], self.size))
        out[:, pure] = d[:, i[pure]] ** order[pure]
        out[:, ~pure] = d[:, i[~pure]] * d[:, j[~pure]]
        return out

    def to_dict(self):
        return {"kind": self.kind, "n_vars": self.n_vars,
                "max_degree": self.size if self.kind == POLY1D else None,
                "center": self.center.tolist()}

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == POLY1D:
            return cls.poly1d(d["max_degree"])
        if d["kind"] == SPIN_PAIRWISE:
            return cls.spin_pairwise(d["n_vars"])
        return cls.centered_moments(d["n_vars"], d.get("center"))


def spin_states(n):
    """All ``2**n`` configurations of ``n`` spins in {-1, +1}, one per row."""
    if 2**n > MAX_ENUMERABLE_STATES:
        raise StateSpaceTooLarge(2**n)
    bits = (np.arange(2**n)[:, None] >> np.arange(n - 1, -1, -1)) & 1
    return (2 * bits - 1).astype(float)


# ---------------------------------------------------------------------------
# Moment targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MomentSpec:
    """Raw feature statistics and the scalar weight parameter.

    The engine works in standardized coordinates
    ``phi'(x) = (phi(x) - raw_mean) / raw_std`` where every target is zero
    and every feature carries the same weight ``lam``. In raw coordinates the
    same weights read ``effective_weight = lam / raw_std``.
    """

    raw_mean: np.ndarray
    raw_std: np.ndarray
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "raw_mean", np.asarray(self.raw_mean, dtype=float))
        object.__setattr__(self, "raw_std", np.asarray(self.raw_std, dtype=float))
        if self.raw_mean.shape != self.raw_std.shape:
            raise ValueError("raw_mean and raw_std differ in shape")
        if np.any(~(self.raw_std > 0)):
            bad = int(np.flatnonzero(~(self.raw_std > 0))[0])
            raise ZeroVarianceFeature(bad)
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")

    @property
    def size(self):
        return self.raw_mean.size

    @property
    def target(self):
        return np.zeros(self.size)

    @property
    def effective_weight(self):
        return self.lam / self.raw_std

    def with_lambda(self, lam):
        return MomentSpec(self.raw_mean, self.raw_std, lam)

    def standardize(self, raw):
        """Map raw feature values (or raw moments) to standardized coordinates."""
        return (np.asarray(raw, dtype=float) - self.raw_mean) / self.raw_std

    def unstandardize(self, std):
        return self.raw_mean + self.raw_std * np.asarray(std, dtype=float)

    def to_kv(self):
        return {"raw_mean": _fmt_vec(self.raw_mean), "raw_std": _fmt_vec(self.raw_std),
                "lambda": repr(float(self.lam))}

    @classmethod
    def from_kv(cls, kv):
        return cls(_parse_vec(kv["raw_mean"]), _parse_vec(kv["raw_std"]), float(kv["lambda"]))


def _zero_variance_check(mean, std, features):
    for m, (mu, s) in enumerate(zip(mean, std)):
        if not s > 1e-12 * max(1.0, abs(mu)):
            raise ZeroVarianceFeature(m, features.ids[m] if features is not None else None)


def standardize_from_data(features, data, lam):
    """Moment targets from the empirical distribution of ``data``.

    Population (ddof=0) standard deviations are used: the data are treated as
    the target distribution itself.
    """
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise EmptyData("no data points")
    values = features.evaluate(data)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    _zero_variance_check(mean, std, features)
    return MomentSpec(mean, std, lam)


def standardize_from_model(features, model, lam):
    """Exact moment targets under an enumerable model (``states``, ``probs``)."""
    states = np.asarray(model.states, dtype=float)
    if states.shape[0] > MAX_ENUMERABLE_STATES:
        raise StateSpaceTooLarge(states.shape[0])
    p = np.asarray(model.probs, dtype=float)
    values = features.evaluate(states)
    mean = p @ values
    var = p @ (values - mean) ** 2
    std = np.sqrt(np.maximum(var, 0.0))
    _zero_variance_check(mean, std, features)
    return MomentSpec(mean, std, lam)


# ---------------------------------------------------------------------------
# Herding weights
# ---------------------------------------------------------------------------

@dataclass
class WeightState:
    """Herding weights ``a`` with the running aggregates they summarize.

    ``running_moment`` is the feature mean of the current aggregate mixture in
    standardized coordinates, so ``a == lam * running_moment`` (equivalently
    ``effective_weight * (raw moment - raw_mean)``) after every update.
    """

    a: np.ndarray
    running_moment: np.ndarray
    running_entropy: float
    step: int = 0

    def tentative_loss(self, lam):
        return 0.5 * lam * float(np.sum(self.running_moment**2)) - self.running_entropy


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

CONSTANT = "constant"
HARMONIC = "harmonic"


@dataclass(frozen=True)
class HerdingConfig:
    eps_herding: float = 0.02
    t_output: int = 100
    t_burnin: int = 50
    eta_learn: float = 0.2
    k_update: int = 50
    use_modified_weights: bool = True
    p_jump: float = 0.0
    lam: float = 100.0
    seed: int = 0
    schedule: str = CONSTANT

    def __post_init__(self):
        if self.schedule not in (CONSTANT, HARMONIC):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.schedule == CONSTANT and not 0 < self.eps_herding < 1:
            raise ConfigError("eps_herding must lie in (0, 1)")
        if self.t_output < 1 or self.t_burnin < 0 or self.k_update < 1:
            raise ConfigError("t_output >= 1, t_burnin >= 0 and k_update >= 1 required")
        if not 0 <= self.p_jump <= 1:
            raise ConfigError("p_jump must lie in [0, 1]")
        if not self.lam > 0 or not self.eta_learn > 0:
            raise ConfigError("lambda and eta_learn must be positive")

    @property
    def t_max(self):
        return self.t_burnin + self.t_output

    def eps(self, T):
        """Step size used at outer step ``T >= 1``."""
        if self.schedule == HARMONIC:
            return 1.0 / (T + 1)
        return self.eps_herding

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_kv(self):
        return {
            "eps_herding": repr(self.eps_herding), "t_output": str(self.t_output),
            "t_burnin": str(self.t_burnin), "eta_learn": repr(self.eta_learn),
            "k_update": str(self.k_update),
            "use_modified_weights": str(self.use_modified_weights).lower(),
            "p_jump": repr(self.p_jump), "lambda": repr(self.lam), "seed": str(self.seed),
            "schedule": self.schedule,
        }

    @classmethod
    def from_kv(cls, kv, base=None):
        base = base or cls()
        conv = {
            "eps_herding": ("eps_herding", float), "t_output": ("t_output", int),
            "t_burnin": ("t_burnin", int), "eta_learn": ("eta_learn", float),
            "k_update": ("k_update", int), "use_modified_weights": ("use_modified_weights", _parse_bool),
            "p_jump": ("p_jump", float), "lambda": ("lam", float), "seed": ("seed", int),
            "schedule": ("schedule", str),
        }
        changes = {}
        for key, value in kv.items():
            if key in conv:
                name, fn = conv[key]
                try:
                    changes[name] = fn(value)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {value!r}") from exc
        return dataclasses.replace(base, **changes)


# Default settings per experiment.
PRESETS = {
    "bimodal": HerdingConfig(0.02, 100, 50, 0.2, 50, True, 0.0, 100.0),
    "bimodal_point": HerdingConfig(0.002, 1000, 500, 0.2, 50, True, 0.0, 100.0),
    "boltzmann": HerdingConfig(0.05, 320, 100, 0.2, 50, False, 0.1, 13.0),
    "wine": HerdingConfig(0.01, 500, 100, 0.2, 20, True, 0.1, 200.0),
}


# ---------------------------------------------------------------------------
# key = value text format
# ---------------------------------------------------------------------------

def _parse_bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _fmt_vec(v):
    return ", ".join(repr(float(x)) for x in np.ravel(v))


def _parse_vec(s):
    return np.array([float(t) for t in str(s).split(",") if t.strip()])


def parse_kv(text):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(kv, header=None):
    lines = [f"# {header}"] if header else []
    lines += [f"{k} = {v}" for k, v in kv.items()]
    return "\n".join(lines) + "\n"


def load_kv(path):
    return parse_kv(Path(path).read_text())


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def make_rng(seed, stream="default"):
    """Counter-based generator for a named, independent stream of ``seed``."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(stream.encode()),))
    return np.random.Generator(np.random.Philox(ss))


def logsumexp_fsum(x):
    """log(sum(exp(x))) with a max shift and exactly rounded accumulation."""
    x = np.asarray(x, dtype=float).ravel()
    top = np.max(x)
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(math.fsum(np.exp(x - top))))
