"""Herding dynamics: entropic herding, point herding and Metropolis point herding.

All weights and moments handled here live in standardized feature
coordinates (targets are zero, every feature has weight ``lam``).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import HARMONIC, EntroherdError, HerdingConfig, WeightState, make_rng
from .families import LOG_SIGMA_FLOOR, GaussDiag, PointMass, SpinBernoulli, default_component
from .mixture import MixtureModel


class EmptyDomain(EntroherdError):
    pass


class ScheduleMismatch(EntroherdError):
    pass


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moment estimates; reset at the start of every outer step."""

    eta_learn: float
    beta1: float = 0.8
    beta2: float = 0.99
    adam_eps: float = 1e-8
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    adam_t: int = 0

    def reset(self, size):
        self.adam_m = np.zeros(size)
        self.adam_v = np.zeros(size)
        self.adam_t = 0

    def displacement(self, grad):
        if self.adam_m is None or self.adam_m.shape != grad.shape:
            self.reset(grad.shape[0])
        self.adam_t += 1
        self.adam_m = self.beta1 * self.adam_m + (1 - self.beta1) * grad
        self.adam_v = self.beta2 * self.adam_v + (1 - self.beta2) * grad * grad
        m_hat = self.adam_m / (1 - self.beta1**self.adam_t)
        v_hat = self.adam_v / (1 - self.beta2**self.adam_t)
        return -self.eta_learn * m_hat / (np.sqrt(v_hat) + self.adam_eps)


# ---------------------------------------------------------------------------
# Inner problem
# ---------------------------------------------------------------------------

def standardized_moments(component, features, spec):
    return spec.standardize(component.moments(features))


def inner_objective(component, a, features, spec):
    """``sum_m a_m eta'_m(q) - H(q)`` for one candidate ``q``."""
    return float(np.dot(a, standardized_moments(component, features, spec)) - component.entropy())


def modified_weights(a, component, features, spec, eps_T):
    """Weights re-evaluated at the current inner iterate (``a'``)."""
    return a + eps_T * (spec.lam * standardized_moments(component, features, spec) - a)


def objective_gradient(component, a, features, spec):
    """Gradient of the inner objective in the component's optimizer coordinates."""
    return component.vjp(features, a / spec.raw_std) - component.entropy_grad()


def inner_gradient_step(component, a, features, spec, opt, use_modified=False, eps_T=0.0):
    """One Adam step on the inner objective; returns the new component."""
    w = modified_weights(a, component, features, spec, eps_T) if use_modified else a
    g = objective_gradient(component, w, features, spec)
    v = component.coords + opt.displacement(g)
    if isinstance(component, GaussDiag):
        n = component.dim
        v[n:] = np.maximum(v[n:], LOG_SIGMA_FLOOR)
    return component.with_coords(v)


class UniformMeanJump:
    """Gaussian jump proposal: keep ``log sigma``, redraw ``mu`` uniformly
    between the smallest and largest means seen so far in the run."""

    def __init__(self, component):
        self.lo = component.mu.copy()
        self.hi = component.mu.copy()

    def observe(self, component):
        np.minimum(self.lo, component.mu, out=self.lo)
        np.maximum(self.hi, component.mu, out=self.hi)

    def __call__(self, component, rng):
        return type(component)._from_arrays(rng.uniform(self.lo, self.hi), component.log_sigma)


class RandomSignJump:
    """Spin jump proposal: random sign for every logit, magnitudes kept."""

    def observe(self, component):
        pass

    def __call__(self, component, rng):
        signs = np.where(rng.random(component.dim) < 0.5, -1.0, 1.0)
        return SpinBernoulli(signs * np.abs(component.s))


def default_jump_rule(component):
    if isinstance(component, GaussDiag):
        return UniformMeanJump(component)
    if isinstance(component, SpinBernoulli):
        return RandomSignJump()
    raise ValueError(f"no jump rule for {component.variant}")


def jump_move(component, a, features, spec, p_jump, rng, jump_rule):
    """Propose a random candidate with probability ``p_jump``; keep it only
    when it strictly lowers the inner objective."""
    if p_jump <= 0 or rng.random() >= p_jump:
        return component
    cand = jump_rule(component, rng)
    if inner_objective(cand, a, features, spec) < inner_objective(component, a, features, spec):
        return cand
    return component


def metropolis_accept(delta, rng):
    """Metropolis rule: accept with probability ``min(1, exp(-delta))``."""
    if delta <= 0:
        return True
    if not math.isfinite(delta):
        return False
    return rng.random() < math.exp(-delta)


def herding_weight_update(state, r_moments, r_entropy, lam, eps_T):
    """Advance weights and running aggregates by one outer step."""
    return WeightState(
        a=state.a + eps_T * (lam * r_moments - state.a),
        running_moment=state.running_moment + eps_T * (r_moments - state.running_moment),
        running_entropy=state.running_entropy + eps_T * (r_entropy - state.running_entropy),
        step=state.step + 1,
    )


def _best_index(values, incumbent=None, maximize=False):
    best = np.max(values) if maximize else np.min(values)
    if incumbent is not None and values[incumbent] == best:
        return incumbent
    return int(np.argmax(values) if maximize else np.argmin(values))


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    T: int
    component: object
    moments: np.ndarray
    weights: np.ndarray
    tentative_loss: float
    eps: float


@dataclass
class HerdingRun:
    """Full trajectory of a run plus its aggregated output mixture."""

    method: str
    config: HerdingConfig
    features: object
    spec: object
    initial: object
    initial_weights: np.ndarray
    trajectory: list = field(default_factory=list)
    output: MixtureModel = None

    def finalize(self):
        comps = [r.component for r in self.trajectory[self.config.t_burnin:]]
        self.output = MixtureModel(comps)
        return self

    @property
    def eps_sequence(self):
        return np.array([r.eps for r in self.trajectory])

    def weights_array(self):
        return np.array([self.initial_weights] + [r.weights for r in self.trajectory])

    def aggregate_weights(self, T):
        """Mixture weights ``rho^{t,T}`` over ``r^(0..T)`` implied by the step sizes."""
        w = np.zeros(T + 1)
        w[0] = 1.0
        for t in range(1, T + 1):
            e = self.trajectory[t - 1].eps
            w[:t] *= 1 - e
            w[t] = e
        return w

    def tentative_mixture(self, T):
        """The aggregate ``p^(T)`` over ``r^(0..T)``."""
        comps = [self.initial] + [r.component for r in self.trajectory[:T]]
        w = self.aggregate_weights(T)
        keep = w > 0
        return MixtureModel([c for c, k in zip(comps, keep) if k], w[keep])

    def to_dict(self):
        return {
            "method": self.method,
            "config": self.config.to_kv(),
            "features": self.features.to_dict(),
            "spec": self.spec.to_kv(),
            "initial": self.initial.to_dict(),
            "initial_weights": self.initial_weights.tolist(),
            "steps": [
                {"T": r.T, "component": r.component.to_dict(), "moments": r.moments.tolist(),
                 "weights": r.weights.tolist(), "tentative_loss": r.tentative_loss, "eps": r.eps}
                for r in self.trajectory
            ],
            "output": self.output.to_dict() if self.output is not None else None,
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    def save_trajectory_csv(self, path):
        names = self.features.names()
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            n_par = self.initial.coords.size
            wr.writerow(["T", "eps", "tentative_loss"] + [f"param{k}" for k in range(n_par)]
                        + [f"eta_{n}" for n in names] + [f"a_{n}" for n in names])
            for r in self.trajectory:
                wr.writerow([r.T, repr(r.eps), repr(r.tentative_loss)]
                            + [repr(float(v)) for v in r.component.coords]
                            + [repr(float(v)) for v in r.moments] + [repr(float(v)) for v in r.weights])


def _domain_features(features, spec, domain):
    domain = np.asarray(domain, dtype=float)
    if domain.size == 0:
        raise EmptyDomain("argmax domain is empty")
    if domain.ndim == 1:
        domain = domain[:, None]
    return domain, spec.standardize(features.evaluate(domain))


def run_entropic(features, spec, config, init=None, domain=None, jump_rule=None, progress=None):
    """Entropic herding.

    Each outer step runs ``k_update`` Adam steps on the inner objective,
    warm-started from the previous component, each optionally followed by a
    stochastic jump. For point-mass candidates the inner problem is instead
    solved exactly by scanning ``domain``.
    """
    r = default_component(features, make_rng(config.seed, "init")) if init is None else init
    if not isinstance(r, PointMass):
        r.check_pairing(features)
    lam = spec.lam
    eta0 = standardized_moments(r, features, spec)
    state = WeightState(lam * eta0, eta0.copy(), r.entropy(), 0)
    run = HerdingRun("entropic", config, features, spec, r, state.a.copy())
    rng = make_rng(config.seed, "jumps")

    if isinstance(r, PointMass):
        if domain is None:
            raise EmptyDomain("point candidates need an explicit domain")
        pts, phi = _domain_features(features, spec, domain)
        hits = np.flatnonzero(np.all(pts == r.x, axis=1))
        incumbent = int(hits[0]) if hits.size else None
    elif config.p_jump > 0 and jump_rule is None:
        jump_rule = default_jump_rule(r)

    opt = OptimizerState(config.eta_learn)
    for T in range(1, config.t_max + 1):
        eps_T = config.eps(T)
        if isinstance(r, PointMass):
            incumbent = _best_index(phi @ state.a, incumbent)
            r = PointMass(pts[incumbent], r.discrete)
            eta_r = phi[incumbent].copy()
        else:
            opt.reset(r.coords.size)
            for _ in range(config.k_update):
                r = inner_gradient_step(r, state.a, features, spec, opt, config.use_modified_weights, eps_T)
                if config.p_jump > 0:
                    jump_rule.observe(r)
                    w = modified_weights(state.a, r, features, spec, eps_T) \
                        if config.use_modified_weights else state.a
                    r = jump_move(r, w, features, spec, config.p_jump, rng, jump_rule)
            eta_r = standardized_moments(r, features, spec)
        state = herding_weight_update(state, eta_r, r.entropy(), lam, eps_T)
        run.trajectory.append(StepRecord(T, r, eta_r, state.a.copy(), state.tentative_loss(lam), eps_T))
        if progress is not None:
            progress(T)
    return run.finalize()


def run_point(features, spec, config, domain, w0=None, discrete=False):
    """Classic herding with an exact argmax over a finite domain.

    ``x(T) = argmax_x w . phi'(x)`` then ``w += mu' - phi'(x(T))`` with
    ``mu' = 0`` in standardized coordinates. Output is the uniform mixture of
    the post-burn-in points.
    """
    pts, phi = _domain_features(features, spec, domain)
    w = np.zeros(spec.size) if w0 is None else np.asarray(w0, dtype=float).copy()
    idx = None
    init = PointMass(pts[0], discrete)
    run = HerdingRun("point", config, features, spec, init, w.copy())
    total = np.zeros(spec.size)
    for T in range(1, config.t_max + 1):
        idx = _best_index(phi @ w, idx, maximize=True)
        w = w - phi[idx]
        total += phi[idx]
        mean = total / T
        run.trajectory.append(StepRecord(T, PointMass(pts[idx], discrete), phi[idx].copy(), w.copy(),
                                         0.5 * spec.lam * float(mean @ mean), 1.0 / T))
    return run.finalize()


def nearest_target_index(features, spec, domain):
    """Domain point whose standardized features are closest to the targets."""
    _, phi = _domain_features(features, spec, domain)
    return int(np.argmin(np.sum(phi**2, axis=1)))


def run_point_metropolis(features, spec, config, domain, init_index=None, discrete=False):
    """Point herding whose inner step is a Metropolis chain on the domain.

    Every inner step proposes a uniformly drawn domain point and accepts it
    with probability ``min(1, exp(-dF))``. Modified weights are not used.
    """
    pts, phi = _domain_features(features, spec, domain)
    if init_index is None:
        init_index = int(np.argmin(np.sum(phi**2, axis=1)))
    rng = make_rng(config.seed, "proposals")
    lam = spec.lam
    idx = init_index
    init = PointMass(pts[idx], discrete)
    state = WeightState(lam * phi[idx], phi[idx].copy(), 0.0, 0)
    run = HerdingRun("point_metropolis", config, features, spec, init, state.a.copy())
    K = pts.shape[0]
    for T in range(1, config.t_max + 1):
        eps_T = config.eps(T)
        energy = phi @ state.a
        for _ in range(config.k_update):
            cand = int(rng.integers(K))
            if metropolis_accept(energy[cand] - energy[idx], rng):
                idx = cand
        state = herding_weight_update(state, phi[idx], 0.0, lam, eps_T)
        run.trajectory.append(StepRecord(T, PointMass(pts[idx], discrete), phi[idx].copy(),
                                         state.a.copy(), state.tentative_loss(lam), eps_T))
    return run.finalize()


def point_equivalence_transform(run):
    """Map entropic point-candidate weights to classic herding weights.

    Returns ``w'`` with ``w'[k] = -(k + 1) / lam * a(k)`` for ``k = 0..T_max``;
    row ``k`` is the weight classic herding holds after ``k`` steps when started
    from ``w(0) = -phi'(x(0))``.
    """
    if run.config.schedule != HARMONIC:
        raise ScheduleMismatch("the transform requires the harmonic step-size schedule")
    if not isinstance(run.initial, PointMass):
        raise ValueError("the transform applies to point-candidate runs only")
    a = run.weights_array()
    k = np.arange(a.shape[0])[:, None]
    return -(k + 1) / run.spec.lam * a
