import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entroherd.core import FeatureMap, HerdingConfig, MomentSpec, WeightState, spin_states, standardize_from_model
from entroherd.data import make_bimodal_target
from entroherd.engine import (
    EmptyDomain, OptimizerState, ScheduleMismatch, _domain_features, herding_weight_update,
    inner_gradient_step, inner_objective, jump_move, metropolis_accept, point_equivalence_transform,
    run_entropic, run_point, run_point_metropolis,
)
from entroherd.evaluate import GibbsModel, gibbs_table, kl_discrete, loss_L, moment_sse
from entroherd.families import LOG_SIGMA_FLOOR, Gauss1D, GaussDiag, PointMass, SpinBernoulli


def unit_spec(m, lam=1.0, mean=0.0):
    return MomentSpec(np.full(m, float(mean)), np.ones(m), lam)


def spin_instance(n=3, lam=2.0, seed=0):
    rng = np.random.default_rng(seed)
    W = np.triu(rng.normal(scale=0.5, size=(n, n)), 1)
    g = GibbsModel.boltzmann(W + W.T)
    return g.features, standardize_from_model(g.features, g, lam)


# -- Adam and the inner step ---------------------------------------------------------

def test_adam_first_step():
    opt = OptimizerState(0.2)
    d = opt.displacement(np.ones(3))
    np.testing.assert_allclose(d, -0.2 / (1 + 1e-8), rtol=1e-15)
    assert opt.adam_t == 1 and np.all(opt.adam_v >= 0)
    opt.reset(3)
    assert opt.adam_t == 0 and not opt.adam_m.any() and not opt.adam_v.any()


def test_zero_gradient_leaves_params():
    f = FeatureMap.spin_pairwise(3)
    comp = SpinBernoulli(np.zeros(3))
    out = inner_gradient_step(comp, np.zeros(3), f, unit_spec(3), OptimizerState(0.2))
    np.testing.assert_array_equal(out.s, comp.s)


def test_log_sigma_floor_clamp():
    f = FeatureMap.poly1d(2)
    comp = Gauss1D(0.0, LOG_SIGMA_FLOOR + 0.05)
    # a large positive weight on x**2 drives sigma down
    out = inner_gradient_step(comp, np.array([0.0, 1e5]), f, unit_spec(2), OptimizerState(0.2))
    assert out.log_sigma[0] == LOG_SIGMA_FLOOR == math.log(0.01)


def test_inner_gradient_step_descends():
    f = FeatureMap.poly1d(2)
    spec = unit_spec(2)
    a = np.array([-1.0, 2.0])
    comp, opt = Gauss1D(0.0, 0.0), OptimizerState(0.05)
    f0 = inner_objective(comp, a, f, spec)
    for _ in range(200):
        comp = inner_gradient_step(comp, a, f, spec, opt)
    # optimum of a1 m + a2 (m^2 + s^2) - log s: m = 1/4, s^2 = 1/4
    assert inner_objective(comp, a, f, spec) < f0
    assert comp.mu[0] == pytest.approx(0.25, abs=1e-3)
    assert comp.sigma[0] == pytest.approx(0.5, abs=1e-3)


# -- inner objective --------------------------------------------------------------

def test_inner_objective_trivial_cases():
    f = FeatureMap.poly1d(4)
    comp = Gauss1D(0.4, -0.3)
    assert inner_objective(comp, np.zeros(4), f, unit_spec(4)) == pytest.approx(-comp.entropy())
    pm = PointMass([0.5])
    a = np.array([1.0, -2.0, 0.5, 3.0])
    assert inner_objective(pm, a, f, unit_spec(4)) == pytest.approx(a @ (0.5 ** np.arange(1, 5)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_inner_objective_is_kl_minus_log_partition(seed):
    rng = np.random.default_rng(seed)
    f = FeatureMap.spin_pairwise(2)
    spec = MomentSpec(rng.normal(scale=0.3, size=1), rng.uniform(0.5, 2, size=1), 1.0)
    a = rng.normal(scale=3, size=1)
    q = SpinBernoulli(rng.normal(scale=2, size=2))
    states = spin_states(2)
    log_z, pi, _ = gibbs_table(a, spec.standardize(f.evaluate(states)))
    kl = kl_discrete(np.exp(q.log_density(states)), pi)
    assert inner_objective(q, a, f, spec) + log_z == pytest.approx(kl, abs=1e-10)


# -- jumps ----------------------------------------------------------------------

class FlipAll:
    def __call__(self, comp, rng):
        return SpinBernoulli(-comp.s)


def test_jump_probability_zero_keeps_params():
    f = FeatureMap.spin_pairwise(2)
    comp = SpinBernoulli([1.0, 2.0])
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert jump_move(comp, np.array([5.0]), f, unit_spec(1), 0.0, rng, FlipAll()) is comp


def test_jump_tie_is_rejected():
    f = FeatureMap.spin_pairwise(2)
    comp = SpinBernoulli([1.0, 2.0])
    # flipping both signs leaves s1*s2 and the entropy unchanged, so F ties
    cand = FlipAll()(comp, None)
    a = np.array([0.7])
    assert inner_objective(cand, a, f, unit_spec(1)) == inner_objective(comp, a, f, unit_spec(1))
    assert jump_move(comp, a, f, unit_spec(1), 1.0, np.random.default_rng(0), FlipAll()) is comp


def test_spin_sign_jump_accepts_only_improvements():
    from entroherd.engine import RandomSignJump
    f = FeatureMap.spin_pairwise(2)
    spec = unit_spec(1)
    comp = SpinBernoulli([2.0, 3.0])
    a = np.array([4.0])
    f_now = inner_objective(comp, a, f, spec)
    patterns = {sgn: inner_objective(SpinBernoulli(np.array(sgn) * comp.s), a, f, spec)
                for sgn in itertools.product((1.0, -1.0), repeat=2)}
    better = {k for k, v in patterns.items() if v < f_now}
    assert better == {(1.0, -1.0), (-1.0, 1.0)}
    seen = set()
    rng = np.random.default_rng(3)
    for _ in range(200):
        out = jump_move(comp, a, f, spec, 1.0, rng, RandomSignJump())
        sgn = tuple(np.sign(out.s) * np.sign(comp.s))
        assert out is comp or sgn in better
        seen.add(sgn)
    assert better <= seen


def test_uniform_mean_jump_stays_in_seen_range():
    from entroherd.engine import UniformMeanJump
    rule = UniformMeanJump(GaussDiag([0.0, 1.0], [0.0, 0.0]))
    rule.observe(GaussDiag([-2.0, 3.0], [0.0, 0.0]))
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rule(GaussDiag([0.0, 1.0], [0.3, -0.1]), rng)
        assert -2.0 <= c.mu[0] <= 0.0 and 1.0 <= c.mu[1] <= 3.0
        np.testing.assert_array_equal(c.log_sigma, [0.3, -0.1])


# -- Metropolis rule ------------------------------------------------------------

def test_metropolis_acceptance():
    rng = np.random.default_rng(7)
    assert all(metropolis_accept(0.0, rng) for _ in range(1000))
    assert not any(metropolis_accept(math.inf, rng) for _ in range(1000))
    freq = np.mean([metropolis_accept(0.5, rng) for _ in range(10**5)])
    assert freq == pytest.approx(math.exp(-0.5), abs=0.01)


# -- weight update ---------------------------------------------------------------

def test_weight_update_examples():
    s = WeightState(np.array([0.2]), np.array([0.2]), 0.0)
    assert herding_weight_update(s, np.array([1.0]), 0.0, 1.0, 0.05).a[0] == pytest.approx(0.24, abs=1e-15)
    full = herding_weight_update(s, np.array([0.7]), 1.3, 3.0, 1.0)
    assert full.a[0] == 3.0 * 0.7 and full.running_entropy == 1.3 and full.step == 1
    zero = WeightState(np.zeros(2), np.zeros(2), 0.0)
    np.testing.assert_array_equal(herding_weight_update(zero, np.zeros(2), 0.5, 4.0, 0.1).a, 0)


# -- point herding -----------------------------------------------------------------

def test_point_period_two_orbit():
    f = FeatureMap.poly1d(1)
    cfg = HerdingConfig(t_output=20, t_burnin=0)
    run = run_point(f, unit_spec(1), cfg, [-1.0, 1.0], w0=[0.5])
    xs = [r.component.x[0] for r in run.trajectory]
    assert xs == [1.0, -1.0] * 10
    assert np.mean(xs) == 0.0


def test_point_telescoping_and_bound():
    rng = np.random.default_rng(1)
    f = FeatureMap.poly1d(3)
    domain = rng.uniform(-2, 2, size=50)
    spec = MomentSpec(np.array([0.1, 1.0, 0.2]), np.array([1.0, 1.5, 2.0]), 1.0)
    w0 = rng.normal(size=3)
    run = run_point(f, spec, HerdingConfig(t_output=400, t_burnin=0), domain, w0=w0)
    phis = np.array([r.moments for r in run.trajectory])
    W = run.weights_array()
    for T in (1, 10, 100, 400):
        np.testing.assert_allclose(W[T] - W[0], -phis[:T].sum(axis=0), atol=1e-10)
        err = np.abs(phis[:T].mean(axis=0))
        bound = (np.abs(W[0]) + np.abs(W[1:T + 1]).max(axis=0)) / T
        assert np.all(err <= bound + 1e-12)


def test_point_vertex_target_is_constant():
    f = FeatureMap.poly1d(1)
    run = run_point(f, unit_spec(1, mean=1.0), HerdingConfig(t_output=50, t_burnin=0), [1.0, -1.0])
    assert {r.component.x[0] for r in run.trajectory} == {1.0}


def test_point_output_and_errors():
    f = FeatureMap.poly1d(1)
    run = run_point(f, unit_spec(1), HerdingConfig(t_output=10, t_burnin=4), [-1.0, 1.0], w0=[0.5])
    assert len(run.trajectory) == 14 and len(run.output) == 10
    np.testing.assert_allclose(run.output.weights, 0.1)
    with pytest.raises(EmptyDomain):
        run_point(f, unit_spec(1), HerdingConfig(), [])


def test_point_argmax_scale_invariance():
    rng = np.random.default_rng(5)
    f = FeatureMap.poly1d(2)
    domain = rng.normal(size=40)
    spec = MomentSpec(np.array([0.2, 0.9]), np.ones(2), 1.0)
    w0 = rng.normal(size=2)
    cfg = HerdingConfig(t_output=200, t_burnin=0)
    a = run_point(f, spec, cfg, domain, w0=w0)
    b = run_point(f, spec.with_lambda(2.0), cfg, domain, w0=w0)
    assert [r.component.x[0] for r in a.trajectory] == [r.component.x[0] for r in b.trajectory]


# -- point-candidate entropic herding equals classic herding ----------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_point_equivalence(seed):
    rng = np.random.default_rng(seed)
    f = FeatureMap.poly1d(int(rng.integers(1, 4)))
    domain = rng.normal(size=int(rng.integers(5, 40)))
    data = rng.normal(size=(100, 1))
    from entroherd.core import standardize_from_data
    lam = float(rng.uniform(0.5, 20))
    spec = standardize_from_data(f, data, lam)
    cfg = HerdingConfig(t_output=1000, t_burnin=0, lam=lam, schedule="harmonic")
    x0 = PointMass(domain[0])
    ent = run_entropic(f, spec, cfg, init=x0, domain=domain)
    _, phi = _domain_features(f, spec, domain)
    pt = run_point(f, spec, cfg, domain, w0=-phi[0])
    assert [r.component.x[0] for r in ent.trajectory] == [r.component.x[0] for r in pt.trajectory]
    wprime = point_equivalence_transform(ent)
    np.testing.assert_allclose(wprime, pt.weights_array(), rtol=0, atol=1e-12)
    # first row is the implied initial weight
    np.testing.assert_allclose(wprime[0], -phi[0], atol=1e-15)


def test_equivalence_needs_harmonic_schedule():
    f = FeatureMap.poly1d(1)
    run = run_entropic(f, unit_spec(1), HerdingConfig(t_output=5, t_burnin=0),
                       init=PointMass([1.0]), domain=[-1.0, 1.0])
    with pytest.raises(ScheduleMismatch):
        point_equivalence_transform(run)


# -- Metropolis point herding ---------------------------------------------------------

def test_point_metropolis_run():
    f = FeatureMap.poly1d(2)
    grid = np.linspace(-2, 2, 81)
    spec = MomentSpec(np.array([0.0, 1.0]), np.array([1.0, 1.0]), 10.0)
    cfg = HerdingConfig(eps_herding=0.01, t_output=2000, t_burnin=200, k_update=20, lam=10.0)
    run = run_point_metropolis(f, spec, cfg, grid)
    assert len(run.trajectory) == 2200 and len(run.output) == 2000
    assert moment_sse(run.output, spec, f) < 0.05
    again = run_point_metropolis(f, spec, cfg, grid)
    assert [r.component.x[0] for r in run.trajectory] == [r.component.x[0] for r in again.trajectory]


# -- entropic herding ------------------------------------------------------------

def test_spin_run_structure_and_determinism():
    f, spec = spin_instance()
    cfg = HerdingConfig(eps_herding=0.05, t_output=30, t_burnin=10, k_update=10, p_jump=0.1,
                        use_modified_weights=False, lam=spec.lam, seed=4)
    a = run_entropic(f, spec, cfg)
    b = run_entropic(f, spec, cfg)
    assert len(a.trajectory) == 40 and len(a.output) == 30
    np.testing.assert_allclose(a.output.weights, 1 / 30)
    for k, comp in enumerate(a.output.components):
        assert comp is a.trajectory[10 + k].component
    for ra, rb in zip(a.trajectory, b.trajectory):
        assert np.array_equal(ra.component.s, rb.component.s) and np.array_equal(ra.weights, rb.weights)
        assert ra.tentative_loss == rb.tentative_loss


def test_weights_track_the_aggregate_mixture():
    f, spec = spin_instance()
    states = spin_states(3)
    cfg = HerdingConfig(eps_herding=0.1, t_output=25, t_burnin=0, k_update=10, p_jump=0.1,
                        use_modified_weights=False, lam=spec.lam)
    run = run_entropic(f, spec, cfg)
    comps = [run.initial] + [r.component for r in run.trajectory]
    for T in (1, 5, 25):
        rho = run.aggregate_weights(T)
        assert math.fsum(rho) == pytest.approx(1.0, abs=1e-14)
        mix = run.tentative_mixture(T)
        eta = spec.standardize(mix.feature_moments(f))
        rec = run.trajectory[T - 1]
        np.testing.assert_allclose(spec.lam * eta, rec.weights, atol=1e-12)
        h_tilde = math.fsum(w * c.entropy() for w, c in zip(rho, comps[:T + 1]))
        assert rec.tentative_loss == pytest.approx(0.5 * spec.lam * eta @ eta - h_tilde, abs=1e-10)
        # H~ is a lower bound of H, so L~ bounds L from above
        assert rec.tentative_loss >= loss_L(mix, spec, f, states) - 1e-12


def test_exact_inner_minimization_decreases_tentative_loss():
    f, spec = spin_instance(n=3, lam=2.0, seed=2)
    lam = spec.lam
    axis = np.linspace(-6, 6, 41)
    cands = [SpinBernoulli(np.array(s)) for s in itertools.product(axis, repeat=3)]
    etas = np.array([spec.standardize(c.moments(f)) for c in cands])
    ents = np.array([c.entropy() for c in cands])
    diam2 = max(np.sum((etas - e) ** 2, axis=1).max() for e in etas[::97])
    state = WeightState(lam * etas[0], etas[0].copy(), ents[0])
    eps = 0.05
    prev = state.tentative_loss(lam)
    worst = -np.inf
    for _ in range(200):
        k = int(np.argmin(etas @ state.a - ents))
        state = herding_weight_update(state, etas[k], ents[k], lam, eps)
        cur = state.tentative_loss(lam)
        worst = max(worst, (cur - prev) / eps**2)
        prev = cur
    # increase per step is at most lam/2 * |eta(r) - running moment|^2 * eps^2
    assert np.isfinite(worst) and worst <= 0.5 * lam * diam2 * 1.01


def test_single_step_run():
    f = FeatureMap.poly1d(2)
    cfg = HerdingConfig(t_output=1, t_burnin=0, k_update=30)
    run = run_entropic(f, unit_spec(2, lam=cfg.lam), cfg)
    assert len(run.output) == 1 and run.output.weights[0] == 1.0
    assert run.output.components[0] is run.trajectory[0].component


def test_gaussian_run_respects_sigma_floor():
    f = FeatureMap.poly1d(2)
    spec = MomentSpec(np.array([0.0, 1e-6]), np.array([1.0, 1.0]), 1e4)
    run = run_entropic(f, spec, HerdingConfig(t_output=20, t_burnin=0, k_update=20, lam=1e4))
    assert min(r.component.log_sigma[0] for r in run.trajectory) >= LOG_SIGMA_FLOOR


def _bimodal_spec(lam):
    tgt = make_bimodal_target()
    f = FeatureMap.poly1d(4)
    m = np.array([tgt.moment(k) for k in range(1, 5)])
    sd = np.sqrt(np.array([tgt.moment(2 * k) for k in range(1, 5)]) - m**2)
    return f, MomentSpec(m, sd, lam)


def test_bimodal_preset_run():
    from entroherd.core import PRESETS
    cfg = PRESETS["bimodal"]
    f, spec = _bimodal_spec(cfg.lam)
    run = run_entropic(f, spec, cfg)
    assert len(run.trajectory) == 150
    assert len(run.output) == 100 and all(isinstance(c, Gauss1D) for c in run.output.components)
    assert moment_sse(run.output, spec, f) < 0.05


def test_small_lambda_trades_accuracy_for_entropy():
    outs = {}
    for lam in (0.01, 100.0):
        f, spec = _bimodal_spec(lam)
        cfg = HerdingConfig(eps_herding=0.05, t_output=40, t_burnin=20, k_update=50, lam=lam)
        run = run_entropic(f, spec, cfg)
        outs[lam] = (moment_sse(run.output, spec, f), run.output.entropy_mc(20_000, seed=0)[0])
    assert outs[0.01][0] > outs[100.0][0]
    assert outs[0.01][1] > outs[100.0][1]
