import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from infusion.infusion import (
    InfusionSchedule,
    alpha_at,
    infusion_log_density,
    infusion_step,
    run_infusion_chain,
)
from infusion.model import FactorialGaussian, run_model_chain

from toy_ops import ConstantOperator, LinearGaussianOperator


def gauss(mean, var):
    return FactorialGaussian(np.asarray(mean, float), np.asarray(var, float))


# -- schedule --------------------------------------------------------------------


def test_alpha_examples():
    sched = InfusionSchedule(0.0, 0.01)
    assert alpha_at(sched, 0) == 0.0
    assert alpha_at(sched, 10) == pytest.approx(0.1)
    assert alpha_at(InfusionSchedule(0.5, 0.1), 10) == 1.0


@given(st.floats(0, 1), st.floats(0, 2), st.integers(0, 200))
def test_alpha_monotone_and_bounded(a0, om, t):
    sched = InfusionSchedule(a0, om)
    a, b = alpha_at(sched, t), alpha_at(sched, t + 1)
    assert 0.0 <= a <= b <= 1.0


@pytest.mark.parametrize("kw", [dict(alpha0=-0.1), dict(alpha0=1.5), dict(omega=-1), dict(sigma_delta=0)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        InfusionSchedule(**kw)


def test_negative_step_rejected():
    with pytest.raises(ValueError):
        alpha_at(InfusionSchedule(), -1)


# -- infusion_step ------------------------------------------------------------------


def test_step_alpha_zero_is_a_model_draw():
    out = gauss([[0.2, 0.4, 0.6]], [[0.01, 0.02, 0.03]])
    z = infusion_step(np.random.default_rng(3), out, np.ones(3), 0.0, 0.03)
    rng = np.random.default_rng(3)
    rng.random((1, 3))
    want = out.mean + np.sqrt(out.var) * rng.standard_normal((1, 3))
    assert np.array_equal(z, want)


def test_step_alpha_one_stays_near_target():
    d, sd = 100, 1e-3
    out = gauss(np.zeros(d), np.full(d, 0.05))
    x = np.random.default_rng(0).uniform(size=d)
    rng = np.random.default_rng(1)
    dist = [np.linalg.norm(infusion_step(rng, out, x, 1.0, sd) - x) for _ in range(200)]
    assert np.mean(np.array(dist) <= 1.5 * sd * np.sqrt(d)) >= 0.99


def test_branch_frequency_binomial_band():
    n, alpha = 100_000, 0.3
    out = gauss(np.zeros(n), np.full(n, 1e-4))
    z = infusion_step(np.random.default_rng(2), out, np.full(n, 100.0), alpha, 0.03)
    hits = np.sum(z > 50)
    assert abs(hits - n * alpha) < 4 * np.sqrt(n * alpha * (1 - alpha))


def test_step_ks_against_mixture_cdf():
    n, alpha, sd, mu, var, x = 20_000, 0.3, 0.1, 0.2, 0.04, 0.7
    out = gauss(np.full(n, mu), np.full(n, var))
    z = infusion_step(np.random.default_rng(4), out, np.full(n, x), alpha, sd)

    def cdf(v):
        return (1 - alpha) * stats.norm.cdf(v, mu, np.sqrt(var)) + alpha * stats.norm.cdf(v, x, sd)

    assert stats.kstest(z, cdf).pvalue > 0.01


# -- infusion_log_density --------------------------------------------------------------


def test_log_density_endpoints():
    z, x = np.array([[0.1, 0.5]]), np.array([0.3, 0.6])
    out = gauss([[0.2, 0.4]], [[0.01, 0.02]])
    sd = 0.05
    at0 = infusion_log_density(z, out, x, 0.0, sd)
    at1 = infusion_log_density(z, out, x, 1.0, sd)
    assert at0[0] == pytest.approx(stats.norm.logpdf(z, out.mean, np.sqrt(out.var)).sum(), abs=1e-12)
    assert at1[0] == pytest.approx(stats.norm.logpdf(z, x, sd).sum(), abs=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_log_density_integrates_to_one(alpha):
    mu, var, x, sd = 0.2, 0.01, 0.6, 0.03
    out = gauss([[mu]], [[var]])

    def pdf(v):
        return float(np.exp(infusion_log_density(np.array([[v]]), out, np.array([x]), alpha, sd)[0]))

    total, _ = integrate.quad(pdf, -3, 4, points=[mu, x], limit=200, epsabs=1e-12, epsrel=1e-12)
    assert abs(total - 1) < 1e-6


def test_log_density_dominates_model_branch():
    rng = np.random.default_rng(5)
    z, x = rng.uniform(size=(50, 4)), rng.uniform(size=4)
    out = gauss(rng.uniform(size=(50, 4)), rng.uniform(0.01, 0.1, size=(50, 4)))
    alpha = 0.4
    mix = infusion_log_density(z, out, x, alpha, 0.03)
    model = stats.norm.logpdf(z, out.mean, np.sqrt(out.var)).sum(-1) + 4 * np.log1p(-alpha)
    assert np.all(mix >= model - 1e-12)


def test_log_density_finite_on_own_samples():
    rng = np.random.default_rng(6)
    out = gauss(rng.uniform(size=(500, 3)), np.full((500, 3), 0.01))
    x = np.full(3, 50.0)
    for alpha in (0.01, 0.5, 0.99):
        z = infusion_step(rng, out, x, alpha, 1e-3)
        assert np.all(np.isfinite(infusion_log_density(z, out, x, alpha, 1e-3)))


# -- chains ----------------------------------------------------------------------------


def test_single_step_chain_has_only_initial_state():
    op = LinearGaussianOperator(0.5, 0.1, 0.01, T=1)
    trace = run_infusion_chain(np.random.default_rng(0), gauss([0.5], [0.1]), op, InfusionSchedule(), np.array([[0.3]]))
    assert len(trace) == 1 and len(trace.logq) == 1


def test_alpha_zero_chain_is_the_model_chain_in_law():
    op = LinearGaussianOperator(0.8, 0.1, 0.02, T=4)
    prior = gauss([0.5], [0.1])
    n = 20_000
    sched = InfusionSchedule(0.0, 0.0)
    inf = run_infusion_chain(np.random.default_rng(1), prior, op, sched, np.full((n, 1), 0.9))
    mod = run_model_chain(np.random.default_rng(2), prior, op, T_sample=3, n=n)
    assert stats.ks_2samp(inf.final[:, 0], mod.final[:, 0]).pvalue > 0.01
    for lp, lq in zip(inf.logp, inf.logq):
        assert np.array_equal(lp, lq)


def test_full_infusion_converges_to_target():
    d, sd = 100, 0.03
    sched = InfusionSchedule(0.0, 0.1, sd)
    op = ConstantOperator(0.5, 0.05, T=15)
    prior = gauss(np.full(d, 0.5), np.full(d, 0.1))
    x = np.random.default_rng(0).uniform(size=(100, d))
    trace = run_infusion_chain(np.random.default_rng(1), prior, op, sched, x)
    dist = np.linalg.norm(trace.final - x, axis=1)
    assert np.mean(dist <= 3 * sd * np.sqrt(d)) >= 0.99


def test_infused_chain_approaches_target_on_average():
    d = 20
    sched = InfusionSchedule(0.0, 0.05, 0.03)
    op = ConstantOperator(0.5, 0.05, T=15)
    prior = gauss(np.full(d, 0.5), np.full(d, 0.1))
    x = np.random.default_rng(2).uniform(size=(2000, d))
    trace = run_infusion_chain(np.random.default_rng(3), prior, op, sched, x)
    gaps = [np.linalg.norm(s - x, axis=1).mean() for s in trace.states]
    assert all(b < a for a, b in zip(gaps[1:], gaps[2:]))


def test_chain_reproducible():
    op = LinearGaussianOperator(0.5, 0.1, 0.01, T=5)
    prior = gauss([0.5, 0.5], [0.1, 0.1])
    x = np.array([[0.2, 0.8]])
    a = run_infusion_chain(np.random.default_rng(9), prior, op, InfusionSchedule(0, 0.2), x)
    b = run_infusion_chain(np.random.default_rng(9), prior, op, InfusionSchedule(0, 0.2), x)
    for u, v in zip(a.states + a.logq, b.states + b.logq):
        assert np.array_equal(u, v)
