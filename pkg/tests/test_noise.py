import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from rsspde.noise import (
    LargeJumpConfig,
    NoiseConfig,
    SmallJumpConfig,
    large_jump_events,
    regime_candidates,
    small_jump_increments,
    wiener_increment,
)


def _quad_measure(fn, a, s, lo, hi):
    # brute-force reference on one side of the origin
    val, _ = integrate.quad(lambda z: fn(z) * s * z ** (-1.0 - a), lo, hi, limit=400,
                            epsrel=1e-11, points=[0.01, 0.1])
    return val


@given(a=st.floats(0.1, 1.9), s=st.floats(0.1, 3.0), eps=st.floats(1e-3, 0.5))
def test_intensity_matches_quadrature(a, s, eps):
    sj = SmallJumpConfig(activity=a, scale=s, eps_trunc=eps)
    ref = 2.0 * _quad_measure(lambda z: 1.0, a, s, eps, 1.0)
    assert sj.intensity() == pytest.approx(ref, rel=1e-8)


@pytest.mark.parametrize("p", [2.0, 3.0, 4.5])
def test_full_moment_closed_form(p):
    sj = SmallJumpConfig(activity=0.5, scale=1.0)
    # int_{0<|z|<1} |z|^p nu(dz) = 2 / (p - a)
    assert sj.moment(p) == pytest.approx(2.0 / (p - 0.5), rel=1e-14)
    assert sj.integrate(lambda z: abs(z) ** p) == pytest.approx(sj.moment(p), rel=1e-7)


def test_divergent_moment_is_inf():
    assert SmallJumpConfig(activity=1.5).moment(1.0) == math.inf


def test_truncated_quadrature_matches_closed_form():
    sj = SmallJumpConfig(activity=0.7, scale=2.0, eps_trunc=0.01)
    assert sj.integrate(lambda z: z * z, truncated=True) == pytest.approx(
        sj.truncated_moment(2.0), rel=1e-7)


def test_asymmetric_compensator():
    sj = SmallJumpConfig(activity=0.5, scale=1.0, eps_trunc=0.01, symmetric=False)
    ref = _quad_measure(lambda z: z, 0.5, 1.0, 0.01, 1.0)
    assert sj.compensator_rate() == pytest.approx(ref, rel=1e-9)
    assert SmallJumpConfig().compensator_rate() == 0.0


def test_small_marks_follow_truncated_law(rng):
    sj = SmallJumpConfig(activity=0.8, scale=1.0, eps_trunc=0.01, symmetric=False)
    z = sj.sample_marks(rng, 20_000)
    a, e = 0.8, 0.01

    def cdf(v):
        return (e ** (-a) - np.asarray(v) ** (-a)) / (e ** (-a) - 1.0)

    assert z.min() >= e and z.max() < 1.0
    assert stats.kstest(z, cdf).pvalue > 1e-3


def test_small_increments_poisson_count(rng):
    cfg = NoiseConfig(1, small_jump=SmallJumpConfig(activity=0.5, eps_trunc=0.05))
    counts = [len(small_jump_increments(cfg, 0.0, 2.0, rng).times) for _ in range(400)]
    lam = cfg.small_jump.intensity() * 2.0
    assert abs(np.mean(counts) - lam) < 4 * math.sqrt(lam / 400)


def test_small_increments_sorted_in_window(rng):
    cfg = NoiseConfig(1, small_jump=SmallJumpConfig(eps_trunc=0.01))
    sj = small_jump_increments(cfg, 1.0, 3.0, rng)
    assert np.all(np.diff(sj.times) >= 0)
    assert np.all((sj.times >= 1.0) & (sj.times < 3.0))


def test_small_off_is_empty(rng):
    sj = small_jump_increments(NoiseConfig(2), 0.0, 1.0, rng)
    assert len(sj.times) == 0 and sj.compensator == 0.0


@pytest.mark.parametrize("marks", ["uniform", "pareto"])
def test_large_marks_in_range_and_mean(marks, rng):
    lj = LargeJumpConfig(rate=1.0, marks=marks, z_max=3.0)
    z = lj.sample_marks(rng, 40_000)
    assert z.min() >= 1.0 and z.max() <= 3.0
    mean = lj.expect(lambda v: v)
    assert abs(z.mean() - mean) < 4 * z.std() / math.sqrt(len(z))


def test_large_events_rate(rng):
    cfg = NoiseConfig(1, large_jump=LargeJumpConfig(rate=3.0))
    n = [len(large_jump_events(cfg, 0.0, 1.0, rng).times) for _ in range(500)]
    assert abs(np.mean(n) - 3.0) < 4 * math.sqrt(3.0 / 500)


def test_wiener_scaling(rng):
    cfg = NoiseConfig(3)
    w = np.array([wiener_increment(cfg, 0.01, rng) for _ in range(20_000)])
    assert np.allclose(w.var(axis=0), 0.01, rtol=0.05)
    assert np.array_equal(wiener_increment(cfg, 0.0, rng), np.zeros(3))
    with pytest.raises(ValueError):
        wiener_increment(cfg, -1.0, rng)


def test_regime_candidates(rng):
    t, r = regime_candidates(2.0, 0.0, 5.0, rng)
    assert np.all(np.diff(t) >= 0) and np.all((r >= 0) & (r <= 2.0))
    t0, r0 = regime_candidates(0.0, 0.0, 5.0, rng)
    assert len(t0) == 0 and len(r0) == 0


@pytest.mark.parametrize("kw", [dict(activity=2.0), dict(scale=-1.0), dict(eps_trunc=1.0)])
def test_small_config_validation(kw):
    with pytest.raises(ValueError):
        SmallJumpConfig(**kw)


def test_noise_width():
    assert NoiseConfig(4).width == 4
    assert NoiseConfig(4, noise_modes=16).width == 16
    with pytest.raises(ValueError):
        NoiseConfig(4, noise_modes=2)
