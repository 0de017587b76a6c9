"""Stochastic drivers: Wiener increments, truncated small jumps, compound-Poisson big jumps.

Marks are scalar (the mark space is the real line). Small jumps follow the
power law ``scale * |z|**(-1 - a)`` on ``0 < |z| < 1``, simulated exactly on
``eps_trunc <= |z| < 1``; big jumps have finite rate and marks on ``[1, z_max]``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .streams import stream

QUAD_RTOL = 1e-8


@dataclass(frozen=True)
class SmallJumpConfig:
    activity: float = 0.5
    scale: float = 1.0
    eps_trunc: float = 1e-3
    symmetric: bool = True

    def __post_init__(self):
        if not 0.0 < self.activity < 2.0:
            raise ValueError("small-jump activity exponent must lie in (0, 2)")
        if self.scale < 0:
            raise ValueError("small-jump scale must be nonnegative")
        if not 0.0 < self.eps_trunc < 1.0:
            raise ValueError("eps_trunc must lie in (0, 1)")

    @property
    def sides(self):
        return 2.0 if self.symmetric else 1.0

    def intensity(self):
        """Total rate of simulated jumps, nu(eps <= |z| < 1)."""
        a = self.activity
        return self.sides * self.scale * (self.eps_trunc ** (-a) - 1.0) / a

    def moment(self, p):
        """Integral of ``|z|**p`` over the full small-jump region ``0 < |z| < 1``."""
        if p <= self.activity:
            return math.inf
        return self.sides * self.scale / (p - self.activity)

    def truncated_moment(self, p):
        a = self.activity
        if p == a:
            return -self.sides * self.scale * math.log(self.eps_trunc)
        return self.sides * self.scale * (1.0 - self.eps_trunc ** (p - a)) / (p - a)

    def compensator_rate(self):
        """Integral of ``z`` over the simulated region (zero when symmetric)."""
        if self.symmetric:
            return 0.0
        return self.truncated_moment(1.0)

    def sample_marks(self, rng, n):
        a = self.activity
        e = self.eps_trunc ** (-a)
        u = rng.random(n)
        mag = (e - u * (e - 1.0)) ** (-1.0 / a)
        if self.symmetric:
            sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            return sign * mag
        return mag

    def integrate(self, fn, truncated=False):
        """Quadrature of ``fn(z)`` against nu on the small-jump region.

        Adaptive in ``u = log|z|`` so that the density singularity at 0 is
        mapped to a smoothly decaying tail.
        """
        a, s = self.activity, self.scale
        lo = math.log(self.eps_trunc) if truncated else -np.inf

        def density(u, sign):
            f = fn(sign * math.exp(u))
            if f == 0.0 or s == 0.0:
                return 0.0
            # combine in log space so that z**-a never overflows on its own
            return math.copysign(math.exp(math.log(abs(f)) + math.log(s) - a * u), f)

        total, _ = integrate.quad(density, lo, 0.0, args=(1.0,), epsrel=QUAD_RTOL,
                                  epsabs=0.0, limit=200)
        if self.symmetric:
            neg, _ = integrate.quad(density, lo, 0.0, args=(-1.0,), epsrel=QUAD_RTOL,
                                    epsabs=0.0, limit=200)
            total += neg
        return total


@dataclass(frozen=True)
class LargeJumpConfig:
    rate: float = 0.0
    marks: str = "uniform"
    z_max: float = 2.0
    pareto_index: float = 1.5

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("large-jump rate must be nonnegative")
        if self.marks not in ("uniform", "pareto"):
            raise ValueError(f"unknown mark distribution {self.marks!r}")
        if not self.z_max > 1.0:
            raise ValueError("z_max must exceed 1")

    def sample_marks(self, rng, n):
        u = rng.random(n)
        if self.marks == "uniform":
            return 1.0 + u * (self.z_max - 1.0)
        k = self.pareto_index
        tail = 1.0 - self.z_max ** (-k)
        return (1.0 - u * tail) ** (-1.0 / k)

    def expect(self, fn):
        """Mark expectation ``E[fn(z)]`` (not multiplied by the rate)."""
        if self.marks == "uniform":
            val, _ = integrate.quad(fn, 1.0, self.z_max, epsrel=QUAD_RTOL)
            return val / (self.z_max - 1.0)
        k = self.pareto_index
        norm = 1.0 - self.z_max ** (-k)
        val, _ = integrate.quad(lambda z: fn(z) * k * z ** (-k - 1.0), 1.0, self.z_max,
                                epsrel=QUAD_RTOL)
        return val / norm

    def integrate(self, fn):
        """Integral of ``fn(z)`` against nu restricted to ``|z| >= 1``."""
        if self.rate == 0.0:
            return 0.0
        return self.rate * self.expect(fn)


@dataclass(frozen=True)
class NoiseConfig:
    n_modes: int
    small_jump: SmallJumpConfig | None = None
    large_jump: LargeJumpConfig | None = None
    seed: int = 0
    stream_id: int = 0
    # record width; runs with fewer Galerkin modes use the leading columns
    noise_modes: int | None = None

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("n_modes must be positive")
        if self.noise_modes is not None and self.noise_modes < self.n_modes:
            raise ValueError("noise_modes must be at least n_modes")

    @property
    def width(self):
        return self.noise_modes or self.n_modes

    @property
    def small_on(self):
        return self.small_jump is not None and self.small_jump.scale > 0

    @property
    def large_on(self):
        return self.large_jump is not None and self.large_jump.rate > 0

    def rng(self, channel):
        return stream(self.seed, self.stream_id, channel)


@dataclass
class SmallJumps:
    times: np.ndarray
    marks: np.ndarray
    compensator: float
    eps_trunc: float


@dataclass
class LargeJumps:
    times: np.ndarray
    marks: np.ndarray = field(default_factory=lambda: np.empty(0))


def wiener_increment(cfg, dt, rng):
    if dt < 0:
        raise ValueError("dt must be positive")
    if dt == 0:
        return np.zeros(cfg.n_modes)
    return math.sqrt(dt) * rng.standard_normal(cfg.n_modes)


def _check_window(t0, t1):
    if not t1 > t0:
        raise ValueError(f"empty window [{t0}, {t1}]")


def small_jump_increments(cfg, t0, t1, rng):
    """Exact simulation of the truncated small-jump measure on ``[t0, t1)``."""
    _check_window(t0, t1)
    if not cfg.small_on:
        eps = cfg.small_jump.eps_trunc if cfg.small_jump else 0.0
        return SmallJumps(np.empty(0), np.empty(0), 0.0, eps)
    sj = cfg.small_jump
    n = rng.poisson(sj.intensity() * (t1 - t0))
    times = np.sort(t0 + (t1 - t0) * rng.random(n))
    marks = sj.sample_marks(rng, n)
    return SmallJumps(times, marks, sj.compensator_rate() * (t1 - t0), sj.eps_trunc)


def large_jump_events(cfg, t0, t1, rng):
    _check_window(t0, t1)
    if not cfg.large_on:
        return LargeJumps(np.empty(0), np.empty(0))
    lj = cfg.large_jump
    n = rng.poisson(lj.rate * (t1 - t0))
    times = np.sort(t0 + (t1 - t0) * rng.random(n))
    return LargeJumps(times, lj.sample_marks(rng, n))


def regime_candidates(bound_L, t0, t1, rng):
    """Candidate clock of the thinning sampler: Poisson(bound_L) times and uniform r."""
    if bound_L <= 0:
        return np.empty(0), np.empty(0)
    n = rng.poisson(bound_L * (t1 - t0))
    times = np.sort(t0 + (t1 - t0) * rng.random(n))
    return times, rng.uniform(0.0, bound_L, size=n)
