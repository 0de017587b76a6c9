"""Lyapunov drift, Dynkin residuals, periodic-measure diagnostics and ergodic averages."""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from .core import run_ensemble
from .streams import stream

N_PERMUTATIONS = 999


@dataclass(frozen=True)
class LyapunovSpec:
    f: Callable
    name: str = "f"

    def __call__(self, x, i, model):
        return model.h_norm(x) ** 2 + self.f(np.asarray(i))

    def check_increasing(self, s_max):
        fv = self.f(np.arange(1, s_max + 2))
        return bool(np.all(np.diff(fv) > 0))


def generator_apply_V(t, x, i, model, spec, small_region="full"):
    """Generator of ``V = |x|_H^2 + f(i)``, vectorised over leading axes.

    ``small_region="simulated"`` integrates the small-jump term only over the
    simulated marks ``eps_trunc <= |z| < 1``, matching what the integrator sees.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    n = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    i = np.broadcast_to(np.asarray(i), (n,))
    out = 2.0 * model.h_inner(model.drift(t, x, i), x) + model.trace_BB(t, x, i)
    if model.small_on:
        if small_region == "simulated":
            h = model.small_jump_coef.direction(t, x, i)
            m2 = model.noise.small_jump.truncated_moment(2.0)
            out = out + model.h_inner(h, h) * m2
        else:
            out = out + model.small_jump_sq_integral(t, x, i)
    out = out + model.large_jump_integral(t, x, i)
    q = model.rate_matrix
    if q.bound_L > 0:
        rows = q.row(x, i)
        fj = spec.f(np.arange(1, q.num_regimes + 2))
        out = out + np.sum(rows * (fj[None, :] - spec.f(i)[:, None]), axis=1)
    return out[0] if squeeze else out


def generator_accumulator(model, spec, small_region="simulated"):
    return {"AV": lambda t, x, i: generator_apply_V(t, x, i, model, spec, small_region)}


def drift_martingale_residual(path, model, spec):
    """``V(t_k) - V(0) - int_0^{t_k} AV ds`` for a single trajectory path."""
    if "AV" not in path.integrals:
        raise ValueError("path was run without the generator accumulator")
    xs = np.stack([s.state for s in path.samples])
    regs = np.array([s.regime for s in path.samples])
    v = spec(xs, regs, model)
    return v - v[0] - path.integrals["AV"]


@dataclass
class DynkinSummary:
    times: np.ndarray
    residuals: np.ndarray  # (n_traj, n_obs)
    mean: np.ndarray
    se: np.ndarray

    @property
    def z_scores(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.se > 0, self.mean / self.se, 0.0)

    def within(self, k=3.0):
        return bool(np.all(np.abs(self.mean) <= k * self.se + 1e-14))


def _mean_se(a, axis=0):
    n = a.shape[axis]
    mean = np.mean(a, axis=axis)
    se = np.std(a, axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def dynkin_residuals(result, model, spec):
    if "AV" not in result.integrals:
        raise ValueError("ensemble was run without the generator accumulator")
    v = spec(result.states, result.regimes, model)
    res = v - v[:, :1] - result.integrals["AV"]
    mean, se = _mean_se(res)
    return DynkinSummary(result.times, res, mean, se)


def ensemble_dynkin(model, spec, x0, i0, t_end, ctrl, n_traj, seed, obs_times=None, workers=1):
    result = run_ensemble(x0, i0, t_end, model, ctrl, n_traj, seed, obs_times=obs_times,
                          accumulators=generator_accumulator(model, spec), workers=workers)
    return dynkin_residuals(result, model, spec), result


def generator_sup_profile(model, spec, levels, rng, n_samples=2000, i_max=None):
    """Sup of AV over samples with ``|x|_V + i > n``, for each level ``n``."""
    from .checker import sample_states

    q = model.rate_matrix
    i_max = i_max or q.num_regimes
    sups = []
    for n in levels:
        i = rng.integers(1, i_max + 1, size=n_samples)
        x = sample_states(model, rng, n_samples, 1.0, shell=True)
        # place |x|_V in (n - i, 2n] so that |x|_V + i > n
        lo = np.maximum(n - i, 0.0) + 1e-9
        target = lo + (2.0 * n - lo) * rng.random(n_samples)
        x = x * (target / np.maximum(model.v_norm(x), 1e-300))[:, None]
        t = model.period * rng.random(n_samples)
        sups.append(float(np.max(generator_apply_V(t, x, i, model, spec))))
    return np.asarray(sups)


# --------------------------------------------------------------------------
# occupation


@dataclass
class OccupationProfile:
    levels: np.ndarray
    fractions: np.ndarray
    se: np.ndarray


def occupation_profile(result, model, levels, t_min=0.0):
    """Time-averaged fraction of samples with ``|X|_V + regime >= n``."""
    keep = result.times >= t_min
    size = model.v_norm(result.states[:, keep]) + result.regimes[:, keep]
    fr, se = [], []
    for n in levels:
        per_traj = np.mean(size >= n, axis=1)
        m, s = _mean_se(per_traj)
        fr.append(m)
        se.append(s)
    return OccupationProfile(np.asarray(levels, dtype=float), np.asarray(fr), np.asarray(se))


# --------------------------------------------------------------------------
# distances between empirical laws


def features(states, model, n_proj=4):
    states = np.asarray(states, dtype=float)
    k = min(n_proj, model.n_modes)
    return np.column_stack([states[:, :k], model.h_norm(states)])


def _standardise(a, b):
    pooled = np.vstack([a, b])
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (a - mu) / sd, (b - mu) / sd


def energy_distance(a, b, standardise=True):
    """V-statistic ``2E|X-Y| - E|X-X'| - E|Y-Y'|`` (exactly zero for identical sets)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if standardise:
        a, b = _standardise(a, b)
    e = 2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    # the statistic is a squared RKHS-type distance; clip rounding below zero
    return max(e, 0.0)


def energy_permutation_test(a, b, n_perm=N_PERMUTATIONS, seed=0):
    """Energy statistic and permutation p-value ``(1 + #{E* >= E}) / (1 + n_perm)``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a, b = _standardise(a, b)
    z = np.vstack([a, b])
    n1, n2 = len(a), len(b)
    N = n1 + n2
    D = cdist(z, z).astype(np.float32)
    rng = stream(seed, 0, "aux")
    L = np.zeros((N, n_perm + 1), dtype=np.float32)
    L[:n1, 0] = 1.0
    for p in range(1, n_perm + 1):
        L[rng.permutation(N)[:n1], p] = 1.0
    DL = (D @ L).astype(np.float64)
    total = float(D.astype(np.float64).sum())
    s11 = np.sum(L * DL, axis=0)
    col = DL.sum(axis=0)
    s12 = col - s11
    s22 = total - 2.0 * col + s11
    e = 2.0 * s12 / (n1 * n2) - s11 / n1 ** 2 - s22 / n2 ** 2
    p_value = (1.0 + np.sum(e[1:] >= e[0])) / (1.0 + n_perm)
    return float(max(e[0], 0.0)), float(p_value)


def tv_distance(ra, rb, num_regimes=None):
    ra, rb = np.asarray(ra, dtype=int), np.asarray(rb, dtype=int)
    m = int(max(ra.max(), rb.max())) + 1 if num_regimes is None else num_regimes + 1
    pa = np.bincount(ra, minlength=m) / len(ra)
    pb = np.bincount(rb, minlength=m) / len(rb)
    return 0.5 * float(np.abs(pa - pb).sum())


# --------------------------------------------------------------------------
# periodicity


@dataclass
class DistanceRow:
    kind: str  # same | cross
    phase_a: float
    k_a: int
    phase_b: float
    k_b: int
    energy: float
    p_value: float
    tv: float


@dataclass
class ErgodicReport:
    rows: list = field(default_factory=list)
    samples_per_phase: int = 0
    curves: dict = field(default_factory=dict)
    occupation: OccupationProfile | None = None
    dynkin: DynkinSummary | None = None

    def same(self):
        return [r for r in self.rows if r.kind == "same"]

    def cross(self):
        return [r for r in self.rows if r.kind == "cross"]


def phase_times(period, phases, k_range):
    """Output times needed by ``periodicity_test``."""
    k_range = list(k_range)
    same = {s + k * period for s in phases for k in k_range}
    cross = {s + period / 2 + k_range[0] * period for s in phases}
    return np.unique(np.round(sorted(same | cross), 12))


def _time_index(times, t):
    j = int(np.argmin(np.abs(times - t)))
    if abs(times[j] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"observation time {t} not on the output grid")
    return j


def periodicity_test(result, model, phases=None, k_range=range(10, 15), n_perm=N_PERMUTATIONS,
                     seed=0, min_samples=100, cross=True):
    """Same-phase distances across periods plus a half-period cross-phase control."""
    ell = model.period
    phases = [0.0, ell / 4, ell / 2, 3 * ell / 4] if phases is None else list(phases)
    k_range = list(k_range)
    n = result.n_traj
    if n < min_samples:
        raise ValueError(f"{n} samples per phase, need at least {min_samples}")
    rep = ErgodicReport(samples_per_phase=n)
    cnt = 0

    def compare(kind, sa, ka, sb, kb):
        nonlocal cnt
        ja = _time_index(result.times, sa + ka * ell)
        jb = _time_index(result.times, sb + kb * ell)
        fa = features(result.states[:, ja], model)
        fb = features(result.states[:, jb], model)
        e, p = energy_permutation_test(fa, fb, n_perm, seed=seed + cnt)
        cnt += 1
        tv = tv_distance(result.regimes[:, ja], result.regimes[:, jb])
        rep.rows.append(DistanceRow(kind, sa, ka, sb, kb, e, p, tv))

    for s in phases:
        for a in range(len(k_range)):
            for b in range(a + 1, len(k_range)):
                compare("same", s, k_range[a], s, k_range[b])
        if cross:
            compare("cross", s, k_range[0], s + ell / 2, k_range[0])
    return rep


# --------------------------------------------------------------------------
# ergodic averages


def observable(name, model=None, clip=None, mode=1, regime=1):
    """Bounded observables ``phi(x, i)``; unbounded ones are clipped at ``clip``."""
    if name == "constant":
        return lambda x, i: np.ones(np.shape(i), dtype=float)
    if name == "regime_indicator":
        return lambda x, i: (np.asarray(i) == regime).astype(float)
    if name == "energy":
        c = math.inf if clip is None else clip
        return lambda x, i: np.minimum(model.h_norm(x) ** 2, c)
    if name == "mode_square":
        c = math.inf if clip is None else clip
        return lambda x, i: np.minimum(np.asarray(x)[..., mode - 1] ** 2, c)
    if name == "mode":
        c = math.inf if clip is None else clip
        return lambda x, i: np.clip(np.asarray(x)[..., mode - 1], -c, c)
    raise ValueError(f"unknown observable {name!r}")


def clipped_gaussian_square_moment(var, clip):
    """``E[min(X^2, clip)]`` for ``X ~ N(0, var)``."""
    a = clip / var
    return var * (stats.chi2.cdf(a, 3) + a * stats.chi2.sf(a, 1))


@dataclass
class AverageCurve:
    n: np.ndarray
    averages: np.ndarray  # (n_reps, n_terms)

    @property
    def mean(self):
        return self.averages.mean(axis=0)

    @property
    def spread(self):
        return self.averages.std(axis=0, ddof=1)

    def at(self, n):
        col = self.averages[:, n - 1]
        return float(col.mean()), float(col.std(ddof=1) / math.sqrt(len(col)))

    def spread_ratio(self, n_small, n_large):
        return float(self.spread[n_large - 1] / self.spread[n_small - 1])


def ergodic_average_test(model, phi, s, n_terms, n_reps, x0, i0, ctrl, seed, burn_in=0,
                         workers=1):
    """Running averages ``(1/n) sum_k phi(X(s + k l), regime)`` along each replica.

    ``x0``/``i0`` may be per-replica arrays (dispersed starts).
    """
    ell = model.period
    times = s + ell * (burn_in + np.arange(1, n_terms + 1))
    obs = np.concatenate([[0.0], times]) if times[0] > 0 else times
    res = run_ensemble(x0, i0, times[-1], model, ctrl, n_reps, seed, obs_times=obs, workers=workers)
    vals = phi(res.states[:, -n_terms:], res.regimes[:, -n_terms:])
    avg = np.cumsum(vals, axis=1) / np.arange(1, n_terms + 1)
    return AverageCurve(np.arange(1, n_terms + 1), avg)
