"""Jump-adapted, drift-implicit time stepping of the hybrid pair (X, regime).

States are Galerkin coefficient vectors (``numpy`` arrays of length
``n_modes``). The H inner product is weighted, ``<a, b>_H = sum_j w_j a_j b_j``,
and the diffusion returns per-mode multipliers with respect to an
H-orthonormal basis, so a Wiener increment ``dbeta_j`` moves coordinate ``j``
by ``m_j / sqrt(w_j) * dbeta_j``.

Trajectories are advanced in lock-step batches. Each member carries its own
time grid, built once from its own noise record: the uniform ``dt_max`` grid,
the requested output times, every candidate time of the switching clock and
every big-jump time. Batches never mix information between members, so a
trajectory's path depends only on ``(seed, stream_id)``.
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .noise import large_jump_events, regime_candidates, small_jump_increments
from .regime import RateMatrix, switch_targets

GalerkinState = np.ndarray

_BLOCK = 512
DEFAULT_CHUNK = 256


class IntegratorFault(RuntimeError):
    def __init__(self, msg, t=None, residual=None, trajectory_ids=None):
        super().__init__(msg)
        self.t = t
        self.residual = residual
        self.trajectory_ids = trajectory_ids or []


@dataclass(frozen=True)
class AssumptionConstants:
    alpha: float
    beta: float
    theta: float
    K: float
    gamma_growth: float
    c: float
    C_sup: float
    lam_exp: float
    B_n: Callable  # level n -> per-mode lower diffusion multipliers
    delta_n: Callable
    K_tilde_n: Callable
    C_lip_n: Callable
    rho: Callable | None = None
    n0: int = 1
    C_r: float | None = None

    def rho_of(self, x):
        x = np.asarray(x, dtype=float)
        if self.rho is None:
            return np.zeros(x.shape[:-1])
        return self.rho(x)


def check_lambda_range(lam, alpha):
    """The exponent must lie in [2, inf) and exceed alpha - 2 (LM2 range)."""
    if not (lam >= 2.0 and lam > alpha - 2.0):
        raise ValueError(
            f"lambda_exp={lam!r} outside the LM2 range [2, inf) ∩ ({alpha - 2.0!r}, inf)"
        )


@dataclass(frozen=True)
class LinearJumpCoef:
    """Jump coefficient ``clip(z, -cap, cap) * direction(t, x, i)``."""

    direction: Callable
    cap: float = math.inf
    name: str = ""

    def clip(self, z):
        return np.clip(z, -self.cap, self.cap)

    def __call__(self, t, x, i, z):
        return np.asarray(self.clip(z))[..., None] * self.direction(t, x, i)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_modes: int
    drift: Callable
    diffusion: Callable
    h_weights: np.ndarray
    rate_matrix: RateMatrix
    period: float
    noise: object  # NoiseConfig
    small_jump_coef: LinearJumpCoef | None = None
    large_jump_coef: LinearJumpCoef | None = None
    constants: AssumptionConstants | None = None
    drift_jacobian: Callable | None = None
    v_norm_fn: Callable | None = None
    v_dual_norm_fn: Callable | None = None
    params: object = None

    def h_inner(self, a, b):
        return np.sum(self.h_weights * a * b, axis=-1)

    def h_norm(self, x):
        return np.sqrt(self.h_inner(x, x))

    def v_norm(self, x):
        if self.v_norm_fn is None:
            return self.h_norm(x)
        return self.v_norm_fn(x)

    def v_dual_norm(self, x, a):
        """Estimate of ``|a|_{V*}`` (exact when V = H)."""
        if self.v_dual_norm_fn is None:
            return self.h_norm(a)
        return self.v_dual_norm_fn(x, a)

    @property
    def noise_scale(self):
        return 1.0 / np.sqrt(self.h_weights)

    def unit_mode(self, k):
        """H-unit vector along Galerkin mode ``k`` (1-based)."""
        e = np.zeros(self.n_modes)
        e[k - 1] = 1.0 / math.sqrt(self.h_weights[k - 1])
        return e

    def trace_BB(self, t, x, i):
        return np.sum(self.diffusion(t, x, i) ** 2, axis=-1)

    @property
    def small_on(self):
        return self.small_jump_coef is not None and self.noise.small_on

    @property
    def large_on(self):
        return self.large_jump_coef is not None and self.noise.large_on

    def small_jump_sq_integral(self, t, x, i):
        """nu-integral of ``|H(t,x,i,z)|_H^2`` over ``|z| < 1``."""
        x = np.asarray(x, dtype=float)
        if not self.small_on:
            return np.zeros(x.shape[:-1])
        h = self.small_jump_coef.direction(t, x, i)
        return self.h_inner(h, h) * small_moment2(self)

    def large_jump_integral(self, t, x, i):
        """nu-integral of ``|J|_H^2 + 2<x, J>_H`` over ``|z| >= 1``."""
        x = np.asarray(x, dtype=float)
        if not self.large_on:
            return np.zeros(x.shape[:-1])
        jc = self.large_jump_coef
        d = jc.direction(t, x, i)
        m1, m2 = _large_moments(self)
        return m2 * self.h_inner(d, d) + 2.0 * m1 * self.h_inner(x, d)


_MOMENT_CACHE = {}


def small_moment2(model):
    key = ("s2", model.noise.small_jump)
    if key not in _MOMENT_CACHE:
        _MOMENT_CACHE[key] = model.noise.small_jump.integrate(lambda z: z * z)
    return _MOMENT_CACHE[key]


def _large_moments(model):
    jc = model.large_jump_coef
    lj = model.noise.large_jump
    key = ("l", lj, jc.cap)
    if key not in _MOMENT_CACHE:
        m1 = lj.integrate(lambda z: float(jc.clip(z)))
        m2 = lj.integrate(lambda z: float(jc.clip(z)) ** 2)
        _MOMENT_CACHE[key] = (m1, m2)
    return _MOMENT_CACHE[key]


@dataclass(frozen=True)
class StepControl:
    dt_max: float = 1e-2
    implicit_tol: float = 1e-10
    implicit_max_iters: int = 200
    taming_fallback: bool = True
    solver: str = "newton"
    damping: float = 0.5

    def __post_init__(self):
        if not self.dt_max > 0:
            raise ValueError("dt_max must be positive")
        if not self.implicit_tol > 0:
            raise ValueError("implicit_tol must be positive")
        if self.solver not in ("newton", "fixed_point"):
            raise ValueError(f"unknown implicit solver {self.solver!r}")


@dataclass
class HybridSample:
    t: float
    state: np.ndarray
    regime: int


@dataclass
class StepNoise:
    """Noise over one step: Wiener increments, sum of small-jump marks, compensator."""

    dW: np.ndarray
    small_sum: float = 0.0
    compensator: float = 0.0


@dataclass
class Event:
    trajectory_id: int
    t: float
    kind: str  # switch | big_jump | truncation | fault
    detail: str
    x_left: np.ndarray | None = None
    x_post: np.ndarray | None = None


# --------------------------------------------------------------------------
# implicit solve


def _as_batch(v, B):
    v = np.asarray(v)
    return np.broadcast_to(v, (B,)) if v.ndim == 0 else v


def _implicit_solve(model, ctrl, t1, rhs, i, dt, guess):
    """Solve ``y - dt * A(t1, y, i) = rhs`` member-wise.

    Returns ``(y, converged, residual_norm)``. Members are iterated until their
    own residual is below tolerance, independently of the rest of the batch.
    """
    y = guess.copy()

    def resid(idx, yy):
        return yy - dt[idx, None] * model.drift(t1[idx], yy, i[idx]) - rhs[idx]

    everyone = np.arange(len(y))
    r = resid(everyone, y)
    rn = model.h_norm(r)
    done = rn <= ctrl.implicit_tol
    newton = ctrl.solver == "newton" and model.drift_jacobian is not None
    for _ in range(ctrl.implicit_max_iters):
        if done.all():
            break
        idx = np.nonzero(~done)[0]
        ya, ra, rna = y[idx], r[idx], rn[idx]
        if newton:
            jac = model.drift_jacobian(t1[idx], ya, i[idx])
            h = dt[idx]
            if jac.ndim == ya.ndim:
                delta = ra / (1.0 - h[:, None] * jac)
            else:
                eye = np.eye(ya.shape[-1])
                delta = np.linalg.solve(eye - h[:, None, None] * jac, ra[..., None])[..., 0]
            lam = np.ones(len(idx))
            y_new = ya - delta
            r_new = resid(idx, y_new)
            rn_new = model.h_norm(r_new)
            for _ in range(8):
                worse = ~(rn_new < rna) & ~(rn_new <= ctrl.implicit_tol)
                if not worse.any():
                    break
                lam = np.where(worse, lam * ctrl.damping, lam)
                sub = np.nonzero(worse)[0]
                y_new[sub] = ya[sub] - lam[sub, None] * delta[sub]
                r_new[sub] = resid(idx[sub], y_new[sub])
                rn_new[sub] = model.h_norm(r_new[sub])
        else:
            w = ctrl.damping
            y_new = ya - w * ra
            r_new = resid(idx, y_new)
            rn_new = model.h_norm(r_new)
        y[idx], r[idx], rn[idx] = y_new, r_new, rn_new
        done[idx] = ~np.isfinite(rn_new) | (rn_new <= ctrl.implicit_tol)
    converged = np.isfinite(rn) & (rn <= ctrl.implicit_tol)
    return y, converged, rn


def _advance(model, ctrl, t, x, i, dt, dW, small_sum, comp_rate, extra=None):
    """One drift-implicit Euler step for a batch. Returns ``(x_new, ok, residual, tamed)``.

    ``extra`` is an explicit additive increment (already multiplied by dt).
    """
    n = model.n_modes
    rhs = x + model.diffusion(t, x, i) * model.noise_scale * dW[..., :n]
    if extra is not None:
        rhs = rhs + extra
    if model.small_on:
        h = model.small_jump_coef.direction(t, x, i)
        rhs = rhs + (small_sum - comp_rate * dt)[:, None] * h
    y, ok, res = _implicit_solve(model, ctrl, t + dt, rhs, i, dt, rhs)
    tamed = np.zeros(len(x), dtype=bool)
    if not ok.all() and ctrl.taming_fallback:
        bad = np.nonzero(~ok)[0]
        a = model.drift(t[bad], x[bad], i[bad])
        denom = 1.0 + dt[bad] * model.h_norm(a)
        y[bad] = rhs[bad] + (dt[bad] / denom)[:, None] * a
        tamed[bad] = True
        ok = ok | np.all(np.isfinite(y), axis=-1)
    ok = ok & np.all(np.isfinite(y), axis=-1)
    return y, ok, res, tamed


def step(sample, dt, model, ctrl, noise):
    """Single drift-implicit step; no switch or big jump may lie inside ``(t, t+dt)``."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    x = np.asarray(sample.state, dtype=float)[None, :]
    t = np.array([sample.t], dtype=float)
    i = np.array([sample.regime])
    dW = np.asarray(noise.dW, dtype=float)[None, :]
    comp_rate = noise.compensator / dt if dt > 0 else 0.0
    y, ok, res, tamed = _advance(
        model, ctrl, t, x, i, np.array([dt]), dW,
        np.array([noise.small_sum]), comp_rate,
    )
    if not ok[0]:
        raise IntegratorFault(
            f"implicit iteration failed at t={sample.t} (residual {res[0]:.3e})",
            t=sample.t, residual=float(res[0]),
        )
    return HybridSample(sample.t + dt, y[0], sample.regime)


def step_batch(t, x, i, dt, dW, model, ctrl, small_sum=None):
    """Vectorised ``step`` over a batch with caller-supplied increments."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    B = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    i = np.broadcast_to(np.asarray(i, dtype=int), (B,))
    h = np.broadcast_to(np.asarray(dt, dtype=float), (B,))
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    small = np.zeros(B) if small_sum is None else np.broadcast_to(small_sum, (B,))
    comp = model.noise.small_jump.compensator_rate() if model.small_on else 0.0
    y, ok, res, _ = _advance(model, ctrl, t, x, i, h, dW, small, comp)
    if not ok.all():
        bad = np.nonzero(~ok)[0]
        raise IntegratorFault(f"implicit iteration failed for members {bad[:10].tolist()}",
                              t=float(t[bad[0]]), residual=float(res[bad[0]]),
                              trajectory_ids=bad.tolist())
    return y


# --------------------------------------------------------------------------
# trajectory records and the lock-step engine


@dataclass
class _Record:
    nodes: np.ndarray
    cand_r: np.ndarray  # per interval, r of a candidate at its right node, else nan
    big_z: np.ndarray  # per interval, big-jump mark at its right node, else nan
    obs_node: np.ndarray  # node index of each output time
    small_sum: np.ndarray  # per interval sum of small-jump marks
    wiener: np.random.Generator


def _build_grid(t_end, dt_max, specials):
    n_uni = max(1, int(math.ceil(t_end / dt_max - 1e-9)))
    uniform = np.arange(n_uni + 1) * (t_end / n_uni)
    uniform[-1] = t_end
    special = np.unique(np.concatenate([specials, [0.0, t_end]]))
    # uniform nodes within rounding distance of a special time are dropped
    tol = 1e-12 * max(t_end, 1.0)
    pos = np.searchsorted(special, uniform)
    lo = np.abs(uniform - special[np.clip(pos - 1, 0, len(special) - 1)])
    hi = np.abs(special[np.clip(pos, 0, len(special) - 1)] - uniform)
    keep = np.minimum(lo, hi) > tol
    return np.unique(np.concatenate([special, uniform[keep]]))


def _record(model, ctrl, t_end, seed, sid, obs_times):
    cfg = replace(model.noise, seed=int(seed), stream_id=int(sid))
    L = model.rate_matrix.bound_L
    cand_t, cand_r = regime_candidates(L, 0.0, t_end, cfg.rng("regime"))
    if model.large_on:
        big = large_jump_events(cfg, 0.0, t_end, cfg.rng("large_jump"))
        big_t, big_z = big.times, big.marks
    else:
        big_t, big_z = np.empty(0), np.empty(0)
    nodes = _build_grid(t_end, ctrl.dt_max, np.concatenate([obs_times, cand_t, big_t]))
    n_int = len(nodes) - 1
    cr = np.full(n_int, np.nan)
    bz = np.full(n_int, np.nan)
    if len(cand_t):
        cr[np.searchsorted(nodes, cand_t) - 1] = cand_r
    if len(big_t):
        bz[np.searchsorted(nodes, big_t) - 1] = big_z
    obs_node = np.searchsorted(nodes, obs_times)
    small = np.zeros(n_int)
    if model.small_on:
        sj = small_jump_increments(cfg, 0.0, t_end, cfg.rng("small_jump"))
        k = np.clip(np.searchsorted(nodes, sj.times, side="right") - 1, 0, n_int - 1)
        small = np.bincount(k, weights=sj.marks, minlength=n_int)
    return _Record(nodes, cr, bz, obs_node, small, cfg.rng("wiener"))


@dataclass
class EnsembleResult:
    times: np.ndarray
    states: np.ndarray  # (n_traj, n_obs, n_modes)
    regimes: np.ndarray  # (n_traj, n_obs)
    integrals: dict
    events: list
    faults: dict
    truncations: np.ndarray
    n_steps: np.ndarray
    seed: int
    stream_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def n_traj(self):
        return self.states.shape[0]

    @property
    def valid(self):
        return not self.faults and int(self.truncations.sum()) == 0

    def samples(self, k):
        return [
            HybridSample(float(t), self.states[k, j].copy(), int(self.regimes[k, j]))
            for j, t in enumerate(self.times)
        ]

    def events_of(self, k):
        sid = int(self.stream_ids[k])
        return [e for e in self.events if e.trajectory_id == sid]

    def raise_for_faults(self):
        if self.faults:
            ids = sorted(self.faults)
            raise IntegratorFault(
                f"{len(ids)} trajectories faulted: {ids[:10]}", trajectory_ids=ids
            )

    def summary(self, model):
        """Per-output-time mean and standard error of ``|X|_H^2``."""
        e = model.h_norm(self.states) ** 2
        n = e.shape[0]
        mean = np.sum(e, axis=0) / n
        if n > 1:
            var = np.sum((e - mean) ** 2, axis=0) / (n - 1)
        else:
            var = np.zeros_like(mean)
        return {"t": self.times, "energy_mean": mean, "energy_se": np.sqrt(var / n)}


@dataclass
class TrajectoryPath:
    samples: list
    events: list
    integrals: dict
    truncations: int
    n_steps: int

    @property
    def valid(self):
        return self.truncations == 0


def _simulate_chunk(model, ctrl, x0, i0, t_end, seed, sids, obs_times, accumulators):
    B = len(sids)
    n = model.n_modes
    width = model.noise.width
    recs = [_record(model, ctrl, t_end, seed, s, obs_times) for s in sids]
    n_int = np.array([len(r.nodes) - 1 for r in recs])
    K = int(n_int.max())
    nodes = np.full((B, K + 1), t_end)
    cand = np.full((B, K), np.nan)
    big = np.full((B, K), np.nan)
    small = np.zeros((B, K))
    for b, r in enumerate(recs):
        nodes[b, : n_int[b] + 1] = r.nodes
        cand[b, : n_int[b]] = r.cand_r
        big[b, : n_int[b]] = r.big_z
        small[b, : n_int[b]] = r.small_sum
    dts = np.diff(nodes, axis=1)
    n_obs = len(obs_times)
    obs_at = np.full((B, K + 1), -1, dtype=int)
    for b, r in enumerate(recs):
        obs_at[b, r.obs_node] = np.arange(n_obs)

    x = np.array(np.broadcast_to(x0, (B, n)), dtype=float)
    reg = np.array(np.broadcast_to(i0, (B,)), dtype=int)
    out_x = np.zeros((B, n_obs, n))
    out_i = np.zeros((B, n_obs), dtype=int)
    acc_names = list(accumulators)
    acc = np.zeros((len(acc_names), B))
    out_acc = np.zeros((len(acc_names), B, n_obs))
    events = []
    faults = {}
    trunc = np.zeros(B, dtype=int)
    alive = np.ones(B, dtype=bool)
    s_max = model.rate_matrix.num_regimes
    comp_rate = model.noise.small_jump.compensator_rate() if model.small_on else 0.0

    def record_obs(node):
        b = np.nonzero(obs_at[:, node] >= 0)[0]
        if len(b):
            j = obs_at[b, node]
            out_x[b, j] = x[b]
            out_i[b, j] = reg[b]
            for a in range(len(acc_names)):
                out_acc[a, b, j] = acc[a, b]

    record_obs(0)
    wblock = None
    for k in range(K):
        if k % _BLOCK == 0:
            wblock = np.stack([r.wiener.standard_normal((_BLOCK, width)) for r in recs])
        t = nodes[:, k]
        h = np.where(alive, dts[:, k], 0.0)
        dW = np.sqrt(h)[:, None] * wblock[:, k % _BLOCK, :]
        for a, name in enumerate(acc_names):
            acc[a] += accumulators[name](t, x, reg) * h
        x_new, ok, res, _ = _advance(model, ctrl, t, x, reg, h, dW, small[:, k], comp_rate)
        bad = alive & ~ok
        if bad.any():
            for b in np.nonzero(bad)[0]:
                faults[int(sids[b])] = f"t={t[b]!r} residual={res[b]:.3e}"
                events.append(Event(int(sids[b]), float(t[b]), "fault",
                                    f"residual={res[b]:.3e}", x[b].copy(), None))
            alive &= ~bad
            x_new[bad] = x[bad]
        x = x_new
        node = k + 1
        t1 = nodes[:, node]
        live = alive & (k < n_int)

        zmask = live & np.isfinite(big[:, k])
        cmask = live & np.isfinite(cand[:, k])
        if zmask.any() or cmask.any():
            x_left = x.copy()
            reg_left = reg.copy()
            if zmask.any():
                b = np.nonzero(zmask)[0]
                kick = model.large_jump_coef(t1[b], x_left[b], reg_left[b], big[b, k])
                x[b] = x_left[b] + kick
                for bb in b:
                    events.append(Event(int(sids[bb]), float(t1[bb]), "big_jump",
                                        f"z={big[bb, k]!r}", x_left[bb].copy(), x[bb].copy()))
            if cmask.any():
                b = np.nonzero(cmask)[0]
                rows = model.rate_matrix.row(x_left[b], reg_left[b])
                target = switch_targets(rows, reg_left[b], cand[b, k])
                moved = target != reg_left[b]
                for bb, tj in zip(b[moved], target[moved]):
                    src = int(reg_left[bb])
                    if not 1 <= tj <= s_max:
                        trunc[bb] += 1
                        clamped = min(max(int(tj), 1), s_max)
                        events.append(Event(int(sids[bb]), float(t1[bb]), "truncation",
                                            f"{src}->{int(tj)} clamped to {clamped}",
                                            x_left[bb].copy(), x[bb].copy()))
                        tj = clamped
                    reg[bb] = tj
                    events.append(Event(int(sids[bb]), float(t1[bb]), "switch",
                                        f"{src}->{int(tj)}", x_left[bb].copy(), x[bb].copy()))
        record_obs(node)
    integrals = {name: out_acc[a] for a, name in enumerate(acc_names)}
    return out_x, out_i, integrals, events, faults, trunc, n_int


def _obs(obs_times, t_end):
    if obs_times is None:
        return np.array([0.0, float(t_end)])
    obs = np.asarray(obs_times, dtype=float)
    if obs.ndim != 1 or np.any(np.diff(obs) <= 0):
        raise ValueError("output times must be strictly increasing")
    if obs[0] < 0 or obs[-1] > t_end:
        raise ValueError("output times must lie in [0, t_end]")
    return obs


def run_ensemble(x0, i0, t_end, model, ctrl, n_traj, seed, obs_times=None,
                 accumulators=None, workers=1, chunk_size=DEFAULT_CHUNK, first_stream=0):
    """Run ``n_traj`` trajectories with stream ids ``first_stream + k``.

    ``x0`` may be one state or one per trajectory, likewise ``i0``.
    ``accumulators`` maps names to ``F(t, x, i)``; their left-point time
    integrals are reported at the output times. Chunks are fixed-size and
    reassembled in id order, so results do not depend on ``workers``.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    obs = _obs(obs_times, t_end)
    accumulators = dict(accumulators or {})
    x0 = np.asarray(x0, dtype=float)
    i0 = np.asarray(i0, dtype=int)
    if x0.shape[-1] != model.n_modes:
        raise ValueError(f"initial state has {x0.shape[-1]} modes, model has {model.n_modes}")
    if np.any(i0 < 1) or np.any(i0 > model.rate_matrix.num_regimes):
        raise ValueError("initial regime outside the state space")
    xs = np.broadcast_to(x0, (n_traj, model.n_modes))
    is_ = np.broadcast_to(i0, (n_traj,))
    sids = first_stream + np.arange(n_traj)
    bounds = [(a, min(a + chunk_size, n_traj)) for a in range(0, n_traj, chunk_size)]

    def job(ab):
        a, b = ab
        return _simulate_chunk(model, ctrl, xs[a:b], is_[a:b], float(t_end), seed,
                               sids[a:b], obs, accumulators)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(ab) for ab in bounds]
    events = [e for p in parts for e in p[3]]
    faults = {}
    for p in parts:
        faults.update(p[4])
    return EnsembleResult(
        times=obs,
        states=np.concatenate([p[0] for p in parts]),
        regimes=np.concatenate([p[1] for p in parts]),
        integrals={name: np.concatenate([p[2][name] for p in parts]) for name in accumulators},
        events=events,
        faults=faults,
        truncations=np.concatenate([p[5] for p in parts]),
        n_steps=np.concatenate([p[6] for p in parts]),
        seed=int(seed),
        stream_ids=sids,
    )


def run_trajectory(x0, i0, t_end, model, ctrl, seed, stream_id, obs_times=None,
                   accumulators=None):
    """One jump-adapted trajectory; raises ``IntegratorFault`` on solver failure."""
    res = run_ensemble(x0, i0, t_end, model, ctrl, 1, seed, obs_times=obs_times,
                       accumulators=accumulators, first_stream=stream_id)
    res.raise_for_faults()
    return TrajectoryPath(
        samples=res.samples(0),
        events=res.events,
        integrals={k: v[0] for k, v in res.integrals.items()},
        truncations=int(res.truncations[0]),
        n_steps=int(res.n_steps[0]),
    )


def trajectory_grid(model, ctrl, t_end, seed, stream_id, obs_times=None):
    """Time grid used for one trajectory (for jump-adaptedness checks)."""
    return _record(model, ctrl, float(t_end), seed, stream_id, _obs(obs_times, t_end)).nodes


# --------------------------------------------------------------------------
# CSV output


def _fmt(v):
    return format(float(v), ".17g")


def path_header(n_modes):
    return ["trajectory_id", "t", "regime"] + [f"mode_{j}" for j in range(n_modes)] + ["H_norm", "V_norm"]


def write_paths_csv(fh, result, model):
    """One row per (trajectory, output time); floats round-trip exactly."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(path_header(model.n_modes))
    hn = model.h_norm(result.states)
    vn = model.v_norm(result.states)
    for k in range(result.n_traj):
        sid = int(result.stream_ids[k])
        for j, t in enumerate(result.times):
            w.writerow([sid, _fmt(t), int(result.regimes[k, j])]
                       + [_fmt(v) for v in result.states[k, j]]
                       + [_fmt(hn[k, j]), _fmt(vn[k, j])])


def write_events_csv(fh, events):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["trajectory_id", "t", "kind", "detail"])
    for e in sorted(events, key=lambda e: (e.trajectory_id, e.t)):
        w.writerow([e.trajectory_id, _fmt(e.t), e.kind, e.detail])
