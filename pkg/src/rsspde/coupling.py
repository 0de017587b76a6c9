"""Coupling by change of measure, and the steered-control probe.

The coupled pair runs ``X`` on the plain dynamics and ``Y`` with the extra
attraction ``|x - y|^a' (X - Y) / |X - Y|^eps`` toward ``X``. Both consume one
shared noise record. The Girsanov density ``R`` that undoes the extra drift is
accumulated from the same increments, so ``P f(x) - P f(y) = E[f(X) - R f(Y)]``.
The regime stays frozen during a pair run.
"""

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import StepControl, _advance, _as_batch
from .noise import small_jump_increments
from .streams import stream

_BLOCK = 512


def alpha_prime(alpha, lam):
    return (lam + 2.0 - alpha) / (2.0 * lam)


def eps_window(alpha, lam):
    """Open interval of admissible ``eps`` for exponents ``(alpha, lam)``.

    Combines ``max(0, alpha-2) < lam (1 - eps) < min(2 alpha - 2, alpha)`` with
    ``alpha' < eps < 1``.
    """
    lo_lam = max(0.0, alpha - 2.0)
    hi_lam = min(2.0 * alpha - 2.0, alpha)
    lo = max(1.0 - hi_lam / lam, alpha_prime(alpha, lam), 0.0)
    hi = min(1.0 - lo_lam / lam, 1.0)
    return lo, hi


@dataclass(frozen=True)
class CouplingConfig:
    eps: float
    alpha: float
    lam: float
    n_stop: int = 1000
    T: float = 1.0
    dt: float = 1e-3

    def __post_init__(self):
        lo, hi = eps_window(self.alpha, self.lam)
        if not lo < hi:
            raise ValueError(f"empty eps window for alpha={self.alpha}, lambda={self.lam}")
        if not lo < self.eps < hi:
            raise ValueError(
                f"eps={self.eps!r} outside the admissible window ({lo:.6g}, {hi:.6g})"
            )
        if self.n_stop < 1 or not self.T > 0 or not self.dt > 0:
            raise ValueError("n_stop, T and dt must be positive")

    @property
    def alpha_p(self):
        return alpha_prime(self.alpha, self.lam)

    @property
    def r(self):
        return (self.alpha - self.lam * (1.0 - self.eps)) / 2.0

    @property
    def cutoff(self):
        return 1.0 / self.n_stop

    @classmethod
    def from_model(cls, model, eps=None, **kw):
        c = model.constants
        if eps is None:
            lo, hi = eps_window(c.alpha, c.lam_exp)
            eps = 0.5 * (lo + hi)
        return cls(eps=eps, alpha=c.alpha, lam=c.lam_exp, **kw)


def envelope(t, K_tilde, eps, sep, alpha_p):
    """Tail bound ``exp(t K eps / 2) / (t eps) * sep**(eps - alpha')`` for the coupling time."""
    t = np.asarray(t, dtype=float)
    return np.exp(t * K_tilde * eps / 2.0) / (t * eps) * np.asarray(sep) ** (eps - alpha_p)


# --------------------------------------------------------------------------
# coupled pairs


@dataclass
class PairRecord:
    """Step-by-step record of one pair, kept for the second-pass density check."""

    t: np.ndarray
    X: np.ndarray  # states at step starts and the final node
    Y: np.ndarray
    dW: np.ndarray
    active: np.ndarray  # pair uncoupled during the step
    sep0: float
    hash_x: str = ""
    hash_y: str = ""


@dataclass
class CoupledResult:
    tau: np.ndarray  # inf when not coupled by T
    R: np.ndarray
    log_R: np.ndarray
    X_T: np.ndarray
    Y_T: np.ndarray
    sep0: np.ndarray
    guards: np.ndarray  # steps where the attraction was clamped
    records: list = field(default_factory=list)

    def tail(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        hit = self.tau[:, None] > t[None, :]
        p = hit.mean(axis=0)
        se = np.sqrt(p * (1.0 - p) / len(self.tau))
        return p, se


def _check_pair_model(model):
    if model.large_on:
        raise ValueError("coupled pairs need J = 0; switch the large jumps off")


def _attraction(model, X, Y, sep0, cfg, dt):
    d = X - Y
    dn = model.h_norm(d)
    coef = np.where(dn > 0, sep0 ** cfg.alpha_p / np.maximum(dn, 1e-300) ** cfg.eps, 0.0)
    u = coef[:, None] * d
    # never let one explicit step carry Y past X
    step = dt * coef * dn
    clamp = step > dn
    scale = np.where(clamp, dn / np.maximum(step, 1e-300), 1.0)
    return u * scale[:, None], clamp


def _girsanov_theta(model, t, Y, i, u):
    m = model.diffusion(t, Y, i)
    if np.any((m == 0) & (u != 0)):
        raise ValueError("degenerate diffusion: the coupling drift is not in the range of B")
    return np.where(u != 0, u * np.sqrt(model.h_weights) / np.where(m == 0, 1.0, m), 0.0)


def _pair_chunk(model, ctrl, x, y, i, cfg, seed, sids, keep, hashes):
    B = len(sids)
    n = model.n_modes
    width = model.noise.width
    n_steps = max(1, int(math.ceil(cfg.T / cfg.dt - 1e-9)))
    h = cfg.T / n_steps
    wg = [stream(seed, s, "wiener") for s in sids]
    small = np.zeros((B, n_steps))
    if model.small_on:
        for b, s in enumerate(sids):
            nc = replace(model.noise, seed=int(seed), stream_id=int(s))
            sj = small_jump_increments(nc, 0.0, cfg.T, nc.rng("small_jump"))
            k = np.clip((sj.times / h).astype(int), 0, n_steps - 1)
            small[b] = np.bincount(k, weights=sj.marks, minlength=n_steps)
    comp = model.noise.small_jump.compensator_rate() if model.small_on else 0.0

    X = np.array(x, dtype=float)
    Y = np.array(y, dtype=float)
    reg = np.array(i, dtype=int)
    sep0 = model.h_norm(X - Y)
    tau = np.full(B, np.inf)
    log_R = np.zeros(B)
    guards = np.zeros(B, dtype=int)
    active = sep0 > cfg.cutoff
    tau[~active] = 0.0
    Y[~active] = X[~active]
    if keep:
        tr_X = np.zeros((B, n_steps + 1, n))
        tr_Y = np.zeros((B, n_steps + 1, n))
        tr_W = np.zeros((B, n_steps, width))
        tr_A = np.zeros((B, n_steps), dtype=bool)
        tr_X[:, 0], tr_Y[:, 0] = X, Y
    hx = [hashlib.sha256() for _ in range(B)] if hashes else None
    hy = [hashlib.sha256() for _ in range(B)] if hashes else None
    sq = math.sqrt(h)
    dts = np.full(B, h)
    for k in range(n_steps):
        if k % _BLOCK == 0:
            block = np.stack([g.standard_normal((_BLOCK, width)) for g in wg])
        t = np.full(B, k * h)
        dW = sq * block[:, k % _BLOCK]
        idx = np.nonzero(active)[0]
        u, clamp = _attraction(model, X[idx], Y[idx], sep0[idx], cfg, h)
        guards[idx] += clamp
        theta = _girsanov_theta(model, t[idx], Y[idx], reg[idx], u)
        log_R[idx] += -np.sum(theta * dW[idx, :n], axis=1) - 0.5 * np.sum(theta ** 2, axis=1) * h
        # one batched solve: all X members, then the Y members still uncoupled
        xs = np.concatenate([X, Y[idx]])
        extra = np.concatenate([np.zeros_like(X), u * h])
        rep = np.concatenate([np.arange(B), idx])
        new, ok, res, _ = _advance(model, ctrl, np.concatenate([t, t[idx]]), xs,
                                   reg[rep], dts[rep], dW[rep], small[rep, k], comp, extra)
        if not ok.all():
            raise RuntimeError(f"implicit solve failed in coupled run at t={k * h!r}")
        if hashes:
            fed = dW[rep]
            for b in range(B):
                hx[b].update(fed[b].tobytes())
            # a coupled Y rides on X, so it consumes the row fed to X
            y_rows = dict(zip(idx.tolist(), fed[B:]))
            for b in range(B):
                hy[b].update(y_rows.get(b, fed[b]).tobytes())
        if keep:
            tr_W[:, k] = dW
            tr_A[:, k] = active
        X = new[:B]
        Y_new = X.copy()
        Y_new[idx] = new[B:]
        Y = Y_new
        met = active & (model.h_norm(X - Y) <= cfg.cutoff)
        tau[met] = (k + 1) * h
        active &= ~met
        Y[~active] = X[~active]
        if keep:
            tr_X[:, k + 1], tr_Y[:, k + 1] = X, Y
    records = []
    if keep:
        grid = np.arange(n_steps + 1) * h
        for b in range(B):
            records.append(PairRecord(grid, tr_X[b], tr_Y[b], tr_W[b], tr_A[b], float(sep0[b]),
                                      hx[b].hexdigest() if hashes else "",
                                      hy[b].hexdigest() if hashes else ""))
    return tau, log_R, X, Y, sep0, guards, records


def coupled_ensemble(x, y, i, model, cfg, n_pairs, seed, ctrl=None, keep_records=False,
                     hashes=False, workers=1, chunk_size=256, first_stream=0):
    """Run ``n_pairs`` coupled pairs; ``x``, ``y`` may be single states or one per pair."""
    _check_pair_model(model)
    ctrl = ctrl or StepControl(dt_max=cfg.dt)
    n = model.n_modes
    xs = np.broadcast_to(np.asarray(x, dtype=float), (n_pairs, n))
    ys = np.broadcast_to(np.asarray(y, dtype=float), (n_pairs, n))
    is_ = _as_batch(np.asarray(i, dtype=int), n_pairs)
    sids = first_stream + np.arange(n_pairs)
    bounds = [(a, min(a + chunk_size, n_pairs)) for a in range(0, n_pairs, chunk_size)]

    def job(ab):
        a, b = ab
        return _pair_chunk(model, ctrl, xs[a:b], ys[a:b], is_[a:b], cfg, seed, sids[a:b],
                           keep_records, hashes)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(ab) for ab in bounds]
    cat = lambda j: np.concatenate([p[j] for p in parts])  # noqa: E731
    log_R = cat(1)
    return CoupledResult(tau=cat(0), R=np.exp(log_R), log_R=log_R, X_T=cat(2), Y_T=cat(3),
                         sep0=cat(4), guards=cat(5),
                         records=[r for p in parts for r in p[6]])


def run_coupled_pair(x, y, i, model, cfg, seed, stream_id=0, ctrl=None):
    """Single pair with its full record and noise hashes."""
    res = coupled_ensemble(x, y, i, model, cfg, 1, seed, ctrl=ctrl, keep_records=True,
                           hashes=True, first_stream=stream_id)
    return res.records[0], float(res.tau[0]), float(res.R[0]), float(res.log_R[0])


def recompute_log_R(record, model, i, cfg):
    """Second pass over a stored pair record, vectorised over steps."""
    t = record.t[:-1]
    h = np.diff(record.t)
    X, Y = record.X[:-1], record.Y[:-1]
    sep0 = np.full(len(t), record.sep0)
    u, _ = _attraction(model, X, Y, sep0, cfg, h[0])
    u[~record.active] = 0.0
    reg = np.full(len(t), i)
    theta = _girsanov_theta(model, t, Y, reg, u)
    n = model.n_modes
    return float(np.sum(-np.sum(theta * record.dW[:, :n], axis=1)
                        - 0.5 * np.sum(theta ** 2, axis=1) * h))


# --------------------------------------------------------------------------
# Hoelder probe


@dataclass
class HolderSummary:
    seps: np.ndarray
    coupled: np.ndarray
    coupled_se: np.ndarray
    naive: np.ndarray
    naive_se: np.ndarray
    conclusive: np.ndarray
    slope_coupled: float
    slope_naive: float
    floor: float

    def rows(self):
        return [
            (float(s), float(c), float(cs), float(nv), float(ns), bool(ok))
            for s, c, cs, nv, ns, ok in zip(self.seps, self.coupled, self.coupled_se, self.naive,
                                            self.naive_se, self.conclusive)
        ]


def _slope(seps, diffs, mask):
    if mask.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(seps[mask]), np.log(diffs[mask]), 1)[0])


def holder_probe(model, f, t, pairs, cfg, n_traj, seed, i=1, ctrl=None, workers=1):
    """Estimate ``|P_t f(x) - P_t f(y)|`` per pair and regress on ``|x - y|_H``.

    ``f`` maps a batch of states to reals. The naive estimate differences the two
    marginal ensembles under common random numbers. Points whose coupled
    estimate is within two standard errors of zero are inconclusive and left
    out of the fit.
    """
    cfg = replace(cfg, T=float(t))
    seps, cm, cs, nm, ns = [], [], [], [], []
    pairs = list(pairs)
    for k, (x, y) in enumerate(pairs):
        res = coupled_ensemble(x, y, i, model, cfg, n_traj, seed, ctrl=ctrl, workers=workers,
                               first_stream=k * n_traj)
        fx, fy = f(res.X_T), f(res.Y_T)
        d = fx - res.R * fy
        naive = _naive_difference(model, f, x, y, i, cfg, n_traj, seed, ctrl, k)
        seps.append(float(model.h_norm(np.asarray(x, float) - np.asarray(y, float))))
        cm.append(abs(d.mean()))
        cs.append(d.std(ddof=1) / math.sqrt(n_traj))
        nm.append(abs(naive.mean()))
        ns.append(naive.std(ddof=1) / math.sqrt(n_traj))
    seps, cm, cs, nm, ns = map(np.asarray, (seps, cm, cs, nm, ns))
    ok = cm > 2.0 * cs
    ok_n = nm > 2.0 * ns
    return HolderSummary(seps, cm, cs, nm, ns, ok, _slope(seps, cm, ok), _slope(seps, nm, ok_n),
                         cfg.alpha_p)


def _naive_difference(model, f, x, y, i, cfg, n_traj, seed, ctrl, k):
    from .core import run_ensemble

    ctrl = ctrl or StepControl(dt_max=cfg.dt)
    kw = dict(obs_times=[0.0, cfg.T], first_stream=k * n_traj)
    a = run_ensemble(x, i, cfg.T, model, ctrl, n_traj, seed, **kw)
    b = run_ensemble(y, i, cfg.T, model, ctrl, n_traj, seed, **kw)
    return f(a.states[:, -1]) - f(b.states[:, -1])


# --------------------------------------------------------------------------
# steered control probe


@dataclass(frozen=True)
class ControlProbeConfig:
    target: tuple
    T: float = 1.0
    M: float = 10.0
    R: float = 10.0
    t1: float = 0.5
    eps_reg: float = 1e-3
    level: int = 1
    dt: float = 1e-3
    window_steps: int = 200
    K: float = 0.0
    rho0: float = 0.0

    def __post_init__(self):
        if not (self.T > 0 and self.M > 0 and self.R > 0):
            raise ValueError("T, M and R must be positive")
        if not 0.0 < self.t1 < self.T:
            raise ValueError("t1 must lie in (0, T)")
        if not self.eps_reg > 0:
            raise ValueError("eps_reg must be positive")
        if not self.m > 0:
            raise ValueError(
                f"m = 2M - (K + rho(y0) + 1) T = {self.m:.6g} must be positive; raise M"
            )

    @property
    def m(self):
        return 2.0 * self.M - (self.K + self.rho0 + 1.0) * self.T

    @property
    def gain(self):
        return self.M / (self.T - self.t1)

    @classmethod
    def for_model(cls, model, target, **kw):
        c = model.constants
        y0 = np.asarray(target, dtype=float)
        rho0 = float(c.rho_of(y0)) if c is not None else 0.0
        K = c.K if c is not None else 0.0
        return cls(target=tuple(float(v) for v in y0), K=K, rho0=rho0, **kw)


@dataclass
class SteeredPath:
    t: np.ndarray
    y: np.ndarray  # (B, steps + 1, n)
    lhs: np.ndarray  # |y - y0|_H^2
    bound: np.ndarray  # decay bound along the grid

    def bound_ok(self, slack=0.05):
        return bool(np.all(self.lhs <= (1.0 + slack) * self.bound + 1e-12))


@dataclass
class ControlResult:
    terminal: np.ndarray
    miss: np.ndarray
    success: np.ndarray
    path: SteeredPath

    @property
    def success_rate(self):
        return float(self.success.mean())


def _shifted_model(model, gain, y0, G=None, ref=None):
    """Model with drift ``A(t, x) - gain (x - y0)``, linear part solved implicitly."""
    drift, jac = model.drift, model.drift_jacobian

    def d(t, x, i):
        return drift(t, x, i) - gain * (x - y0)

    def dj(t, x, i):
        j = jac(t, x, i)
        if j.ndim == np.ndim(x):
            return j - gain
        return j - gain * np.eye(j.shape[-1])

    return replace(model, drift=d, drift_jacobian=dj if jac is not None else None)


def steer_path(model, y_start, i, cfg, ctrl):
    """Deterministic steered path on ``[t1, T]`` from ``y_start`` (batched)."""
    y0 = np.asarray(cfg.target, dtype=float)
    sm = _shifted_model(model, cfg.gain, y0)
    B = len(y_start)
    h = (cfg.T - cfg.t1) / cfg.window_steps
    y = np.array(y_start, dtype=float)
    reg = _as_batch(np.asarray(i, dtype=int), B)
    out = np.zeros((B, cfg.window_steps + 1, model.n_modes))
    out[:, 0] = y
    zero = np.zeros((B, model.noise.width))
    dts = np.full(B, h)
    for k in range(cfg.window_steps):
        t = np.full(B, cfg.t1 + k * h)
        # noise-free step: diffusion multiplies a zero increment
        y, ok, _, _ = _advance(replace(sm, small_jump_coef=None), ctrl, t, y, reg, dts, zero,
                               np.zeros(B), 0.0)
        if not ok.all():
            raise RuntimeError("implicit solve failed on the steered path")
        out[:, k + 1] = y
    grid = cfg.t1 + h * np.arange(cfg.window_steps + 1)
    lhs = model.h_norm(out - y0) ** 2
    rate = cfg.m / (cfg.T - cfg.t1)
    a0 = np.array([model.h_norm(model.drift(np.array([s]), y0[None], reg[:1]))[0] ** 2
                   for s in grid])
    # I(t) = int_{t1}^t exp(-rate (t - s)) |A(s, y0)|^2 ds, trapezoid recursion
    forcing = np.zeros(len(grid))
    decay = math.exp(-rate * h)
    for k in range(1, len(grid)):
        forcing[k] = decay * forcing[k - 1] + 0.5 * h * (decay * a0[k - 1] + a0[k])
    start = (cfg.R + model.h_norm(y0)) ** 2
    bound = np.exp(-rate * (grid - cfg.t1)) * start + forcing
    return SteeredPath(grid, out, lhs, np.broadcast_to(bound, lhs.shape).copy())


def control_probe(x, i, model, cfg, seed, n_runs=1, delta=0.1, ctrl=None, noise=True,
                  first_stream=0):
    """Run the controlled equation from ``x`` and report the miss ``|X(T) - y0|_H``.

    ``X`` follows the plain dynamics on ``[0, t1]``; the steered path starts from
    the cut-off state ``X(t1) 1{|X(t1)| <= R}``; on ``[t1, T]`` the feedback
    ``-gain (eps B_n^-1 + I)^-1 (y(t) - y0)`` is added to ``X``.
    """
    if model.large_on:
        raise ValueError("the control probe needs J = 0")
    ctrl = ctrl or StepControl(dt_max=cfg.dt)
    n = model.n_modes
    B = n_runs
    y0 = np.asarray(cfg.target, dtype=float)
    X = np.array(np.broadcast_to(np.asarray(x, dtype=float), (B, n)))
    reg = _as_batch(np.asarray(i, dtype=int), B).copy()
    sids = first_stream + np.arange(B)
    wg = [stream(seed, s, "wiener") for s in sids]
    width = model.noise.width
    comp = model.noise.small_jump.compensator_rate() if model.small_on else 0.0
    n_pre = max(1, int(math.ceil(cfg.t1 / cfg.dt - 1e-9)))
    h_pre = cfg.t1 / n_pre
    h_win = (cfg.T - cfg.t1) / cfg.window_steps
    small_pre, small_win = _bin_small(model, seed, sids, cfg, n_pre, h_pre, h_win)

    def noise_step(h):
        if not noise:
            return np.zeros((B, width))
        return math.sqrt(h) * np.stack([g.standard_normal(width) for g in wg])

    for k in range(n_pre):
        t = np.full(B, k * h_pre)
        X, ok, _, _ = _advance(model, ctrl, t, X, reg, np.full(B, h_pre), noise_step(h_pre),
                               small_pre[:, k] if noise else np.zeros(B), comp)
        if not ok.all():
            raise RuntimeError("implicit solve failed before t1")
    inside = model.h_norm(X) <= cfg.R
    y_start = np.where(inside[:, None], X, 0.0)
    path = steer_path(model, y_start, reg, cfg, ctrl)
    b = np.asarray(model.constants.B_n(cfg.level), dtype=float)
    G = b / (cfg.eps_reg + b)
    for k in range(cfg.window_steps):
        t = np.full(B, cfg.t1 + k * h_win)
        # feedback evaluated at the right node, matching the implicit steered step
        push = -h_win * cfg.gain * G * (path.y[:, k + 1] - y0)
        X, ok, _, _ = _advance(model, ctrl, t, X, reg, np.full(B, h_win), noise_step(h_win),
                               small_win[:, k] if noise else np.zeros(B), comp, push)
        if not ok.all():
            raise RuntimeError("implicit solve failed in the control window")
    miss = model.h_norm(X - y0)
    return ControlResult(X, miss, miss <= delta, path)


def _bin_small(model, seed, sids, cfg, n_pre, h_pre, h_win):
    B = len(sids)
    pre = np.zeros((B, n_pre))
    win = np.zeros((B, cfg.window_steps))
    if not model.small_on:
        return pre, win
    for b, s in enumerate(sids):
        nc = replace(model.noise, seed=int(seed), stream_id=int(s))
        sj = small_jump_increments(nc, 0.0, cfg.T, nc.rng("small_jump"))
        early = sj.times < cfg.t1
        kp = np.clip((sj.times[early] / h_pre).astype(int), 0, n_pre - 1)
        pre[b] = np.bincount(kp, weights=sj.marks[early], minlength=n_pre)
        kw = np.clip(((sj.times[~early] - cfg.t1) / h_win).astype(int), 0, cfg.window_steps - 1)
        win[b] = np.bincount(kw, weights=sj.marks[~early], minlength=cfg.window_steps)
    return pre, win


def miss_sweep(x, i, model, cfg, seed, factors=(1, 2, 4), n_runs=1, **kw):
    """Miss distances for ``M * factor`` under one fixed noise record."""
    out = []
    for f in factors:
        res = control_probe(x, i, model, replace(cfg, M=cfg.M * f), seed, n_runs=n_runs, **kw)
        out.append(res.miss)
    return np.asarray(factors, dtype=float), np.stack(out)
