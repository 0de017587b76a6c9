"""Randomised falsification of the standing assumptions on a ModelSpec.

Nothing here proves a universally quantified inequality. Every condition is
evaluated on a finite sample from a stated region; a pass means "no violation
found", and every fail carries a witness that re-evaluates to the violation.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.sparse import csgraph

from .core import check_lambda_range, small_moment2
from .streams import stream

REL_TOL = 1e-9
D_CAP = 1e12


@dataclass
class ConditionResult:
    name: str
    status: str  # pass | fail | skipped
    n_samples: int
    margin: float
    witness: dict | None = None
    region: str = ""
    note: str = ""

    @property
    def ok(self):
        return self.status == "pass"


@dataclass
class CheckReport:
    model_name: str
    seed: int
    results: dict = field(default_factory=dict)

    def add(self, res):
        self.results[res.name] = res
        return res

    def __getitem__(self, name):
        return self.results[name]

    @property
    def passed(self):
        return all(r.status != "fail" for r in self.results.values())

    def failures(self):
        return [r for r in self.results.values() if r.status == "fail"]

    def merge(self, other):
        for r in other.results.values():
            self.add(r)
        return self

    def text(self):
        lines = [f"model {self.model_name} (seed {self.seed})"]
        for r in self.results.values():
            msg = f"  {r.name:<10} {r.status:<7} n={r.n_samples:<6} margin={r.margin:.4g}"
            if r.region:
                msg += f"  [{r.region}]"
            if r.status == "fail":
                msg += f"  witness={_short(r.witness)}"
            elif r.status == "pass" and r.n_samples:
                msg += "  (no violation found)"
            if r.note:
                msg += f"  {r.note}"
            lines.append(msg)
        return "\n".join(lines)

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "status", "n_samples", "margin", "region"])
        for r in self.results.values():
            w.writerow([r.name, r.status, r.n_samples, format(r.margin, ".17g"), r.region])


def _short(w):
    if not w:
        return "-"
    keys = [k for k in ("t", "i", "n", "j", "mode", "pair", "lhs", "rhs") if k in w]
    return "{" + ", ".join(f"{k}={w[k]!r}" for k in keys) + "}"


# --------------------------------------------------------------------------
# sampling


def sample_states(model, rng, n, radius, shell=False):
    """States with ``|v|_H <= radius``; log-uniform radii, random directions."""
    d = model.n_modes
    y = rng.standard_normal((n, d)) * np.exp(rng.normal(0.0, 1.0, (n, d)))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    if shell:
        rad = np.full(n, radius)
    else:
        rad = radius * 10.0 ** (-3.0 * rng.random(n))
        rad[: max(1, n // 10)] = radius
    return y * rad[:, None] * model.noise_scale


def _sample_pairs(model, rng, n, radius):
    v1 = sample_states(model, rng, n, radius)
    v2 = sample_states(model, rng, n, radius)
    q = n // 4
    # near-diagonal pairs and antipodal pairs sit at the sharp ends of monotonicity
    v2[:q] = v1[:q] + sample_states(model, rng, q, radius * 1e-3)
    v2[q: 2 * q] = -v1[q: 2 * q]
    scale = np.minimum(1.0, radius / np.maximum(model.h_norm(v2), 1e-300))
    return v1, v2 * scale[:, None]


def _sample_ti(model, rng, n):
    t = model.period * rng.random(n)
    i = rng.integers(1, model.rate_matrix.num_regimes + 1, size=n)
    return t, i


# --------------------------------------------------------------------------
# condition evaluators: each returns (lhs, rhs) arrays with violation iff lhs > rhs


def _h_dir_sq_diff(model, t, v1, v2, i):
    if not model.small_on:
        return np.zeros(len(v1))
    h1 = model.small_jump_coef.direction(t, v1, i)
    h2 = model.small_jump_coef.direction(t, v2, i)
    dh = h1 - h2
    return model.h_inner(dh, dh) * small_moment2(model)


def _monotone_lhs(model, t, v1, v2, i):
    dv = v1 - v2
    da = model.drift(t, v1, i) - model.drift(t, v2, i)
    db = model.diffusion(t, v1, i) - model.diffusion(t, v2, i)
    return 2.0 * model.h_inner(da, dv) + np.sum(db * db, axis=-1) + _h_dir_sq_diff(model, t, v1, v2, i)


def cond_LM1(model, t, v1, v2, i, n=None):
    k = model.constants
    dv = v1 - v2
    return _monotone_lhs(model, t, v1, v2, i), (k.K + k.rho_of(v2)) * model.h_inner(dv, dv)


def cond_C(model, t, v1, v2, i, n=None):
    k = model.constants
    v = v1
    lhs = (2.0 * model.h_inner(model.drift(t, v, i), v) + model.trace_BB(t, v, i)
           + model.small_jump_sq_integral(t, v, i))
    rhs = k.C_sup - k.theta * model.v_norm(v) ** k.alpha + k.c * model.h_norm(v) ** 2
    return lhs, rhs


def cond_G1(model, t, v1, v2, i, n=None):
    k = model.constants
    v = v1
    a = model.drift(t, v, i)
    lhs = model.v_dual_norm(v, a) ** (k.alpha / (k.alpha - 1.0))
    rhs = (k.C_sup + k.c * model.v_norm(v) ** k.alpha) * (1.0 + model.h_norm(v) ** k.beta)
    return lhs, rhs


def cond_G2(model, t, v1, v2, i, n=None):
    k = model.constants
    v = v1
    lhs = model.trace_BB(t, v, i) + model.small_jump_sq_integral(t, v, i)
    rhs = k.C_sup + k.gamma_growth * model.v_norm(v) ** k.alpha + k.c * model.h_norm(v) ** 2
    return lhs, rhs


def cond_Gbeta(model, t, v1, v2, i, n=None):
    k = model.constants
    v = v1
    p = k.beta + 2.0
    if model.small_on:
        h = model.small_jump_coef.direction(t, v, i)
        lhs = model.h_norm(h) ** p * model.noise.small_jump.integrate(lambda z: abs(z) ** p)
    else:
        lhs = np.zeros(len(v))
    rhs = k.C_sup ** (p / 2.0) + k.c * model.h_norm(v) ** p
    return lhs, rhs


def cond_Grho(model, t, v1, v2, i, n=None):
    k = model.constants
    v = v1
    lhs = k.rho_of(v)
    rhs = k.c * (1.0 + model.v_norm(v) ** k.alpha) * (1.0 + model.h_norm(v) ** k.beta)
    return lhs, rhs


def cond_LipB(model, t, v1, v2, i, n=1):
    k = model.constants
    db = model.diffusion(t, v1, i) - model.diffusion(t, v2, i)
    return np.sqrt(np.sum(db * db, axis=-1)), k.C_lip_n(n) * model.h_norm(v1 - v2)


def cond_N(model, t, v1, v2, i, n=1):
    # diagonal operators: B B* >= B_n^2 iff every multiplier dominates
    m = np.abs(model.diffusion(t, v1, i))
    bn = np.broadcast_to(model.constants.B_n(n), m.shape)
    gap = m - bn
    worst = np.argmin(gap, axis=-1)
    rows = np.arange(len(m))
    return bn[rows, worst], m[rows, worst]


def cond_LM2(model, t, v1, v2, i, n=1):
    k = model.constants
    dv = v1 - v2
    bn = np.broadcast_to(k.B_n(n), dv.shape)
    binv = model.h_norm(dv / bn)
    hn = model.h_norm(dv)
    lam = k.lam_exp
    with np.errstate(divide="ignore", invalid="ignore"):
        core = np.where(hn > 0, binv ** lam * hn ** (k.alpha - lam), 0.0)
    rhs = -k.delta_n(n) * core + k.K_tilde_n(n) * hn ** 2
    return _monotone_lhs(model, t, v1, v2, i), rhs


CONDITIONS = {
    "LM1": cond_LM1, "C": cond_C, "G1": cond_G1, "G2": cond_G2, "Gbeta": cond_Gbeta,
    "Grho": cond_Grho, "LipB": cond_LipB, "N": cond_N, "LM2": cond_LM2,
}


def _tolerance(lhs, rhs):
    return REL_TOL * (1.0 + np.abs(lhs) + np.abs(rhs))


def _evaluate(report, name, model, t, v1, v2, i, n=None, region=""):
    lhs, rhs = CONDITIONS[name](model, t, v1, v2, i, n)
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
    margin = rhs - lhs
    bad = ~np.isfinite(margin) | (margin < -_tolerance(lhs, rhs))
    label = name if n is None else f"{name}[n={n}]"
    k = int(np.argmin(np.where(np.isfinite(margin), margin, -np.inf)))
    witness = None
    if bad.any():
        k = int(np.nonzero(bad)[0][np.argmin(margin[bad])]) if np.isfinite(margin[bad]).any() \
            else int(np.nonzero(bad)[0][0])
        witness = dict(condition=name, t=float(t[k]), v1=v1[k].copy(), v2=v2[k].copy(),
                       i=int(i[k]), n=n, z=None, lhs=float(lhs[k]), rhs=float(rhs[k]))
        if name == "N":
            gap = np.abs(model.diffusion(t[k:k + 1], v1[k:k + 1], i[k:k + 1]))[0] \
                - np.broadcast_to(model.constants.B_n(n), (model.n_modes,))
            witness["mode"] = int(np.argmin(gap)) + 1
    return report.add(ConditionResult(
        label, "fail" if bad.any() else "pass", len(lhs), float(margin[k]), witness, region))


def recheck(model, witness):
    """Re-evaluate a stored witness; returns the margin ``rhs - lhs`` (negative = violation)."""
    name = witness["condition"]
    if name in CONDITIONS:
        t = np.array([witness["t"]])
        i = np.array([witness["i"]])
        lhs, rhs = CONDITIONS[name](model, t, witness["v1"][None], witness["v2"][None], i,
                                    witness.get("n"))
        return float(np.asarray(rhs)[0] - np.asarray(lhs)[0])
    if name == "Q1":
        a, b = witness["pair"]
        adj = _adjacency(model.rate_matrix, witness["x"])
        reach = csgraph.breadth_first_order(adj, a - 1, directed=True, return_predecessors=False)
        return 0.0 if (b - 1) in reach else -1.0
    if name == "Q0":
        row = model.rate_matrix.row(witness["x"], witness["i"])
        return float(model.rate_matrix.bound_L - row.sum())
    raise KeyError(f"no re-evaluation for {name!r}")


# --------------------------------------------------------------------------
# public checks


def check_A1(model, n_samples=10_000, radius=10.0, seed=0):
    if model.constants is None:
        raise ValueError("model declares no assumption constants")
    rng = stream(seed, 0, "aux")
    rep = CheckReport(model.name, seed)
    t, i = _sample_ti(model, rng, n_samples)
    v1, v2 = _sample_pairs(model, rng, n_samples, radius)
    region = f"|v|_H <= {radius}"
    for name in ("LM1", "C", "G1", "G2", "Gbeta", "Grho"):
        _evaluate(rep, name, model, t, v1, v2, i, region=region)
    rep.add(_check_gamma_range(model))
    rep.add(_check_hemicontinuity(model, rng, min(n_samples, 200), radius))
    return rep


def _check_gamma_range(model):
    k = model.constants
    ok = k.alpha > 1 and k.beta >= 0 and k.theta > 0 and k.c > 0
    ok = ok and (k.beta == 0 or k.gamma_growth < k.theta / (2.0 * k.beta))
    margin = 1.0 if k.beta == 0 else k.theta / (2.0 * k.beta) - k.gamma_growth
    return ConditionResult("A1consts", "pass" if ok else "fail", 0, float(margin),
                           None if ok else {"condition": "A1consts"})


def _check_hemicontinuity(model, rng, n, radius):
    """Adjacent differences of s -> <A(t, v1 + s v2, i), v> must shrink under refinement."""
    t, i = _sample_ti(model, rng, n)
    v1 = sample_states(model, rng, n, radius)
    v2 = sample_states(model, rng, n, radius)
    v = sample_states(model, rng, n, radius)
    spread = []
    for m in (16, 32, 64):
        s = np.linspace(-1.0, 1.0, m + 1)
        vals = np.stack([model.h_inner(model.drift(t, v1 + sk * v2, i), v) for sk in s], axis=1)
        spread.append(np.max(np.abs(np.diff(vals, axis=1)), axis=1))
    ratio = np.where(spread[0] > 0, spread[2] / np.where(spread[0] > 0, spread[0], 1.0), 0.0)
    margin = 0.75 - ratio
    bad = margin < 0
    w = None
    if bad.any():
        k = int(np.argmin(margin))
        w = dict(condition="HC", t=float(t[k]), v1=v1[k].copy(), v2=v2[k].copy(), i=int(i[k]))
    return ConditionResult("HC", "fail" if bad.any() else "pass", n, float(margin.min()), w,
                           "s in [-1, 1], 16/32/64 cells")


def check_A2(model, n_samples=10_000, n_levels=4, seed=0):
    k = model.constants
    if k is None:
        raise ValueError("model declares no assumption constants")
    check_lambda_range(k.lam_exp, k.alpha)
    if k.alpha < 2:
        raise ValueError("the strong Feller assumptions need alpha >= 2")
    rng = stream(seed, 1, "aux")
    rep = CheckReport(model.name, seed)
    per = max(1, n_samples // n_levels)
    for n in range(1, n_levels + 1):
        t, i = _sample_ti(model, rng, per)
        v1, v2 = _sample_pairs(model, rng, per, float(n))
        region = f"|v|_H <= {n}"
        _evaluate(rep, "LipB", model, t, v1, v2, i, n=n, region=region)
        _evaluate(rep, "N", model, t, v1, v2, i, n=n, region=region)
        if n >= k.n0:
            _evaluate(rep, "LM2", model, t, v1, v2, i, n=n, region=region)
    return rep


def _adjacency(q, x):
    s = q.num_regimes
    regs = np.arange(1, s + 1)
    rows = q.row(np.broadcast_to(x, (s,) + np.shape(x)), regs)[:, :s]
    return (rows > 0).astype(np.int8)


def _unreachable_pair(adj):
    s = adj.shape[0]
    for a in range(s):
        reach = set(csgraph.breadth_first_order(adj, a, directed=True,
                                                return_predecessors=False).tolist())
        if len(reach) < s:
            b = next(j for j in range(s) if j not in reach)
            return a + 1, b + 1
    return None


def _q_drift(q, x, regs, f):
    """``sum_{j != i} [f(j) - f(i)] q_ij(x)``; the exit column counts as ``S_max + 1``."""
    rows = q.row(np.broadcast_to(x, (len(regs),) + np.shape(x)), regs)
    fj = f(np.arange(1, q.num_regimes + 2))
    return np.sum(rows * (fj[None, :] - f(regs)[:, None]), axis=1)


def check_Q_and_D(model, f, n_samples=10_000, seed=0, radius=10.0, varpi=3.0,
                  trend_regimes=(10, 20, 30, 40, 50, 60), levels=(2.0, 4.0, 8.0)):
    q = model.rate_matrix
    rng = stream(seed, 2, "aux")
    rep = CheckReport(model.name, seed)
    s = q.num_regimes
    regs = np.arange(1, s + 1)
    n_x = max(1, n_samples // s)
    xs = sample_states(model, rng, n_x, radius)

    # Q0
    worst, wit = -math.inf, None
    for x in xs:
        rows = q.row(np.broadcast_to(x, (s, model.n_modes)), regs)
        sums = rows.sum(axis=1)
        if sums.max() > worst:
            worst = float(sums.max())
            wit = dict(condition="Q0", x=x.copy(), i=int(np.argmax(sums)) + 1, lhs=worst, rhs=q.bound_L)
    margin = q.bound_L - worst
    bad = margin < -REL_TOL * (1.0 + q.bound_L)
    rep.add(ConditionResult("Q0", "fail" if bad else "pass", n_x * s, margin, wit if bad else None,
                            f"|x|_H <= {radius}, i <= {s}"))

    # Q1, on a subsample of states
    n_graph = min(n_x, 20)
    fail = None
    for x in xs[:n_graph]:
        adj = _adjacency(q, x)
        n_comp, _ = csgraph.connected_components(adj, directed=True, connection="strong")
        if n_comp > 1:
            fail = dict(condition="Q1", x=x.copy(), pair=_unreachable_pair(adj))
            break
    # binary condition: margin +1 / -1
    rep.add(ConditionResult("Q1", "fail" if fail else "pass", n_graph, 1.0 if fail is None else -1.0,
                            fail, f"strong connectivity on 1..{s}",
                            note="" if fail is None else f"unreachable pair {fail['pair']}"))

    # Q2: f increasing, bounded-above drift, drift trending to -infinity
    fv = f(np.arange(1, s + 2))
    inc = float(np.min(np.diff(fv)))
    rep.add(ConditionResult("Q2f", "pass" if inc > 0 else "fail", s + 1, inc,
                            None if inc > 0 else {"condition": "Q2f"}, "f increasing on 1..S_max+1"))
    drift = np.stack([_q_drift(q, x, regs, f) for x in xs])  # (n_x, s)
    sup_all = float(drift.max())
    ok_sup = bool(np.isfinite(sup_all) and sup_all < D_CAP)
    rep.add(ConditionResult("Q2sup", "pass" if ok_sup else "fail", drift.size, D_CAP - sup_all,
                            None if ok_sup else dict(condition="Q2sup", lhs=sup_all),
                            "sup over sampled x and all i", note=f"sup={sup_all:.4g}"))
    ii = [r for r in trend_regimes if r <= s]
    if len(ii) < 2:
        rep.add(ConditionResult("Q2lim", "skipped", 0, math.nan, None,
                                f"{s} regimes, below the trend range",
                                note="vacuous on a small finite state space"))
    else:
        _trend(rep, drift, ii, n_x)

    rep.add(_check_D(model, varpi))
    rep.add(_check_jump_dissipativity(model, rng, levels, max(100, n_samples // len(levels))))
    return rep


def _trend(rep, drift, ii, n_x):
    sup_i = drift.max(axis=0)[np.asarray(ii) - 1]
    steps = -np.diff(sup_i)
    tmargin = float(min(steps.min(), -sup_i[-1])) if len(ii) > 1 else -math.inf
    rep.add(ConditionResult("Q2lim", "pass" if tmargin > 0 else "fail", len(ii) * n_x, tmargin,
                            None if tmargin > 0 else dict(condition="Q2lim", regimes=ii,
                                                          sup=sup_i.tolist()),
                            f"sup_x drift decreasing over i in {ii}",
                            note="sup=" + ",".join(f"{v:.3g}" for v in sup_i)))


def smooth_states(model, n=5, scale=1.0):
    j = np.arange(1, model.n_modes + 1, dtype=float)
    return np.stack([scale * (k + 1) * (-1.0) ** (j * k) * j ** -2.0 for k in range(n)])


def _check_D(model, varpi):
    """Finite one-period integrals of ``|A(t, v, i)|_H^varpi`` on smooth states."""
    if not varpi > 2:
        raise ValueError("varpi must exceed 2")
    ts = np.linspace(0.0, model.period, 65)
    worst = 0.0
    regs = range(1, min(model.rate_matrix.num_regimes, 5) + 1)
    for v in smooth_states(model):
        for i in regs:
            a = model.drift(ts, np.broadcast_to(v, (len(ts), model.n_modes)), np.full(len(ts), i))
            val = integrate.trapezoid(model.h_norm(a) ** varpi, ts)
            worst = max(worst, float(val))
    ok = np.isfinite(worst) and worst < D_CAP
    return ConditionResult("D", "pass" if ok else "fail", 65, D_CAP - worst,
                           None if ok else {"condition": "D", "lhs": worst},
                           f"smooth states, varpi={varpi}",
                           note="finite-integral part only; closure is not sampled")


def _check_jump_dissipativity(model, rng, levels, n):
    """Bracket of the large-jump dissipativity limit, sampled on ``n <= |v|_V <= 2n``."""
    k = model.constants
    sups = []
    for lvl in levels:
        v = sample_states(model, rng, n, 1.0, shell=True)
        target = lvl * (1.0 + rng.random(n))
        v = v * (target / model.v_norm(v))[:, None]
        t, i = _sample_ti(model, rng, n)
        expr = (-k.theta * model.v_norm(v) ** k.alpha + k.c * model.h_norm(v) ** 2
                + model.large_jump_integral(t, v, i))
        sups.append(float(expr.max()))
    sups = np.asarray(sups)
    margin = float(min((-np.diff(sups)).min(), -sups[-1]))
    ok = margin > 0
    return ConditionResult("Jdiss", "pass" if ok else "fail", n * len(levels), margin,
                           None if ok else dict(condition="Jdiss", levels=list(levels), sup=sups.tolist()),
                           f"n <= |v|_V <= 2n, n in {list(levels)}",
                           note="sup=" + ",".join(f"{v:.3g}" for v in sups))


def check_periodicity(model, n_samples=200, seed=0, radius=5.0, rtol=1e-10):
    """Coefficients agree at ``t`` and ``t + period`` on a random probe set."""
    rng = stream(seed, 3, "aux")
    t, i = _sample_ti(model, rng, n_samples)
    t = t + model.period * rng.integers(0, 5, n_samples)
    v = sample_states(model, rng, n_samples, radius)
    z = rng.uniform(-1.0, 1.0, n_samples)
    zb = rng.uniform(1.0, 3.0, n_samples)
    fns = [model.drift, model.diffusion]
    if model.small_jump_coef is not None:
        fns.append(lambda t_, x, i_: model.small_jump_coef(t_, x, i_, z))
    if model.large_jump_coef is not None:
        fns.append(lambda t_, x, i_: model.large_jump_coef(t_, x, i_, zb))
    worst = 0.0
    for fn in fns:
        a, b = fn(t, v, i), fn(t + model.period, v, i)
        err = np.max(np.abs(a - b) / (1.0 + np.abs(a)))
        worst = max(worst, float(err))
    ok = worst <= rtol
    return ConditionResult("period", "pass" if ok else "fail", n_samples, rtol - worst,
                           None if ok else {"condition": "period", "lhs": worst},
                           f"t in [0, 5 periods], |v|_H <= {radius}")


def check_all(model, f, n_samples=10_000, seed=0):
    rep = check_A1(model, n_samples, seed=seed)
    rep.merge(check_A2(model, n_samples, seed=seed))
    rep.merge(check_Q_and_D(model, f, n_samples, seed=seed))
    rep.add(check_periodicity(model, seed=seed))
    return rep


def calibrate_cr(p, n_samples=20_000, seed=0):
    """Empirical infimum of ``<Psi(u1) - Psi(u2), u1 - u2> / |u1 - u2|_V^{r+1}`` on grid functions."""
    from .models import _psi, pme_v_norm, to_grid

    rng = stream(seed, 4, "aux")
    x1 = rng.standard_normal((n_samples, p.n_modes)) * np.exp(rng.normal(0, 1, (n_samples, 1)))
    x2 = rng.standard_normal((n_samples, p.n_modes)) * np.exp(rng.normal(0, 1, (n_samples, 1)))
    N = p.grid_size
    u1, u2 = to_grid(x1, N), to_grid(x2, N)
    num = np.sum((_psi(u1, p.r_pme) - _psi(u2, p.r_pme)) * (u1 - u2), axis=-1) / (N + 1)
    den = pme_v_norm(x1 - x2, p) ** (p.r_pme + 1.0)
    return float(np.min(num / den))
