"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line through the ``acceptance`` fixture before
asserting, so a red run still shows which sub-check failed.
"""

import dataclasses
import math
import os

import numpy as np
import pytest
from scipy import stats

from rsspde import cli
from rsspde.checker import check_A1, check_A2, check_Q_and_D, recheck
from rsspde.config import load
from rsspde.core import StepControl, run_ensemble, step_batch
from rsspde.coupling import (
    ControlProbeConfig,
    CouplingConfig,
    control_probe,
    coupled_ensemble,
    envelope,
    holder_probe,
    miss_sweep,
    steer_path,
)
from rsspde.ergodics import (
    LyapunovSpec,
    clipped_gaussian_square_moment,
    ensemble_dynkin,
    ergodic_average_test,
    generator_apply_V,
    generator_sup_profile,
    observable,
    periodicity_test,
    phase_times,
)
from rsspde.models import (
    PorousMediaParams,
    lyapunov_f,
    ou_model,
    pme_diffusion,
    pme_model,
    qmatrix_family_a,
    scalar_linear_model,
)
from rsspde.regime import next_switch, table_rates

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def config(name):
    return load(os.path.join(CONFIGS, name), env={})


# --------------------------------------------------------------------------
# 1. switching


def _frozen_chain(q, x, n_events, rng):
    """Jump chain from ``next_switch`` at a frozen state: counts, occupation, holding times."""
    S = q.num_regimes
    counts = np.zeros((S, S))
    occupation = np.zeros(S)
    holds = [[] for _ in range(S)]
    t, i = 0.0, 1
    path = lambda s: x  # noqa: E731
    for _ in range(n_events):
        sigma, j = next_switch(path, i, q, t, rng)
        occupation[i - 1] += sigma - t
        holds[i - 1].append(sigma - t)
        counts[i - 1, j - 1] += 1
        t, i = sigma, j
    return counts, occupation, [np.asarray(h) for h in holds]


def _chain_checks(q, x, n_events, seed, tag):
    rng = np.random.default_rng(seed)
    counts, occ, holds = _frozen_chain(q, x, n_events, rng)
    S = q.num_regimes
    checks = {}
    worst = 0.0
    for a in range(S):
        row = q.row(x, a + 1)[:S]
        for b in range(S):
            if a == b:
                continue
            exact = row[b]
            est = counts[a, b] / occ[a]
            se = math.sqrt(max(exact, 1e-300) / occ[a])
            z = abs(est - exact) / se if exact > 0 else (0.0 if counts[a, b] == 0 else math.inf)
            worst = max(worst, z)
        total = row.sum()
        # equiprobable bins of the exact exponential holding law
        edges = stats.expon.ppf(np.linspace(0, 1, 11), scale=1.0 / total)
        obs = np.histogram(holds[a], edges)[0]
        p = stats.chisquare(obs).pvalue
        checks[f"{tag} holding chi2 regime {a + 1} (p={p:.3f})"] = p > 0.01
    checks[f"{tag} rates within 3 se (max z={worst:.2f})"] = worst <= 3.0
    return checks, int(counts.sum())


def test_c1_switching(acceptance):
    x = np.array([0.8, -0.3, 0.1])
    two = qmatrix_family_a(m=1, M=1.5, drift_gap=0.5, s_max=2, state_mod=0.5, closed=True)
    five = table_rates([[0, 1.0, 0.5, 0, 0.2],
                        [0.3, 0, 1.2, 0, 0],
                        [0, 0.7, 0, 0.9, 0.1],
                        [0.4, 0, 0, 0, 1.5],
                        [1.0, 0.2, 0, 0.6, 0]])
    c2, n2 = _chain_checks(two, x, 100_000, 1, "2-state")
    c5, n5 = _chain_checks(five, x, 100_000, 2, "5-state")
    checks = {**c2, **c5}
    ok = acceptance(1, "switching correctness", checks, f"events={n2}+{n5}")
    assert ok, checks


# --------------------------------------------------------------------------
# 2. integrator fidelity


def _strong_errors(model, x0, T, levels, fine_level, n_paths, seed):
    ctrl = StepControl(dt_max=1.0)
    rng = np.random.default_rng(seed)
    n_fine = 2 ** fine_level
    h = T / n_fine
    dW = math.sqrt(h) * rng.standard_normal((n_fine, n_paths, model.n_modes))

    def solve(level):
        stride = 2 ** (fine_level - level)
        x = np.broadcast_to(x0, (n_paths, model.n_modes)).copy()
        H = h * stride
        for k in range(0, n_fine, stride):
            x = step_batch(k * h, x, 1, H, dW[k:k + stride].sum(axis=0), model, ctrl)
        return x

    ref = solve(fine_level)
    return np.array([np.mean(model.h_norm(solve(lv) - ref)) for lv in levels])


def test_c2_integrator_fidelity(acceptance):
    m = ou_model(2, decay=[1.0, 2.0], sigma=[1.0, 0.5])
    x0 = np.array([1.0, -0.5])
    res = run_ensemble(x0, 1, 1.0, m, StepControl(dt_max=1e-3), 10_000, seed=21,
                       obs_times=[0.0, 1.0])
    xt = res.states[:, -1]
    p = m.params
    mean_z = np.abs(xt.mean(0) - p.mean(x0, 1.0)) / (xt.std(0, ddof=1) / 100)
    var = p.variance(1.0)
    # sample-variance s.e. from the fourth central moment (Gaussian: sqrt(2) var)
    var_se = np.sqrt(np.var((xt - xt.mean(0)) ** 2, axis=0, ddof=1) / len(xt))
    var_z = np.abs(xt.var(0, ddof=1) - var) / var_se

    levels = [4, 5, 6, 7]
    err = _strong_errors(m, x0, 1.0, levels, 12, 2000, seed=4)
    slope = -np.polyfit(levels, np.log2(err), 1)[0]
    checks = {
        f"mean within 3 se (z={mean_z.max():.2f})": bool(np.all(mean_z <= 3)),
        f"variance within 3 se (z={var_z.max():.2f})": bool(np.all(var_z <= 3)),
        "error shrinks when dt halves": bool(np.all(np.diff(err) < 0)),
        f"strong order {slope:.2f} in [0.4, 1.3]": 0.4 <= slope <= 1.3,
    }
    ok = acceptance(2, "integrator fidelity", checks, f"strong order={slope:.3f}")
    assert ok, checks


# --------------------------------------------------------------------------
# 3. discrete coercivity


def test_c3_discrete_coercivity(acceptance):
    m = pme_model(PorousMediaParams(g1=2.0, kappa_regime=0.1, g_regime=0.2),
                  rates=qmatrix_family_a())
    k = m.constants
    ctrl = StepControl(dt_max=1e-3)
    rng = np.random.default_rng(3)
    n_ic, n_steps, h = 20, 1000, 1e-3
    scale = rng.uniform(0.1, 5.0, n_ic)[:, None]
    x = scale * rng.standard_normal((n_ic, m.n_modes)) / m.params.modes
    regs = rng.integers(1, 10, n_ic)
    zero = np.zeros((n_ic, m.noise.width))
    violations, worst = 0, -math.inf
    for s in range(n_steps):
        y = step_batch(s * h, x, regs, h, zero, m, ctrl)
        lhs = m.h_norm(y) ** 2 - m.h_norm(x) ** 2
        rhs = h * (k.C_sup - k.theta * m.v_norm(y) ** k.alpha + k.c * m.h_norm(y) ** 2)
        gap = lhs - rhs
        violations += int(np.sum(gap > 1e-12 * np.maximum(1.0, np.abs(rhs))))
        worst = max(worst, float(gap.max()))
        x = y
    checks = {f"violations={violations}": violations == 0}
    ok = acceptance(3, "discrete coercivity", checks,
                    f"steps={n_steps}x{n_ic} theta={k.theta:g} alpha={k.alpha:g} max gap={worst:.3g}")
    assert ok, checks


# --------------------------------------------------------------------------
# 4. assumption suite


def test_c4_assumption_suite(acceptance):
    checks = {}
    for name in ("pme_banded_check.toml", "pme_decay_check.toml"):
        cfg = config(name)
        m = cfg.build_model()
        n = cfg.experiment["n_samples"]
        rep = check_A1(m, n).merge(check_A2(m, n))
        rep.merge(check_Q_and_D(m, cfg.lyapunov(), n))
        for cond, r in rep.results.items():
            checks[f"{cfg.rates['preset']} {cond}"] = (r.status in ("pass", "skipped")
                                                      and (r.status == "skipped" or r.margin > 0))

    pme = config("pme_banded_check.toml").build_model()
    c = pme.constants
    inflated = dataclasses.replace(pme, constants=dataclasses.replace(c, theta=50 * c.theta))
    w1 = check_A1(inflated, 2000)["C"]
    w1b = check_A1(inflated, 2000)["C"]
    checks["inflated theta fails C"] = w1.status == "fail" and recheck(inflated, w1.witness) < 0
    checks["inflated theta witness reproducible"] = np.array_equal(w1.witness["v1"],
                                                                   w1b.witness["v1"])

    p = pme.params
    mask = np.ones(p.n_modes)
    mask[2] = 0.0
    masked = dataclasses.replace(pme, diffusion=lambda t, x, i: pme_diffusion(t, x, i, p) * mask)
    w2 = check_A2(masked, 2000)["N[n=1]"]
    checks["masked diffusion fails N"] = (w2.status == "fail" and w2.witness["mode"] == 3
                                          and recheck(masked, w2.witness) < 0)

    q = table_rates([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]])
    split = dataclasses.replace(pme, rate_matrix=q)
    w3 = check_Q_and_D(split, lyapunov_f("square"), 500)["Q1"]
    checks["disconnected rates fail Q1"] = w3.status == "fail" and recheck(split, w3.witness) < 0
    ok = acceptance(4, "assumption suite", checks, f"{len(checks)} checks")
    assert ok, [k for k, v in checks.items() if not v]


# --------------------------------------------------------------------------
# 5. Lyapunov drift


def test_c5_lyapunov_drift(acceptance):
    rng = np.random.default_rng(0)
    a, sigma = 1.7, 0.6
    lin = scalar_linear_model(a, sigma)
    xs = rng.uniform(-5, 5, 200)
    got = generator_apply_V(0.0, xs[:, None], np.ones(200, int), lin,
                            LyapunovSpec(lyapunov_f("constant")))
    closed = np.max(np.abs(got - (-2 * a * xs ** 2 + sigma ** 2)))

    cfg = config("pme_lyapunov.toml")
    m = cfg.build_model()
    e = cfg.experiment
    spec = LyapunovSpec(cfg.lyapunov())
    prof = generator_sup_profile(m, spec, e["levels"], np.random.default_rng(cfg.seed),
                                 e["n_samples"])
    dyn, _ = ensemble_dynkin(m, spec, np.asarray(e["x0"]), e["i0"], e["t_end"],
                             cfg.step_control(), e["n_traj"], cfg.seed,
                             obs_times=np.linspace(0, e["t_end"], e["n_obs"]))
    z = np.abs(dyn.z_scores)
    checks = {
        f"scalar closed form (err={closed:.1e})": closed <= 1e-10,
        "sup AV negative": bool(np.all(prof < 0)),
        "sup AV decreasing": bool(np.all(np.diff(prof) < 0)),
        f"Dynkin within 3 se (max z={z.max():.2f})": dyn.within(3.0),
    }
    ok = acceptance(5, "Lyapunov drift", checks,
                    "sup AV=" + ",".join(f"{v:.4g}" for v in prof))
    assert ok, checks


# --------------------------------------------------------------------------
# 6. periodicity


def test_c6_periodicity(acceptance):
    cfg = config("pme_periodic.toml")
    m = cfg.build_model()
    e = cfg.experiment
    ell = m.period
    phases = [0.0, ell / 4, ell / 2, 3 * ell / 4]
    ks = range(e["k_min"], e["k_max"] + 1)
    times = phase_times(ell, phases, ks)
    res = run_ensemble(np.zeros(m.n_modes), 1, times[-1], m, cfg.step_control(), e["n_traj"],
                       cfg.seed, obs_times=np.concatenate([[0.0], times]))
    rep = periodicity_test(res, m, phases, ks, e["n_perm"], seed=cfg.seed)
    p_same = min(r.p_value for r in rep.same())
    p_cross = max(r.p_value for r in rep.cross())
    checks = {
        f"same-phase p > 0.01 (min {p_same:.3f})": p_same > 0.01,
        f"half-period control p < 0.01 (max {p_cross:.3f})": p_cross < 0.01,
        f"samples per phase {rep.samples_per_phase}": rep.samples_per_phase >= 2000,
    }
    ok = acceptance(6, "periodicity", checks, f"{len(rep.same())} same-phase pairs")
    assert ok, checks


# --------------------------------------------------------------------------
# 7. ergodic averaging


def test_c7_ergodic_averaging(acceptance):
    ou = ou_model(1, decay=[1.0], sigma=[1.0])
    clip = 2.0
    phi = observable("mode_square", clip=clip)
    cur = ergodic_average_test(ou, phi, 0.0, 200, 200, np.zeros(1), 1, StepControl(dt_max=1e-2),
                               seed=31)
    target = clipped_gaussian_square_moment(ou.params.stationary_variance()[0], clip)
    mean, se = cur.at(200)
    z = abs(mean - target) / se

    cfg = config("pme_ergoavg.toml")
    m = cfg.build_model()
    e = cfg.experiment
    i0 = 1 + np.arange(e["n_reps"]) % e["dispersed_regimes"]
    pc = ergodic_average_test(m, observable(e["observable"], regime=1), 0.0, e["n_terms"],
                              e["n_reps"], np.zeros(m.n_modes), i0, cfg.step_control(), cfg.seed)
    ratio = pc.spread_ratio(50, 200)
    checks = {
        f"OU average within 3 se (z={z:.2f})": z <= 3.0,
        f"PME spread ratio {ratio:.3f} < 0.5": ratio < 0.5,
    }
    ok = acceptance(7, "ergodic averaging", checks,
                    f"OU {mean:.4f} vs {target:.4f}; spread ratio={ratio:.3f}")
    assert ok, checks


# --------------------------------------------------------------------------
# 8. coupling


def test_c8_coupling(acceptance):
    ou = ou_model(2)
    cc = CouplingConfig(eps=0.75, alpha=2.0, lam=2.0, T=1.0, dt=1e-3)
    res = coupled_ensemble([0.5, 0.0], [0.0, 0.0], 1, ou, cc, 10_000, seed=2)
    r_se = res.R.std(ddof=1) / 100
    r_z = abs(res.R.mean() - 1.0) / r_se

    cfg = config("pme_couple.toml")
    pm = cfg.build_model()
    e = cfg.experiment
    pc = CouplingConfig.from_model(pm, eps=e["eps"], n_stop=e["n_stop"], T=e["T"], dt=e["dt"])
    x = np.asarray(e["x"])
    tail_t = np.asarray(e["tail_times"])
    K = pm.constants.K_tilde_n(1)
    tails_ok = True
    for k, s in enumerate(e["separations"]):
        r = coupled_ensemble(x, x - s * pm.unit_mode(1), 1, pm, pc, e["n_pairs"], cfg.seed,
                             first_stream=k * e["n_pairs"])
        p, se = r.tail(tail_t)
        env = envelope(tail_t, K, pc.eps, float(r.sep0[0]), pc.alpha_p)
        tails_ok &= bool(np.all(p <= env + 3 * se))

    c0 = 0.2 * ou.unit_mode(1)
    seps = [1.0, 0.3, 0.1, 0.03, 0.01]
    pairs = [(c0 + 0.5 * s * ou.unit_mode(1), c0 - 0.5 * s * ou.unit_mode(1)) for s in seps]
    hs = holder_probe(ou, lambda X: np.clip(X[:, 0], -1.0, 1.0), 1.0, pairs, cc, 4000, seed=3)
    checks = {
        f"E[R_T]=1 within 3 se (z={r_z:.2f})": r_z <= 3.0,
        "PME tails below envelope + 3 se": tails_ok,
        f"Hoelder slope {hs.slope_coupled:.3f} >= 0.8 alpha'": hs.slope_coupled >= 0.8 * hs.floor,
    }
    ok = acceptance(8, "coupling", checks,
                    f"E[R]={res.R.mean():.4f}+-{r_se:.4f}; slope={hs.slope_coupled:.3f} "
                    f"(naive {hs.slope_naive:.3f}, alpha'={hs.floor:.3f})")
    assert ok, checks


# --------------------------------------------------------------------------
# 9. control probe


def test_c9_control_probe(acceptance):
    cfg = config("ou_steer.toml")
    ou = cfg.build_model()
    e = cfg.experiment
    pc = ControlProbeConfig.for_model(ou, e["target"], T=e["T"], M=e["M"], R=e["R"], t1=e["t1"])
    res = control_probe(np.zeros(2), 1, ou, pc, cfg.seed, n_runs=e["n_runs"], delta=e["delta"])

    rng = np.random.default_rng(9)
    starts = rng.normal(scale=1.5, size=(20, 2))
    bound_ok = steer_path(ou, starts, 1, pc, StepControl(dt_max=1e-3)).bound_ok(0.05)

    pm = pme_model(PorousMediaParams())
    y0 = 0.3 * pm.unit_mode(1)
    ppc = ControlProbeConfig.for_model(pm, y0, T=1.0, M=2.0, R=5.0, t1=0.99999)
    pme_bound = steer_path(pm, 0.5 * rng.normal(size=(10, pm.n_modes)), 1, ppc,
                           StepControl(dt_max=1e-3)).bound_ok(0.05)
    monotone = 0
    n_seeds = 5
    for seed in range(n_seeds):
        _, miss = miss_sweep(np.zeros(pm.n_modes), 1, pm, ppc, seed)
        monotone += bool(np.all(np.diff(miss.ravel()) < 0))
    checks = {
        "decay bound (OU)": bound_ok,
        "decay bound (PME)": pme_bound,
        f"OU success {res.success_rate:.3f} >= 0.9": res.success_rate >= 0.9,
        f"PME miss monotone over M, 2M, 4M ({monotone}/{n_seeds})": monotone == n_seeds,
    }
    ok = acceptance(9, "control probe", checks, f"success={res.success_rate:.3f}")
    assert ok, checks


# --------------------------------------------------------------------------
# 10. determinism


def _small(tmp_path, name, raw):
    import tomli_w

    p = tmp_path / name
    p.write_text(tomli_w.dumps(raw))
    return str(p)


def test_c10_determinism(acceptance, tmp_path):
    pme = {"preset": "pme", "n_modes": 4, "jumps": "additive_mode_k"}
    configs = {
        "simulate": {"seed": 4, "model": pme, "rates": {"preset": "banded_a"},
                     "noise": {"small_jump": {}, "large_jump": {"rate": 1.0}},
                     "step": {"dt_max": 1e-2},
                     "experiment": {"kind": "simulate", "n_traj": 20, "t_end": 1.0}},
        "couple": {"seed": 5, "model": {"preset": "ou", "n_modes": 2},
                   "experiment": {"kind": "couple", "x": [0.5, 0.0], "eps": 0.75, "dt": 1e-2,
                                  "n_pairs": 50, "separations": [0.5]}},
        "steer": {"seed": 6, "model": {"preset": "ou", "n_modes": 2},
                  "experiment": {"kind": "steer", "target": [0.3, 0.0], "M": 8.0, "R": 5.0,
                                 "t1": 0.99, "dt": 1e-2, "window_steps": 50, "n_runs": 10}},
    }
    checks = {}
    for name, raw in configs.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        cli.run(_small(tmp_path, f"{name}.toml", {**raw, "workers": 1}), str(a))
        cli.run(_small(tmp_path, f"{name}_w.toml", {**raw, "workers": 3}), str(b))
        csvs = sorted(f for f in os.listdir(a) if f.endswith(".csv"))
        checks[f"{name} CSV byte-identical across reruns and workers"] = all(
            (a / f).read_bytes() == (b / f).read_bytes() for f in csvs)

    m = pme_model(PorousMediaParams(n_modes=4, g1=1.0), rates=qmatrix_family_a())
    kw = dict(x0=np.zeros(4), i0=2, t_end=1.0, model=m, ctrl=StepControl(dt_max=1e-2),
              n_traj=60, seed=8)
    one = run_ensemble(**kw, workers=1).summary(m)
    many = run_ensemble(**kw, workers=4, chunk_size=7).summary(m)
    checks["ensemble reductions worker independent"] = all(
        np.array_equal(one[k], many[k]) for k in one)
    ok = acceptance(10, "determinism and reproducibility", checks, f"{len(configs)} configs")
    assert ok, checks
