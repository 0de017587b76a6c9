"""Command-line entry point: ``rsspde <experiment> CONFIG [--out DIR]``."""

import argparse
import csv
import hashlib
import json
import os
import sys
from collections import Counter

import numpy as np

from . import __version__
from .config import EXPERIMENTS, SCHEMA_VERSION, ConfigError, load
from .core import run_ensemble, write_events_csv, write_paths_csv

CSV_SCHEMAS = {
    "paths": 1, "events": 1, "summary": 1, "check": 1, "generator": 1, "dynkin": 1,
    "distances": 1, "curve": 1, "pairs": 1, "tails": 1, "holder": 1, "miss": 1,
    "steered": 1, "sweep": 1,
}


def _fmt(v):
    return format(float(v), ".17g")


class Outputs:
    def __init__(self, root):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        if not os.access(self.root, os.W_OK):
            raise OSError(f"output directory {self.root} is not writable")
        self.files = []

    def open(self, name):
        path = os.path.join(self.root, name)
        self.files.append(name)
        return open(path, "w", newline="", encoding="utf-8")

    def rows(self, name, header, rows):
        with self.open(name) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])

    def digest(self):
        out = {}
        for name in sorted(set(self.files)):
            with open(os.path.join(self.root, name), "rb") as fh:
                out[name] = hashlib.sha256(fh.read()).hexdigest()
        return out


def _state(v, n, what):
    a = np.zeros(n) if v is None else np.asarray(v, dtype=float)
    if a.shape[-1] != n:
        raise ConfigError(f"experiment.{what} needs {n} entries, got {a.shape[-1]}")
    return a


def _obs_times(e, t_end):
    if "obs_times" in e:
        return np.asarray(e["obs_times"], dtype=float)
    return np.linspace(0.0, t_end, int(e.get("n_obs", 11)))


# --------------------------------------------------------------------------
# experiments; each returns (n_faults, n_truncations, events)


def _simulate(cfg, model, ctrl, out):
    e = cfg.experiment
    t_end = float(e.get("t_end", 1.0))
    res = run_ensemble(_state(e.get("x0"), model.n_modes, "x0"), e.get("i0", 1), t_end, model,
                       ctrl, int(e.get("n_traj", 100)), cfg.seed, obs_times=_obs_times(e, t_end),
                       workers=cfg.resolved_workers())
    with out.open("paths.csv") as fh:
        write_paths_csv(fh, res, model)
    with out.open("events.csv") as fh:
        write_events_csv(fh, res.events)
    s = res.summary(model)
    out.rows("summary.csv", ["t", "energy_mean", "energy_se"],
             zip(s["t"], s["energy_mean"], s["energy_se"]))
    return len(res.faults), int(res.truncations.sum()), res.events


def _check(cfg, model, ctrl, out):
    from .checker import check_all

    rep = check_all(model, cfg.lyapunov(), int(cfg.experiment.get("n_samples", 10_000)),
                    seed=cfg.seed)
    with out.open("check.csv") as fh:
        rep.write_csv(fh)
    with out.open("check.txt") as fh:
        fh.write(rep.text() + "\n")
    print(rep.text())
    return 0, 0, []


def _lyapunov(cfg, model, ctrl, out):
    from .ergodics import LyapunovSpec, ensemble_dynkin, generator_sup_profile
    from .streams import stream

    e = cfg.experiment
    spec = LyapunovSpec(cfg.lyapunov(), e.get("lyapunov", "square"))
    levels = [float(v) for v in e.get("levels", [10, 20, 40])]
    prof = generator_sup_profile(model, spec, levels, stream(cfg.seed, 0, "aux"),
                                 int(e.get("n_samples", 2000)))
    out.rows("generator.csv", ["level", "sup_AV"], zip(levels, prof))
    t_end = float(e.get("t_end", 1.0))
    x0 = _state(e.get("x0"), model.n_modes, "x0")
    dyn, res = ensemble_dynkin(model, spec, x0, e.get("i0", 1), t_end, ctrl,
                               int(e.get("n_traj", 200)), cfg.seed,
                               obs_times=_obs_times(e, t_end), workers=cfg.resolved_workers())
    out.rows("dynkin.csv", ["t", "mean", "se", "z"],
             zip(dyn.times, dyn.mean, dyn.se, dyn.z_scores))
    return len(res.faults), int(res.truncations.sum()), res.events


def _periodic(cfg, model, ctrl, out):
    from .ergodics import periodicity_test, phase_times

    e = cfg.experiment
    ell = model.period
    phases = e.get("phases", [0.0, ell / 4, ell / 2, 3 * ell / 4])
    ks = range(int(e.get("k_min", 10)), int(e.get("k_max", 14)) + 1)
    times = phase_times(ell, phases, ks)
    obs = np.concatenate([[0.0], times])
    res = run_ensemble(_state(e.get("x0"), model.n_modes, "x0"), e.get("i0", 1), times[-1],
                       model, ctrl, int(e.get("n_traj", 2000)), cfg.seed, obs_times=obs,
                       workers=cfg.resolved_workers())
    rep = periodicity_test(res, model, phases, ks, int(e.get("n_perm", 999)), seed=cfg.seed,
                           cross=bool(e.get("cross", True)))
    out.rows("distances.csv", ["kind", "phase_a", "k_a", "phase_b", "k_b", "energy", "p_value",
                               "tv"],
             [(r.kind, r.phase_a, r.k_a, r.phase_b, r.k_b, r.energy, r.p_value, r.tv)
              for r in rep.rows])
    with out.open("events.csv") as fh:
        write_events_csv(fh, res.events)
    return len(res.faults), int(res.truncations.sum()), res.events


def _ergoavg(cfg, model, ctrl, out):
    from .ergodics import ergodic_average_test, observable

    e = cfg.experiment
    n_reps = int(e.get("n_reps", 200))
    phi = observable(e.get("observable", "energy"), model, e.get("clip"), int(e.get("mode", 1)),
                     int(e.get("regime", 1)))
    i0 = e.get("i0", 1)
    if "dispersed_regimes" in e:
        i0 = 1 + np.arange(n_reps) % int(e["dispersed_regimes"])
    cur = ergodic_average_test(model, phi, float(e.get("phase", 0.0)),
                               int(e.get("n_terms", 200)), n_reps,
                               _state(e.get("x0"), model.n_modes, "x0"), i0, ctrl, cfg.seed,
                               burn_in=int(e.get("burn_in", 0)),
                               workers=cfg.resolved_workers())
    out.rows("curve.csv", ["n", "mean", "spread"], zip(cur.n, cur.mean, cur.spread))
    return 0, 0, []


def _couple(cfg, model, ctrl, out):
    from .coupling import CouplingConfig, coupled_ensemble, envelope, holder_probe

    e = cfg.experiment
    cc = CouplingConfig.from_model(model, eps=e.get("eps"), n_stop=int(e.get("n_stop", 1000)),
                                   T=float(e.get("T", 1.0)), dt=float(e.get("dt", 1e-3)))
    n = model.n_modes
    x = _state(e.get("x"), n, "x")
    i = int(e.get("i", 1))
    n_pairs = int(e.get("n_pairs", 1000))
    direction = model.unit_mode(1)
    if "y" in e:
        ys = [_state(e["y"], n, "y")]
    else:
        ys = [x - float(s) * direction for s in e.get("separations", [0.5, 0.25, 0.125])]
    tail_t = np.asarray(e.get("tail_times", [0.25, 0.5, 1.0]), dtype=float)
    K = model.constants.K_tilde_n(1)
    pair_rows, tail_rows = [], []
    for k, y in enumerate(ys):
        res = coupled_ensemble(x, y, i, model, cc, n_pairs, cfg.seed, ctrl=ctrl,
                               workers=cfg.resolved_workers(), first_stream=k * n_pairs)
        for j in range(n_pairs):
            pair_rows.append((k * n_pairs + j, float(res.sep0[j]), float(res.tau[j]),
                              float(res.R[j]), float(res.log_R[j])))
        p, se = res.tail(tail_t)
        env = envelope(tail_t, K, cc.eps, float(res.sep0[0]), cc.alpha_p)
        tail_rows += [(float(res.sep0[0]), t, a, b, c) for t, a, b, c in zip(tail_t, p, se, env)]
    out.rows("pairs.csv", ["pair_id", "separation", "tau", "R_T", "log_R_T"], pair_rows)
    out.rows("tails.csv", ["separation", "t", "p_tail", "se", "envelope"], tail_rows)
    if "holder_t" in e:
        c = float(e.get("holder_clip", 1.0))
        f = lambda X: np.clip(X[:, 0], -c, c)  # noqa: E731
        pairs = [(x, y) for y in ys]
        hs = holder_probe(model, f, float(e["holder_t"]), pairs, cc, n_pairs, cfg.seed, i=i,
                          ctrl=ctrl, workers=cfg.resolved_workers())
        out.rows("holder.csv", ["separation", "coupled", "coupled_se", "naive", "naive_se",
                                "conclusive"], hs.rows())
        print(f"holder slope coupled={hs.slope_coupled:.4f} naive={hs.slope_naive:.4f} "
              f"floor={hs.floor:.4f}")
    return 0, 0, []


def _steer(cfg, model, ctrl, out):
    from dataclasses import replace

    from .coupling import ControlProbeConfig, control_probe

    e = cfg.experiment
    n = model.n_modes
    keys = ("T", "M", "R", "t1", "eps_reg", "level", "dt", "window_steps")
    pc = ControlProbeConfig.for_model(model, _state(e.get("target"), n, "target"),
                                      **{k: e[k] for k in keys if k in e})
    x0 = _state(e.get("x0"), n, "x0")
    delta = float(e.get("delta", 0.1))
    res = control_probe(x0, e.get("i0", 1), model, pc, cfg.seed, n_runs=int(e.get("n_runs", 200)),
                        delta=delta, ctrl=ctrl)
    out.rows("miss.csv", ["run", "miss", "success"],
             [(j, float(m), int(s)) for j, (m, s) in enumerate(zip(res.miss, res.success))])
    out.rows("steered.csv", ["t", "dist_sq", "bound"],
             zip(res.path.t, res.path.lhs[0], res.path.bound[0]))
    rows = []
    for f in e.get("sweep", [1, 2, 4]):
        r = control_probe(x0, e.get("i0", 1), model, replace(pc, M=pc.M * f), cfg.seed, n_runs=1,
                          delta=delta, ctrl=ctrl)
        rows.append((f, pc.M * f, float(r.miss[0])))
    out.rows("sweep.csv", ["factor", "M", "miss"], rows)
    print(f"success rate {res.success_rate:.3f} at delta={delta}; "
          f"decay bound {'ok' if res.path.bound_ok() else 'VIOLATED'}")
    return 0, 0, []


RUNNERS = {
    "simulate": _simulate, "check": _check, "lyapunov": _lyapunov, "periodic": _periodic,
    "ergoavg": _ergoavg, "couple": _couple, "steer": _steer,
}


def run(path, out_dir=None, kind=None, env=None):
    """Execute one config. Returns ``(exit_status, output_directory)``."""
    cfg = load(path, env)
    if kind is not None and kind != cfg.kind:
        raise ConfigError(f"subcommand {kind!r} does not match experiment.kind={cfg.kind!r}")
    out = Outputs(out_dir or cfg.output_dir)
    model = cfg.build_model()
    ctrl = cfg.step_control()
    with out.open("config.resolved.toml") as fh:
        fh.write(cfg.dumps())
    faults, truncs, events = RUNNERS[cfg.kind](cfg, model, ctrl, out)
    kinds = Counter(ev.kind for ev in events)
    summary = {"faults": faults, "truncations": truncs, "events": dict(sorted(kinds.items()))}
    with out.open("events_summary.json") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    digests = out.digest()
    manifest = {
        "version": __version__, "seed": cfg.seed, "experiment": cfg.kind,
        "config_schema": SCHEMA_VERSION, "csv_schemas": CSV_SCHEMAS,
        "workers": cfg.resolved_workers(), "files": digests,
    }
    with open(os.path.join(out.root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    status = 1 if (faults or truncs) else 0
    print(f"{cfg.kind}: faults={faults} truncations={truncs} events={dict(kinds)} -> {out.root}")
    return status, out.root


def main(argv=None):
    ap = argparse.ArgumentParser(prog="rsspde", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("run",) + EXPERIMENTS:
        p = sub.add_parser(name, help="run any config" if name == "run" else f"{name} experiment")
        p.add_argument("config")
        p.add_argument("--out", help="output directory (default: output_dir from the config)")
    args = ap.parse_args(argv)
    try:
        status, _ = run(args.config, args.out, None if args.cmd == "run" else args.cmd)
    except (ConfigError, OSError) as exc:
        print(f"rsspde: error: {exc}", file=sys.stderr)
        return 2
    return status


if __name__ == "__main__":
    sys.exit(main())
