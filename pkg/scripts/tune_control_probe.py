"""Parameter sweep behind the control-probe fixtures.

OU part: success frequency at delta over a (t1, M, R) grid.
PME part: how often the miss distance decreases over M, 2M, 4M at a fixed
noise record, as a function of the control-window length T - t1.
"""

import argparse
import itertools

import numpy as np

from rsspde.coupling import ControlProbeConfig, control_probe, miss_sweep
from rsspde.models import PorousMediaParams, ou_model, pme_model


def ou_grid(n_runs, delta, seed):
    m = ou_model(2)
    print("OU target 0.3 e1, x0 = 0")
    print(f"{'t1':>8} {'M':>5} {'R':>5} {'success':>8} {'median miss':>12}")
    for t1, M, R in itertools.product([0.99, 0.998, 0.999], [4.0, 8.0], [2.0, 5.0]):
        pc = ControlProbeConfig.for_model(m, [0.3, 0.0], T=1.0, M=M, R=R, t1=t1)
        r = control_probe(np.zeros(2), 1, m, pc, seed, n_runs=n_runs, delta=delta)
        print(f"{t1:>8} {M:>5} {R:>5} {r.success_rate:>8.3f} {np.median(r.miss):>12.4g}")


def pme_monotone(n_seeds):
    pm = pme_model(PorousMediaParams())
    y0 = 0.3 * pm.unit_mode(1)
    print("PME target 0.3 e1, M in {2, 4, 8}")
    for t1 in [0.99, 0.999, 0.9999, 0.99999]:
        pc = ControlProbeConfig.for_model(pm, y0, T=1.0, M=2.0, R=5.0, t1=t1)
        ok = 0
        for seed in range(n_seeds):
            _, miss = miss_sweep(np.zeros(pm.n_modes), 1, pm, pc, seed)
            ok += bool(np.all(np.diff(miss.ravel()) < 0))
        print(f"  t1={t1:<8} monotone in {ok}/{n_seeds} noise records")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--delta", type=float, default=0.1)
    a = ap.parse_args()
    ou_grid(a.runs, a.delta, seed=7)
    pme_monotone(a.seeds)


if __name__ == "__main__":
    main()
