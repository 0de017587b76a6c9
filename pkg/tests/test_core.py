import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsspde.core import (
    HybridSample,
    IntegratorFault,
    StepControl,
    StepNoise,
    check_lambda_range,
    path_header,
    run_ensemble,
    run_trajectory,
    step,
    step_batch,
    trajectory_grid,
    write_events_csv,
    write_paths_csv,
)
from rsspde.models import PorousMediaParams, ou_model, pme_model, qmatrix_family_a
from rsspde.noise import LargeJumpConfig
from rsspde.regime import table_rates


@pytest.fixture(scope="module")
def switching_pme():
    return pme_model(PorousMediaParams(n_modes=4, g1=1.0, kappa_regime=0.3),
                     rates=qmatrix_family_a(M=1.0, drift_gap=0.5, s_max=8),
                     jumps="damped_state", large_jump=LargeJumpConfig(rate=1.0))


def test_ou_step_is_implicit_euler():
    m = ou_model(2, decay=[1.0, 3.0], sigma=[0.5, 2.0])
    s = step(HybridSample(0.0, np.array([1.0, -1.0]), 1), 0.1, m, StepControl(),
             StepNoise(np.array([0.2, -0.1])))
    want = (np.array([1.0, -1.0]) + np.array([0.5 * 0.2, 2.0 * -0.1])) / (1 + 0.1 * np.array([1, 3]))
    assert np.allclose(s.state, want, atol=1e-12)
    assert s.t == pytest.approx(0.1) and s.regime == 1


@pytest.mark.parametrize("solver", ["newton", "fixed_point"])
def test_pme_step_solves_implicit_equation(solver):
    m = pme_model(PorousMediaParams(n_modes=6))
    ctrl = StepControl(solver=solver, implicit_max_iters=5000, damping=0.2)
    x = np.array([1.0, 0.5, -0.3, 0.2, 0.0, 0.1])
    y = step(HybridSample(0.0, x, 1), 0.01, m, ctrl, StepNoise(np.zeros(6))).state
    res = y - 0.01 * m.drift(np.array([0.01]), y[None], np.array([1]))[0] - x
    assert m.h_norm(res) < 1e-9


def test_zero_dt_is_identity():
    m = pme_model()
    x = np.linspace(-1, 1, 8)
    s = step(HybridSample(0.0, x, 1), 0.0, m, StepControl(), StepNoise(np.zeros(8)))
    assert np.allclose(s.state, x)


def test_solver_failure_raises_fault():
    m = pme_model()
    ctrl = StepControl(implicit_max_iters=1, taming_fallback=False)
    with pytest.raises(IntegratorFault) as err:
        step(HybridSample(0.0, np.full(8, 30.0), 1), 0.1, m, ctrl, StepNoise(np.zeros(8)))
    assert err.value.residual > 0


def test_taming_fallback_keeps_path_finite():
    m = pme_model()
    ctrl = StepControl(implicit_max_iters=1, taming_fallback=True)
    y = step_batch(0.0, np.full((2, 8), 30.0), 1, 0.1, np.zeros((2, 8)), m, ctrl)
    assert np.all(np.isfinite(y))


def test_grid_contains_jump_and_output_times(switching_pme):
    obs = [0.0, 0.33, 1.0]
    grid = trajectory_grid(switching_pme, StepControl(dt_max=0.05), 1.0, seed=4, stream_id=2,
                           obs_times=obs)
    assert np.all(np.diff(grid) <= 0.05 + 1e-12)
    assert set(obs) <= set(grid.tolist())
    path = run_trajectory(np.zeros(4), 3, 1.0, switching_pme, StepControl(dt_max=0.05), 4, 2,
                          obs_times=obs)
    for ev in path.events:
        assert ev.t in set(grid.tolist())


def test_switch_uses_left_limit(switching_pme):
    res = run_ensemble(np.zeros(4), 3, 2.0, switching_pme, StepControl(dt_max=0.05), 8, seed=1)
    kinds = {e.kind for e in res.events}
    assert "switch" in kinds and "big_jump" in kinds
    for e in res.events:
        if e.kind == "switch":
            assert np.array_equal(e.x_left, e.x_post)  # switching does not move the state


def test_regimes_stay_in_range(switching_pme):
    res = run_ensemble(np.zeros(4), 8, 3.0, switching_pme, StepControl(dt_max=0.05), 32, seed=2,
                       obs_times=np.linspace(0, 3.0, 31))
    assert res.regimes.min() >= 1 and res.regimes.max() <= 8
    # the exit column at s_max = 8 is clamped and counted as truncation
    assert int(res.truncations.sum()) == sum(e.kind == "truncation" for e in res.events)
    assert res.valid == (int(res.truncations.sum()) == 0)


@settings(max_examples=6)
@given(chunk=st.integers(1, 9), workers=st.integers(1, 3))
def test_chunking_and_workers_are_bitwise_neutral(chunk, workers, switching_pme):
    kw = dict(obs_times=[0.0, 0.5, 1.0])
    base = run_ensemble(np.zeros(4), 2, 1.0, switching_pme, StepControl(dt_max=0.05), 10, 9, **kw)
    other = run_ensemble(np.zeros(4), 2, 1.0, switching_pme, StepControl(dt_max=0.05), 10, 9,
                         chunk_size=chunk, workers=workers, **kw)
    assert np.array_equal(base.states, other.states)
    assert np.array_equal(base.regimes, other.regimes)


def test_trajectory_equals_ensemble_member(switching_pme):
    ens = run_ensemble(np.zeros(4), 2, 1.0, switching_pme, StepControl(dt_max=0.05), 5, 9)
    one = run_trajectory(np.zeros(4), 2, 1.0, switching_pme, StepControl(dt_max=0.05), 9, 3)
    assert np.array_equal(one.samples[-1].state, ens.states[3, -1])


def test_accumulator_is_left_riemann_sum():
    m = ou_model(1, decay=[1.0], sigma=[1e-300])
    res = run_ensemble(np.array([1.0]), 1, 1.0, m, StepControl(dt_max=0.1), 1, 0,
                       accumulators={"one": lambda t, x, i: np.ones(len(x))})
    assert res.integrals["one"][0, -1] == pytest.approx(1.0)


def test_input_validation():
    m = ou_model(2)
    with pytest.raises(ValueError):
        run_ensemble(np.zeros(3), 1, 1.0, m, StepControl(), 2, 0)
    with pytest.raises(ValueError):
        run_ensemble(np.zeros(2), 2, 1.0, m, StepControl(), 2, 0)
    with pytest.raises(ValueError):
        run_ensemble(np.zeros(2), 1, 1.0, m, StepControl(), 2, 0, obs_times=[0.5, 0.2])
    with pytest.raises(ValueError):
        StepControl(solver="anderson")


def test_csv_writers():
    m = ou_model(2)
    res = run_ensemble(np.zeros(2), 1, 1.0, m, StepControl(dt_max=0.1), 3, 0,
                       obs_times=[0.0, 0.5, 1.0])
    buf = io.StringIO()
    write_paths_csv(buf, res, m)
    lines = buf.getvalue().splitlines()
    assert lines[0].split(",") == path_header(2)
    assert len(lines) == 1 + 3 * 3
    row = lines[-1].split(",")
    assert float(row[3]) == res.states[2, -1, 0]  # round-trips exactly
    buf = io.StringIO()
    write_events_csv(buf, [])
    assert buf.getvalue().strip() == "trajectory_id,t,kind,detail"


def test_energy_summary():
    m = ou_model(1, decay=[1.0], sigma=[1.0])
    res = run_ensemble(np.zeros(1), 1, 1.0, m, StepControl(dt_max=0.01), 2000, 0)
    s = res.summary(m)
    want = m.params.variance(1.0)[0]
    assert abs(s["energy_mean"][-1] - want) < 4 * s["energy_se"][-1]


@pytest.mark.parametrize("lam,alpha,ok", [(2, 2, True), (3, 4, True), (1, 2, False),
                                          (2, 4.5, False)])
def test_lambda_range(lam, alpha, ok):
    if ok:
        check_lambda_range(lam, alpha)
    else:
        with pytest.raises(ValueError, match="LM2 range"):
            check_lambda_range(lam, alpha)


def test_table_switching_in_ensemble():
    m = ou_model(1, rates=table_rates([[0, 5.0], [5.0, 0]]))
    res = run_ensemble(np.zeros(1), 1, 4.0, m, StepControl(dt_max=0.05), 400, 3,
                       obs_times=np.linspace(0, 4.0, 9))
    # symmetric two-state chain: P(regime 1 at t) = (1 + exp(-10 t)) / 2
    p1 = (res.regimes[:, -1] == 1).mean()
    assert abs(p1 - 0.5) < 4 * math.sqrt(0.25 / 400)
