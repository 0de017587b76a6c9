import dataclasses

import numpy as np
import pytest

from rsspde.checker import (
    calibrate_cr,
    check_A1,
    check_A2,
    check_periodicity,
    check_Q_and_D,
    recheck,
    sample_states,
)
from rsspde.models import (
    PorousMediaParams,
    lyapunov_f,
    ou_model,
    pme_diffusion,
    pme_model,
    qmatrix_family_a,
)
from rsspde.regime import table_rates


@pytest.fixture(scope="module")
def pme():
    return pme_model(PorousMediaParams(g1=2.0), rates=qmatrix_family_a())


def test_isotropic_ou_passes_everything():
    m = ou_model(3, decay=[1.0, 1.0, 1.0])
    for rep in (check_A1(m, 2000), check_A2(m, 2000),
                check_Q_and_D(m, lyapunov_f("square"), 200)):
        assert rep.passed, rep.text()


def test_anisotropic_ou_dissipativity_conflict():
    # G1 forces c >= max(decay)^2, while the jump-dissipativity limit needs 2 min(decay) > c
    rep = check_Q_and_D(ou_model(3), lyapunov_f("square"), 200)
    assert rep["Jdiss"].status == "fail"


def test_pme_margins_positive(pme):
    rep = check_A1(pme, 3000).merge(check_A2(pme, 3000))
    rep.merge(check_Q_and_D(pme, lyapunov_f("square"), 3000))
    assert rep.passed, rep.text()
    assert all(r.margin > 0 for r in rep.results.values()), rep.text()


def test_inflated_theta_fails_with_witness(pme):
    bad = dataclasses.replace(pme, constants=dataclasses.replace(pme.constants,
                                                                 theta=50 * pme.constants.theta))
    rep = check_A1(bad, 2000)
    res = rep["C"]
    assert res.status == "fail"
    assert recheck(bad, res.witness) < 0
    assert recheck(pme, res.witness) > 0
    again = check_A1(bad, 2000)["C"].witness
    assert np.array_equal(again["v1"], res.witness["v1"])


def test_masked_diffusion_fails_nondegeneracy(pme):
    p = pme.params
    mask = np.ones(p.n_modes)
    mask[2] = 0.0
    bad = dataclasses.replace(pme, diffusion=lambda t, x, i: pme_diffusion(t, x, i, p) * mask)
    rep = check_A2(bad, 2000)
    res = rep["N[n=1]"]
    assert res.status == "fail" and res.witness["mode"] == 3
    assert recheck(bad, res.witness) < 0


def test_disconnected_rates_fail_connectivity():
    q = table_rates([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]])
    m = pme_model(rates=q)
    rep = check_Q_and_D(m, lyapunov_f("square"), 200)
    res = rep["Q1"]
    assert res.status == "fail"
    assert recheck(m, res.witness) < 0
    a, b = res.witness["pair"]
    assert (a <= 2) != (b <= 2)


def test_q0_fails_when_bound_too_small(pme):
    q = pme.rate_matrix
    bad = dataclasses.replace(pme, rate_matrix=dataclasses.replace(q, bound_L=0.5 * q.bound_L))
    rep = check_Q_and_D(bad, lyapunov_f("square"), 500)
    assert rep["Q0"].status == "fail"
    assert recheck(bad, rep["Q0"].witness) < 0


def test_decreasing_f_fails_q2():
    rep = check_Q_and_D(pme_model(rates=qmatrix_family_a()), lambda i: -np.asarray(i, float), 200)
    assert rep["Q2f"].status == "fail"


def test_lambda_below_range_rejected(pme):
    bad = dataclasses.replace(pme, constants=dataclasses.replace(pme.constants, lam_exp=1.0))
    with pytest.raises(ValueError, match="LM2"):
        check_A2(bad, 100)


def test_periodicity_check_catches_wrong_period(pme):
    assert check_periodicity(pme).status == "pass"
    wrong = dataclasses.replace(pme, period=0.8)
    assert check_periodicity(dataclasses.replace(
        wrong, params=pme.params)).status == "fail"


def test_cr_constant_is_a_lower_bound():
    emp = calibrate_cr(PorousMediaParams(), 5000)
    assert emp >= 0.25


def test_shell_sampling():
    m = pme_model()
    rng = np.random.default_rng(0)
    x = sample_states(m, rng, 500, 3.0, shell=True)
    assert np.allclose(m.h_norm(x), 3.0)
    y = sample_states(m, rng, 500, 3.0)
    assert np.all(m.h_norm(y) <= 3.0 + 1e-12)


def test_report_csv(pme, tmp_path):
    rep = check_A1(pme, 500)
    path = tmp_path / "c.csv"
    with open(path, "w") as fh:
        rep.write_csv(fh)
    lines = path.read_text().splitlines()
    assert lines[0] == "condition,status,n_samples,margin,region"
    assert len(lines) == 1 + len(rep.results)
