import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cisqg import controls as c

BASE = c.PlannerInput(alpha=0.5, kappa=0.6, gamma=1.0)


def test_b_and_beta():
    cp = c.plan(BASE, "demo")
    # b: smallest integer above 1 + 1/alpha = 3
    assert cp.b == 4
    # beta bounds at b = 4: (0.5*3 - 1)/4, 0.1/4, 4/7, (16/15)/2, 3/7; half the smallest
    assert cp.beta == pytest.approx(0.5 * min(0.125, 0.025, 4 / 7, 8 / 15, 3 / 7), rel=1e-12)
    assert cp.beta == pytest.approx(0.0125, rel=1e-12)


def test_lattice_minimal_a():
    assert c.lattice_min_a(4) == 3  # 2^4 = 16 < 48, 3^4 = 81 >= 48
    assert c.plan(BASE, "demo").a == 3


def test_varsigma_value():
    vs = c.varsigma(0.5, 0.6, 1.0, 4, 0.0125)
    # the binding rate is 0.5 - kappa + beta b = -0.05
    assert vs == pytest.approx(0.05, rel=1e-12)


def test_strict_plan_satisfies_every_condition():
    cp = c.plan(BASE, "strict")
    rep = c.check_conditions(cp, 4)
    assert rep.strict_ok, rep.failed()
    names = {r[0] for r in rep.rows}
    for req in ("R1", "R2", "R3_12lam_le_4mu", "R3_mu_ge_10", "R3_48lam_le_lam", "A_9_le_a^b",
                "A_100_le_a^(1+b)", "A_48_le_a^b", "eta1", "eta2", "eta3", "eta4", "eta5", "eta6"):
        assert req in names
    assert cp.a >= cp.lattice_a and cp.a >= cp.closing_a and cp.a >= cp.a0
    # closing inequality of the minimal a, in logs
    la = math.log(cp.closing_a)
    assert math.log(2.0) + math.log(la) + math.log(11) + 2 * math.log(16) - 0.05 * la <= 1e-12


def test_lattice_plan_conditions():
    """With a = 3 all side conditions hold but the closing inequality does not."""
    rep = c.check_conditions(c.plan(BASE, "demo"), 3)
    assert {r[0] for r in rep.failed()} == {"closing", "a_ge_a0"}


def test_lattice_sequences():
    seq = c.sequences(c.plan(BASE, "demo"), 2)
    assert [lv.lam for lv in seq] == [3, 81, 3**16]
    assert seq[1].mu == pytest.approx(math.sqrt(243), rel=1e-14)
    assert seq[0].r == 1.0
    assert seq[1].r == pytest.approx(81 ** (-0.0125) * 3**0.0125, rel=1e-12)
    assert seq[1].ell == pytest.approx(1 / 81)


@pytest.mark.parametrize("a,b,N,feasible", [(3, 4, 1024, [True, True, False]), (2, 2, 256, [True, True, True]),
                                             (2, 2, 32, [True, False, False])])
def test_feasibility(a, b, N, feasible):
    cp = c.plan(BASE, "demo", a=a, b=b, beta=0.1)
    assert [f for _, f in c.feasibility_table(cp, 2, N)] == feasible


@pytest.mark.parametrize("kw,msg", [
    (dict(alpha=0.0), "alpha"), (dict(m=0), "moment"), (dict(C0=1.5), "C0"),
    (dict(C_start=0.5), "C_start"), (dict(Cz=-1.0), "Cz"), (dict(C=1.0), "exceed 1"),
])
def test_input_validation(kw, msg):
    args = dict(alpha=0.5, kappa=0.6, gamma=1.0) | kw
    with pytest.raises(c.PlannerError, match=msg):
        c.plan(c.PlannerInput(**args), "demo")


@pytest.mark.parametrize("kappa,gamma", [(0.5, 1.0), (0.6, 1.5), (0.4, 0.8)])
def test_no_admissible_beta(kappa, gamma):
    with pytest.raises(c.PlannerError, match="no admissible"):
        c.plan(c.PlannerInput(alpha=0.5, kappa=kappa, gamma=gamma), "strict")


def test_bad_mode():
    with pytest.raises(c.PlannerError):
        c.plan(BASE, "fast")


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.2, 3.0))
def test_smallest_b(alpha):
    b = c.smallest_b(alpha)
    assert b > 1 + 1 / alpha >= b - 1


@settings(max_examples=20, deadline=None)
@given(vs=st.floats(0.02, 1.0), C=st.floats(1.1, 10.0))
def test_closing_min_a_is_minimal(vs, C):
    a = c.closing_min_a(C, 1.0, 4, vs)
    assert c.closing_lhs(a, C, 1.0, 4, vs) <= 1 + 1e-12
    if a > 2 and a < 2**60:
        assert c.closing_lhs(a - 1, C, 1.0, 4, vs) > 1


def test_demo_monotone_sequences():
    cp = c.plan(BASE, "demo", a=2, b=2, beta=0.1)
    seq = c.sequences(cp, 3)
    assert all(x.lam < y.lam for x, y in zip(seq, seq[1:]))
    assert all(x.r > y.r for x, y in zip(seq, seq[1:]))
