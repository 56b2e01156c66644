import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cisqg import controls, noise, scheme
from cisqg import diagnostics as dg
from cisqg import spectral as sp
from cisqg import timeline as tl

BASE = controls.PlannerInput(alpha=0.5, kappa=0.6, gamma=1.0)


def _oracle_terms(a, b, beta, n, Cz, C_start=1.0, alpha=0.5, kappa=0.6, nu=1.0, gamma=1.0):
    """Plain floating-point evaluation of the six error contributions at level n."""
    lam = [a ** (b**k) for k in range(n + 1)]
    r = [C_start * (Cz**2 + 1) * lam[k] ** (-beta) * a**beta for k in range(n + 1)]
    mu = math.sqrt(lam[n - 1] * lam[n])
    N = n - 1

    def S(al):
        return sum(4.0 ** (N - k) * lam[k] ** al * math.sqrt(r[k - 1]) for k in range(1, N + 1))

    L = math.log(lam[n])
    ell_a = lam[n] ** (-alpha)
    return {
        "miss": (math.log(mu) * (lam[N] / mu + mu / lam[n]) ** 2 + lam[N] / lam[n]) * r[N],
        "com": L * (lam[N] * ell_a * S(alpha) * S(0.0)
                    + math.sqrt(lam[N]) * (ell_a * S(alpha) + lam[N] ** (-kappa) * S(0.0)) * Cz
                    + (ell_a + lam[N] ** (-kappa)) * Cz**2),
        "time": L * lam[n] ** -0.5 * math.sqrt(r[N]),
        "dis": L * nu * lam[n] ** (gamma - 1.5) * r[N] ** 0.25,
        "trans": L * math.sqrt(lam[N] / lam[n]) * math.sqrt(r[N]) * S(0.0),
        "sto": L * lam[n] ** -0.5 * math.sqrt(r[N]) * Cz,
    }


@pytest.mark.parametrize("a,b,beta,n,Cz", [(3, 4, 0.0125, 1, 0.52), (2, 2, 0.1, 1, 0.85), (2, 2, 0.1, 2, 0.85),
                                           (2, 2, 0.1, 3, 0.3), (5, 2, 0.2, 2, 0.0)])
def test_error_terms_against_plain_evaluation(a, b, beta, n, Cz):
    cp = controls.plan(BASE, "demo", a=a, b=b, beta=beta).with_calibration(Cz=Cz)
    got = dg.error_terms(cp, n, Cz)
    ref = _oracle_terms(a, b, beta, n, Cz)
    for k in dg.ERROR_KEYS:
        assert got[k] == pytest.approx(ref[k], rel=1e-12, abs=1e-300), k


def test_missing_term_lattice_closed_form():
    cp = controls.plan(BASE, "demo").with_calibration(Cz=0.52)
    mu = math.sqrt(243)
    r0 = 0.52**2 + 1
    assert dg.error_terms(cp, 1, 0.52)["miss"] == pytest.approx((math.log(mu) * (3 / mu + mu / 81) ** 2 + 3 / 81) * r0,
                                                                rel=1e-14)


def test_first_sum_is_sqrt_r0():
    cp = controls.plan(BASE, "demo", a=2, b=2, beta=0.1).with_calibration(Cz=0.7)
    seq = controls.sequences(cp, 1)
    assert dg.sum_dec(seq, 1, 0.0) == pytest.approx(math.sqrt(0.7**2 + 1), rel=1e-14)
    assert dg.sum_dec(seq, 0, 0.5) == 0.0


def test_no_dissipation_term_without_viscosity():
    cp = controls.plan(BASE, "demo", a=2, b=2, beta=0.1)
    assert dg.error_terms(cp, 1, 0.5, nu=0.0)["dis"] == 0.0
    with pytest.raises(ValueError):
        dg.error_terms(cp, 0, 0.5)


def test_inequality_rejects_small_C():
    led = dg.error_ledger(controls.plan(BASE, "demo"), 0.5, 1)
    with pytest.raises(ValueError, match="exceed 1"):
        dg.check_iteration_inequality(led, 1.0)


def test_strict_plan_inequality_holds():
    cp = controls.plan(BASE, "strict").with_calibration(Cz=0.52)
    led = dg.error_ledger(cp, 0.52, 1)
    rep = dg.check_iteration_inequality(led, cp.C, cp)
    assert rep.all_hold
    lat = controls.plan(BASE, "demo").with_calibration(Cz=0.52)
    assert not dg.check_iteration_inequality(dg.error_ledger(lat, 0.52, 1), lat.C, lat).all_hold


def test_log_and_linear_inequality_agree():
    cp = controls.plan(BASE, "demo", a=2, b=2, beta=0.1).with_calibration(Cz=0.85)
    led = dg.error_ledger(cp, 0.85, 2)
    a = dg.check_iteration_inequality(led, 2.0)
    b = dg.check_iteration_inequality(led, 2.0, cp)
    for x, y in zip(a.rows, b.rows):
        assert x[1] == pytest.approx(y[1], rel=1e-12) and x[4] == y[4]


def test_ledger_csv(tmp_path):
    cp = controls.plan(BASE, "demo", a=2, b=2, beta=0.1)
    est = dg.MCEstimate(0.5, 0.4, 0.6, 16)
    led = dg.error_ledger(cp, 0.85, 1, {0: est, 1: est})
    p = tmp_path / "l.csv"
    led.write_csv(p)
    rows = list(csv.reader(open(p)))
    assert tuple(rows[0]) == dg.LEDGER_COLUMNS
    q0 = [r for r in rows if r[0] == "0" and r[1] == "q_norm"][0]
    assert q0[6] == "true" and float(q0[2]) == 0.5
    assert {r[1] for r in rows if r[0] == "1"} >= {"E_" + k for k in dg.ERROR_KEYS}
    back = dg.ResidualLedger.from_json(led.to_json())
    assert back.rows() == led.rows()


@pytest.mark.parametrize("q0,Cz,expected", [(0.04, 0.85, 1.0), (3.2, 1.0, 2.0), (2.0, 1.0, 1.0), (10.0, 0.0, 10.0)])
def test_calibrate_C_start(q0, Cz, expected):
    assert dg.calibrate_C_start(q0, Cz) == expected


def test_mc_local_norm():
    rows = np.full((10, 3), 2.0)
    e = dg.mc_local_norm(rows, 4, bootstrap=50)
    assert e.value == pytest.approx(2.0) and e.ci_lo == pytest.approx(2.0) and e.ci_hi == pytest.approx(2.0)
    rows = np.array([[1.0, 3.0], [1.0, 1.0]])
    # moment per window then max: window 2 has (9 + 1)/2 = 5 -> sqrt 5
    assert dg.local_moment(rows, 2) == pytest.approx(math.sqrt(5))
    with pytest.raises(ValueError):
        dg.mc_local_norm(np.zeros((0, 2)), 2)


def test_window_sups():
    grid = tl.TimeGrid(0.0, 0.25, 9)
    v = np.arange(9.0)
    assert dg.window_sups(v, grid.times, grid).tolist() == [4.0, 6.0, 8.0]


# ---------------------------------------------------------------------------
# weak forms


@pytest.mark.parametrize("phase", ["cos", "sin"])
@pytest.mark.parametrize("mode", [(1, 0), (2, -1)])
def test_pairing_of_trigonometric_fields(phase, mode):
    M = 16
    xi = dg.TestFunction(mode, 0.5, 0.25, phase)
    f = sp.forward(xi.dense(M))
    spec = dg.SparseSpectrum.from_coeffs(f[None])
    # <phi, phi> = 2 pi^2
    assert dg.pairing(spec, xi.spatial_modes())[0] == pytest.approx(2 * np.pi**2, rel=1e-13)


def test_hdot4_constant():
    grid = tl.TimeGrid(0.0, 1 / 64, 65)
    xi = dg.TestFunction((1, 1), 0.5, 0.4)
    ref = sp.norm(sp.single_mode(16, 1, 1), sp.HdotSobolev(4.0))
    assert xi.hdot4(grid) == pytest.approx(np.sum(np.abs(xi.eta(grid.times))) / 64 * ref, rel=1e-12)


def test_test_function_validation():
    with pytest.raises(ValueError):
        dg.TestFunction((0, 0))
    with pytest.raises(ValueError):
        dg.TestFunction((1, 0), phase="tan")
    with pytest.raises(ValueError, match="interior"):
        dg.TestFunction((1, 0), 0.1, 0.3).check_interior(tl.TimeGrid(0, 0.1, 11))


def test_three_defect_routes_agree(demo_run):
    z, cfg, states = demo_run
    grid = z.grid
    for st_ in states:
        for xi in dg.default_test_functions(grid)[:6]:
            fr = xi.support(grid)
            g, zs = dg.state_spectra(st_, st_.z_trunc, fr)
            d = dg.weak_residual(g, zs, xi, grid, fr)
            qs = dg.SparseSpectrum.from_coeffs(st_.q[fr])
            j2 = xi.mode[0] ** 2 + xi.mode[1] ** 2
            via_q = -j2 * float(np.sum(grid.dt * xi.eta(grid.times[fr]) * dg.pairing(qs, xi.spatial_modes())))
            band = int(st_.blocks.band) if st_.blocks.blocks else 3 * int(controls.sequences(cp_of(z), 0)[0].lam)
            M = sp.fast_even_size(2 * (band + 3) + 4)
            th = dg.theta_defect(st_.g_coeffs(M, fr), st_.z_trunc.coeffs(M, frames=fr), xi, grid, fr)
            scale = max(abs(d.time_term), abs(d.nonlinear), abs(d.dissipation), 1e-6)
            assert abs(d.value - via_q) <= 1e-10 * scale
            assert abs(d.value - th.value) <= 1e-8 * scale


def cp_of(z):
    return controls.plan(BASE, "demo", a=2, b=2, beta=0.1)


@pytest.mark.parametrize("k", [(1, 0), (3, 4), (6, -2)])
def test_single_mode_transport_vanishes(k):
    grid = tl.TimeGrid(0.0, 1 / 16, 17)
    M = 32
    g = np.repeat(sp.single_mode(M, *k, amplitude=0.8).coeffs[None], grid.count, axis=0)
    zero = np.zeros_like(g)
    for xi in dg.default_test_functions(grid):
        fr = xi.support(grid)
        d = dg.weak_residual(dg.SparseSpectrum.from_coeffs(g[fr]), dg.SparseSpectrum.from_coeffs(zero[fr]),
                             xi, grid, fr)
        th = dg.theta_defect(g[fr], zero[fr], xi, grid, fr)
        assert abs(d.nonlinear) < 1e-12 and abs(th.nonlinear) < 1e-12


def test_sparse_spectrum_round_trip(rng):
    c = np.stack([sp.random_bandlimited(16, 5, rng).coeffs for _ in range(3)])
    s = dg.SparseSpectrum.from_coeffs(c)
    assert np.allclose(s.dense(16), sp.trim_nyquist(c), atol=1e-14)
    empty = dg.SparseSpectrum(np.zeros(0), np.zeros(0), np.zeros((2, 0)))
    idx, ok = empty.lookup(np.array([1]), np.array([2]))
    assert not ok.any()
    doubled = s + s
    assert np.allclose(doubled.vals, 2 * s.vals)


# ---------------------------------------------------------------------------
# regularity


def test_regimes_and_range():
    a, b, beta = 0.5, 4, 0.0125
    assert dg.regularity_regime(0.0, 0.5, a, b, beta) == 1
    assert dg.regularity_regime(0.3, 0.0, a, b, beta) == 2
    with pytest.raises(dg.RegularityRangeError, match="admissible"):
        dg.regularity_regime(0.3, 0.3, a, b, beta)
    with pytest.raises(dg.RegularityRangeError):
        dg.regularity_regime(-0.1, 0.0, a, b, beta)


@settings(max_examples=50, deadline=None)
@given(tt=st.floats(0, 0.99), tx=st.floats(0, 0.99))
def test_predicted_rate_positive_when_admissible(tt, tx):
    try:
        rate = dg.predicted_rate(tt, tx, 0.5, 4, 0.0125)
    except dg.RegularityRangeError:
        return
    assert rate > 0


def test_first_increment_closed_form():
    """With zero noise the first increment is A(cos K1.x + cos K2.x), whose sup is 2A."""
    cp = controls.plan(BASE, "demo", a=2, b=2, beta=0.1)
    grid = scheme.time_grid_for(cp, 1)
    z = noise.zero_path(noise.NoiseConfig(K=4), grid, 64)
    cfg = scheme.SchemeConfig(N=64, levels=1)
    states = scheme.run(z, cp, cfg)
    rep = dg.regularity_probe(states, cp, 0.0, 0.0)
    A = 2 * math.sqrt(2 * 1.0 / (5 * 4))
    assert rep.regime == 2
    assert rep.increments[0] == pytest.approx(2 * A, rel=1e-12)


# ---------------------------------------------------------------------------
# carrier directions and nonuniqueness


def test_direction_symbols():
    assert dg.direction_spread(scheme.DERIVED_DIRECTIONS) < 1e-12
    assert dg.direction_spread(scheme.ALTERNATE_DIRECTIONS) > 0.5


def test_mismatch_probe():
    q = sp.random_bandlimited(16, 3, np.random.default_rng(0)).coeffs
    mu = math.sqrt(243)
    good = dg.mismatch_probe(q, 81, mu, scheme.DERIVED_DIRECTIONS)
    bad = dg.mismatch_probe(q, 81, mu, scheme.ALTERNATE_DIRECTIONS)
    assert good.relative < 1e-3
    assert bad.relative > 100 * good.relative


def test_nonuniqueness_probe():
    cp = controls.plan(BASE, "demo", a=2, b=2, beta=0.1)
    grid = scheme.time_grid_for(cp, 1)
    z = noise.generate(noise.NoiseConfig(K=8, seed=3), grid, 64)
    runs = {}
    for C0 in (2.0, 8.0, 2.0):
        cfg = scheme.SchemeConfig(N=64, levels=1, block=scheme.BlockConfig(C0=C0))
        runs.setdefault(C0, []).append(scheme.run(z, cp, cfg))
    rep = dg.nonuniqueness_probe(runs[2.0][0], runs[8.0][0], z)
    assert rep.differ and rep.difference > 1e-6
    assert rep.comparable
    same = dg.nonuniqueness_probe(runs[2.0][0], runs[2.0][1], z)
    assert same.difference == 0.0


def test_json_dump():
    s = dg.dumps({"a": np.float64(1.5), "b": np.arange(2), "c": np.bool_(True)})
    assert '"c": true' in s
