import math

import numpy as np
import pytest

from nonlocal_blowup.barrier import P0, make_prepared_data, upper_bound_time
from nonlocal_blowup.exact import SingularProfile, truncated_profile
from nonlocal_blowup.monitor import (
    bkm_from_series,
    bkm_localized,
    bkm_update,
    check_control_multiscale,
    check_control_single,
    check_Q_multiscale,
    check_Q_single,
    diagnose,
    envelope_check,
    fit_exponent,
    run_report,
    single_scale_monitors,
)
from nonlocal_blowup.sequences import S0, make_prepared_data_multiscale
from nonlocal_blowup.simulator import SimConfig, SimState, run
from nonlocal_blowup.state import ParticleCloud, log_grid, sample_profile, zero_cloud

A0_MS = 1e-4


def state_of(cloud, a0, t=0.0):
    i = int(np.argmin(np.abs(np.log(cloud.positions / a0))))
    return SimState(t, cloud, i)


def power_cloud(coef, expo, lo, hi, n=200):
    x = np.concatenate([[lo * 0.99], log_grid(lo, hi, n), [hi * 1.01]])
    w = coef * x**expo
    w[[0, -1]] = 0.0
    return ParticleCloud(x, w, np.zeros_like(x), x)


@pytest.fixture(scope="module")
def p0_state():
    return state_of(make_prepared_data(P0, 4096), P0.A0)


@pytest.fixture(scope="module")
def s0():
    return S0()


@pytest.fixture(scope="module")
def ms_state(s0):
    return state_of(make_prepared_data_multiscale(s0, A0_MS, n_particles=4096), A0_MS)


# single scale

def test_control_single_passes_at_start(p0_state):
    rep = check_control_single(p0_state, P0, slack=0.0)
    assert rep.passed and rep.t == 0.0
    assert all(r.margin > 0 for r in rep.records if not r.vacuous)
    for r in rep.records:
        lo, hi = r.interval
        assert r.vacuous or lo <= r.witness <= hi


def test_control_single_injected_violation(p0_state):
    c = p0_state.cloud
    x = c.positions
    i = int(np.argmin(np.abs(x - 1e-3)))
    w = c.omega.copy()
    w[i] = 2 * P0.psi * x[i] ** -P0.q
    rep = check_control_single(SimState(0.0, c.with_omega(w), p0_state.a_index), P0)
    assert not rep.passed
    bad = rep.failures()
    assert [r.id for r in bad] == ["upper_power"]
    assert bad[0].witness == x[i]


def test_control_single_vacuous_when_A_above_one():
    x = log_grid(0.5, 4.0, 100)
    w = np.where((x > 0.5) & (x < 3.9), P0.phi * 1.1, 0.0)
    c = ParticleCloud(x, w, np.zeros_like(x), x)
    rep = check_control_single(state_of(c, 1.5), P0)
    vac = {r.id for r in rep.records if r.vacuous}
    assert vac == {"upper_power", "lower_power"}
    assert rep.get("upper_power").passed
    assert math.isfinite(rep.worst_margin)


def test_Q_single_passes_at_start(p0_state):
    assert check_Q_single(p0_state, P0, slack=0.0).passed


def test_Q_single_upper_fails_when_omega_scaled(p0_state):
    c = p0_state.cloud
    rep = check_Q_single(SimState(0.0, c.with_omega(10 * c.omega), p0_state.a_index), P0)
    assert not rep.get("Q_upper").passed


def test_Q_log_bound_equality_at_four(p0_state):
    r = check_Q_single(p0_state, P0, slack=0.0).get("Q_log")
    assert r.passed and r.witness == 4.0
    assert r.lhs == 0.0 and r.rhs == 0.0


# multiscale

def test_control_multiscale_passes_at_start(ms_state, s0):
    assert check_control_multiscale(ms_state, s0, slack=0.0, level_floor=1e-8).passed


def test_control_multiscale_halved_on_first_level(ms_state, s0):
    c = ms_state.cloud
    x = c.positions
    w = np.where((x > s0.lam[1]) & (x <= s0.lam0), c.omega / 2, c.omega)  # lam_1 itself belongs to I_2 too
    rep = check_control_multiscale(SimState(0.0, c.with_omega(w), ms_state.a_index), s0)
    assert not rep.get("level_lower", 1).passed
    assert rep.get("level_lower", 2).passed and rep.get("level_upper", 2).passed


def test_control_multiscale_deep_levels_vacuous(ms_state, s0):
    rep = check_control_multiscale(ms_state, s0)
    assert s0.lam[2] < ms_state.A < s0.lam[1]
    for n in range(3, s0.N + 1):
        assert rep.get("level_lower", n).vacuous and rep.get("level_upper", n).vacuous
    assert not rep.get("level_lower", 2).vacuous


def test_control_multiscale_floor_skips_levels(ms_state, s0):
    # lam_2 ~ 1.6e-9 lies below the floor, so level 3 is never consulted
    rep = check_control_multiscale(ms_state, s0, level_floor=1e-8)
    assert {r.level for r in rep.records if r.level} == {1, 2}


def test_Q_multiscale_level_two_holds_at_start(ms_state, s0):
    rep = check_Q_multiscale(ms_state, s0, slack=0.0, level_floor=1e-8)
    assert rep.get("Q_lower", 2).passed and rep.get("Q_upper", 2).passed


# BKM

def test_bkm_zero_run():
    tr = run(zero_cloud(log_grid(0.1, 1, 10)), SimConfig(t_max=0.5, dt_init=0.1), a0=0.5)
    assert np.all(tr.bkm == 0.0)
    assert bkm_update(0.0, 0.0, 0.0, 1.0) == 0.0


def test_bkm_frozen_field_closed_form():
    t = np.linspace(0.0, 0.99, 20001)
    A = (1 - t) ** 2
    integral = bkm_from_series(t, A**-0.5)
    np.testing.assert_allclose(integral, -np.log1p(-t), rtol=1e-5, atol=1e-12)


def test_bkm_update_is_trapezoid():
    assert bkm_update(1.0, 2.0, 4.0, 0.5) == 2.5


def test_bkm_localized():
    c = power_cloud(1.0, -0.5, 0.1, 1.0)
    st = SimState(0.0, c, 1)
    assert bkm_localized(st, 0.05) == 0.0
    assert bkm_localized(st, 0.5) == pytest.approx(0.1**-0.5)


# exponent fit and envelope

def test_fit_exact_profile():
    k = 1.7
    om, rh = truncated_profile(SingularProfile(k=k), 1e-3, 4.0, 0.05)
    c = sample_profile(om, rh, log_grid(1e-3, 4.0, 1024))
    slope, intercept = fit_exponent(c, (0.01, 1.0))
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert intercept == pytest.approx(math.log(k), abs=1e-12)
    assert envelope_check(c, (0.01, 1.0)) == pytest.approx((k, k), rel=1e-12)


def test_fit_second_level_barrier(s0):
    c = power_cloud(s0.phi[2], -s0.p[2], s0.lam[2], s0.lam[1])
    slope, intercept = fit_exponent(c, (s0.lam[2], s0.lam[1]))
    assert slope == pytest.approx(-0.48161, abs=1e-5)
    assert slope == pytest.approx(-s0.p[2], abs=1e-12)


def test_fit_multiscale_data(ms_state, s0):
    slope, _ = fit_exponent(ms_state, (A0_MS, s0.lam0))
    assert -s0.q[1] <= slope <= -s0.p[1]
    lo, hi = envelope_check(ms_state, (A0_MS, s0.lam0))
    assert lo == pytest.approx(1.0, rel=1e-12) and hi == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("window", [(0.5, 0.51), (0.01, 100.0)])
def test_fit_rejects_bad_windows(window):
    x = log_grid(0.1, 1.0, 50)
    w = np.where(x < 0.9, 1.0, 0.0)
    with pytest.raises(ValueError):
        fit_exponent(ParticleCloud(x, w, np.zeros_like(x), x), window)
    with pytest.raises(ValueError):
        envelope_check(ParticleCloud(x, w, np.zeros_like(x), x), window)


# run-level diagnostics

@pytest.fixture(scope="module")
def p0_trace():
    return run(make_prepared_data(P0, 2048), SimConfig(), monitors=single_scale_monitors(P0),
               a0=P0.A0, keep_reports=True)


def test_controlled_run_respects_T_star(p0_trace):
    assert all(ok for _, ok, _ in p0_trace.monitors["control"])
    assert p0_trace.final.t < upper_bound_time(P0)


def test_controlled_implies_Q_bounded(p0_trace):
    for c, q in zip(p0_trace.reports["control"], p0_trace.reports["Q_bounds"]):
        assert not c.passed or q.passed


def test_diagnose_and_report(p0_trace):
    d = diagnose(p0_trace, 1.0, upper_bound_time(P0))
    assert d.termination == "A_below_A_stop"
    assert d.a_end == p0_trace.final.A
    assert d.exponent_fit["window"][0] >= d.a_end
    assert d.envelope["phi_eff"] <= d.envelope["psi_eff"]
    rep = run_report(p0_trace, d, "control")
    assert set(rep) == {"termination", "t_end", "a_end", "t_star", "bkm_end", "bkm_localized",
                        "exponent_fit", "envelope", "control_history"}
    assert len(rep["control_history"]) == len(p0_trace.rows)


def test_diagnose_records_fit_failure():
    tr = run(zero_cloud(log_grid(0.1, 1, 10)), SimConfig(t_max=0.1, dt_init=0.1), a0=0.5)
    d = diagnose(tr, 1.0)
    assert d.exponent_fit["slope"] is None and "error" in d.exponent_fit
