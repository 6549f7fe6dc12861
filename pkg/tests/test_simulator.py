import math

import numpy as np
import pytest

from nonlocal_blowup import simulator
from nonlocal_blowup.barrier import P0, make_prepared_data, upper_bound_time
from nonlocal_blowup.exact import SingularProfile, truncated_profile
from nonlocal_blowup.monitor import single_scale_monitors
from nonlocal_blowup.simulator import (
    REASONS,
    TRACE_COLUMNS,
    SimConfig,
    SimState,
    Stalled,
    StepRejected,
    marked_index,
    read_trace_csv,
    rhs,
    rhs_arrays,
    rk4_step,
    run,
    stable_dt,
    step,
)
from nonlocal_blowup.state import ParticleCloud, log_grid, sample_profile, zero_cloud


def truncated_cloud(a=0.01, b=4.0, n=4096, taper=0.05, pins=()):
    om, rh = truncated_profile(SingularProfile(), a, b, taper)
    grid = log_grid(a, b, n)
    for v in pins:
        grid[np.argmin(np.abs(np.log(grid / v)))] = v
    return sample_profile(om, rh, grid)


def fixed_step_run(cloud, dt, n_steps, beta=1.0):
    st = SimState(0.0, cloud, marked_index(cloud, cloud.positions[len(cloud) // 2]))
    for _ in range(n_steps):
        st = step(st, dt, beta)
    return st


@pytest.fixture(scope="module")
def p0_run():
    states = []
    cfg = SimConfig(A_stop=1e-12)
    trace = run(make_prepared_data(P0, 4096), cfg, monitors=single_scale_monitors(P0), a0=P0.A0,
                callback=states.append)
    return trace, states


def test_rhs_zero_cloud():
    dx, dw = rhs(zero_cloud(log_grid(0.1, 1, 10)), 1.0)
    assert np.all(dx == 0) and np.all(dw == 0)


def test_rhs_truncated_profile_particle():
    c = truncated_cloud(a=1e-3, pins=(0.25,))
    i = int(np.flatnonzero(c.positions == 0.25)[0])
    dx, dw = rhs(c, 1.0)
    assert dx[i] == pytest.approx(-0.75, rel=5e-3)
    assert dw[i] == 4.0


def test_rhs_no_forcing_without_rho():
    x = np.array([1e-300, 1e-3, 1e-2, 1.0])
    w = np.array([0.0, 1.0, 1.0, 0.0])
    _, dw, _ = rhs_arrays(x, w, np.zeros(4), 1.0)
    assert np.all(dw == 0)
    with pytest.raises(StepRejected):
        rhs_arrays(np.array([0.0, 1.0, 2.0, 3.0]), w, np.array([1.0, 0, 0, 0]), 1.0)


def test_stable_dt():
    assert stable_dt(np.zeros(5), 0.1) == math.inf
    assert stable_dt(np.array([4.0, 2.0, 0.0]), 0.1) == pytest.approx(0.025)


def test_step_zero_cloud_advances_time():
    c = zero_cloud(log_grid(0.1, 1, 10))
    st = step(SimState(0.0, c, 3), 0.5, 1.0)
    assert st.t == 0.5
    np.testing.assert_array_equal(st.cloud.positions, c.positions)
    assert st.bkm == 0.0 and st.steps == 1
    with pytest.raises(ValueError):
        step(st, 0.0, 1.0)


def test_rk4_frozen_square_root_field():
    f = lambda y: -2 * np.sqrt(y)
    y = np.array([1.0])
    for _ in range(5):
        y = rk4_step(f, y, 0.01)
    assert y[0] == pytest.approx((1 - 0.05) ** 2, abs=1e-9)
    euler = 1.0 - 2 * 0.01
    assert abs(euler - 0.99**2) > 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_step_rejects_crossing():
    x = np.array([0.1, 0.2, 0.3, 0.4])
    c = ParticleCloud(x, [0, 1e6, 0, 0], [0, 0, 0, 0], x)
    with pytest.raises(StepRejected):
        step(SimState(0.0, c, 1), 1.0, 1.0)


def test_fourth_order_in_dt():
    c = truncated_cloud(n=512)
    T = 0.02
    ends = [fixed_step_run(c, T / n, n).cloud for n in (10, 20, 40, 80)]
    dx = [np.max(np.abs(ends[k].positions - ends[k + 1].positions)) for k in range(3)]
    dw = [np.max(np.abs(ends[k].omega - ends[k + 1].omega) / np.maximum(ends[k + 1].omega, 1e-300)) for k in range(3)]
    for d in (dx, dw):
        orders = np.log2(np.array(d[:-1]) / np.array(d[1:]))
        assert np.all(orders >= 3.5), orders


def test_run_zero_data():
    c = zero_cloud(log_grid(0.1, 1, 10))
    tr = run(c, SimConfig(t_max=1.0, dt_init=0.1), a0=0.5)
    assert tr.reason == "t_max"
    assert tr.final.t == 1.0
    assert np.all(tr.A == tr.A[0]) and np.all(tr.bkm == 0)
    assert tr.rows[-1][-1] == REASONS["t_max"]


def test_p0_run_blows_up_before_T_star(p0_run):
    trace, _ = p0_run
    assert trace.reason == "A_below_A_stop"
    assert trace.final.t < upper_bound_time(P0)
    assert np.all(np.diff(trace.A) < 0)
    assert np.all(np.diff(trace.t) > 0)
    assert all(ok for _, ok, _ in trace.monitors["control"])


def test_run_invariants(p0_run):
    _, states = p0_run
    rho0 = states[0].cloud.rho
    for a, b in zip(states[:-1], states[1:]):
        xa, xb = a.cloud.positions, b.cloud.positions
        assert np.all(np.diff(xb) > 0)
        assert np.all(xb <= xa)
        assert np.all(b.cloud.omega >= a.cloud.omega)
        assert b.cloud.rho.tobytes() == rho0.tobytes()
        assert b.bkm > a.bkm


def test_trajectories_from_outer_region_respect_log_bound(p0_run):
    # -dX/dt <= psi log(4) X holds where Q <= psi log(4/x) <= psi log 4, i.e. for X >= 1
    _, states = p0_run
    lab = states[0].cloud.label
    m = (lab >= 1) & (lab < 4)
    for st in states:
        lower = lab[m] * np.exp(-P0.psi * math.log(4) * st.t)
        assert np.all(st.cloud.positions[m] >= lower)


def test_marked_particle_is_not_bounded_by_the_log_rate(p0_run):
    trace, _ = p0_run
    # near A0 the velocity is Q ~ x^-q, far above psi log 4: A(t) falls 4 decades in t ~ 1e-4
    assert trace.A[-1] < trace.A[0] * math.exp(-P0.psi * math.log(4) * trace.t[-1]) * 1e-3


def test_wide_rho_taper_blows_up_inside_A():
    # forced particles left of A0 collapse first and overflow omega while A(t) is still large
    c = make_prepared_data(P0, 2048, rho_taper=0.9)
    tr = run(c, SimConfig(A_stop=1e-12, omega_cap=1e12), a0=P0.A0)
    assert tr.reason == "omega_cap"
    assert tr.final.A > 1e-12
    x, w = tr.final.cloud.positions, tr.final.cloud.omega
    assert x[np.argmax(w)] < tr.final.A


def test_material_derivative_identity():
    c = truncated_cloud()
    states = []
    run(c, SimConfig(dt_init=2e-4, cfl=0.5, t_max=0.05, A_stop=1e-300), a0=0.02, callback=states.append)
    states = states[:-2]  # drop the short final step that lands on t_max
    h = 2e-4
    W = np.array([s.cloud.omega for s in states])
    X = np.array([s.cloud.positions for s in states])
    fd = (-W[4:] + 8 * W[3:-1] - 8 * W[1:-3] + W[:-4]) / (12 * h)
    target = c.rho / X[2:-2]
    inner = slice(1, -1)
    forced = target[:, inner] > 0
    rel = np.abs(fd[:, inner] - target[:, inner])[forced] / target[:, inner][forced]
    assert rel.max() <= 1e-4
    assert np.all(fd[:, inner][~forced] == 0)


def test_stalled_is_reported(monkeypatch):
    def always_reject(*a, **k):
        raise StepRejected("forced")

    monkeypatch.setattr(simulator, "step", always_reject)
    c = truncated_cloud(n=64)
    with pytest.raises(Stalled) as err:
        run(c, SimConfig(), a0=0.1)
    assert err.value.state.t == 0.0


def test_max_steps_marks_trace_stalled():
    tr = run(truncated_cloud(n=64), SimConfig(max_steps=3), a0=0.1)
    assert tr.reason == "stalled" and tr.rows[-1][-1] == REASONS["stalled"]


@pytest.mark.parametrize("bad", [dict(cfl=1.0), dict(dt_init=0.0), dict(t_max=-1.0), dict(snapshot_every=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SimConfig(**bad)


def test_config_unknown_key():
    with pytest.raises(KeyError, match="nope"):
        SimConfig.from_dict({"nope": 1})
    assert SimConfig.from_dict(SimConfig().to_dict()) == SimConfig()


def test_snapshots_and_trace_csv(tmp_path):
    c = truncated_cloud(n=256)
    tr = run(c, SimConfig(t_max=0.01, snapshot_every=5), a0=0.1)
    assert tr.snapshots and all(s[0] % 5 == 0 for s in tr.snapshots)
    path = tmp_path / "trace.csv"
    tr.write_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    back = read_trace_csv(path)
    assert back.rows == tr.rows


def test_trace_csv_header_checked(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="expected columns"):
        read_trace_csv(p)


def test_runs_are_deterministic(tmp_path):
    c = make_prepared_data(P0, 1024)
    paths = []
    for k in range(2):
        tr = run(c, SimConfig(A_stop=1e-12), a0=P0.A0)
        paths.append(tmp_path / f"t{k}.csv")
        tr.write_csv(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
