"""Runtime certification of running solutions and blowup diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .barrier import BarrierParams, q_bounds_report, upper_bound_time
from .report import ControlReport, barrier_record
from .sequences import BarrierSequences, check_Q_bounds_multiscale
from .simulator import SimState, SimTrace, _local_sup

RUNTIME_SLACK = 1e-6
MIN_FIT_NODES = 8


def _window_mask(x, lo, hi):
    return (x >= lo) & (x <= hi)


def _clip(cloud, lo, hi):
    x = cloud.positions
    return max(lo, x[0]), min(hi, x[-1])


def check_control_single(state: SimState, params: BarrierParams, slack: float = RUNTIME_SLACK) -> ControlReport:
    """Barrier corridor of a controlled single-scale solution at one time slice.

    On [A(t), 1]: phi x^-p < omega < psi x^-q.  Flat bounds omega < psi on
    [1, 3], omega > phi on [1, 2], omega <= psi on [3, 4].  Windows are
    clipped to the current support; an empty window is a flagged vacuous pass.
    """
    P = params
    c = state.cloud
    x, w = c.positions, c.omega
    rep = ControlReport(t=state.t)

    def add(id, lo, hi, bound, kind, strict=True):
        lo, hi = _clip(c, lo, hi)
        m = _window_mask(x, lo, hi) if lo <= hi else np.zeros_like(x, dtype=bool)
        b = bound(x[m]) if callable(bound) else bound
        rep.records.append(barrier_record(id, x[m], w[m], b, kind, (lo, hi), slack=slack, strict=strict))

    A = state.A
    add("upper_power", A, 1.0, lambda z: P.psi * z**-P.q, "upper")
    add("upper_flat", 1.0, 3.0, P.psi, "upper")
    add("lower_power", A, 1.0, lambda z: P.phi * z**-P.p, "lower")
    add("lower_flat", 1.0, 2.0, P.phi, "lower")
    add("upper_tail", 3.0, 4.0, P.psi, "upper", strict=False)
    return rep


def check_Q_single(state: SimState, params: BarrierParams, slack: float = RUNTIME_SLACK) -> ControlReport:
    rep = q_bounds_report(state.cloud, params, state.A, slack=slack)
    rep.t = state.t
    return rep


def check_control_multiscale(state: SimState, seq: BarrierSequences, slack: float = RUNTIME_SLACK,
                             level_floor: float | None = None) -> ControlReport:
    """Multiscale corridor: phi_n x^-p_n < omega < psi_n x^-q_n on I_n with x >= A(t).

    Outer lines: omega < psi_1 lam0^-q1 on [lam0, lam_-2] and
    omega > phi_1 lam0^-q1 on [lam0, lam_-1].  Levels whose interval lies
    entirely below ``level_floor`` are not consulted.
    """
    c = state.cloud
    x, w = c.positions, c.omega
    rep = ControlReport(t=state.t)
    A = state.A
    floor = level_floor if level_floor is not None else 0.0
    for n in range(1, seq.N + 1):
        lo, hi = seq.lam[n], seq.lam[n - 1]
        if hi < floor:
            break
        lo_c, hi_c = max(lo, A), hi
        m = _window_mask(x, lo_c, hi_c) if lo_c <= hi_c else np.zeros_like(x, dtype=bool)
        xm = x[m]
        rep.records.append(barrier_record("level_lower", xm, w[m], seq.phi[n] * xm ** -seq.p[n], "lower",
                                          (lo_c, hi_c), slack=slack, level=n))
        rep.records.append(barrier_record("level_upper", xm, w[m], seq.psi[n] * xm ** -seq.q[n], "upper",
                                          (lo_c, hi_c), slack=slack, level=n))
    top = seq.psi[1] * seq.lam0 ** -seq.q[1]
    bot = seq.phi[1] * seq.lam0 ** -seq.q[1]
    lo, hi = _clip(c, seq.lam0, seq.lam_m2)
    m = _window_mask(x, lo, hi)
    rep.records.append(barrier_record("outer_upper", x[m], w[m], top, "upper", (lo, hi), slack=slack))
    lo, hi = _clip(c, seq.lam0, seq.lam_m1)
    m = _window_mask(x, lo, hi)
    rep.records.append(barrier_record("outer_lower", x[m], w[m], bot, "lower", (lo, hi), slack=slack))
    return rep


def check_Q_multiscale(state: SimState, seq: BarrierSequences, slack: float = RUNTIME_SLACK,
                       level_floor: float | None = None) -> ControlReport:
    rep = check_Q_bounds_multiscale(state.cloud, seq, a_left=state.A, slack=slack, level_floor=level_floor)
    rep.t = state.t
    return rep


def bkm_update(bkm: float, omega_max_prev: float, omega_max_new: float, dt: float) -> float:
    """Trapezoid increment of int ||omega||_inf ds."""
    return bkm + 0.5 * dt * (omega_max_prev + omega_max_new)


def bkm_localized(state: SimState, delta: float) -> float:
    """sup of omega over (0, delta) for the current state (0 if delta is below the support)."""
    return _local_sup(state.cloud, delta)


def bkm_from_series(t, sup_norm):
    """Cumulative trapezoid integral of a sup-norm series."""
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(sup_norm, dtype=np.float64)
    out = np.zeros_like(t)
    out[1:] = np.cumsum(0.5 * np.diff(t) * (s[1:] + s[:-1]))
    return out


def _window_nodes(state_or_cloud, window):
    cloud = getattr(state_or_cloud, "cloud", state_or_cloud)
    lo, hi = window
    x, w = cloud.positions, cloud.omega
    m = _window_mask(x, lo, hi)
    if m.sum() < MIN_FIT_NODES:
        raise ValueError(f"window [{lo:g}, {hi:g}] holds {int(m.sum())} nodes; need {MIN_FIT_NODES}")
    if np.any(w[m] <= 0):
        raise ValueError("omega must be positive on the fit window")
    return x[m], w[m]


def fit_exponent(state_or_cloud, window) -> tuple[float, float]:
    """Least-squares line through (log x, log omega) on the window nodes."""
    x, w = _window_nodes(state_or_cloud, window)
    slope, intercept = np.polyfit(np.log(x), np.log(w), 1)
    return float(slope), float(intercept)


def envelope_check(state_or_cloud, window) -> tuple[float, float]:
    """(min, max) of omega * sqrt(x) over the window nodes."""
    x, w = _window_nodes(state_or_cloud, window)
    s = w * np.sqrt(x)
    return float(s.min()), float(s.max())


@dataclass
class BlowupDiagnostics:
    t_star: float | None
    t_end: float
    a_end: float
    bkm_end: float
    bkm_localized: float
    termination: str
    exponent_fit: dict
    envelope: dict

    def to_dict(self):
        return asdict(self)


def diagnose(trace: SimTrace, window_hi: float, t_star: float | None = None) -> BlowupDiagnostics:
    """Summaries of a finished run over the final window [A(t_end), window_hi]."""
    st = trace.final
    window = (st.A, window_hi)
    try:
        slope, intercept = fit_exponent(st, window)
        fit = {"slope": slope, "intercept": intercept, "window": list(window)}
    except ValueError as err:
        fit = {"slope": None, "intercept": None, "window": list(window), "error": str(err)}
    try:
        lo, hi = envelope_check(st, window)
        env = {"phi_eff": lo, "psi_eff": hi, "window": list(window)}
    except ValueError as err:
        env = {"phi_eff": None, "psi_eff": None, "window": list(window), "error": str(err)}
    return BlowupDiagnostics(
        t_star=t_star, t_end=st.t, a_end=st.A, bkm_end=st.bkm, bkm_localized=st.bkm_local,
        termination=trace.reason, exponent_fit=fit, envelope=env,
    )


def run_report(trace: SimTrace, diag: BlowupDiagnostics, control: str | None = None) -> dict:
    """Per-run JSON document."""
    history = []
    if control is not None:
        history = [[t, ok, m if math.isfinite(m) else None] for t, ok, m in trace.monitors.get(control, [])]
    d = {
        "termination": diag.termination,
        "t_end": diag.t_end,
        "a_end": diag.a_end,
        "t_star": diag.t_star,
        "bkm_end": diag.bkm_end,
        "bkm_localized": diag.bkm_localized,
        "exponent_fit": diag.exponent_fit,
        "envelope": diag.envelope,
        "control_history": history,
    }
    return d


def single_scale_monitors(params: BarrierParams, slack: float = RUNTIME_SLACK):
    return {
        "control": lambda st: check_control_single(st, params, slack),
        "Q_bounds": lambda st: check_Q_single(st, params, slack),
    }


__all__ = [
    "check_control_single", "check_Q_single", "check_control_multiscale", "check_Q_multiscale",
    "bkm_update", "bkm_localized", "bkm_from_series", "fit_exponent", "envelope_check",
    "BlowupDiagnostics", "diagnose", "run_report", "single_scale_monitors", "upper_bound_time",
]
