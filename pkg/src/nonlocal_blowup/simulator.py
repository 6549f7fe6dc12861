"""Lagrangian time stepping of the particle cloud.

Along characteristics the system is the ODE set

    dX_i/dt = -X_i Q(X_i),    d omega_i/dt = rho_i / X_i^beta,    rho_i fixed,

integrated with classical RK4.  Q depends on the whole cloud, so every
stage re-evaluates the tail sums on the stage positions.  The step size is
a fixed fraction of min_i X_i/|dX_i/dt| = 1/max Q: relative, not absolute,
displacement is what matters near x = 0.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .state import ParticleCloud
from .velocity import tail_sums

log = logging.getLogger(__name__)

REASONS = {"running": 0, "t_max": 1, "A_below_A_stop": 2, "omega_cap": 3, "stalled": 4}
TRACE_COLUMNS = ("t", "dt", "A", "omega_max", "bkm", "reason_flag")
DT_FLOOR = 1e-15


class StepRejected(RuntimeError):
    pass


class Stalled(RuntimeError):
    def __init__(self, msg, state):
        super().__init__(msg)
        self.state = state


@dataclass(frozen=True)
class SimConfig:
    beta: float = 1.0
    dt_init: float = 1e-3  # first step and cap for every step
    cfl: float = 0.1
    t_max: float = 1.0
    A_stop: float = 1e-12
    omega_cap: float = 1e150
    snapshot_every: int = 0  # 0 disables profile snapshots
    bkm_delta: float | None = None  # window (0, delta) of the localized sup norm; None -> A0
    max_steps: int = 2_000_000

    def __post_init__(self):
        for name in ("beta", "dt_init", "cfl", "t_max", "A_stop", "omega_cap"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if not self.cfl < 1:
            raise ValueError(f"cfl must be < 1, got {self.cfl}")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(d) - known)
        if bad:
            raise KeyError(f"unknown config key(s): {bad}")
        return cls(**d)


@dataclass
class SimState:
    t: float
    cloud: ParticleCloud
    a_index: int
    bkm: float = 0.0
    bkm_local: float = 0.0
    steps: int = 0

    @property
    def A(self) -> float:
        return float(self.cloud.positions[self.a_index])

    @property
    def omega_max(self) -> float:
        return float(self.cloud.omega.max())


@dataclass
class SimTrace:
    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (step, t, cloud)
    monitors: dict = field(default_factory=dict)  # name -> list of (t, pass, worst_margin)
    reports: dict = field(default_factory=dict)  # name -> list of ControlReport (only when kept)
    reason: str = "running"
    final: SimState | None = None
    a0: float | None = None

    def column(self, name):
        i = TRACE_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    @property
    def t(self):
        return self.column("t")

    @property
    def A(self):
        return self.column("A")

    @property
    def bkm(self):
        return self.column("bkm")

    @property
    def omega_max(self):
        return self.column("omega_max")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([format(v, ".17g") for v in r[:-1]] + [str(r[-1])])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{path}: expected columns {TRACE_COLUMNS}, got {r.fieldnames}")
        rows = [tuple(float(row[c]) for c in TRACE_COLUMNS[:-1]) + (int(row["reason_flag"]),) for row in r]
    return SimTrace(rows=rows)


def _forcing(x, rho, beta):
    out = np.zeros_like(x)
    live = rho > 0
    if np.any(x[live] <= 0):
        raise StepRejected("particle with rho > 0 reached x <= 0")
    out[live] = rho[live] / x[live] ** beta
    return out


def rhs_arrays(x, omega, rho, beta):
    """(dX, d omega, Q) for raw arrays; rho = 0 particles get no forcing whatever x is."""
    q = tail_sums(x, omega)
    return -x * q, _forcing(x, rho, beta), q


def rhs(cloud: ParticleCloud, beta: float):
    if np.any((cloud.rho > 0) & (cloud.positions <= 0)):
        raise ValueError("fatal: rho > 0 at x <= 0")
    dx, dw, _ = rhs_arrays(cloud.positions, cloud.omega, cloud.rho, beta)
    return dx, dw


def stable_dt(q, cfl):
    """cfl * min X/|dX/dt| = cfl / max Q over moving particles."""
    qmax = float(np.max(q))
    return math.inf if qmax <= 0 else cfl / qmax


def rk4_step(f: Callable, y, dt, k1=None):
    """Classical four-stage Runge-Kutta step for dy/dt = f(y)."""
    k1 = f(y) if k1 is None else k1
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _rk4(x, w, rho, beta, dt, k1=None):
    def f(y):
        dx, dw, _ = rhs_arrays(y[0], y[1], rho, beta)
        return np.stack([dx, dw])

    k1 = None if k1 is None else np.stack(k1)
    y = rk4_step(f, np.stack([x, w]), dt, k1)
    return y[0], y[1]


def _local_sup(cloud, delta):
    x = cloud.positions
    if delta <= x[0]:
        return 0.0
    j = np.searchsorted(x, delta, side="right")
    vals = cloud.omega[:j]
    edge = np.interp(delta, x, cloud.omega, left=0.0, right=0.0)
    return float(max(vals.max(initial=0.0), edge))


def step(state: SimState, dt: float, beta: float, bkm_delta: float | None = None, k1=None) -> SimState:
    """One RK4 step; raises StepRejected if particles cross or leave x >= 0."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    c = state.cloud
    xn, wn = _rk4(c.positions, c.omega, c.rho, beta, dt, k1)
    if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(wn))):
        raise StepRejected("non-finite state")
    if xn[0] < 0 or not np.all(np.diff(xn) > 0):
        raise StepRejected("particles crossed or left the half-line")
    if np.any(wn < 0):
        raise StepRejected("negative vorticity")
    new = c.replace(positions=xn, omega=wn)
    om_old, om_new = state.omega_max, float(wn.max())
    delta = bkm_delta if bkm_delta is not None else float(c.label[state.a_index])
    loc_old, loc_new = _local_sup(c, delta), _local_sup(new, delta)
    return SimState(
        t=state.t + dt,
        cloud=new,
        a_index=state.a_index,
        bkm=state.bkm + 0.5 * dt * (om_old + om_new),
        bkm_local=state.bkm_local + 0.5 * dt * (loc_old + loc_new),
        steps=state.steps + 1,
    )


def marked_index(cloud: ParticleCloud, a0: float) -> int:
    """Index of the particle whose initial label is closest to a0 (log distance)."""
    lab = cloud.label
    pos = lab > 0
    idx = np.flatnonzero(pos)
    return int(idx[np.argmin(np.abs(np.log(lab[pos] / a0)))])


def run(cloud0: ParticleCloud, config: SimConfig, monitors: dict | None = None, a0: float | None = None,
        keep_reports: bool = False, callback: Callable | None = None) -> SimTrace:
    """Advance until t_max, A(t) < A_stop, or max omega > omega_cap.

    ``monitors`` maps names to callables state -> ControlReport; each is
    evaluated on the initial state and after every accepted step.
    """
    monitors = monitors or {}
    if a0 is None:
        support = cloud0.positions[cloud0.omega > 0]
        a0 = float(support[0]) if support.size else float(cloud0.positions[1])
    state = SimState(t=0.0, cloud=cloud0, a_index=marked_index(cloud0, a0))
    trace = SimTrace(a0=float(cloud0.positions[state.a_index]))
    trace.monitors = {k: [] for k in monitors}
    trace.reports = {k: [] for k in monitors}

    def observe(st, dt, reason):
        trace.rows.append((st.t, dt, st.A, st.omega_max, st.bkm, REASONS[reason]))
        for name, fn in monitors.items():
            rep = fn(st)
            trace.monitors[name].append((st.t, rep.passed, rep.worst_margin))
            if keep_reports:
                trace.reports[name].append(rep)
        if config.snapshot_every and st.steps % config.snapshot_every == 0:
            trace.snapshots.append((st.steps, st.t, st.cloud))
        if callback is not None:
            callback(st)

    def finished(st):
        if st.A < config.A_stop:
            return "A_below_A_stop"
        if st.omega_max > config.omega_cap:
            return "omega_cap"
        if st.t >= config.t_max:
            return "t_max"
        return None

    reason = finished(state) or "running"
    observe(state, 0.0, reason)
    dt_cap = config.dt_init
    while reason == "running":
        if state.steps >= config.max_steps:
            reason = "stalled"
            break
        c = state.cloud
        k1x, k1w, q = rhs_arrays(c.positions, c.omega, c.rho, config.beta)
        remaining = config.t_max - state.t
        dt = min(stable_dt(q, config.cfl), dt_cap, remaining)
        while True:
            try:
                new = step(state, dt, config.beta, config.bkm_delta, k1=(k1x, k1w))
                break
            except StepRejected as err:
                dt /= 2
                log.debug("step rejected at t=%g (%s); dt -> %g", state.t, err, dt)
                if dt < DT_FLOOR:
                    trace.reason = "stalled"
                    trace.final = state
                    raise Stalled(f"dt fell below {DT_FLOOR} at t={state.t!r}", state) from err
        if dt == remaining:
            new.t = config.t_max
        state = new
        reason = finished(state) or "running"
        observe(state, dt, reason)
    if reason == "stalled":
        last = trace.rows[-1]
        trace.rows[-1] = last[:-1] + (REASONS["stalled"],)
    trace.reason = reason
    trace.final = state
    return trace
