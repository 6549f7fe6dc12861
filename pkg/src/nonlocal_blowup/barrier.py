"""Single-scale barrier construction for omega_t + u omega_x = rho/x^beta.

Suitably prepared data sit between the power-law barriers phi x^-p and
psi x^-q on [A0, 1] with p + q = beta.  A controlled solution keeps that
corridor on the moving window [A(t), 1], which forces the marked particle
A(t) into the origin before

    T* = A0^p / (phi b0 p).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .exact import ramp
from .report import ControlReport, Record, barrier_record, scalar_record
from .state import ParticleCloud, log_grid, sample_profile
from .velocity import compute_Q

LN2 = math.log(2.0)
LN4 = math.log(4.0)
SUM_TOL = 1e-12  # p + q = beta is an equality between floats
P_FLOOR = 1e-4
A0_SAFETY = 0.8
A0_MIN_EXPONENT = -300  # eps = A0/10 must stay a normal double


class InfeasibleParams(ValueError):
    """No admissible parameter pack; the message names the tightest violated inequality."""


def compute_b0_b1(p: float, q: float) -> tuple[float, float]:
    if not (0 < p < 1 and 0 < q < 1):
        raise ValueError(f"exponents must lie in (0, 1), got p={p}, q={q}")
    return min(1.0, p * LN2) / p, max(1.0, q * LN4) / q


@dataclass(frozen=True)
class BarrierParams:
    beta: float
    p: float
    q: float
    phi: float
    psi: float
    delta: float
    m: float
    A0: float
    eps: float

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v}")
        if not (0 < self.p < 1 and 0 < self.q < 1):
            raise ValueError(f"p, q must lie in (0, 1), got p={self.p}, q={self.q}")

    @property
    def b0(self):
        return compute_b0_b1(self.p, self.q)[0]

    @property
    def b1(self):
        return compute_b0_b1(self.p, self.q)[1]

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return BarrierParams(**d)

    def to_dict(self):
        d = asdict(self)
        d.update(b0=self.b0, b1=self.b1)
        return d

    @classmethod
    def from_dict(cls, d):
        fields = ("beta", "p", "q", "phi", "psi", "delta", "m", "A0", "eps")
        missing = [f for f in fields if f not in d]
        if missing:
            raise KeyError(f"parameter pack is missing {missing}")
        return cls(**{f: float(d[f]) for f in fields})


# Reference pack used throughout the tests and the acceptance suite.
P0 = BarrierParams(beta=1.0, p=0.2, q=0.8, phi=1.1875, psi=1.6, delta=0.19, m=1.0, A0=1e-8, eps=1e-9)


def upper_bound_time(params: BarrierParams) -> float:
    """T* = A0^p / (phi b0 p): no controlled solution lives this long."""
    return params.A0**params.p / (params.phi * params.b0 * params.p)


def verify_cond_params(params: BarrierParams) -> ControlReport:
    """Check the five admissibility lines for a parameter pack.

    line1  0 < p < q < beta <= 1 and p + q = beta
    line2  m/(b0 q) < phi psi < 1/(m b1 p)
    line3  A0^p/(phi b0 p) < log(3/2)/(psi log 4)
    line4  m A0^p/(phi b0 p) < delta
    line5  0 < eps < A0 < 1 and phi < psi - delta
    """
    P = params
    b0, b1 = P.b0, P.b1
    rep = ControlReport()

    order = min(P.p, P.q - P.p, P.beta - P.q)
    sum_gap = SUM_TOL - abs(P.p + P.q - P.beta)
    ok1 = order > 0 and P.beta <= 1 and sum_gap >= 0
    rep.records.append(Record("line1", min(order, 1.0 - P.beta, sum_gap), ok1, lhs=P.p + P.q, rhs=P.beta))

    lo, hi, c = P.m / (b0 * P.q), 1.0 / (P.m * b1 * P.p), P.phi * P.psi
    r_lo = scalar_record("line2", lo, c)
    r_hi = scalar_record("line2", c, hi)
    rep.records.append(r_lo if r_lo.margin <= r_hi.margin else r_hi)

    tstar = upper_bound_time(P)
    rep.records.append(scalar_record("line3", tstar, math.log(1.5) / (P.psi * LN4)))
    rep.records.append(scalar_record("line4", P.m * tstar, P.delta))

    r5 = scalar_record("line5", P.phi, P.psi - P.delta)
    eps_gap = min(P.A0 - P.eps, 1.0 - P.A0)
    if eps_gap <= 0:
        r5 = Record("line5", eps_gap, False, lhs=P.eps, rhs=P.A0)
    rep.records.append(r5)
    return rep


def _bracket(m, beta, p):
    q = beta - p
    b0, b1 = compute_b0_b1(p, q)
    return m / (b0 * q), 1.0 / (m * b1 * p)


def select_params(m: float, beta: float) -> BarrierParams:
    """Deterministic admissible pack for given m >= 1 and beta in (0, 1].

    p runs over beta/4, beta/8, ... until the phi*psi bracket opens;
    phi*psi is put at its midpoint c, psi = 2 max(sqrt c, 1), phi = c/psi,
    delta = (psi - phi)/4, and A0 is the largest power of ten meeting
    lines 3-4 with a 20% margin.
    """
    if not m >= 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    p = beta / 4
    tightest = None
    while p >= P_FLOOR:
        lo, hi = _bracket(m, beta, p)
        if lo < hi:
            break
        tightest = (p, lo, hi)
        p /= 2
    else:
        p_, lo, hi = tightest
        raise InfeasibleParams(
            f"m/(b0 q) < 1/(m b1 p) fails for every p >= {P_FLOOR}; "
            f"at p={p_:.3g}: {lo:.6g} >= {hi:.6g}"
        )
    q = beta - p
    b0, _ = compute_b0_b1(p, q)
    c = 0.5 * (lo + hi)
    psi = 2.0 * max(math.sqrt(c), 1.0)
    phi = c / psi
    delta = (psi - phi) / 4
    # A0^p/(phi b0 p) <= 0.8 * min(log(3/2)/(psi log 4), delta/m)
    budget = A0_SAFETY * min(math.log(1.5) / (psi * LN4), delta / m) * phi * b0 * p
    exponent = math.floor(math.log10(budget) / p)
    if exponent < A0_MIN_EXPONENT:
        raise InfeasibleParams(
            f"lines 3-4 need A0 <= 1e{exponent} (p={p:.3g}), below the double-precision range"
        )
    A0 = 10.0 ** min(exponent, -1)
    params = BarrierParams(beta=beta, p=p, q=q, phi=phi, psi=psi, delta=delta, m=m, A0=A0, eps=A0 / 10)
    rep = verify_cond_params(params)
    if not rep.passed:  # pragma: no cover - guarded by construction
        raise InfeasibleParams(rep.summary())
    return params


RHO_TAPER = 0.01


def prepared_profiles(params: BarrierParams, rho_taper: float = RHO_TAPER):
    """Callables (omega0, rho0) of the canonical suitably prepared data.

    omega0 = sqrt(phi psi) x^(-beta/2) on [A0, 1], sqrt(phi psi) on [1, 3],
    smoothstep-ramped to zero on [eps, A0] and [3, 4].  rho0 = 1 on
    [A0, 2], ramped to zero on [A0 (1 - rho_taper), A0] and [2, 3].

    The inner rho ramp is kept narrow on purpose: forced particles left of
    A0 are swept into the origin ahead of the marked particle, and a wide
    ramp lets their vorticity overflow long before A(t) gets small.
    """
    P = params
    amp = math.sqrt(P.phi * P.psi)
    half = (P.p + P.q) / 2

    def omega0(x):
        x = np.asarray(x, dtype=np.float64)
        core = amp * np.where(x < 1, np.maximum(x, P.eps) ** -half, 1.0)
        return core * ramp(x, P.eps, P.A0) * (1 - ramp(x, 3.0, 4.0))

    def rho0(x):
        x = np.asarray(x, dtype=np.float64)
        return ramp(x, max(P.eps, P.A0 * (1 - rho_taper)), P.A0) * (1 - ramp(x, 2.0, 3.0))

    return omega0, rho0


def prepared_grid(lo_support, hi_support, n, pins=()):
    """Log grid over [lo, hi] with one extra node just outside each end.

    Nodes nearest to each value in ``pins`` are moved onto it, so marked
    particles (A0) start exactly where the theory puts them.
    """
    if n < 6:
        raise ValueError("need at least 6 particles")
    inner = log_grid(lo_support, hi_support, n - 2)
    for v in pins:
        i = int(np.argmin(np.abs(np.log(inner / v))))
        inner[i] = v
    if not np.all(np.diff(inner) > 0):
        raise ValueError("grid too coarse to pin the requested nodes")
    return np.concatenate([[lo_support * (1 - 1e-3)], inner, [hi_support * (1 + 1e-3)]])


def make_prepared_data(params: BarrierParams, n_particles: int = 4096, rho_taper: float = RHO_TAPER) -> ParticleCloud:
    P = params
    amp = math.sqrt(P.phi * P.psi)
    # corridor at x = 1 must contain the profile value; equivalent to restr_p holding
    assert P.phi < amp < P.psi - P.delta, "empty barrier corridor"
    omega0, rho0 = prepared_profiles(P, rho_taper)
    grid = prepared_grid(P.eps, 4.0, n_particles, pins=(P.A0, 1.0, 2.0, 3.0))
    return sample_profile(omega0, rho0, grid)


def _support_record(id, cloud, values, lo, hi):
    """Support of the piecewise-linear interpolant of ``values`` must lie in [lo, hi]."""
    x = cloud.positions
    nz = np.flatnonzero(values > 0)
    if nz.size == 0:
        return Record(id, 0.0, True, interval=(lo, hi), vacuous=True)
    left = x[max(nz[0] - 1, 0)]
    right = x[min(nz[-1] + 1, x.size - 1)]
    margin = min(left - lo, hi - right)
    return Record(id, float(margin), bool(margin >= 0), interval=(lo, hi),
                  witness=float(left if left - lo < hi - right else right))


def _window(x, lo, hi):
    return (x >= lo) & (x <= hi)


def verify_suitably_prepared(cloud: ParticleCloud, params: BarrierParams) -> ControlReport:
    """Node-wise check of the eight preparedness conditions (strict, zero slack)."""
    P = params
    x, w, r = cloud.positions, cloud.omega, cloud.rho
    rep = ControlReport(t=0.0)
    neg = float(min(w.min(), r.min()))
    rep.records.append(Record("nonnegative", neg, neg >= 0))
    rep.records.append(_support_record("supp_omega", cloud, w, P.eps, 4.0))
    rep.records.append(_support_record("supp_rho", cloud, r, P.eps, 3.0))

    m = _window(x, P.A0, 1.0)
    rep.records.append(barrier_record("omega_upper", x[m], w[m], P.psi * x[m] ** -P.q, "upper", (P.A0, 1.0)))
    m = _window(x, 1.0, 4.0)
    rep.records.append(barrier_record("omega_upper_flat", x[m], w[m], P.psi - P.delta, "upper", (1.0, 4.0)))
    m = _window(x, P.A0, 1.0)
    rep.records.append(barrier_record("omega_lower", x[m], w[m], P.phi * x[m] ** -P.p, "lower", (P.A0, 1.0)))
    m = _window(x, 1.0, 3.0)
    rep.records.append(barrier_record("omega_lower_flat", x[m], w[m], P.phi, "lower", (1.0, 3.0)))
    rep.records.append(barrier_record("rho_upper", x, r, P.m, "upper", (0.0, math.inf), strict=False))
    m = _window(x, P.A0, 2.0)
    rep.records.append(barrier_record("rho_lower", x[m], r[m], 1.0 / P.m, "lower", (P.A0, 2.0), strict=False))
    return rep


def q_bounds_report(cloud: ParticleCloud, params: BarrierParams, a_left: float, slack=0.0, field=None) -> ControlReport:
    """b0 phi x^-p <= Q <= b1 psi x^-q on [a_left, 1] and Q <= psi log(4/x) on [1, 4]."""
    P = params
    field = field or compute_Q(cloud)
    x, Q = cloud.positions, field.q_at_nodes
    rep = ControlReport()
    lo = max(a_left, x[0])
    m = _window(x, lo, 1.0)
    rep.records.append(barrier_record("Q_lower", x[m], Q[m], P.b0 * P.phi * x[m] ** -P.p, "lower",
                                      (lo, 1.0), slack=slack, strict=False))
    rep.records.append(barrier_record("Q_upper", x[m], Q[m], P.b1 * P.psi * x[m] ** -P.q, "upper",
                                      (lo, 1.0), slack=slack, strict=False))
    m = _window(x, 1.0, 4.0)
    xm = x[m]
    bound = P.psi * np.log(4.0 / xm)
    # absolute gap: the bound vanishes at x = 4 where Q does too
    gap = bound - Q[m]
    i = int(np.argmin(gap)) if xm.size else 0
    if xm.size:
        ok = gap[i] >= -slack * max(1.0, abs(bound[i]))
        rep.records.append(Record("Q_log", float(gap[i]), bool(ok), interval=(1.0, 4.0), witness=float(xm[i]),
                                  lhs=float(Q[m][i]), rhs=float(bound[i])))
    else:
        rep.records.append(Record("Q_log", math.inf, True, interval=(1.0, 4.0), vacuous=True))
    return rep
