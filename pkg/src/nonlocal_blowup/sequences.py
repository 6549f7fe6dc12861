"""Multiscale barriers for beta = 1.

Scales lam_n = lam0 exp(-L n^2) split (0, lam0] into I_n = [lam_n, lam_{n-1}].
On I_n the corridor is phi_n x^-p_n < omega < psi_n x^-q_n with
p_n = 1/2 - eps_n, q_n = 1/2 + eps_n, eps_n = eps1 exp(-(n-1)), and

    phi_n = phi_1 prod_{j=2..n} lam_{j-1}^(eps_{j-1} - eps_j),   psi_n = 1/phi_n,

which makes the relay inequalities at every interface hold with equality.
Per-level arrays are indexed by n directly (index 0 holds NaN except for
``lam``, where lam[0] = lam0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exact import ramp
from .report import ControlReport, Record, barrier_record
from .state import ParticleCloud, sample_profile
from .velocity import compute_Q

IDENTITY_TOL = 1e-12  # construction identities hold to round-off
LIMIT_TOL = 1e-3
TAIL_TERMS = 400


class SequenceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BarrierSequences:
    phi1: float
    eps1: float
    lam_m2: float
    lam_m1: float
    lam0: float
    L: float
    C: float
    N: int
    lam: np.ndarray
    eps: np.ndarray
    p: np.ndarray
    q: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    F: float
    F_bracket: np.ndarray
    mu: np.ndarray

    @property
    def psi1(self):
        return 1.0 / self.phi1

    @property
    def m_low(self):
        return 1.0 - self.mu

    @property
    def M_up(self):
        return 1.0 + self.mu

    def inputs(self):
        return dict(phi1=self.phi1, eps1=self.eps1, lam_m2=self.lam_m2, lam_m1=self.lam_m1,
                    lam0=self.lam0, L=self.L, C=self.C, N=self.N)

    def to_dict(self):
        levels = []
        for n in range(1, self.N + 1):
            levels.append({
                "n": n, "lam": self.lam[n], "eps": self.eps[n], "p": self.p[n], "q": self.q[n],
                "phi": self.phi[n], "psi": self.psi[n], "mu": self.mu[n],
                "m": 1 - self.mu[n], "M": 1 + self.mu[n],
                "F_bracket": None if n < 2 else self.F_bracket[n],
            })
        return {**self.inputs(), "psi1": self.psi1, "F": self.F, "levels": levels}

    def level_of(self, x):
        """n with x in I_n = [lam_n, lam_{n-1}] (0 above lam0, N+1 below lam_N)."""
        lam_desc = self.lam[: self.N + 1]
        return np.searchsorted(-lam_desc, -np.asarray(x), side="left")


S0_INPUTS = dict(phi1=0.8, eps1=0.05, lam_m2=0.9, lam_m1=0.85, lam0=0.8, L=5.0, C=4.0, N=8)


def _bracket_terms(n, lam, p, q, phi, psi):
    """Three terms of the F bracket at level n >= 2 with psi_0 := psi_1, q_0 := q_1."""
    q2 = q[n - 2] if n > 2 else q[1]
    psi2 = psi[n - 2] if n > 2 else psi[1]
    l1 = lam[n - 1]
    t1 = q[n] * psi2 / (q2 * psi[n]) * l1 ** (q[n] - q[n - 1]) * l1 ** (q[n - 1] - q2)
    t2 = p[n] * phi[n - 1] / (p[n - 1] * phi[n]) * l1 ** (p[n] - p[n - 1])
    t3 = q[n] * psi[1] / psi[n]
    return t1, t2, t3


def compute_F(seq_or_arrays, tail=5) -> float:
    """max over n = 2..N of the bracket; the tail of the bracket must be nonincreasing."""
    s = seq_or_arrays
    N = s.N
    br = np.full(N + 1, np.nan)
    for n in range(2, N + 1):
        br[n] = sum(_bracket_terms(n, s.lam, s.p, s.q, s.phi, s.psi))
    k = min(tail, N - 2)
    last = br[N - k: N + 1]
    if k > 0 and np.any(np.diff(last) > 0):
        raise SequenceError(f"sup not stabilized: bracket tail {last.tolist()} is not nonincreasing")
    return float(np.nanmax(br[2:]))


def _bracket_array(s):
    br = np.full(s.N + 1, np.nan)
    for n in range(2, s.N + 1):
        br[n] = sum(_bracket_terms(n, s.lam, s.p, s.q, s.phi, s.psi))
    return br


@dataclass
class _Arrays:
    N: int
    lam: np.ndarray
    p: np.ndarray
    q: np.ndarray
    phi: np.ndarray
    psi: np.ndarray


def build_sequences(phi1, eps1, lam_m2, lam_m1, lam0, L, C, N, psi1=None) -> BarrierSequences:
    """Fill every per-level array; mu_1 = log(lam_-2/lam0), mu_n (n >= 2) from F and C.

    ``psi1`` defaults to 1/phi1; passing another value is only meant for
    probing how F reacts when phi_1 psi_1 = 1 is broken.
    """
    if not 0 < lam0 < lam_m1 < lam_m2 < 1:
        raise SequenceError(f"need 0 < lam0 < lam_-1 < lam_-2 < 1, got {lam0}, {lam_m1}, {lam_m2}")
    if not 0 < phi1 <= 1:
        raise SequenceError(f"phi1 must lie in (0, 1], got {phi1}")
    if not 0 < eps1 < 0.25:
        raise SequenceError(f"eps1 must lie in (0, 1/4), got {eps1}")
    if not L >= 1:
        raise SequenceError(f"L must be >= 1, got {L}")
    if not C > 0:
        raise SequenceError(f"C must be positive, got {C}")
    if int(N) != N or N < 3:
        raise SequenceError(f"N must be an integer >= 3, got {N}")
    N = int(N)
    n = np.arange(N + 1, dtype=np.float64)
    lam = lam0 * np.exp(-L * n**2)
    if not lam[N] >= np.finfo(np.float64).tiny:
        raise SequenceError(f"lam_N = lam0 exp(-L N^2) underflows double precision (L={L}, N={N})")
    eps = np.full(N + 1, np.nan)
    eps[1:] = eps1 * np.exp(-(n[1:] - 1))
    p, q = 0.5 - eps, 0.5 + eps
    psi1 = 1.0 / phi1 if psi1 is None else psi1
    phi = np.full(N + 1, np.nan)
    psi = np.full(N + 1, np.nan)
    phi[1], psi[1] = phi1, psi1
    for k in range(2, N + 1):
        step = lam[k - 1] ** (eps[k - 1] - eps[k])
        phi[k] = phi[k - 1] * step
        psi[k] = psi[k - 1] / step
    arrays = _Arrays(N, lam, p, q, phi, psi)
    F = compute_F(arrays)
    mu = np.full(N + 1, np.nan)
    mu[1] = math.log(lam_m2 / lam0)
    for k in range(2, N + 1):
        mu[k] = (C * F * (lam[k - 1] / lam[k - 2]) ** q[1]
                 + C * math.log(lam_m2 / lam0) * lam0 ** -q[1] * lam[k - 1] ** q[k])
    for a in (lam, eps, p, q, phi, psi, mu):
        a.setflags(write=False)
    br = _bracket_array(arrays)
    br.setflags(write=False)
    return BarrierSequences(phi1, eps1, lam_m2, lam_m1, lam0, float(L), float(C), N,
                            lam, eps, p, q, phi, psi, F, br, mu)


def S0() -> BarrierSequences:
    return build_sequences(**S0_INPUTS)


def phi_tail(seq: BarrierSequences, start: int, stop: int | None = None) -> float:
    """sum_{j=start..stop} |log lam_{j-1}| (eps_{j-1} - eps_j), extending the closed forms past N."""
    stop = stop if stop is not None else start + TAIL_TERMS
    j = np.arange(start, stop + 1, dtype=np.float64)
    log_lam = math.log(seq.lam0) - seq.L * (j - 1) ** 2
    d_eps = seq.eps1 * np.exp(-(j - 2)) * (1 - math.exp(-1))
    return float(np.sum(np.abs(log_lam) * d_eps))


def phi_limit(seq: BarrierSequences) -> float:
    return seq.phi[seq.N] * math.exp(-phi_tail(seq, seq.N + 1))


@dataclass
class SequenceReport(ControlReport):
    phi_inf: float = float("nan")
    C_max: float = float("inf")

    def to_dict(self):
        d = super().to_dict()
        d.update(phi_inf=float(self.phi_inf), phi_inf_positive=bool(self.phi_inf > 0), C_max=float(self.C_max))
        return d


def _limit_records(id, dist, first, N, tol):
    """Monotone decay of dist[n] (n >= first) plus dist[N] <= tol."""
    out = []
    for n in range(first, N + 1):
        margin = math.inf if n == first else dist[n - 1] - dist[n]
        if n == N:
            margin = min(margin, tol - dist[n])
        out.append(Record(id, float(margin), bool(margin >= 0), lhs=float(dist[n]), level=n))
    return out


def _relative(lhs, rhs):
    return (lhs - rhs) / abs(rhs)


def verify_sequence_conditions(seq: BarrierSequences, limit_tol: float = LIMIT_TOL) -> SequenceReport:
    """Every sequence condition at every level with signed margins."""
    s, N = seq, seq.N
    rep = SequenceReport()
    R = rep.records
    for n in range(1, N + 1):
        gap = abs(s.phi[n] * s.psi[n] - 1.0)
        R.append(Record("c__1", IDENTITY_TOL - gap, gap <= IDENTITY_TOL, lhs=s.phi[n] * s.psi[n], rhs=1.0, level=n))

    ratio = np.full(N + 1, np.nan)
    ratio[1:] = s.lam[1:] / s.lam[:-1]
    R.extend(_limit_records("c_1", ratio, 1, N, limit_tol))
    dist = np.full(N + 1, np.nan)
    for n in range(2, N + 1):
        dist[n] = abs(s.lam[n] ** (s.q[n] - s.q[n - 1]) - 1.0)
    R.extend(_limit_records("c_0", dist, 2, N, limit_tol))

    for n in range(2, N + 1):
        l1 = s.lam[n - 1]
        v1 = s.q[n] / s.q[n - 1] * s.psi[n - 1] / s.psi[n] * l1 ** (s.q[n] - s.q[n - 1])
        R.append(Record("c1", 1.0 - v1, v1 <= 1.0 + IDENTITY_TOL, lhs=v1, rhs=1.0, level=n))
        v2 = s.p[n] / s.p[n - 1] * s.phi[n - 1] / s.phi[n] * l1 ** (s.p[n] - s.p[n - 1])
        R.append(Record("c2", v2 - 1.0, v2 >= 1.0 - IDENTITY_TOL, lhs=v2, rhs=1.0, level=n))

    lo = s.phi[1] * s.lam0 ** -s.p[1]
    hi = s.psi[1] * s.lam0 ** -s.q[1]
    R.append(Record("relay_start", hi - lo, hi > lo, lhs=lo, rhs=hi, level=1))
    for n in range(2, N + 1):
        l1 = s.lam[n - 1]
        a, b = s.phi[n - 1] * l1 ** -s.p[n - 1], s.phi[n] * l1 ** -s.p[n]
        m = _relative(a, b)
        R.append(Record("relay1", m, m >= -IDENTITY_TOL, lhs=a, rhs=b, level=n))
        a, b = s.psi[n - 1] * l1 ** -s.q[n - 1], s.psi[n] * l1 ** -s.q[n]
        m = _relative(b, a)
        R.append(Record("relay2", m, m >= -IDENTITY_TOL, lhs=a, rhs=b, level=n))

    c_max = math.inf
    for n in range(1, N + 1):
        mu, e = s.mu[n], s.eps[n]
        if mu < 1:
            left = s.p[n] / ((1 - mu) * (1 - s.p[n]))
            m = min(1 - left, s.q[n] / ((1 + mu) * (1 - s.q[n])) - 1)
        else:
            left, m = math.inf, -math.inf
        right = s.q[n] / ((1 + mu) * (1 - s.q[n]))
        R.append(Record("trapping", float(m), bool(m > 0), lhs=float(left), rhs=float(right), level=n))
        rhs = 4 * e
        lhs = mu + 2 * mu * e
        R.append(Record("cond_trap_1", float(rhs - lhs), bool(lhs < rhs), lhs=float(lhs), rhs=float(rhs), level=n))
        if n >= 2:  # mu_n is proportional to C for n >= 2
            c_max = min(c_max, s.C * (4 * e / (1 + 2 * e)) / mu)
    rep.phi_inf = phi_limit(s)
    rep.C_max = c_max
    return rep


def choose_L(L_start=1.0, L_max=1024.0, **inputs) -> BarrierSequences:
    """Double L until cond_trap_1 holds at every level n <= N."""
    L = L_start
    while L <= L_max:
        seq = build_sequences(**{**inputs, "L": L})
        rep = verify_sequence_conditions(seq)
        if all(r.passed for r in rep.records if r.id == "cond_trap_1"):
            return seq
        L *= 2
    raise SequenceError(f"cond_trap_1 still fails at L = {L / 2}")


def multiscale_profiles(seq: BarrierSequences, A0: float, delta: float, rho_taper: float = 0.01):
    """Callables (omega0, rho0) for the midline data of the multiscale corridor.

    omega0 = x^-1/2 on [A0, lam0] (phi_n psi_n = 1 puts the corridor midline
    there on every level), lam0^-1/2 on [lam0, lam_-2], ramped to zero on
    [eps, A0] (eps = A0/10) and [lam_-2, lam_-2 + delta].  rho0 = 1 on
    [A0, lam_-2], ramped on [A0 (1 - rho_taper), A0] and [lam_-2, lam_-2 + delta].
    """
    eps = A0 / 10
    top = seq.lam_m2 + delta
    flat = seq.lam0 ** -0.5

    def omega0(x):
        x = np.asarray(x, dtype=np.float64)
        core = np.where(x < seq.lam0, np.maximum(x, eps) ** -0.5, flat)
        return core * ramp(x, eps, A0) * (1 - ramp(x, seq.lam_m2, top))

    def rho0(x):
        x = np.asarray(x, dtype=np.float64)
        return ramp(x, A0 * (1 - rho_taper), A0) * (1 - ramp(x, seq.lam_m2, top))

    return omega0, rho0


def corridor_report(seq: BarrierSequences, A0: float, delta: float) -> ControlReport:
    """Conditions the data generator needs: nonempty corridors and a valid delta."""
    rep = ControlReport()
    rep.extend(ControlReport([r for r in verify_sequence_conditions(seq).records
                              if r.id in ("c__1", "relay_start", "relay1", "relay2")]))
    lo = seq.phi[1] * seq.lam0 ** -seq.p[1]
    hi = seq.psi[1] * seq.lam0 ** -seq.q[1] - delta
    rep.records.append(Record("delta", hi - lo, hi > lo and delta > 0, lhs=lo, rhs=hi))
    flat = seq.lam0 ** -0.5
    rep.records.append(Record("outer_flat_upper", hi - flat, flat < hi, lhs=flat, rhs=hi))
    ok = 0 < A0 < seq.lam0
    rep.records.append(Record("A0_range", min(A0, seq.lam0 - A0), ok, lhs=A0, rhs=seq.lam0))
    return rep


def make_prepared_data_multiscale(seq: BarrierSequences, A0: float, delta: float = 0.05,
                                  n_particles: int = 4096, rho_taper: float = 0.01) -> ParticleCloud:
    from .barrier import prepared_grid

    pre = corridor_report(seq, A0, delta)
    if not pre.passed:
        raise SequenceError("cannot build multiscale data:\n" + pre.summary())
    omega0, rho0 = multiscale_profiles(seq, A0, delta, rho_taper)
    top = seq.lam_m2 + delta
    pins = [A0, seq.lam0, seq.lam_m1, seq.lam_m2]
    pins += [l for l in seq.lam[1:] if A0 / 10 < l < A0]
    pins += [l for l in seq.lam[1:] if A0 < l < seq.lam0]
    grid = prepared_grid(A0 / 10, top, n_particles, pins=sorted(pins))
    return sample_profile(omega0, rho0, grid)


def verify_prepared_multiscale(cloud: ParticleCloud, seq: BarrierSequences, A0: float, delta: float) -> ControlReport:
    """Node-wise check of the multiscale preparedness conditions (strict, zero slack)."""
    from .barrier import _support_record

    x, w, r = cloud.positions, cloud.omega, cloud.rho
    eps = A0 / 10
    top = seq.lam_m2 + delta
    rep = ControlReport(t=0.0)
    neg = float(min(w.min(), r.min()))
    rep.records.append(Record("nonnegative", neg, neg >= 0))
    rep.records.append(_support_record("supp_omega", cloud, w, eps, top))
    rep.records.append(_support_record("supp_rho", cloud, r, eps, top))
    for n in range(1, seq.N + 1):
        lo, hi = max(seq.lam[n], A0), seq.lam[n - 1]
        m = (x >= lo) & (x <= hi) if lo <= hi else np.zeros_like(x, dtype=bool)
        rep.records.append(barrier_record("level_lower", x[m], w[m], seq.phi[n] * x[m] ** -seq.p[n], "lower", (lo, hi), level=n))
        rep.records.append(barrier_record("level_upper", x[m], w[m], seq.psi[n] * x[m] ** -seq.q[n], "upper", (lo, hi), level=n))
    m = (x >= seq.lam0) & (x <= top)
    rep.records.append(barrier_record("outer_upper", x[m], w[m], seq.psi[1] * seq.lam0 ** -seq.q[1] - delta, "upper", (seq.lam0, top)))
    m = (x >= seq.lam0) & (x <= seq.lam_m1)
    rep.records.append(barrier_record("outer_lower", x[m], w[m], seq.phi[1] * seq.lam0 ** -seq.q[1], "lower", (seq.lam0, seq.lam_m1)))
    m = (x >= A0) & (x <= seq.lam_m2)
    gap = np.abs(r[m] - 1.0)
    worst = float(gap.max()) if gap.size else 0.0
    rep.records.append(Record("rho_one", -worst, worst == 0.0, interval=(A0, seq.lam_m2)))
    return rep


def check_Q_bounds_multiscale(cloud: ParticleCloud, seq: BarrierSequences, a_left: float | None = None,
                              slack: float = 0.0, level_floor: float | None = None, field=None) -> ControlReport:
    """(phi_n/p_n) m_n x^-p_n <= Q <= (psi_n/q_n) M_n x^-q_n on every I_n above a_left."""
    field = field or compute_Q(cloud)
    x, Q = cloud.positions, field.q_at_nodes
    a_left = x[0] if a_left is None else a_left
    floor = level_floor if level_floor is not None else 0.0
    rep = ControlReport()
    for n in range(1, seq.N + 1):
        lo, hi = max(seq.lam[n], a_left), seq.lam[n - 1]
        if seq.lam[n - 1] < floor:
            break
        m = (x >= lo) & (x <= hi) if lo <= hi else np.zeros_like(x, dtype=bool)
        xm = x[m]
        low = seq.phi[n] / seq.p[n] * (1 - seq.mu[n]) * xm ** -seq.p[n]
        up = seq.psi[n] / seq.q[n] * (1 + seq.mu[n]) * xm ** -seq.q[n]
        rep.records.append(barrier_record("Q_lower", xm, Q[m], low, "lower", (lo, hi), slack=slack, strict=False, level=n))
        rep.records.append(barrier_record("Q_upper", xm, Q[m], up, "upper", (lo, hi), slack=slack, strict=False, level=n))
    return rep
