"""Stationary singular solutions omega = k x^(-beta/2), rho = k^2 and their truncations.

Integrating u = -x int_x^inf omega/y dy for omega = k y^(-beta/2) gives

    Q = (2k/beta) x^(-beta/2),    u = -(2k/beta) x^(1 - beta/2)

so for beta = 1 the velocity is u = -2k sqrt(x).  The value -k sqrt(x)
(without the factor 2) leaves a defect of -k^2/(2x) in the omega
equation; ``printed_velocity_beta1`` is kept only so the tests can
demonstrate that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SingularProfile:
    k: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


def _positive(x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("the singular profile is only defined for x > 0")
    return x


def exact_omega(prof: SingularProfile, x):
    return prof.k * _positive(x) ** (-prof.beta / 2)


def exact_rho(prof: SingularProfile):
    return prof.k**2


def exact_Q(prof: SingularProfile, x):
    return (2 * prof.k / prof.beta) * _positive(x) ** (-prof.beta / 2)


def exact_u(prof: SingularProfile, x):
    return -(2 * prof.k / prof.beta) * _positive(x) ** (1 - prof.beta / 2)


def printed_velocity_beta1(prof: SingularProfile, x):
    """-k sqrt(x): does NOT solve the system (regression guard, see module docstring)."""
    return -prof.k * np.sqrt(_positive(x))


def _d1(f, z, h):
    # fourth-order central stencil
    return (-f(z + 2 * h) + 8 * f(z + h) - 8 * f(z - h) + f(z - 2 * h)) / (12 * h)


def pde_residual(omega_fn, rho_fn, u_fn, beta, x, t, h):
    """Finite-difference residuals (omega_t + u omega_x - rho/x^beta, rho_t + u rho_x).

    All three callables take (x, t).  Derivatives use the five-point
    central stencil, so the residual of an exact solution is O(h^4)
    up to round-off.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if x - 2 * h <= 0:
        raise ValueError(f"stencil leaves the domain x > 0 (x={x}, h={h})")
    om_t = _d1(lambda s: omega_fn(x, s), t, h)
    om_x = _d1(lambda z: omega_fn(z, t), x, h)
    rh_t = _d1(lambda s: rho_fn(x, s), t, h)
    rh_x = _d1(lambda z: rho_fn(z, t), x, h)
    u = u_fn(x, t)
    res_omega = om_t + u * om_x - rho_fn(x, t) / x**beta
    res_rho = rh_t + u * rh_x
    return float(res_omega), float(res_rho)


def exact_residual(prof: SingularProfile, x, h, t=0.0, velocity=None):
    """Residual of the stationary solution; ``velocity`` overrides u(x) for defect checks."""
    vel = velocity or (lambda z: exact_u(prof, z))
    return pde_residual(
        lambda z, s: exact_omega(prof, z),
        lambda z, s: exact_rho(prof),
        lambda z, s: vel(z),
        prof.beta, x, t, h,
    )


def smoothstep(s):
    """C^1 cubic ramp 3s^2 - 2s^3, clamped to [0, 1]."""
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def ramp(x, lo, hi):
    """0 below lo, 1 above hi, smoothstep in between."""
    return smoothstep((np.asarray(x, dtype=np.float64) - lo) / (hi - lo))


def truncated_profile(prof: SingularProfile, a, b, taper):
    """C^1 cut-off of the singular profile to [a, b].

    The exact profile is kept on the core [a(1+taper), b(1-taper)]; on the
    two bands next to a and b it is multiplied by a smoothstep ramp.  rho
    equals k^2 on the same core with the same ramps.  Returns vectorised
    callables (omega_fn, rho_fn) of x.
    """
    if not 0 < a < b:
        raise ValueError(f"need 0 < a < b, got {a}, {b}")
    if not 0 < taper < 0.5:
        raise ValueError(f"taper must lie in (0, 1/2), got {taper}")
    lo, hi = a * (1 + taper), b * (1 - taper)
    if lo >= hi:
        raise ValueError(f"degenerate core [{lo}, {hi}]")

    def window(x):
        x = np.asarray(x, dtype=np.float64)
        return ramp(x, a, lo) * (1 - ramp(x, hi, b))

    def omega_fn(x):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        m = (x > a) & (x < b)
        out[m] = prof.k * x[m] ** (-prof.beta / 2) * window(x[m])
        return out

    def rho_fn(x):
        return exact_rho(prof) * window(x)

    omega_fn.core = rho_fn.core = (lo, hi)
    return omega_fn, rho_fn
