"""Nonlocal velocity u(x) = -x Q(x), Q(x) = int_x^inf omega(y)/y dy.

omega is the piecewise-linear interpolant of the cloud, so on each cell
[y0, y1] the integrand is (a + b y)/y and integrates exactly to
a log(y1/y0) + b (y1 - y0).  Written in terms of nodal values with
h = (y1 - y0)/y0 this is

    omega0 * log1p(h) + (omega1 - omega0) * (1 - log1p(h)/h)

which stays accurate for both tiny cells (h -> 0) and cells reaching
down towards y = 0 (h -> inf).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .state import ParticleCloud, interp_omega

_SERIES_CUTOFF = 1e-3


def _one_minus_log1p_over(h):
    """1 - log1p(h)/h, with a series branch for small h where it cancels."""
    h = np.asarray(h, dtype=np.float64)
    out = np.empty_like(h)
    small = h < _SERIES_CUTOFF
    hs = h[small]
    out[small] = hs * (1 / 2 - hs * (1 / 3 - hs * (1 / 4 - hs * (1 / 5 - hs / 6))))
    hb = h[~small]
    out[~small] = 1.0 - np.log1p(hb) / hb
    return out


def cell_integrals(x, omega):
    """Exact integral of the linear interpolant of omega divided by y on every cell."""
    x = np.asarray(x, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    x0, x1 = x[:-1], x[1:]
    w0, w1 = omega[:-1], omega[1:]
    out = np.empty(x0.size)
    at_origin = x0 == 0
    # (a + b y)/y with a = 0 on a cell touching the origin: only b*y survives
    out[at_origin] = w1[at_origin]
    pos = ~at_origin
    h = (x1[pos] - x0[pos]) / x0[pos]
    out[pos] = w0[pos] * np.log1p(h) + (w1[pos] - w0[pos]) * _one_minus_log1p_over(h)
    return out


def tail_sums(x, omega):
    """Q at every node: right-to-left suffix sum of the cell integrals."""
    cells = cell_integrals(x, omega)
    q = np.zeros(np.size(x))
    q[:-1] = np.cumsum(cells[::-1])[::-1]
    return q


@dataclass(frozen=True, eq=False)
class VelocityField:
    q_at_nodes: np.ndarray
    cloud: ParticleCloud

    def Q(self, x):
        """Q at arbitrary points, exact for the piecewise-linear omega."""
        scalar = np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if np.any(x < 0):
            raise ValueError("Q is defined for x >= 0 only")
        pos = self.cloud.positions
        w = self.cloud.omega
        out = np.zeros_like(x)
        below = x <= pos[0]
        out[below] = self.q_at_nodes[0]
        inside = ~below & (x < pos[-1])
        xi = x[inside]
        j = np.searchsorted(pos, xi, side="right") - 1
        y1 = pos[j + 1]
        wx = interp_omega(self.cloud, xi)
        h = (y1 - xi) / xi
        partial = wx * np.log1p(h) + (w[j + 1] - wx) * _one_minus_log1p_over(h)
        out[inside] = partial + self.q_at_nodes[j + 1]
        return float(out[0]) if scalar else out

    def u(self, x):
        return -np.asarray(x, dtype=np.float64) * self.Q(x)

    @property
    def u_at_nodes(self):
        return -self.cloud.positions * self.q_at_nodes


def compute_Q(cloud: ParticleCloud) -> VelocityField:
    q = tail_sums(cloud.positions, cloud.omega)
    q.setflags(write=False)
    return VelocityField(q, cloud)


def velocity_at(field: VelocityField, x):
    """u(x) = -x Q(x); u(0) = 0 and u vanishes beyond the support."""
    return field.u(x)
