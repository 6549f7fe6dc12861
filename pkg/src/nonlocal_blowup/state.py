"""Particle-cloud representation of (omega, rho).

A cloud is a sorted set of Lagrangian markers.  Between markers both fields
are linear in x; outside the first/last marker they vanish.  The first and
last markers carry omega = rho = 0, which encodes compact support exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

CSV_HEADER = ("x", "omega", "rho", "label")


class CloudError(ValueError):
    """Raised when a cloud would violate its invariants."""


@dataclass(frozen=True)
class ModelParams:
    beta: float = 1.0

    def __post_init__(self):
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    positions: np.ndarray
    omega: np.ndarray
    rho: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("positions", "omega", "rho", "label"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            arrays[name] = a
            object.__setattr__(self, name, a)
        n = arrays["positions"].size
        if any(a.ndim != 1 or a.size != n for a in arrays.values()):
            raise CloudError("positions, omega, rho and label must be 1-D of equal length")
        if n < 4:
            raise CloudError(f"a cloud needs at least 4 particles, got {n}")
        x = arrays["positions"]
        if not np.all(np.isfinite(x)) or x[0] < 0:
            raise CloudError("positions must be finite and nonnegative")
        if not np.all(np.diff(x) > 0):
            raise CloudError("positions must be strictly increasing")
        for name in ("omega", "rho"):
            a = arrays[name]
            if not np.all(np.isfinite(a)):
                raise CloudError(f"{name} must be finite")
            if np.any(a < 0):
                i = int(np.argmin(a))
                raise CloudError(f"{name} negative at x={x[i]!r}: {a[i]!r}")
            if a[0] != 0 or a[-1] != 0:
                raise CloudError(f"{name} must vanish at the first and last particle")

    def __len__(self):
        return self.positions.size

    def replace(self, positions=None, omega=None):
        """Successor cloud with moved particles and/or new vorticity; rho and labels carry over."""
        return ParticleCloud(
            self.positions if positions is None else positions,
            self.omega if omega is None else omega,
            self.rho,
            self.label,
        )

    def with_omega(self, omega):
        return self.replace(omega=omega)

    @property
    def support(self):
        return float(self.positions[0]), float(self.positions[-1])


def zero_cloud(grid) -> ParticleCloud:
    grid = np.asarray(grid, dtype=np.float64)
    z = np.zeros_like(grid)
    return ParticleCloud(grid, z, z, grid)


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    """n logarithmically spaced nodes from lo to hi inclusive."""
    if not (0 < lo < hi):
        raise ValueError(f"need 0 < lo < hi, got {lo}, {hi}")
    g = np.geomspace(lo, hi, n)
    g[0], g[-1] = lo, hi
    return g


def sample_profile(f: Callable, g: Callable, grid) -> ParticleCloud:
    """Sample omega = f(x), rho = g(x) at the grid nodes.

    ``f`` and ``g`` are evaluated vectorised when possible, falling back to
    a per-node loop for scalar-only callables.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or not np.all(np.diff(grid) > 0):
        raise CloudError("grid must be strictly increasing")
    omega = _evaluate(f, grid)
    rho = _evaluate(g, grid)
    return ParticleCloud(grid, omega, rho, grid.copy())


def _evaluate(fn, grid):
    try:
        out = np.asarray(fn(grid), dtype=np.float64)
        if out.shape == grid.shape:
            return out
    except (TypeError, ValueError):
        pass
    return np.array([float(fn(float(x))) for x in grid])


def interp_omega(cloud: ParticleCloud, x):
    """Piecewise-linear interpolant of omega, zero outside the support."""
    return np.interp(x, cloud.positions, cloud.omega, left=0.0, right=0.0)


def interp_rho(cloud: ParticleCloud, x):
    return np.interp(x, cloud.positions, cloud.rho, left=0.0, right=0.0)


def sup_omega(cloud: ParticleCloud, a: float, b: float) -> float:
    """Maximum of the omega interpolant on [a, b].

    For piecewise-linear data the maximum sits either on a node inside the
    window or at one of the window ends.
    """
    if not a < b:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    x = cloud.positions
    lo, hi = max(a, x[0]), min(b, x[-1])
    if lo > hi:
        return 0.0
    i0 = np.searchsorted(x, lo, side="left")
    i1 = np.searchsorted(x, hi, side="right")
    inner = cloud.omega[i0:i1]
    ends = interp_omega(cloud, np.array([lo, hi]))
    best = float(ends.max())
    if inner.size:
        best = max(best, float(inner.max()))
    return best


def write_cloud_csv(path, cloud: ParticleCloud, extra: dict | None = None):
    """Write a profile snapshot; ``extra`` maps column name -> per-particle array."""
    extra = extra or {}
    cols = [cloud.positions, cloud.omega, cloud.rho, cloud.label] + [np.asarray(v) for v in extra.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_HEADER) + list(extra))
        for row in zip(*cols):
            w.writerow([format(float(v), ".17g") for v in row])


def read_cloud_csv(path) -> ParticleCloud:
    with open(Path(path), newline="") as fh:
        r = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(r.fieldnames or ())
        if missing:
            raise CloudError(f"{path}: missing columns {sorted(missing)}")
        rows = list(r)
    data = {k: np.array([float(row[k]) for row in rows]) for k in CSV_HEADER}
    return ParticleCloud(data["x"], data["omega"], data["rho"], data["label"])
