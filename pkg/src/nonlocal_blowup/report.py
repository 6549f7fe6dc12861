"""Pass/fail records with signed margins (positive = satisfied)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class Record:
    id: str
    margin: float
    passed: bool
    interval: tuple | None = None
    witness: float | None = None
    lhs: float | None = None
    rhs: float | None = None
    level: int | None = None
    vacuous: bool = False

    def to_dict(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        if d["interval"] is not None:
            d["interval"] = list(d["interval"])
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class ControlReport:
    records: list = field(default_factory=list)
    t: float | None = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    @property
    def worst_margin(self) -> float:
        vals = [r.margin for r in self.records if not r.vacuous]
        return min(vals) if vals else float("inf")

    def failures(self):
        return [r for r in self.records if not r.passed]

    def get(self, id, level=None):
        for r in self.records:
            if r.id == id and (level is None or r.level == level):
                return r
        raise KeyError((id, level))

    def extend(self, other: "ControlReport"):
        self.records.extend(other.records)
        return self

    def to_dict(self):
        d = {"pass": self.passed, "records": [r.to_dict() for r in self.records]}
        if self.t is not None:
            d["t"] = self.t
        return d

    def summary(self):
        bad = self.failures()
        head = "PASS" if not bad else f"FAIL ({len(bad)} of {len(self.records)})"
        return head + "".join(f"\n  {r.id}[{r.level}] margin={r.margin:.3e} at x={r.witness}" for r in bad)


def scalar_record(id, lhs, rhs, strict=True, slack=0.0, **kw):
    """Record for the inequality lhs < rhs (or <= when strict is False)."""
    margin = float(rhs - lhs)
    passed = margin > -slack if strict else margin >= -slack
    return Record(id, margin, bool(passed), lhs=float(lhs), rhs=float(rhs), **kw)


def barrier_record(id, x, values, bound, kind, interval, slack=0.0, strict=True, level=None):
    """Node-wise check of values < bound (kind='upper') or values > bound (kind='lower').

    The margin is relative to the bound, so a runtime slack of 1e-6 means
    "one part in a million of the barrier".  With zero slack the test is the
    bare strict inequality.  An empty node set is reported as a vacuous pass.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return Record(id, float("inf"), True, interval=tuple(map(float, interval)), level=level, vacuous=True)
    values = np.asarray(values, dtype=np.float64)
    bound = np.broadcast_to(np.asarray(bound, dtype=np.float64), x.shape)
    gap = bound - values if kind == "upper" else values - bound
    scale = np.abs(bound)
    rel = np.divide(gap, scale, out=np.array(gap, dtype=np.float64), where=scale > 0)
    i = int(np.argmin(rel))
    m = float(rel[i])
    ok = m > -slack if strict else m >= -slack
    return Record(
        id, m, bool(ok), interval=tuple(map(float, interval)), witness=float(x[i]),
        lhs=float(values[i]), rhs=float(bound[i]), level=level,
    )
