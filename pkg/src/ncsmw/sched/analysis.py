"""Utilization bounds and response-time analysis for periodic task sets.

Arithmetic on task parameters is exact (``fractions.Fraction``); only the
irrational rate-monotonic bound is a float.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Real
from typing import Optional, Sequence

DIVERGENT = math.inf


class AnalysisAssumptionError(ValueError):
    """The test's preconditions (e.g. implicit deadlines) do not hold."""


class Verdict(str, enum.Enum):
    GUARANTEED = "guaranteed"
    INCONCLUSIVE = "inconclusive"


def _exact(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def _plain(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


@dataclass(frozen=True)
class CriticalSection:
    offset: Real
    length: Real
    resource: str

    @property
    def end(self):
        return self.offset + self.length


@dataclass(frozen=True)
class TaskSpec:
    """One periodic task.  ``D`` defaults to ``T``; ``phase`` is the first release."""

    name: str
    C: Real
    T: Real
    D: Optional[Real] = None
    B: Real = 0
    critical_sections: tuple = ()
    phase: Real = 0

    def __post_init__(self):
        if self.D is None:
            object.__setattr__(self, "D", self.T)
        cs = tuple(c if isinstance(c, CriticalSection) else CriticalSection(*c) for c in self.critical_sections)
        object.__setattr__(self, "critical_sections", tuple(sorted(cs, key=lambda c: (c.offset, c.end))))
        if not (0 < self.C <= self.D <= self.T):
            raise ValueError(f"task {self.name}: need 0 < C <= D <= T, got C={self.C} D={self.D} T={self.T}")
        if self.B < 0:
            raise ValueError(f"task {self.name}: blocking time must be >= 0")
        if self.phase < 0:
            raise ValueError(f"task {self.name}: phase must be >= 0")
        for c in self.critical_sections:
            if c.length <= 0 or c.offset < 0 or c.end > self.C:
                raise ValueError(f"task {self.name}: critical section {c} outside [0, C]")

    @property
    def utilization(self) -> Fraction:
        return _exact(self.C) / _exact(self.T)

    @property
    def implicit_deadline(self) -> bool:
        return self.D == self.T

    def has_nested_sections(self) -> bool:
        cs = self.critical_sections
        return any(b.offset < a.end for a, b in zip(cs, cs[1:]))


class TaskSet(Sequence):
    """Tasks in rate-monotonic priority order (ascending period, stable)."""

    def __init__(self, tasks):
        tasks = list(tasks)
        if not tasks:
            raise ValueError("task set must not be empty")
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"task names must be unique: {names}")
        self.tasks = sorted(tasks, key=lambda t: _exact(t.T))

    def __getitem__(self, i):
        return self.tasks[i]

    def __len__(self):
        return len(self.tasks)

    def __repr__(self):
        return f"TaskSet({self.tasks!r})"

    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def hyperperiod(self) -> int:
        periods = [_exact(t.T) for t in self.tasks]
        if any(p.denominator != 1 for p in periods):
            raise ValueError("hyperperiod needs integer periods")
        return math.lcm(*(int(p) for p in periods))


def _as_taskset(ts) -> TaskSet:
    return ts if isinstance(ts, TaskSet) else TaskSet(ts)


def _require_implicit(ts: TaskSet, test: str) -> None:
    bad = [t.name for t in ts if not t.implicit_deadline]
    if bad:
        raise AnalysisAssumptionError(f"{test} assumes D = T; violated by {bad}")


def utilization(ts) -> float:
    return float(utilization_exact(ts))


def utilization_exact(ts) -> Fraction:
    return sum((t.utilization for t in _as_taskset(ts)), Fraction(0))


def rm_lub(n: int) -> float:
    """n (2^(1/n) - 1); tends to ln 2 as n grows."""
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if n < 1024:
        return n * (2.0 ** (1.0 / n) - 1.0)
    # expm1 keeps precision where 2^(1/n) - 1 would cancel
    return n * math.expm1(math.log(2.0) / n)


def rm_schedulable_lub(ts) -> Verdict:
    """Sufficient-only RM test; the bound is closed (U == bound passes)."""
    ts = _as_taskset(ts)
    _require_implicit(ts, "utilization bound test")
    return Verdict.GUARANTEED if utilization_exact(ts) <= _exact(rm_lub(len(ts))) else Verdict.INCONCLUSIVE


def edf_schedulable(ts) -> bool:
    ts = _as_taskset(ts)
    _require_implicit(ts, "EDF utilization test")
    return utilization_exact(ts) <= 1


def rm_pip_schedulable(ts) -> Verdict:
    """Per-prefix utilization test with blocking terms, under priority inheritance."""
    ts = _as_taskset(ts)
    acc = Fraction(0)
    for i, t in enumerate(ts, start=1):
        acc += t.utilization
        if acc + _exact(t.B) / _exact(t.T) > _exact(rm_lub(i)):
            return Verdict.INCONCLUSIVE
    return Verdict.GUARANTEED


def blocking_from_sections(ts) -> dict[str, Real]:
    """Longest critical section of any lower-priority task on a resource
    also used by this task or a higher-priority one."""
    ts = _as_taskset(ts)
    out = {}
    for i, t in enumerate(ts):
        used = {c.resource for hp in ts[: i + 1] for c in hp.critical_sections}
        lengths = [c.length for lp in ts[i + 1:] for c in lp.critical_sections if c.resource in used]
        out[t.name] = max(lengths, default=0)
    return out


def with_blocking(ts, blocking: dict) -> TaskSet:
    from dataclasses import replace

    return TaskSet(replace(t, B=blocking.get(t.name, t.B)) for t in _as_taskset(ts))


def response_time_analysis(ts, max_iterations: int = 100_000) -> dict:
    """Least fixed point of R = C + B + sum_{hp} ceil(R / T_j) C_j per task.

    A task whose iterate exceeds its deadline maps to ``DIVERGENT``.
    """
    ts = _as_taskset(ts)
    for t in ts:
        if t.D > t.T:
            raise AnalysisAssumptionError(f"response-time analysis assumes D <= T ({t.name})")
    result = {}
    for i, t in enumerate(ts):
        hp = [(_exact(h.C), _exact(h.T)) for h in ts[:i]]
        c, b, d = _exact(t.C), _exact(t.B), _exact(t.D)
        r = c
        for _ in range(max_iterations):
            nxt = c + b + sum((math.ceil(r / tj) * cj for cj, tj in hp), Fraction(0))
            if nxt > d:
                result[t.name] = DIVERGENT
                break
            if nxt == r:
                result[t.name] = _plain(r)
                break
            r = nxt
        else:
            result[t.name] = DIVERGENT
    return result


def rta_schedulable(ts) -> bool:
    return all(r != DIVERGENT for r in response_time_analysis(ts).values())
