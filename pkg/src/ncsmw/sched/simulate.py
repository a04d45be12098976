"""Exact discrete-event simulation of preemptive single-processor scheduling
with mutually exclusive resources and optional priority inheritance."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

from .analysis import _as_taskset

POLICIES = ("fixed_priority_rm", "edf")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    task: str
    job: int
    start: int
    end: int
    state: str  # run | blocked | preempted


@dataclass
class JobRecord:
    task: str
    index: int
    release: int
    deadline: int
    finish: Optional[int] = None
    blocking: int = 0

    @property
    def response(self) -> Optional[int]:
        return None if self.finish is None else self.finish - self.release


@dataclass
class ScheduleTrace:
    intervals: list = field(default_factory=list)
    jobs: list = field(default_factory=list)
    deadline_misses: list = field(default_factory=list)
    horizon: int = 0
    error: str = ""

    def response_times(self) -> dict:
        return {(j.task, j.index): j.response for j in self.jobs if j.finish is not None}

    def blocking(self) -> dict:
        return {(j.task, j.index): j.blocking for j in self.jobs}

    def worst_response(self) -> dict:
        out: dict = {}
        for j in self.jobs:
            if j.finish is not None:
                out[j.task] = max(out.get(j.task, 0), j.response)
        return out

    def missed_tasks(self) -> set:
        return {j.task for j in self.deadline_misses}

    def job(self, task: str, index: int = 0) -> JobRecord:
        for j in self.jobs:
            if j.task == task and j.index == index:
                return j
        raise KeyError((task, index))

    def run_intervals(self) -> list:
        return [iv for iv in self.intervals if iv.state == "run"]

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "job", "start", "end", "state"])
        for iv in self.intervals:
            w.writerow([iv.task, iv.job, iv.start, iv.end, iv.state])


class _Job:
    __slots__ = ("rec", "task_idx", "sections", "C", "progress", "held", "waiting", "base")

    def __init__(self, rec, task_idx, sections, C, base):
        self.rec = rec
        self.task_idx = task_idx
        self.sections = sections
        self.C = C
        self.progress = 0
        self.held = None  # index into sections while inside one
        self.waiting = None  # resource id blocked on
        self.base = base

    def next_section(self):
        for i, cs in enumerate(self.sections):
            if cs.offset >= self.progress and i != self.held:
                if self.held is not None and i < self.held:
                    continue
                return i, cs
        return None, None


def _int(x, what):
    if isinstance(x, int) or (isinstance(x, float) and x.is_integer()):
        return int(x)
    from fractions import Fraction

    if isinstance(x, Fraction) and x.denominator == 1:
        return int(x)
    raise SimulationError(f"simulation needs integer milliseconds; {what}={x!r}")


def simulate_schedule(
    ts,
    policy: str = "fixed_priority_rm",
    pip: bool = False,
    horizon_ms: Optional[int] = None,
    allow_nested: bool = False,
) -> ScheduleTrace:
    """Simulate synchronous (or phased) periodic releases up to ``horizon_ms``.

    Without ``pip`` a lock holder keeps its own priority, so medium-priority
    work can prolong a high-priority job's wait.  With ``pip`` the holder
    runs at the most urgent priority among the jobs it blocks until it
    releases the resource.  A job's blocking time is the time it is pending
    while a job of lower base priority executes.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    ts = _as_taskset(ts)
    for t in ts:
        if t.has_nested_sections() and not allow_nested:
            raise SimulationError(f"task {t.name}: nested critical sections are not supported")
    horizon = _int(horizon_ms if horizon_ms is not None else ts.hyperperiod(), "horizon")
    params = []
    for t in ts:
        params.append((_int(t.C, "C"), _int(t.T, "T"), _int(t.D, "D"), _int(t.phase, "phase")))
    sections = []
    for t in ts:
        sections.append(
            [type(c)(_int(c.offset, "offset"), _int(c.length, "length"), c.resource) for c in t.critical_sections]
        )

    trace = ScheduleTrace(horizon=horizon)
    releases = []  # (time, task_idx, job_index)
    for i, (C, T, D, ph) in enumerate(params):
        k = 0
        while ph + k * T < horizon:
            releases.append((ph + k * T, i, k))
            k += 1
    releases.sort()
    ri = 0
    pending: list[_Job] = []
    owner: dict[str, _Job] = {}
    now = 0
    last_run = None  # (job, interval start)

    def base_key(i, rel, k):
        C, T, D, ph = params[i]
        if policy == "edf":
            return (rel + D, i, k)
        return (i, k)

    def effective(j: _Job, seen=None):
        if not pip:
            return j.base
        seen = seen or set()
        seen.add(id(j))
        best = j.base
        for w in pending:
            if w.waiting is not None and owner.get(w.waiting) is j and id(w) not in seen:
                best = min(best, effective(w, seen))
        return best

    def close_run(t):
        nonlocal last_run
        if last_run is not None and last_run[1] < t:
            j = last_run[0]
            trace.intervals.append(Interval(j.rec.task, j.rec.index, last_run[1], t, "run"))
        last_run = None

    guard = 0
    while True:
        guard += 1
        if guard > 50_000_000:
            raise SimulationError("simulation did not terminate")
        while ri < len(releases) and releases[ri][0] <= now:
            rel, i, k = releases[ri]
            ri += 1
            C, T, D, ph = params[i]
            rec = JobRecord(ts[i].name, k, rel, rel + D)
            trace.jobs.append(rec)
            pending.append(_Job(rec, i, sections[i], C, base_key(i, rel, k)))

        # pick the job to run, resolving lock requests on the way
        chosen = None
        while True:
            ready = [j for j in pending if j.waiting is None]
            if not ready:
                break
            cand = min(ready, key=effective)
            idx, cs = cand.next_section()
            if cand.held is None and cs is not None and cs.offset == cand.progress:
                holder = owner.get(cs.resource)
                if holder is None:
                    owner[cs.resource] = cand
                    cand.held = idx
                    continue
                cand.waiting = cs.resource
                continue
            chosen = cand
            break

        if chosen is None and pending:
            trace.error = f"deadlock at t={now}"
            close_run(now)
            break
        next_release = releases[ri][0] if ri < len(releases) else None
        if chosen is None:
            close_run(now)
            if next_release is None:
                break
            now = next_release
            continue

        # how long can the chosen job run undisturbed?
        limit = chosen.C - chosen.progress
        if chosen.held is not None:
            limit = min(limit, chosen.sections[chosen.held].end - chosen.progress)
        else:
            idx, cs = chosen.next_section()
            if cs is not None:
                limit = min(limit, cs.offset - chosen.progress)
        if next_release is not None:
            limit = min(limit, next_release - now)
        if limit <= 0:
            limit = 0

        if last_run is None or last_run[0] is not chosen:
            close_run(now)
            last_run = (chosen, now)
        end = now + limit
        if limit > 0:
            for j in pending:
                if j is chosen:
                    continue
                inverted = j.waiting is not None or chosen.base > j.base
                if chosen.base > j.base:
                    j.rec.blocking += limit
                trace.intervals.append(
                    Interval(j.rec.task, j.rec.index, now, end, "blocked" if inverted else "preempted")
                )
        chosen.progress += limit
        now = end

        if chosen.held is not None and chosen.progress >= chosen.sections[chosen.held].end:
            res = chosen.sections[chosen.held].resource
            del owner[res]
            chosen.held = None
            for w in pending:
                if w.waiting == res:
                    w.waiting = None
        if chosen.progress >= chosen.C:
            close_run(now)
            chosen.rec.finish = now
            pending.remove(chosen)
            if now > chosen.rec.deadline:
                trace.deadline_misses.append(chosen.rec)
        if not pending and ri >= len(releases):
            close_run(now)
            break

    for j in pending:
        if j.rec.deadline <= now:
            trace.deadline_misses.append(j.rec)
    trace.intervals = _merge(trace.intervals)
    return trace


def _merge(intervals: list) -> list:
    last: dict = {}  # (task, job) -> position in out
    out: list = []
    for iv in sorted(intervals, key=lambda iv: (iv.start, iv.state != "run", iv.task, iv.job)):
        key = (iv.task, iv.job)
        pos = last.get(key)
        if pos is not None and out[pos].end == iv.start and out[pos].state == iv.state:
            out[pos] = Interval(iv.task, iv.job, out[pos].start, iv.end, iv.state)
        else:
            last[key] = len(out)
            out.append(iv)
    out.sort(key=lambda iv: (iv.start, iv.state != "run", iv.task, iv.job))
    return out
