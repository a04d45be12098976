"""Schedulability analysis and an exact single-processor scheduling simulator."""

from .analysis import (
    DIVERGENT,
    AnalysisAssumptionError,
    CriticalSection,
    TaskSet,
    TaskSpec,
    Verdict,
    blocking_from_sections,
    edf_schedulable,
    response_time_analysis,
    rm_lub,
    rm_pip_schedulable,
    rm_schedulable_lub,
    rta_schedulable,
    utilization,
    utilization_exact,
    with_blocking,
)
from .simulate import POLICIES, Interval, JobRecord, ScheduleTrace, SimulationError, simulate_schedule
from .taskfile import TaskFileError, load_taskset, parse_taskset

__all__ = [
    "DIVERGENT",
    "AnalysisAssumptionError",
    "CriticalSection",
    "TaskSet",
    "TaskSpec",
    "Verdict",
    "blocking_from_sections",
    "edf_schedulable",
    "response_time_analysis",
    "rm_lub",
    "rm_pip_schedulable",
    "rm_schedulable_lub",
    "rta_schedulable",
    "utilization",
    "utilization_exact",
    "with_blocking",
    "POLICIES",
    "Interval",
    "JobRecord",
    "ScheduleTrace",
    "SimulationError",
    "simulate_schedule",
    "TaskFileError",
    "load_taskset",
    "parse_taskset",
]
