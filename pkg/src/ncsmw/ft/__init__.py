"""Software fault tolerance: voters, recovery blocks, watchdogs and local autonomy helpers."""

from .acceptance import AcceptanceResult, AcceptanceSpec, AcceptanceTest, acceptance_check
from .ftshell import FAULT_KINDS, FaultEvent, FTComponent, FTConfigError, FTPolicy, FTShellConfig, ft_process, make_ft_factory
from .lta import (
    STALE,
    ControlBuffer,
    EstimatorState,
    buffer_pop,
    buffer_push_block,
    estimator_step,
    linear_step,
    plan_block,
)
from .voting import NO_CONSENSUS, Voter, disagreeing, vote
from .watchdog import Watchdog, WatchdogSpec, watchdog_check

__all__ = [
    "AcceptanceResult",
    "AcceptanceSpec",
    "AcceptanceTest",
    "acceptance_check",
    "FAULT_KINDS",
    "FaultEvent",
    "FTComponent",
    "FTConfigError",
    "FTPolicy",
    "FTShellConfig",
    "ft_process",
    "make_ft_factory",
    "STALE",
    "ControlBuffer",
    "EstimatorState",
    "buffer_pop",
    "buffer_push_block",
    "estimator_step",
    "linear_step",
    "plan_block",
    "NO_CONSENSUS",
    "Voter",
    "disagreeing",
    "vote",
    "Watchdog",
    "WatchdogSpec",
    "watchdog_check",
]
