import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncsmw.sched import (
    DIVERGENT,
    AnalysisAssumptionError,
    TaskFileError,
    TaskSpec,
    Verdict,
    blocking_from_sections,
    edf_schedulable,
    parse_taskset,
    response_time_analysis,
    rm_lub,
    rm_pip_schedulable,
    rm_schedulable_lub,
    simulate_schedule,
    utilization,
)


def ts(*specs):
    return [TaskSpec(f"t{i + 1}", *s[:2], B=(s[2] if len(s) > 2 else 0)) for i, s in enumerate(specs)]


def test_utilization_examples():
    assert utilization(ts((1, 4), (2, 8))) == 0.5
    assert utilization(ts((2, 4), (2, 4))) == 1.0
    three_tasks = [TaskSpec("a", Fraction("14.5"), 80), TaskSpec("b", Fraction("42.4"), 200), TaskSpec("c", 49, 350)]
    assert utilization(three_tasks) == pytest.approx(0.53325, abs=1e-12)


def test_rm_lub():
    assert rm_lub(1) == 1.0
    assert rm_lub(2) == pytest.approx(0.828427, abs=1e-6)
    assert abs(rm_lub(10**6) - math.log(2)) < 1e-6
    with pytest.raises(ValueError):
        rm_lub(0)


def test_rm_lub_verdicts():
    assert rm_schedulable_lub(ts((1, 4), (2, 8))) is Verdict.GUARANTEED
    assert rm_schedulable_lub(ts((9, 20), (9, 20))) is Verdict.INCONCLUSIVE
    # U exactly at the single-task bound
    assert rm_schedulable_lub(ts((4, 4))) is Verdict.GUARANTEED


def test_edf_boundary():
    assert edf_schedulable(ts((2, 4), (2, 4)))
    assert edf_schedulable(ts((1, 3), (1, 3), (1, 3)))  # exactly 1 with no float rounding
    assert edf_schedulable(ts((1, 1000), (999, 1000)))
    assert not edf_schedulable(ts((2, 1000), (999, 1000)))  # U = 1.001


def test_assumption_errors():
    bad = [TaskSpec("a", 1, 10, D=5)]
    with pytest.raises(AnalysisAssumptionError):
        rm_schedulable_lub(bad)
    with pytest.raises(AnalysisAssumptionError):
        edf_schedulable(bad)


def test_pip_bound_examples():
    assert rm_pip_schedulable(ts((1, 4, 1))) is Verdict.GUARANTEED
    assert rm_pip_schedulable(ts((1, 4, 1), (2, 8, 0))) is Verdict.GUARANTEED
    assert rm_pip_schedulable(ts((1, 4, 3))) is Verdict.GUARANTEED  # 0.25 + 0.75 sits on the closed bound
    assert rm_pip_schedulable(ts((1, 4, 4))) is Verdict.INCONCLUSIVE
    assert rm_pip_schedulable(ts((1, 4), (2, 8, 4))) is Verdict.INCONCLUSIVE  # i=2: 0.5 + 0.5 > 0.828
    for case in (ts((1, 4), (2, 8)), ts((9, 20), (9, 20)), ts((3, 10), (3, 15), (3, 20))):
        assert rm_pip_schedulable(case) is rm_schedulable_lub(case)


def test_rta_examples():
    assert response_time_analysis(ts((1, 4), (2, 6))) == {"t1": 1, "t2": 3}
    assert response_time_analysis(ts((2, 4), (2, 6))) == {"t1": 2, "t2": 4}
    assert response_time_analysis(ts((2, 4), (3, 6)))["t2"] == DIVERGENT


def test_rta_matches_simulation_example():
    tasks = ts((1, 4), (2, 6))
    trace = simulate_schedule(tasks, horizon_ms=12)
    assert trace.worst_response() == response_time_analysis(tasks)
    assert trace.deadline_misses == []


INVERSION = [
    TaskSpec("J3", 4, 40, critical_sections=[(1, 2, "R")]),
    TaskSpec("J2", 4, 30, phase=2),
    TaskSpec("J1", 2, 20, phase=2, critical_sections=[(0, 1, "R")]),
]


def test_inversion_without_pip():
    tr = simulate_schedule(INVERSION, pip=False, horizon_ms=3)
    assert tr.job("J1").blocking == 5
    assert tr.job("J1").finish == 9


def test_inversion_with_pip():
    tr = simulate_schedule(INVERSION, pip=True, horizon_ms=3)
    assert tr.job("J1").blocking == 1
    assert tr.job("J1").finish == 5


def test_blocking_from_sections():
    assert blocking_from_sections(INVERSION) == {"J1": 2, "J2": 2, "J3": 0}


def test_simulation_rejects_fractional_times():
    from ncsmw.sched import SimulationError

    with pytest.raises(SimulationError):
        simulate_schedule([TaskSpec("a", Fraction(1, 2), 4)])


def test_edf_simulation_meets_deadlines_at_full_utilization():
    tr = simulate_schedule(ts((2, 4), (3, 6)), policy="edf")
    assert tr.deadline_misses == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.sampled_from([4, 5, 6, 8, 10, 12, 15, 20])), min_size=1, max_size=4))
def test_rta_equals_worst_simulated_response(pairs):
    tasks = [TaskSpec(f"t{i}", min(c, t), t) for i, (c, t) in enumerate(pairs)]
    rta = response_time_analysis(tasks)
    trace = simulate_schedule(tasks)
    worst = trace.worst_response()
    for name, r in rta.items():
        if r != DIVERGENT:
            assert worst[name] == r
        else:
            assert name in trace.missed_tasks()


# -- task files -------------------------------------------------------------

def test_taskfile_parses_fields():
    t = parse_taskset("# c\nctrl 14.5 80\nmid 42.4 200 D=180 B=3\nlow 49 350 phase=10 cs=5:2:bus,20:1:bus\n")
    assert utilization(parse_taskset("a 14.5 80\nb 42.4 200\nc 49 350")) == pytest.approx(0.53325)
    low = t[2]
    assert low.phase == 10 and [c.resource for c in low.critical_sections] == ["bus", "bus"]
    assert t[1].D == 180 and t[1].B == 3


@pytest.mark.parametrize(
    "text, line",
    [("a 1\n", 1), ("a 1 4\nb x 4\n", 2), ("a 1 4\na 1 4\n", 2), ("\n\na 1 4 Q=1\n", 3), ("a 1 4 cs=1:2\n", 1), ("a 5 4\n", 1)],
)
def test_taskfile_errors_name_the_line(text, line):
    with pytest.raises(TaskFileError, match=rf"^f:{line}: "):
        parse_taskset(text, "f")


def test_empty_taskfile():
    with pytest.raises(TaskFileError, match="no tasks"):
        parse_taskset("# nothing\n", "f")
