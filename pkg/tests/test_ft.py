import numpy as np
import pytest

from ncsmw.component import Component, Memento
from ncsmw.ft import (
    NO_CONSENSUS,
    STALE,
    AcceptanceSpec,
    AcceptanceTest,
    ControlBuffer,
    EstimatorState,
    FTComponent,
    FTConfigError,
    FTShellConfig,
    Voter,
    Watchdog,
    WatchdogSpec,
    acceptance_check,
    buffer_pop,
    buffer_push_block,
    estimator_step,
    vote,
    watchdog_check,
)
from ncsmw.message import Message


# -- voters -----------------------------------------------------------------

def test_voter_examples():
    assert vote(Voter.GENERALIZED_MEDIAN, [1, 9, 4]) == 4
    assert vote(Voter.FORMALIZED_MAJORITY, [5.0, 5.0, 7.0], 0.1) == 5.0
    assert vote(Voter.WEIGHTED_AVERAGE, [(2, 1), (4, 1)]) == 3
    assert vote(Voter.FORMALIZED_MAJORITY, [1, 2, 3], 0.1) is NO_CONSENSUS


def test_plurality_ties_have_no_consensus():
    assert vote(Voter.FORMALIZED_PLURALITY, [1, 1, 2, 2, 3], 0.1) is NO_CONSENSUS
    assert vote(Voter.FORMALIZED_PLURALITY, [1, 1, 2, 3], 0.1) == 1


def test_vector_outputs_vote_componentwise():
    assert vote(Voter.GENERALIZED_MEDIAN, [[1, 5], [2, 4], [3, 6]]) == [2, 5]
    assert vote(Voter.FORMALIZED_MAJORITY, [[1, 1], [1, 1], [0, 0]]) == [1, 1]


def test_mismatched_dimensions_rejected():
    with pytest.raises(ValueError):
        vote(Voter.GENERALIZED_MEDIAN, [[1, 2], [1]])


# -- acceptance -------------------------------------------------------------

def test_acceptance_examples():
    spec = AcceptanceSpec({"u": (-1, 1)}, max_step=0.2)
    assert acceptance_check({"u": 0.5}, spec, {"u": 0.4}).ok
    r = acceptance_check({"u": 1.5}, spec)
    assert not r.ok and r.reason == "range"
    t = AcceptanceTest(spec)
    assert t.check({"u": 0.0}).ok
    r = t.check({"u": 0.5})
    assert not r.ok and r.reason == "smoothness"
    r = acceptance_check({}, spec)
    assert not r.ok and r.reason == "omission"


# -- recovery blocks and N-version -----------------------------------------

class Module(Component):
    kind = "mod"
    schema_id = "mod"

    def __init__(self, out=0.5, fail_after=None, crash=False):
        self.out = out
        self.calls = 0
        self.fail_after = fail_after
        self.crash = crash

    def process_message(self, m):
        self.calls += 1
        if self.crash:
            raise RuntimeError("boom")
        value = 5.0 if self.fail_after is not None and self.calls > self.fail_after else self.out
        return [Message("Out", "sink", {"u": value})]

    def get_memento(self):
        return Memento("mod", 1, {"calls": self.calls})

    def set_memento(self, memento):
        self.check_memento(memento)
        self.calls = memento.state_doc["calls"]


def rb(*modules):
    return FTComponent(FTShellConfig([(lambda m=m: m) for m in modules], acceptance=AcceptanceSpec({"u": (-1, 1)})))


def msg():
    return Message("In", "ft", {})


def test_recovery_block_falls_back_to_alternate():
    ft = rb(Module(out=9.0), Module(out=0.25))
    out = ft.process_message(msg())
    assert out[0].content["u"] == 0.25
    assert [f.kind for f in ft.faults] == ["design"]
    # the accepted alternate is primary now
    assert ft.order[0] == 1


def test_recovery_block_checkpoint_safety():
    primary = Module(fail_after=2)
    ft = rb(primary, Module(out=0.1))
    for _ in range(2):
        ft.process_message(msg())
    before = ft.primary.get_memento()
    ft.process_message(msg())
    idx, checkpoint, restored = ft.attempt_log[0]
    assert checkpoint == before and restored == before


def test_all_modules_failing_is_a_design_fault():
    ft = rb(Module(out=9.0), Module(crash=True))
    assert ft.process_message(msg()) == []
    assert [f.kind for f in ft.faults] == ["design", "crash", "design"]
    assert ft.block_failures == 1


def nv(outs, voter=Voter.FORMALIZED_MAJORITY):
    mods = [Module(out=o) for o in outs]
    return FTComponent(FTShellConfig([(lambda m=m: m) for m in mods], policy="n_version", voter=voter, epsilon=0.1, vote_keys=["u"]))


def test_n_version_majority_flags_the_odd_one():
    ft = nv([5.0, 5.0, 7.0])
    out = ft.process_message(msg())
    assert out[0].content["u"] == 5.0
    assert len(ft.faults) == 1 and ft.faults[0].source.endswith("#2")


def test_unanimous_modules_raise_no_faults():
    ft = nv([0.3, 0.3, 0.3])
    assert ft.process_message(msg())[0].content["u"] == 0.3
    assert ft.faults == []


def test_ft_config_errors():
    with pytest.raises(FTConfigError):
        FTShellConfig([Module])
    with pytest.raises(FTConfigError):
        FTShellConfig([Module, Module], policy="n_version")


# -- watchdog ---------------------------------------------------------------

def test_watchdog_examples():
    spec = WatchdogSpec("Req", "Resp", 50)
    assert watchdog_check(spec, {1: 0}, 49) == []
    faults = watchdog_check(spec, {1: 0}, 51)
    assert len(faults) == 1 and faults[0].kind == "timing" and faults[0].expected_by_ms == 50
    w = Watchdog(spec)
    w.observe("Req", 1, 0)
    w.observe("Resp", 1, 40)
    assert w.check(60) == []


def test_watchdog_reports_each_expiry_once():
    w = Watchdog(WatchdogSpec("Req", "Resp", 50))
    w.request("a", 0)
    assert len(w.check(51)) == 1
    assert w.check(100) == []
    w.response("a", 120)
    assert w.late == [("a", 120, 70)]


# -- LTA --------------------------------------------------------------------

def test_estimator_examples():
    e = EstimatorState(np.eye(2), np.zeros((2, 1)), [1.0, 0.0])
    assert list(estimator_step(e, [0.1, 0.0], [0.0])) == [0.1, 0.0]
    e = EstimatorState(np.eye(2), np.zeros((2, 1)), [1.0, 0.0])
    assert list(estimator_step(e, None, [0.0])) == [1.0, 0.0]
    e = EstimatorState([[1, 0.015], [0, 1]], np.zeros((2, 1)), [1.0, 0.0])
    assert list(estimator_step(e, None, [0.0])) == [1.0, 0.0]
    assert list(estimator_step(e, None, [0.0])) == [1.0, 0.0]


def test_buffer_examples():
    b = ControlBuffer(5)
    buffer_push_block(b, 10, [10, 11, 12, 13, 14])
    assert buffer_pop(b, 12) == 12
    assert buffer_pop(b, 16) is STALE
    b = ControlBuffer(5)
    buffer_push_block(b, 10, [10, 11, 12, 13, 14])
    buffer_push_block(b, 12, [112, 113, 114, 115, 116])
    assert buffer_pop(b, 13) == 113


def test_buffer_never_pops_an_index_twice():
    b = ControlBuffer(3)
    buffer_push_block(b, 0, [0, 1, 2])
    assert buffer_pop(b, 1) == 1
    assert buffer_pop(b, 1) is STALE
    buffer_push_block(b, 0, [9, 9, 9])
    assert buffer_pop(b, 2) == 9
