import pytest

from ncsmw.component import (
    Component,
    LifecycleError,
    Memento,
    Shell,
    ShellState,
    Undeliverable,
    abort_migration,
    begin_migration,
    complete_migration,
    upgrade_component,
)
from ncsmw.kernel import Kernel, ThreadSchedulingRule, make_rm_jpr
from ncsmw.message import Message


class Counter(Component):
    kind = "counter"
    schema_id = "counter"

    def __init__(self, step=1):
        self.n = 0
        self.step = step
        self.log = []

    def initialize(self, config):
        self.step = config.get("step", self.step)

    def process_message(self, m):
        self.n += self.step
        self.log.append(m.content["i"])
        return [Message("Echo", "sink", {"i": m.content["i"], "n": self.n})]

    def get_memento(self):
        return Memento("counter", 1, {"n": self.n})

    def set_memento(self, memento):
        self.check_memento(memento)
        self.n = memento.state_doc["n"]


class Other(Counter):
    kind = "other"
    schema_id = "other"


def m(i):
    return Message("Inc", "c", {"i": i})


def test_echo_output():
    s = Shell("c", Counter())
    assert s.deliver(m(1)) == [Message("Echo", "sink", {"i": 1, "n": 1})]


def test_paused_shell_buffers_in_arrival_order():
    c = Counter()
    s = Shell("c", c)
    s.pause()
    for i in (1, 2, 3):
        assert s.deliver(m(i)) == []
    assert c.log == []
    out = s.resume()
    assert c.log == [1, 2, 3]
    assert [o.content["i"] for o in out] == [1, 2, 3]


def test_destroyed_shell_is_undeliverable():
    s = Shell("c", Counter())
    s.destroy()
    with pytest.raises(Undeliverable):
        s.deliver(m(1))


def test_upgrade_carries_state_and_flushes_buffer():
    s = Shell("c", Counter(), factory=Counter)
    s.deliver(m(1))
    s.pause()
    s.deliver(m(2))
    rep = upgrade_component(s, lambda: Counter(step=10), config={"step": 10}, clock=lambda: 0, paused_since=0)
    assert rep.ok and rep.flushed == 1
    assert [o.content["n"] for o in rep.outputs] == [11]
    assert s.current.n == 11 and s.state is ShellState.RUNNING


def test_identity_upgrade_is_unobservable():
    a, b = Shell("c", Counter(), factory=Counter), Shell("c", Counter(), factory=Counter)
    outs_a, outs_b = [], []
    for i in range(6):
        if i == 3:
            upgrade_component(b, Counter)
        outs_a += a.deliver(m(i))
        outs_b += b.deliver(m(i))
    assert outs_a == outs_b


def test_schema_mismatch_aborts_and_keeps_old_behaviour():
    s = Shell("c", Counter(), factory=Counter)
    s.deliver(m(1))
    rep = upgrade_component(s, Other)
    assert not rep.ok and "schema" in rep.error
    assert s.kind == "counter" and isinstance(s.current, Counter) and not isinstance(s.current, Other)
    assert s.deliver(m(2))[0].content["n"] == 2


def test_upgrade_of_destroyed_shell_fails():
    s = Shell("c", Counter())
    s.destroy()
    with pytest.raises(LifecycleError):
        upgrade_component(s, Counter)


def test_memento_round_trip_is_observationally_equivalent():
    a = Counter()
    for i in range(4):
        a.process_message(m(i))
    b = Counter()
    b.set_memento(Memento.from_content(a.get_memento().to_content()))
    assert [a.process_message(m(9))[0].content for _ in range(3)] == [b.process_message(m(9))[0].content for _ in range(3)]


def kernel(node):
    tsr = ThreadSchedulingRule.from_priorities(1)
    k = Kernel(tsr, make_rm_jpr({1: 1}, tsr), node_id=node)
    k.add_factory("counter", Counter)
    return k


def test_migration_delivers_buffered_messages_once_in_order():
    src, dst = kernel("a"), kernel("b")
    addr = src.register_component("c", Shell("c", Counter(), factory=Counter, kind="counter"))
    shell = src.shells[addr]
    shell.deliver(m(0))
    pkg = begin_migration(shell)
    for i in range(1, 6):
        shell.deliver(m(i))
    pkg.pending.extend(shell.drain())
    new_addr = complete_migration(dst, pkg)
    moved = dst.shells[new_addr]
    assert moved.current.log == [1, 2, 3, 4, 5]
    assert moved.current.n == 6
    assert dst.resolve("c") == new_addr


def test_migration_without_factory_resumes_source():
    src, dst = kernel("a"), kernel("b")
    dst.factories.clear()
    addr = src.register_component("c", Shell("c", Counter(), factory=Counter, kind="counter"))
    shell = src.shells[addr]
    pkg = begin_migration(shell)
    shell.deliver(m(7))
    with pytest.raises(LifecycleError):
        complete_migration(dst, pkg)
    out = abort_migration(shell)
    assert shell.state is ShellState.RUNNING
    assert [o.content["i"] for o in out] == [7]


def test_migration_package_survives_serialization():
    from ncsmw.component import MigrationPackage

    s = Shell("c", Counter(), factory=Counter, kind="counter")
    s.deliver(m(0))
    pkg = begin_migration(s)
    pkg.pending.append(m(3))
    again = MigrationPackage.from_content(pkg.to_content())
    assert again.memento == pkg.memento and again.pending == pkg.pending
