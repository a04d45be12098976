"""Microkernel: message -> job -> dispatcher queue -> component shell.

Each dispatcher owns a key-ordered job queue and runs jobs to completion.
Dispatchers have fixed priorities; under the simulated time source the
kernel models one processor per node on which a higher-priority dispatcher
preempts a lower one mid-job.  Under the real time source a single worker
thread always serves the most urgent non-empty dispatcher next.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Protocol

from .component import (
    Component,
    ComponentContext,
    Shell,
    ShellState,
    Undeliverable,
)
from .message import Message, QoSSpec
from .services.registry import (
    ComponentAddress,
    ProfileNotFound,
    ProfileRegistry,
    RegistryError,
    RemoteBinding,
)
from .sim import RealClock, SimClock

log = logging.getLogger(__name__)

KEY_INFINITY = (1 << 63) - 1
MESSENGER = "NetworkMessenger"

TRACE_FIELDS = ["event", "job_id", "msg_type", "dispatcher", "enqueue_ms", "start_ms", "end_ms"]


class KernelConfigError(ValueError):
    pass


class PlacementError(ValueError):
    pass


# -- scheduling rules --------------------------------------------------------

@dataclass(frozen=True)
class DispatcherSpec:
    dispatcher_id: int
    priority: int


@dataclass(frozen=True)
class ThreadSchedulingRule:
    dispatchers: tuple

    def __post_init__(self):
        specs = tuple(self.dispatchers)
        object.__setattr__(self, "dispatchers", specs)
        if not specs:
            raise KernelConfigError("thread scheduling rule needs at least one dispatcher")
        ids = [d.dispatcher_id for d in specs]
        if len(set(ids)) != len(ids):
            raise KernelConfigError(f"duplicate dispatcher ids in {ids}")
        prios = [d.priority for d in specs]
        if len(set(prios)) != len(prios):
            raise KernelConfigError(f"dispatcher priorities must be distinct, got {prios}")

    @classmethod
    def from_priorities(cls, *priorities: int) -> "ThreadSchedulingRule":
        """Dispatcher ids 1..n in the given order."""
        return cls(tuple(DispatcherSpec(i + 1, p) for i, p in enumerate(priorities)))

    def priority_of(self, dispatcher_id: int) -> int:
        for d in self.dispatchers:
            if d.dispatcher_id == dispatcher_id:
                return d.priority
        raise KeyError(dispatcher_id)

    @property
    def ids(self) -> list[int]:
        return [d.dispatcher_id for d in self.dispatchers]

    @property
    def lowest(self) -> int:
        return min(self.dispatchers, key=lambda d: d.priority).dispatcher_id

    @property
    def highest(self) -> int:
        return max(self.dispatchers, key=lambda d: d.priority).dispatcher_id


class JobPlacementRule(Protocol):
    name: str

    def place(self, qos: Optional[QoSSpec], message: Message) -> tuple[int, Optional[int]]:
        """Return (dispatcher_id, queue_key); a None key means FIFO."""

    def dispatcher_ids(self) -> set[int]:
        ...


class RMPlacement:
    """Fixed dispatcher per declared period; the rate-monotonic rule."""

    name = "rm"

    def __init__(self, period_to_dispatcher: Mapping[int, int], default_dispatcher: int):
        self.period_to_dispatcher = dict(period_to_dispatcher)
        self.default_dispatcher = default_dispatcher

    def place(self, qos, message):
        if qos is not None and qos.period_ms in self.period_to_dispatcher:
            return self.period_to_dispatcher[qos.period_ms], None
        return self.default_dispatcher, None

    def dispatcher_ids(self):
        return set(self.period_to_dispatcher.values()) | {self.default_dispatcher}


class EDFPlacement:
    """Single dispatcher ordered by absolute deadline (timestamp + deadline)."""

    name = "edf"

    def __init__(self, dispatcher_id: int):
        self.dispatcher_id = dispatcher_id

    def place(self, qos, message):
        if qos is None or qos.deadline_ms is None:
            return self.dispatcher_id, KEY_INFINITY
        return self.dispatcher_id, message.timestamp_ms + qos.deadline_ms

    def dispatcher_ids(self):
        return {self.dispatcher_id}


def make_rm_jpr(
    period_to_dispatcher: Mapping[int, int], tsr: Optional[ThreadSchedulingRule] = None
) -> RMPlacement:
    """Rate-monotonic placement: shorter periods must map to dispatchers of
    equal or higher priority.  Unmapped periods and messages without QoS go
    to the lowest-priority dispatcher in FIFO order.

    Without ``tsr``, a smaller dispatcher id means higher priority.
    """
    if not period_to_dispatcher:
        raise PlacementError("empty period map")
    if tsr is not None:
        prio = {d.dispatcher_id: d.priority for d in tsr.dispatchers}
        for did in period_to_dispatcher.values():
            if did not in prio:
                raise PlacementError(f"dispatcher {did} not in thread scheduling rule")
        lowest = tsr.lowest
    else:
        ids = set(period_to_dispatcher.values())
        prio = {did: -did for did in ids}
        lowest = max(ids)
    ordered = sorted(period_to_dispatcher.items())
    for (p1, d1), (p2, d2) in zip(ordered, ordered[1:]):
        if prio[d1] < prio[d2]:
            raise PlacementError(
                f"period {p1} -> dispatcher {d1} has lower priority than period {p2} -> dispatcher {d2}"
            )
    return RMPlacement(period_to_dispatcher, lowest)


def make_edf_jpr(dispatcher_id: int) -> EDFPlacement:
    return EDFPlacement(dispatcher_id)


# -- jobs and events -----------------------------------------------------------

@dataclass
class Job:
    job_id: int
    message: Message
    recipient: ComponentAddress
    queue_key: int
    enqueue_time_ms: int
    dispatcher_id: int = 0


def query_jpr(jpr: JobPlacementRule, job: Job) -> tuple[int, int]:
    dispatcher_id, key = jpr.place(job.message.qos, job.message)
    if key is None:
        key = job.enqueue_time_ms
    return dispatcher_id, int(key)


@dataclass
class DeliveryEvent:
    event: str  # deliver | undeliverable | forward
    job: Job
    dispatcher_id: int
    start_ms: int
    end_ms: int
    outputs: list = field(default_factory=list)
    detail: str = ""


@dataclass(frozen=True)
class TraceRow:
    event: str
    job_id: object = ""
    msg_type: str = ""
    dispatcher: object = ""
    enqueue_ms: object = ""
    start_ms: object = ""
    end_ms: object = ""

    def as_list(self) -> list:
        return [self.event, self.job_id, self.msg_type, self.dispatcher, self.enqueue_ms, self.start_ms, self.end_ms]


def write_trace_csv(rows: Iterable[TraceRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for r in rows:
        w.writerow(r.as_list())


class _Running:
    __slots__ = ("job", "remaining", "start")

    def __init__(self, job: Job, remaining: int, start: int):
        self.job = job
        self.remaining = remaining
        self.start = start


class Dispatcher:
    def __init__(self, spec: DispatcherSpec):
        self.spec = spec
        self.queue: list = []
        self.current: Optional[_Running] = None
        self._seq = itertools.count()

    @property
    def dispatcher_id(self) -> int:
        return self.spec.dispatcher_id

    @property
    def priority(self) -> int:
        return self.spec.priority

    def push(self, job: Job) -> None:
        heapq.heappush(self.queue, (job.queue_key, next(self._seq), job))

    def pop(self) -> Job:
        return heapq.heappop(self.queue)[2]

    def has_work(self) -> bool:
        return bool(self.queue) or self.current is not None

    def remove_for(self, addr: ComponentAddress) -> list[Job]:
        keep, removed = [], []
        for item in self.queue:
            (removed if item[2].recipient == addr else keep).append(item)
        heapq.heapify(keep)
        self.queue = keep
        return [item[2] for item in sorted(removed)]

    def __len__(self):
        return len(self.queue)


class NodeClock:
    """A node's local clock on top of the shared simulated clock.

    local = true * (1 + skew) + offset.  Timers are given in local time.
    """

    simulated = True

    def __init__(self, base: SimClock, offset_ms: float = 0.0, skew_ppm: float = 0.0):
        self.base = base
        self.offset_ms = offset_ms
        self.skew = skew_ppm * 1e-6

    def now_precise(self) -> float:
        return self.base.now_ms() * (1.0 + self.skew) + self.offset_ms

    def now_ms(self) -> int:
        return max(0, int(round(self.now_precise())))

    def _to_true(self, local_ms: float) -> float:
        return (local_ms - self.offset_ms) / (1.0 + self.skew)

    def call_at(self, local_ms: int, fn) -> None:
        import math

        self.base.call_at(math.ceil(self._to_true(local_ms) - 1e-9), fn)

    def call_later(self, delay_ms: int, fn) -> None:
        self.base.call_later(delay_ms, fn)


class _RealTimers:
    def __init__(self, clock: RealClock, wake: Callable[[], None]):
        self.clock = clock
        self.wake = wake
        self.heap: list = []
        self.seq = itertools.count()
        self.lock = threading.Lock()

    def call_at(self, t_ms: int, fn) -> None:
        with self.lock:
            heapq.heappush(self.heap, (t_ms, next(self.seq), fn))
        self.wake()

    def call_later(self, delay_ms: int, fn) -> None:
        self.call_at(self.clock.now_ms() + int(delay_ms), fn)

    def due(self) -> list:
        now = self.clock.now_ms()
        out = []
        with self.lock:
            while self.heap and self.heap[0][0] <= now:
                out.append(heapq.heappop(self.heap)[2])
        return out

    def next_in(self) -> Optional[float]:
        with self.lock:
            if not self.heap:
                return None
            return max(0.0, (self.heap[0][0] - self.clock.now_ms()) / 1000.0)


# -- kernel ------------------------------------------------------------------------

class Kernel:
    def __init__(
        self,
        tsr: ThreadSchedulingRule,
        jpr: JobPlacementRule,
        time_source: str = "simulated",
        node_id: str = "local",
        clock=None,
        forward_window_ms: int = 30,
    ):
        missing = jpr.dispatcher_ids() - set(tsr.ids)
        if missing:
            raise KernelConfigError(f"placement rule targets unknown dispatchers {sorted(missing)}")
        if time_source not in ("simulated", "real"):
            raise KernelConfigError(f"unknown time source {time_source!r}")
        self.tsr = tsr
        self.jpr = jpr
        self.time_source = time_source
        self.node_id = node_id
        self.dispatchers = {d.dispatcher_id: Dispatcher(d) for d in tsr.dispatchers}
        self._by_priority = sorted(self.dispatchers.values(), key=lambda d: -d.priority)
        self.registry = ProfileRegistry(node_id)
        self.shells: dict[ComponentAddress, Shell] = {}
        self.factories: dict[str, Callable[[], Component]] = {}
        self.forwarding: dict[ComponentAddress, tuple[str, int]] = {}
        self.forward_window_ms = forward_window_ms
        self.peers: set[str] = set()
        self.trace: list[TraceRow] = []
        self.events: list[DeliveryEvent] = []
        self.keep_events = True
        self.listeners: list[Callable[[DeliveryEvent], None]] = []
        self._ids = itertools.count(1)
        self._local_ids = itertools.count(1)
        self._lock = threading.RLock()
        if time_source == "simulated":
            self.clock = clock if clock is not None else SimClock()
            self._timers = self.clock
        else:
            self.clock = clock if clock is not None else RealClock()
            self._wake = threading.Condition(self._lock)
            self._timers = _RealTimers(self.clock, self._notify_worker)
            self._stop = False
            self._thread: Optional[threading.Thread] = None
        # simulated processor
        self._running: Optional[Dispatcher] = None
        self._segment_start = 0
        self._token = 0
        self._kick_pending = False

    @property
    def simulated(self) -> bool:
        return self.time_source == "simulated"

    def now_ms(self) -> int:
        return self.clock.now_ms()

    def call_at(self, t_ms: int, fn) -> None:
        self._timers.call_at(t_ms, fn)

    def call_later(self, delay_ms: int, fn) -> None:
        self._timers.call_later(delay_ms, fn)

    def record(self, event: str, msg_type: str = "", job_id="", dispatcher="", enqueue="", start=None, end=None):
        now = self.now_ms()
        self.trace.append(
            TraceRow(event, job_id, msg_type, dispatcher, enqueue, now if start is None else start, now if end is None else end)
        )

    # -- components --------------------------------------------------------------
    def add_factory(self, kind: str, factory: Callable[[], Component]) -> None:
        self.factories[kind] = factory

    def register_component(self, profile: str, shell: Shell, rebind: bool = False) -> ComponentAddress:
        if not profile:
            raise RegistryError("profile must be non-empty")
        with self._lock:
            existing = self.registry.resolve(profile) if profile in self.registry else None
            if isinstance(existing, ComponentAddress):
                live = self.shells.get(existing)
                if live is not None and live.state is not ShellState.DESTROYED:
                    raise RegistryError(f"profile {profile!r} already live on {self.node_id}")
            if existing is not None and not rebind and not isinstance(existing, ComponentAddress):
                raise RegistryError(f"profile {profile!r} already bound to {existing}")
            addr = ComponentAddress(self.node_id, next(self._local_ids))
            shell.address = addr
            self.shells[addr] = shell
            self.registry.rebind(profile, addr)
        shell.attach(ComponentContext(self.node_id, profile, self.now_ms))
        return addr

    def deploy(self, profile: str, component: Component, config: Optional[dict] = None, factory=None) -> ComponentAddress:
        shell = Shell(profile, component, factory=factory, config=config)
        return self.register_component(profile, shell)

    def deregister_component(self, addr: ComponentAddress) -> list[DeliveryEvent]:
        with self._lock:
            shell = self.shells.pop(addr, None)
            if shell is None:
                raise ProfileNotFound(str(addr))
            if self.registry.local_profiles().get(shell.profile) == addr:
                self.registry.unregister(shell.profile)
            flushed = []
            for d in self.dispatchers.values():
                flushed.extend(d.remove_for(addr))
        shell.destroy()
        events = []
        now = self.now_ms()
        for job in flushed:
            events.append(self._emit(DeliveryEvent("undeliverable", job, job.dispatcher_id, now, now, detail="deregistered")))
        return events

    def retire_component(self, addr: ComponentAddress, window_ms: Optional[int] = None) -> None:
        """Destroy a migrated-away shell; queued jobs for it are forwarded by
        profile for ``window_ms`` instead of failing."""
        with self._lock:
            shell = self.shells.pop(addr, None)
            if shell is None:
                return
            until = self.now_ms() + (self.forward_window_ms if window_ms is None else window_ms)
            self.forwarding[addr] = (shell.profile, until)
        shell.destroy()

    def shell_for(self, profile: str) -> Shell:
        b = self.registry.resolve(profile)
        if not isinstance(b, ComponentAddress) or b not in self.shells:
            raise ProfileNotFound(profile)
        return self.shells[b]

    # -- routing ------------------------------------------------------------------
    def resolve(self, profile: str):
        try:
            return self.registry.resolve(profile)
        except ProfileNotFound:
            if "@" in profile:
                node = profile.rsplit("@", 1)[1]
                if node != self.node_id and node in self.peers:
                    return RemoteBinding(node)
            raise

    def _messenger_address(self) -> ComponentAddress:
        b = self.registry.resolve(f"{MESSENGER}@{self.node_id}")
        assert isinstance(b, ComponentAddress)
        return b

    def submit_message(self, m: Message) -> Job:
        """Turn ``m`` into a job and queue it.

        Raises :class:`Undeliverable` if the profile does not resolve.
        """
        try:
            binding = self.resolve(m.profile_name)
        except ProfileNotFound:
            raise Undeliverable(f"no component or node for profile {m.profile_name!r}") from None
        if isinstance(binding, RemoteBinding):
            try:
                recipient = self._messenger_address()
            except ProfileNotFound:
                raise Undeliverable(f"{m.profile_name!r} is remote and {self.node_id} has no messenger") from None
        else:
            recipient = binding
        with self._lock:
            now = self.now_ms()
            job = Job(next(self._ids), m, recipient, 0, now)
            did, key = query_jpr(self.jpr, job)
            if did not in self.dispatchers:
                raise PlacementError(f"placement rule chose unknown dispatcher {did}")
            job.dispatcher_id = did
            job.queue_key = key
            self.dispatchers[did].push(job)
        if self.simulated:
            self._kick()
        else:
            self._notify_worker()
        return job

    def submit_output(self, m: Message) -> Optional[Job]:
        """Submit on behalf of a component; failures become trace events."""
        try:
            return self.submit_message(m)
        except Undeliverable as exc:
            log.debug("undeliverable output: %s", exc)
            self.record("undeliverable", m.msg_type)
            return None

    # -- delivery ----------------------------------------------------------------
    def _emit(self, ev: DeliveryEvent) -> DeliveryEvent:
        j = ev.job
        self.trace.append(
            TraceRow(ev.event, j.job_id, j.message.msg_type, ev.dispatcher_id, j.enqueue_time_ms, ev.start_ms, ev.end_ms)
        )
        if self.keep_events:
            self.events.append(ev)
        for fn in self.listeners:
            fn(ev)
        return ev

    def _deliver(self, job: Job, start: int, end: int) -> DeliveryEvent:
        shell = self.shells.get(job.recipient)
        if shell is None:
            fwd = self.forwarding.get(job.recipient)
            if fwd is not None and end <= fwd[1]:
                profile = fwd[0]
                ev = self._emit(DeliveryEvent("forward", job, job.dispatcher_id, start, end, detail=profile))
                self.submit_output(job.message)
                return ev
            return self._emit(DeliveryEvent("undeliverable", job, job.dispatcher_id, start, end, detail="no recipient"))
        try:
            outputs = shell.deliver(job.message)
        except Undeliverable as exc:
            return self._emit(DeliveryEvent("undeliverable", job, job.dispatcher_id, start, end, detail=str(exc)))
        ev = self._emit(DeliveryEvent("deliver", job, job.dispatcher_id, start, end, outputs))
        for out in outputs:
            self.submit_output(out)
        return ev

    def _cost(self, job: Job) -> int:
        shell = self.shells.get(job.recipient)
        return max(0, shell.execution_ms(job.message)) if shell is not None else 0

    def process_next(self, dispatcher_id: int) -> DeliveryEvent:
        """Dequeue the smallest-key job of one dispatcher and deliver it now.

        Used directly by tests and by the real-time worker; the simulated
        processor accounts execution time itself.
        """
        with self._lock:
            d = self.dispatchers[dispatcher_id]
            if not d.queue:
                raise LookupError(f"dispatcher {dispatcher_id} has no pending job")
            job = d.pop()
        start = self.now_ms()
        if self.simulated:
            return self._deliver(job, start, start + self._cost(job))
        with self._lock:
            ev = self._deliver(job, start, start)
        ev.end_ms = self.now_ms()
        return ev

    def pending(self) -> int:
        return sum(len(d) + (d.current is not None) for d in self.dispatchers.values())

    # -- simulated processor --------------------------------------------------------
    def _kick(self) -> None:
        if self._kick_pending:
            return
        self._kick_pending = True

        def run():
            self._kick_pending = False
            self._reschedule()

        self.clock.call_later(0, run)

    def _reschedule(self) -> None:
        now = self.now_ms()
        running = self._running
        if running is not None and running.current is not None:
            running.current.remaining -= now - self._segment_start
            self._segment_start = now
        best = next((d for d in self._by_priority if d.has_work()), None)
        if best is None:
            self._running = None
            return
        if best is running:
            return
        if best.current is None:
            job = best.pop()
            best.current = _Running(job, self._cost(job), now)
        self._running = best
        self._segment_start = now
        self._token += 1
        token = self._token
        self.clock.call_later(best.current.remaining, lambda: self._complete(best, token))

    def _complete(self, d: Dispatcher, token: int) -> None:
        if token != self._token or self._running is not d:
            return
        run = d.current
        d.current = None
        self._running = None
        self._deliver(run.job, run.start, self.now_ms())
        self._reschedule()

    def run_until(self, t_ms: int) -> None:
        if not self.simulated:
            raise KernelConfigError("run_until needs the simulated time source")
        self.clock.run_until(t_ms)

    # -- real-time worker ------------------------------------------------------------
    def _notify_worker(self) -> None:
        if self.simulated:
            return
        with self._wake:
            self._wake.notify_all()

    def start(self) -> None:
        if self.simulated:
            raise KernelConfigError("start() is for the real time source; use run_until")
        self._stop = False
        self._thread = threading.Thread(target=self._worker, name=f"kernel-{self.node_id}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self.simulated:
            return
        with self._wake:
            self._stop = True
            self._wake.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _worker(self) -> None:
        while True:
            for fn in self._timers.due():
                try:
                    fn()
                except Exception:  # a faulty timer callback must not kill the node
                    log.exception("timer callback failed")
            with self._wake:
                if self._stop:
                    return
                d = next((d for d in self._by_priority if d.queue), None)
                if d is None:
                    self._wake.wait(timeout=self._timers.next_in() or 0.05)
                    continue
            try:
                self.process_next(d.dispatcher_id)
            except Exception:
                log.exception("dispatch failed")


def configure_kernel(
    tsr: ThreadSchedulingRule,
    jpr: JobPlacementRule,
    time_source: str = "simulated",
    node_id: str = "local",
    clock=None,
) -> Kernel:
    return Kernel(tsr, jpr, time_source=time_source, node_id=node_id, clock=clock)


def register_component(k: Kernel, profile: str, shell: Shell) -> ComponentAddress:
    return k.register_component(profile, shell)


def deregister_component(k: Kernel, addr: ComponentAddress) -> list[DeliveryEvent]:
    return k.deregister_component(addr)


def submit_message(k: Kernel, m: Message) -> Job:
    return k.submit_message(m)


def process_next(k: Kernel, dispatcher_id: int) -> DeliveryEvent:
    return k.process_next(dispatcher_id)
