"""Service components every node runs, and the lifecycle manager.

Profiles are qualified by node: ``Notifier@nodeA``, ``NetworkMessenger@nodeA``,
``ProfileRegistry@nodeA``, ``NetworkTime@nodeA``, ``Manager@nodeA``.
"""

from __future__ import annotations

import logging
from typing import Optional

from .component import (
    Component,
    LifecycleError,
    MementoMismatch,
    MigrationPackage,
    ShellState,
    abort_migration,
    begin_migration,
    upgrade_component,
)
from .kernel import MESSENGER, Kernel
from .message import Message, QoSSpec, Reliability, parse_message, serialize_message
from .services.clock import ClockModel, PingSample, record_ping_sample, translate_timestamp
from .services.notifier import NotificationSchedule, notifier_due
from .services.registry import ComponentAddress, ProfileNotFound, RemoteBinding

log = logging.getLogger(__name__)

NOTIFIER = "Notifier"
REGISTRY = "ProfileRegistry"
NETWORK_TIME = "NetworkTime"
MANAGER = "Manager"


def svc(name: str, node_id: str) -> str:
    return f"{name}@{node_id}"


def qos_to_content(q: Optional[QoSSpec]) -> dict:
    if q is None:
        return {}
    d = {"crit": q.crit}
    for k in ("period_ms", "deadline_ms", "wcet_ms"):
        v = getattr(q, k)
        if v is not None:
            d[k] = v
    return d


def qos_from_content(d: Optional[dict]) -> Optional[QoSSpec]:
    if not d:
        return None
    return QoSSpec(
        crit=d.get("crit", 0), period_ms=d.get("period_ms"), deadline_ms=d.get("deadline_ms"), wcet_ms=d.get("wcet_ms")
    )


def timer_request(node_id: str, reply_to: str, delay_ms: int, msg_type: str, content=None, qos=None, now_ms: int = 0):
    """Ask the node's Notifier for a one-shot message to ``reply_to``."""
    return Message(
        "Timer",
        svc(NOTIFIER, node_id),
        {
            "delay_ms": int(delay_ms),
            "target": reply_to,
            "msg_type": msg_type,
            "content": content or {},
            "qos": qos_to_content(qos),
        },
        timestamp_ms=now_ms,
        qos=qos,
    )


class NotifierService(Component):
    kind = "notifier"

    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.schedules: list[NotificationSchedule] = []

    def add_schedule(self, sched: NotificationSchedule) -> NotificationSchedule:
        self.schedules.append(sched)
        self._arm(sched)
        return sched

    def _arm(self, sched: NotificationSchedule) -> None:
        due = sched.next_due_ms()
        if due is None:
            return

        def fire():
            if not any(s is sched for s in self.schedules):
                return
            for m in notifier_due(sched, self.kernel.now_ms()):
                self.kernel.submit_output(m)
            self._arm(sched)

        self.kernel.call_at(due, fire)

    def transfer(self, profile: str) -> list[NotificationSchedule]:
        moved = [s for s in self.schedules if s.target_profile == profile]
        self.schedules = [s for s in self.schedules if s.target_profile != profile]
        return moved

    def process_message(self, m: Message) -> list[Message]:
        c = m.content
        if m.msg_type == "Timer":
            out = Message(
                c["msg_type"],
                c["target"],
                dict(c.get("content") or {}),
                timestamp_ms=m.timestamp_ms + int(c["delay_ms"]),
                qos=qos_from_content(c.get("qos")),
            )
            self.kernel.call_at(out.timestamp_ms, lambda: self.kernel.submit_output(out))
        elif m.msg_type == "Schedule":
            self.add_schedule(schedule_from_content(c))
        elif m.msg_type == "AdoptSchedules":
            for doc in c.get("schedules", []):
                self.add_schedule(schedule_from_content(doc))
        elif m.msg_type == "Cancel":
            self.transfer(c["target"])
        return []


def schedule_to_content(s: NotificationSchedule) -> dict:
    d = {
        "target": s.target_profile,
        "period_ms": s.period_ms,
        "phase_ms": s.phase_ms,
        "fired": s.fired,
        "qos": qos_to_content(s.qos),
    }
    if s.count is not None:
        d["count"] = s.count
    return d


def schedule_from_content(c: dict) -> NotificationSchedule:
    return NotificationSchedule(
        target_profile=c["target"],
        period_ms=int(c["period_ms"]),
        phase_ms=int(c.get("phase_ms", 0)),
        qos=qos_from_content(c.get("qos")),
        count=c.get("count"),
        fired=int(c.get("fired", 0)),
    )


class NetworkMessenger(Component):
    """Carries messages for remote profiles over per-peer link endpoints."""

    kind = "network-messenger"

    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.links: dict = {}
        self.clocks: dict[str, ClockModel] = {}
        self.sent = 0
        self.received = 0
        self.untranslated = 0

    def attach_link(self, peer: str, endpoint) -> None:
        self.links[peer] = endpoint
        self.kernel.peers.add(peer)

    def process_message(self, m: Message) -> list[Message]:
        try:
            binding = self.kernel.resolve(m.profile_name)
        except ProfileNotFound:
            self.kernel.record("undeliverable", m.msg_type)
            return []
        if isinstance(binding, ComponentAddress):
            return [m]
        link = self.links.get(binding.node_id)
        if link is None:
            self.kernel.record("undeliverable", m.msg_type)
            return []
        self.sent += 1
        link.send(m)
        return []

    def on_receive(self, peer: str, m: Message) -> None:
        self.received += 1
        cm = self.clocks.get(peer)
        if cm is not None:
            if cm.empty:
                self.untranslated += 1
                self.kernel.record("clock_passthrough", m.msg_type)
            local = translate_timestamp(m.timestamp_ms, cm)
            m = m.replace(timestamp_ms=max(0, int(round(local))))
        self.kernel.submit_output(m)


class RegistryService(Component):
    kind = "profile-registry"

    def __init__(self, kernel: Kernel):
        self.kernel = kernel

    def process_message(self, m: Message) -> list[Message]:
        if m.msg_type != "RegistryUpdate":
            return []
        profile, node = m.content["profile"], m.content["node"]
        if node == self.kernel.node_id:
            return []
        try:
            b = self.kernel.registry.resolve(profile)
        except ProfileNotFound:
            b = None
        if isinstance(b, ComponentAddress):
            shell = self.kernel.shells.get(b)
            if shell is not None and shell.state in (ShellState.RUNNING, ShellState.PAUSED):
                return []
        self.kernel.registry.rebind(profile, RemoteBinding(node))
        return []


def broadcast_binding(kernel: Kernel, profile: str) -> list[Message]:
    now = kernel.now_ms()
    return [
        Message(
            "RegistryUpdate",
            svc(REGISTRY, peer),
            {"profile": profile, "node": kernel.node_id},
            timestamp_ms=now,
            reliability=Reliability.RELIABLE,
        )
        for peer in sorted(kernel.peers)
    ]


class NetworkTimeService(Component):
    """Keeps a ClockModel per peer by periodic Ping/Response exchange."""

    kind = "network-time"

    def __init__(self, kernel: Kernel, messenger: NetworkMessenger, ping_period_ms: int = 1000, window: int = 16):
        self.kernel = kernel
        self.messenger = messenger
        self.ping_period_ms = ping_period_ms
        self.window = window

    def _precise(self) -> float:
        clock = self.kernel.clock
        return clock.now_precise() if hasattr(clock, "now_precise") else float(clock.now_ms())

    def model(self, peer: str) -> ClockModel:
        cm = self.messenger.clocks.get(peer)
        if cm is None:
            cm = self.messenger.clocks[peer] = ClockModel(peer, window=self.window)
        return cm

    def start(self) -> None:
        for peer in sorted(self.kernel.peers):
            self.model(peer)
        self.kernel.call_later(self.ping_period_ms, self._tick)

    def _tick(self) -> None:
        now = self.kernel.now_ms()
        for peer in sorted(self.kernel.peers):
            self.kernel.submit_output(
                Message(
                    "Ping",
                    svc(NETWORK_TIME, peer),
                    {"from": self.kernel.node_id, "t1": self._precise()},
                    timestamp_ms=now,
                )
            )
        self.kernel.call_later(self.ping_period_ms, self._tick)

    def process_message(self, m: Message) -> list[Message]:
        c = m.content
        if m.msg_type == "Ping":
            t2 = self._precise()
            return [
                Message(
                    "Response",
                    svc(NETWORK_TIME, c["from"]),
                    {"from": self.kernel.node_id, "t1": c["t1"], "t2": t2, "t3": self._precise()},
                    timestamp_ms=self.kernel.now_ms(),
                )
            ]
        if m.msg_type == "Response":
            t4 = self._precise()
            record_ping_sample(self.model(c["from"]), PingSample(c["t1"], c["t2"], c["t3"], t4))
        return []


class LifecycleManager(Component):
    """Handles Deploy / Upgrade / Migrate requests sent as ordinary messages.

    ``swap_ms`` models the time a state swap occupies the node; the target
    shell stays paused (buffering) for that long.
    """

    kind = "lifecycle-manager"

    def __init__(self, kernel: Kernel, notifier: NotifierService, swap_ms: int = 2):
        self.kernel = kernel
        self.notifier = notifier
        self.swap_ms = swap_ms
        self.reports: list[dict] = []
        self._upgrades: dict[str, dict] = {}
        self._outgoing: dict[str, dict] = {}
        self._incoming: dict[str, dict] = {}

    def _now(self) -> int:
        return self.kernel.now_ms()

    def _reply(self, req: Message, content: dict) -> list[Message]:
        content = dict(content)
        self.reports.append(content)
        to = req.content.get("reply_to")
        if not to:
            return []
        return [Message("LifecycleReport", to, content, timestamp_ms=self._now(), qos=req.qos)]

    def _self_msg(self, msg_type: str, content: dict, qos) -> Message:
        return Message(msg_type, svc(MANAGER, self.kernel.node_id), content, timestamp_ms=self._now(), qos=qos)

    def process_message(self, m: Message) -> list[Message]:
        handler = getattr(self, "_on_" + m.msg_type, None)
        if handler is None:
            return []
        try:
            return handler(m)
        except (LifecycleError, ProfileNotFound, KeyError) as exc:
            self.kernel.record("lifecycle_error", m.msg_type)
            return self._reply(m, {"action": m.msg_type, "ok": False, "error": f"{type(exc).__name__}: {exc}"})

    # -- deploy / upgrade ---------------------------------------------------------
    def _on_Deploy(self, m):
        c = m.content
        factory = self.kernel.factories.get(c["kind"])
        if factory is None:
            raise LifecycleError(f"no factory for {c['kind']!r} on {self.kernel.node_id}")
        from .component import Shell

        shell = Shell(c["profile"], factory(), factory=factory, kind=c["kind"], config=dict(c.get("config") or {}))
        addr = self.kernel.register_component(c["profile"], shell)
        self.kernel.record("deploy", c["profile"])
        return broadcast_binding(self.kernel, c["profile"]) + self._reply(
            m, {"action": "deploy", "ok": True, "profile": c["profile"], "address": str(addr)}
        )

    def _on_Upgrade(self, m):
        c = m.content
        profile = c["profile"]
        kind = c.get("kind")
        shell = self.kernel.shell_for(profile)
        kind = kind or shell.kind
        if kind not in self.kernel.factories:
            raise LifecycleError(f"no factory for {kind!r} on {self.kernel.node_id}")
        if self.swap_ms <= 0:
            return self._finish_upgrade(m, shell, kind, self._now())
        shell.pause()
        self._upgrades[profile] = {"request": m, "since": self._now(), "kind": kind}
        return [
            timer_request(
                self.kernel.node_id, svc(MANAGER, self.kernel.node_id), self.swap_ms, "UpgradeSwap",
                {"profile": profile}, qos=m.qos, now_ms=self._now(),
            )
        ]

    def _on_UpgradeSwap(self, m):
        st = self._upgrades.pop(m.content["profile"])
        shell = self.kernel.shell_for(m.content["profile"])
        return self._finish_upgrade(st["request"], shell, st["kind"], st["since"])

    def _finish_upgrade(self, req, shell, kind, since):
        c = req.content
        config = c.get("config")
        report = upgrade_component(
            shell, self.kernel.factories[kind], new_kind=kind,
            config=None if config is None else {**shell.config, **config},
            clock=self.kernel.now_ms, paused_since=since,
        )
        self.kernel.record("upgrade" if report.ok else "upgrade_aborted", shell.profile, start=int(since))
        return list(report.outputs) + self._reply(req, {"action": "upgrade", **report.to_content()})

    # -- migration (source side) ------------------------------------------------------
    def _on_Migrate(self, m):
        c = m.content
        profile, dest = c["profile"], c["dest"]
        shell = self.kernel.shell_for(profile)
        if dest == self.kernel.node_id:
            return self._on_Upgrade(m)
        if dest not in self.kernel.peers:
            raise LifecycleError(f"unknown destination node {dest!r}")
        pkg = begin_migration(shell)
        self._outgoing[profile] = {"request": m, "addr": shell.address, "since": self._now(), "dest": dest}
        self.kernel.record("migrate_begin", profile)
        return [
            Message(
                "MigrationPackage", svc(MANAGER, dest), pkg.to_content(),
                timestamp_ms=self._now(), reliability=Reliability.RELIABLE, qos=m.qos,
            )
        ]

    def _on_MigrationComplete(self, m):
        c = m.content
        profile = c["profile"]
        st = self._outgoing.pop(profile)
        shell = self.kernel.shells.get(st["addr"])
        if not c.get("ok"):
            self.kernel.record("migrate_aborted", profile)
            outs = abort_migration(shell) if shell is not None else []
            return outs + self._reply(st["request"], {"action": "migrate", "ok": False, "profile": profile, "error": c.get("error", "")})
        dest = st["dest"]
        self.kernel.registry.rebind(profile, RemoteBinding(dest))
        leftovers = shell.drain() if shell is not None else []
        self.kernel.retire_component(st["addr"])
        schedules = [schedule_to_content(s) for s in self.notifier.transfer(profile)]
        now = self._now()
        self.kernel.record("migrate_rebind", profile, start=st["since"])
        out = [
            Message(
                "MigrationForward", svc(MANAGER, dest),
                {"profile": profile, "pending": [serialize_message(x) for x in leftovers]},
                timestamp_ms=now, reliability=Reliability.RELIABLE, qos=m.qos,
            )
        ]
        if schedules:
            out.append(
                Message(
                    "AdoptSchedules", svc(NOTIFIER, dest), {"schedules": schedules},
                    timestamp_ms=now, reliability=Reliability.RELIABLE, qos=m.qos,
                )
            )
        report = {
            "action": "migrate", "ok": True, "profile": profile, "dest": dest,
            "rebind_ms": float(now - st["since"]),
            "forwarded": len(leftovers),
        }
        return out + self._reply(st["request"], report)

    # -- migration (destination side) ---------------------------------------------------
    def _on_MigrationPackage(self, m):
        pkg = MigrationPackage.from_content(m.content)
        src = pkg.source_node
        try:
            addr = self._complete_held(pkg)
        except (LifecycleError, MementoMismatch) as exc:
            self.kernel.record("migrate_refused", pkg.profile)
            return [
                Message(
                    "MigrationComplete", svc(MANAGER, src),
                    {"profile": pkg.profile, "ok": False, "error": str(exc)},
                    timestamp_ms=self._now(), reliability=Reliability.RELIABLE, qos=m.qos,
                )
            ]
        self._incoming[pkg.profile] = {"addr": addr, "held": len(pkg.pending)}
        self.kernel.record("migrate_complete", pkg.profile)
        return [
            Message(
                "MigrationComplete", svc(MANAGER, src),
                {"profile": pkg.profile, "ok": True, "bound_at": self._now()},
                timestamp_ms=self._now(), reliability=Reliability.RELIABLE, qos=m.qos,
            )
        ]

    def _complete_held(self, pkg: MigrationPackage) -> ComponentAddress:
        # Bind now but keep the shell paused until the source forwards what
        # reached it meanwhile; direct traffic queues behind that backlog.
        factory = self.kernel.factories.get(pkg.component_kind)
        if factory is None:
            raise LifecycleError(f"node {self.kernel.node_id} has no factory for {pkg.component_kind!r}")
        from .component import Shell

        comp = factory()
        comp.check_memento(pkg.memento)
        shell = Shell(pkg.profile, comp, factory=factory, kind=pkg.component_kind, config=pkg.config)
        shell.state = ShellState.PAUSED
        addr = self.kernel.register_component(pkg.profile, shell, rebind=True)
        shell.current.set_memento(pkg.memento)
        shell.inbox.extend(pkg.pending)
        return addr

    def _on_MigrationForward(self, m):
        profile = m.content["profile"]
        st = self._incoming.pop(profile)
        shell = self.kernel.shells[st["addr"]]
        forwarded = [parse_message(t) for t in m.content.get("pending") or []]
        queued = list(shell.inbox)
        shell.inbox.clear()
        shell.inbox.extend(queued[: st["held"]] + forwarded + queued[st["held"]:])
        outs = shell.resume()
        self.kernel.record("migrate_resume", profile)
        return outs + broadcast_binding(self.kernel, profile)


def install_services(kernel: Kernel, swap_ms: int = 2, ping_period_ms: Optional[int] = None) -> dict:
    """Register the standard service components on ``kernel``."""
    nid = kernel.node_id
    messenger = NetworkMessenger(kernel)
    notifier = NotifierService(kernel)
    registry = RegistryService(kernel)
    manager = LifecycleManager(kernel, notifier, swap_ms=swap_ms)
    kernel.deploy(svc(MESSENGER, nid), messenger)
    kernel.deploy(svc(NOTIFIER, nid), notifier)
    kernel.deploy(svc(REGISTRY, nid), registry)
    kernel.deploy(svc(MANAGER, nid), manager)
    services = {"messenger": messenger, "notifier": notifier, "registry": registry, "manager": manager}
    if ping_period_ms:
        nt = NetworkTimeService(kernel, messenger, ping_period_ms=ping_period_ms)
        kernel.deploy(svc(NETWORK_TIME, nid), nt)
        services["network_time"] = nt
    kernel.services = services
    return services


class RoutingDecision:
    __slots__ = ("route", "binding", "job")

    def __init__(self, route: str, binding=None, job=None):
        self.route = route  # local | remote | undeliverable
        self.binding = binding
        self.job = job

    def __repr__(self):
        return f"RoutingDecision({self.route!r}, {self.binding!r})"


def route_message(kernel: Kernel, m: Message) -> RoutingDecision:
    """Submit ``m`` on ``kernel`` and say where it went."""
    from .component import Undeliverable

    try:
        binding = kernel.resolve(m.profile_name)
    except ProfileNotFound:
        kernel.record("undeliverable", m.msg_type)
        return RoutingDecision("undeliverable")
    try:
        job = kernel.submit_message(m)
    except Undeliverable:
        kernel.record("undeliverable", m.msg_type)
        return RoutingDecision("undeliverable", binding)
    route = "remote" if isinstance(binding, RemoteBinding) else "local"
    return RoutingDecision(route, binding, job)
