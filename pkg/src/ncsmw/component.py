"""Shell-encapsulated components, mementos, runtime upgrade and migration."""

from __future__ import annotations

import copy
import enum
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .message import Message, parse_message, serialize_message

log = logging.getLogger(__name__)


class Undeliverable(RuntimeError):
    pass


class MementoMismatch(ValueError):
    pass


class LifecycleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Memento:
    schema_id: str
    version: int
    state_doc: dict = field(default_factory=dict)

    def to_content(self) -> dict:
        return {"schema_id": self.schema_id, "version": self.version, "state": copy.deepcopy(self.state_doc)}

    @classmethod
    def from_content(cls, doc: dict) -> "Memento":
        return cls(doc["schema_id"], int(doc["version"]), copy.deepcopy(doc.get("state") or {}))


class ComponentContext:
    """What a component may ask of its host: identity and the local clock."""

    def __init__(self, node_id: str, profile: str, now_ms: Callable[[], int]):
        self.node_id = node_id
        self.profile = profile
        self._now = now_ms

    def now_ms(self) -> int:
        return self._now()


class Component:
    """Base class for the uniform component interface.

    Subclasses override the callbacks they need.  ``execution_ms`` tells a
    simulated kernel how long handling ``m`` occupies the processor.
    """

    kind = "component"
    schema_id: Optional[str] = None
    memento_version = 1

    ctx: Optional[ComponentContext] = None

    def initialize(self, config: dict) -> None:
        pass

    def process_message(self, m: Message) -> list[Message]:
        return []

    def get_memento(self) -> Memento:
        return Memento(self.schema_id or self.kind, self.memento_version, {})

    def set_memento(self, memento: Memento) -> None:
        self.check_memento(memento)

    def destroy(self) -> None:
        pass

    def execution_ms(self, m: Message) -> int:
        return 0

    def check_memento(self, memento: Memento) -> None:
        expected = self.schema_id or self.kind
        if memento.schema_id != expected:
            raise MementoMismatch(f"{self.kind} expects schema {expected!r}, got {memento.schema_id!r}")
        if memento.version > self.memento_version:
            raise MementoMismatch(
                f"{self.kind} understands memento version <= {self.memento_version}, got {memento.version}"
            )

    def now_ms(self) -> int:
        return self.ctx.now_ms() if self.ctx else 0


class ShellState(str, enum.Enum):
    RUNNING = "running"
    PAUSED = "paused"
    MIGRATING = "migrating"
    DESTROYED = "destroyed"


class Shell:
    """Hosts one component instance and owns its life cycle.

    Only one callback runs at a time.  While paused or migrating, incoming
    messages wait in ``inbox`` and are processed in arrival order on resume.
    """

    def __init__(
        self,
        profile: str,
        component: Component,
        factory: Optional[Callable[[], Component]] = None,
        kind: Optional[str] = None,
        config: Optional[dict] = None,
    ):
        self.profile = profile
        self.current = component
        self.factory = factory
        self.kind = kind or component.kind
        self.config = dict(config or {})
        self.state = ShellState.RUNNING
        self.inbox: deque[Message] = deque()
        self.address = None
        self.ctx: Optional[ComponentContext] = None
        self.delivered = 0
        self._lock = threading.RLock()
        self._busy = False

    def attach(self, ctx: ComponentContext) -> None:
        self.ctx = ctx
        self.current.ctx = ctx
        self.current.initialize(self.config)

    def execution_ms(self, m: Message) -> int:
        if self.state is not ShellState.RUNNING:
            return 0
        return int(self.current.execution_ms(m))

    def _invoke(self, m: Message) -> list[Message]:
        if self._busy:
            raise LifecycleError(f"re-entrant delivery to {self.profile}")
        self._busy = True
        try:
            out = self.current.process_message(m) or []
        finally:
            self._busy = False
        self.delivered += 1
        return list(out)

    def deliver(self, m: Message) -> list[Message]:
        with self._lock:
            if self.state is ShellState.DESTROYED:
                raise Undeliverable(f"{self.profile}: shell destroyed")
            if self.state is not ShellState.RUNNING:
                self.inbox.append(m)
                return []
            return self._invoke(m)

    def pause(self) -> None:
        with self._lock:
            if self.state is not ShellState.RUNNING:
                raise LifecycleError(f"cannot pause {self.profile} in state {self.state.value}")
            self.state = ShellState.PAUSED

    def resume(self) -> list[Message]:
        """Return to running and process the buffered messages in order."""
        with self._lock:
            if self.state is ShellState.DESTROYED:
                raise LifecycleError(f"{self.profile}: shell destroyed")
            self.state = ShellState.RUNNING
            out = []
            while self.inbox:
                out.extend(self._invoke(self.inbox.popleft()))
            return out

    def drain(self) -> list[Message]:
        with self._lock:
            pending = list(self.inbox)
            self.inbox.clear()
            return pending

    def destroy(self) -> None:
        with self._lock:
            if self.state is ShellState.DESTROYED:
                return
            self.current.destroy()
            self.state = ShellState.DESTROYED


def shell_deliver(s: Shell, m: Message) -> list[Message]:
    return s.deliver(m)


@dataclass
class UpgradeReport:
    profile: str
    old_kind: str
    new_kind: str
    ok: bool
    pause_ms: float
    error: str = ""
    flushed: int = 0
    outputs: list = field(default_factory=list)

    def to_content(self) -> dict:
        return {
            "profile": self.profile,
            "old_kind": self.old_kind,
            "new_kind": self.new_kind,
            "ok": self.ok,
            "pause_ms": float(self.pause_ms),
            "error": self.error,
            "flushed": self.flushed,
        }


def _clock_ms(clock) -> float:
    if clock is None:
        return time.monotonic() * 1000.0
    return float(clock())


def upgrade_component(
    s: Shell,
    new_factory: Callable[[], Component],
    new_kind: Optional[str] = None,
    config: Optional[dict] = None,
    clock: Optional[Callable[[], float]] = None,
    paused_since: Optional[float] = None,
) -> UpgradeReport:
    """Swap the component inside ``s`` for a fresh instance carrying its state.

    The shell may already be paused by the caller (``paused_since`` then
    marks when).  If the new instance rejects the memento the old kind is
    rebuilt from its own memento and keeps running.
    """
    with s._lock:
        if s.state is ShellState.RUNNING:
            paused_since = _clock_ms(clock)
            s.state = ShellState.PAUSED
        elif s.state is not ShellState.PAUSED:
            raise LifecycleError(f"cannot upgrade {s.profile} in state {s.state.value}")
        elif paused_since is None:
            paused_since = _clock_ms(clock)

        old = s.current
        old_kind = s.kind
        memento = old.get_memento()
        old.destroy()
        cfg = dict(s.config if config is None else config)
        new = new_factory()
        new.ctx = s.ctx
        error = ""
        try:
            new.initialize(cfg)
            new.set_memento(memento)
        except MementoMismatch as exc:
            error = str(exc)
            log.warning("upgrade of %s aborted: %s", s.profile, exc)
            restored = s.factory() if s.factory is not None else old
            restored.ctx = s.ctx
            restored.initialize(s.config)
            restored.set_memento(memento)
            s.current = restored
        else:
            s.current = new
            s.factory = new_factory
            s.kind = new_kind or new.kind
            s.config = cfg
        flushed = len(s.inbox)
        outputs = s.resume()
        pause = _clock_ms(clock) - paused_since
        return UpgradeReport(
            profile=s.profile,
            old_kind=old_kind,
            new_kind=s.kind if not error else (new_kind or new.kind),
            ok=not error,
            pause_ms=pause,
            error=error,
            flushed=flushed,
            outputs=outputs,
        )


@dataclass
class MigrationPackage:
    profile: str
    memento: Memento
    pending: list
    component_kind: str
    config: dict = field(default_factory=dict)
    source_node: str = ""

    def to_content(self) -> dict:
        return {
            "profile": self.profile,
            "kind": self.component_kind,
            "source": self.source_node,
            "memento": self.memento.to_content(),
            "config": copy.deepcopy(self.config),
            "pending": [serialize_message(m) for m in self.pending],
        }

    @classmethod
    def from_content(cls, doc: dict) -> "MigrationPackage":
        return cls(
            profile=doc["profile"],
            memento=Memento.from_content(doc["memento"]),
            pending=[parse_message(t) for t in doc.get("pending") or []],
            component_kind=doc["kind"],
            config=dict(doc.get("config") or {}),
            source_node=doc.get("source", ""),
        )


def begin_migration(s: Shell) -> MigrationPackage:
    """Freeze ``s`` and externalize it.  Messages arriving afterwards stay
    in the shell's inbox for forwarding once the destination is bound."""
    with s._lock:
        if s.state is not ShellState.RUNNING:
            raise LifecycleError(f"cannot migrate {s.profile} in state {s.state.value}")
        s.state = ShellState.MIGRATING
        memento = s.current.get_memento()
        pending = s.drain()
        return MigrationPackage(
            profile=s.profile,
            memento=memento,
            pending=pending,
            component_kind=s.kind,
            config=dict(s.config),
            source_node=s.ctx.node_id if s.ctx else "",
        )


def abort_migration(s: Shell) -> list[Message]:
    with s._lock:
        if s.state is not ShellState.MIGRATING:
            raise LifecycleError(f"{s.profile} is not migrating")
    return s.resume()


def complete_migration(dest_kernel, pkg: MigrationPackage):
    """Instantiate ``pkg`` on ``dest_kernel``; returns the new address.

    The package's pending messages are processed in order before any newer
    traffic; their outputs are submitted on the destination kernel.
    """
    factory = dest_kernel.factories.get(pkg.component_kind)
    if factory is None:
        raise LifecycleError(f"node {dest_kernel.node_id} has no factory for {pkg.component_kind!r}")
    comp = factory()
    shell = Shell(pkg.profile, comp, factory=factory, kind=pkg.component_kind, config=pkg.config)
    shell.state = ShellState.PAUSED
    addr = dest_kernel.register_component(pkg.profile, shell, rebind=True)
    shell.current.set_memento(pkg.memento)
    for m in pkg.pending:
        shell.inbox.append(m)
    for out in shell.resume():
        dest_kernel.submit_output(out)
    return addr
