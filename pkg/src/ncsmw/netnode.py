"""A middleware node on the real time source, talking to peers over TCP.

Each TCP connection starts with one ``Hello`` frame in each direction that
names the sender's node id and any profiles it hosts; after that the
connection carries ordinary frames through a :class:`LinkEndpoint`.
Socket reader threads never touch node state directly: every received
frame is handed to the kernel's worker as a zero-delay timer.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import os
import socket
import threading
import time
from typing import Callable, Optional

from .component import Component, Memento, Shell
from .config import NodeConfig
from .kernel import Kernel
from .message import Message, QoSSpec, Reliability
from .node import MANAGER, install_services, svc
from .services.framing import FrameReader, decode_frame, encode_frame
from .services.registry import RemoteBinding
from .services.transport import LinkEndpoint

log = logging.getLogger(__name__)

ADMIN_QOS = QoSSpec(crit=1, period_ms=1000, deadline_ms=1000)


class EchoComponent(Component):
    """Answers any message carrying ``reply_to`` with an ``Echo``; counts calls."""

    kind = "echo"
    schema_id = "echo"

    def __init__(self):
        self.count = 0

    def process_message(self, m: Message) -> list[Message]:
        self.count += 1
        to = m.content.get("reply_to")
        if not to:
            return []
        return [Message("Echo", to, {**m.content, "count": self.count}, timestamp_ms=self.now_ms())]

    def get_memento(self) -> Memento:
        return Memento("echo", 1, {"count": self.count})

    def set_memento(self, memento: Memento) -> None:
        self.check_memento(memento)
        self.count = int(memento.state_doc.get("count", 0))


def builtin_factories() -> dict[str, Callable[[], Component]]:
    from .pendulum.components import ControllerComponent
    from .pendulum.plant import load_plant_config

    plant = {}

    def controller():
        if "cfg" not in plant:
            plant["cfg"] = load_plant_config("pendubot")
        return ControllerComponent(plant["cfg"])

    return {"echo": EchoComponent, "pendulum-controller": controller}


def _hello(node_id: str, profiles=()) -> bytes:
    return encode_frame(Message("Hello", "Hello", {"node": node_id, "profiles": list(profiles)}), 0)


def _read_hello(sock: socket.socket, reader: FrameReader, timeout: float = 5.0) -> tuple[dict, list]:
    sock.settimeout(timeout)
    while True:
        chunk = sock.recv(65536)
        if not chunk:
            raise ConnectionError("peer closed before hello")
        frames = reader.feed(chunk)
        if frames:
            m = decode_frame(frames[0])
            if m.msg_type != "Hello" or "node" not in m.content:
                raise ConnectionError(f"expected Hello, got {m.msg_type}")
            return m.content, frames[1:]


class _Connection:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.open = True

    def send(self, data: bytes) -> None:
        if not self.open:
            return
        try:
            with self.lock:
                self.sock.sendall(data)
        except OSError as exc:
            self.open = False
            log.warning("send failed: %s", exc)

    def close(self) -> None:
        self.open = False
        try:
            self.sock.close()
        except OSError:
            pass


class NetNode:
    def __init__(self, cfg: NodeConfig, factories: Optional[dict] = None):
        if cfg.time != "real":
            raise ValueError("networked nodes need the real time source; sim time is single-process only")
        self.cfg = cfg
        self.kernel = Kernel(cfg.tsr(), cfg.build_jpr(), "real", node_id=cfg.node_id)
        install_services(self.kernel, swap_ms=cfg.swap_ms)
        self.messenger = self.kernel.services["messenger"]
        for kind, f in (factories if factories is not None else builtin_factories()).items():
            self.kernel.add_factory(kind, f)
        for profile, kind, conf in cfg.components:
            f = self.kernel.factories.get(kind)
            if f is None:
                raise ValueError(f"{cfg.source}: no factory for component kind {kind!r}")
            self.kernel.register_component(profile, Shell(profile, f(), factory=f, kind=kind, config=conf))
        self.server: Optional[socket.socket] = None
        self.connections: dict[str, _Connection] = {}
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    @property
    def address(self) -> Optional[tuple]:
        return self.server.getsockname() if self.server else None

    def start(self) -> None:
        if self.cfg.listen is not None:
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                s.bind(self.cfg.listen)
            except OSError:
                s.close()
                raise
            s.listen()
            s.settimeout(0.2)
            self.server = s
            self._spawn(self._accept_loop)
        self.kernel.start()
        for peer, addr in sorted(self.cfg.peers.items()):
            self._spawn(self._dial, peer, addr)

    def stop(self) -> None:
        self._stop.set()
        if self.server is not None:
            self.server.close()
        for c in list(self.connections.values()):
            c.close()
        self.kernel.stop()

    def serve_forever(self) -> None:
        try:
            while not self._stop.wait(0.5):
                pass
        finally:
            self.stop()

    def _spawn(self, fn, *args) -> None:
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self.server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._spawn(self._serve_connection, sock, None)

    def _dial(self, peer: str, addr: tuple) -> None:
        delay = 0.1
        while not self._stop.is_set() and peer not in self.connections:
            try:
                sock = socket.create_connection(addr, timeout=2.0)
            except OSError:
                time.sleep(delay)
                delay = min(delay * 2, 2.0)
                continue
            self._serve_connection(sock, peer)
            return

    def _serve_connection(self, sock: socket.socket, expected: Optional[str]) -> None:
        conn = _Connection(sock)
        reader = FrameReader()
        try:
            conn.send(_hello(self.cfg.node_id, self.kernel.registry.local_profiles()))
            hello, rest = _read_hello(sock, reader)
        except (OSError, ConnectionError, ValueError) as exc:
            log.warning("handshake failed: %s", exc)
            conn.close()
            return
        peer = hello["node"]
        if expected is not None and peer != expected:
            log.warning("expected peer %s, got %s", expected, peer)
        ready = threading.Event()
        holder = {}

        def attach():
            ep = LinkEndpoint(self.kernel, conn.send, lambda m: self.messenger.on_receive(peer, m))
            holder["ep"] = ep
            self.messenger.attach_link(peer, ep)
            for p in hello.get("profiles") or []:
                self.kernel.registry.rebind(p, RemoteBinding(peer))
            ready.set()

        self.connections[peer] = conn
        self.kernel.call_later(0, attach)
        ready.wait(5.0)
        sock.settimeout(None)
        pending = list(rest)
        while not self._stop.is_set():
            for f in pending:
                self.kernel.call_later(0, lambda f=f: holder["ep"].receive_raw(f))
            try:
                chunk = sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            try:
                pending = reader.feed(chunk)
            except ValueError as exc:
                log.warning("stream error from %s: %s", peer, exc)
                break
        conn.close()
        if self.connections.get(peer) is conn:
            del self.connections[peer]


# -- admin client ---------------------------------------------------------------------

class _LoopClock:
    """Timers for a single-threaded client loop."""

    def __init__(self):
        self.heap: list = []
        self.seq = itertools.count()

    def now_ms(self) -> int:
        return int(time.monotonic() * 1000)

    def call_later(self, delay_ms: int, fn) -> None:
        heapq.heappush(self.heap, (self.now_ms() + int(delay_ms), next(self.seq), fn))

    def run_due(self) -> Optional[float]:
        while self.heap and self.heap[0][0] <= self.now_ms():
            heapq.heappop(self.heap)[2]()
        return None if not self.heap else max(0.0, (self.heap[0][0] - self.now_ms()) / 1000.0)


class AdminError(RuntimeError):
    pass


def admin_request(address: tuple, msg_type: str, content: dict, timeout_s: float = 10.0) -> dict:
    """Send one lifecycle request to the node at ``address`` and return its report."""
    me = f"admin-{os.getpid()}-{next(_admin_ids)}"
    try:
        sock = socket.create_connection(address, timeout=timeout_s)
    except OSError as exc:
        raise AdminError(f"cannot reach node at {address[0]}:{address[1]}: {exc}") from None
    reader = FrameReader()
    clock = _LoopClock()
    replies: list[Message] = []
    try:
        sock.sendall(_hello(me, [me]))
        hello, rest = _read_hello(sock, reader, timeout_s)
        node = hello["node"]
        ep = LinkEndpoint(clock, sock.sendall, replies.append)
        ep.send(
            Message(
                msg_type, svc(MANAGER, node), {**content, "reply_to": me},
                timestamp_ms=0, reliability=Reliability.RELIABLE, qos=ADMIN_QOS,
            )
        )
        for f in rest:
            ep.receive_raw(f)
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            report = next((m for m in replies if m.msg_type == "LifecycleReport"), None)
            if report is not None:
                # let the node see our acks before we hang up
                time.sleep(0.05)
                return dict(report.content)
            wait = clock.run_due()
            sock.settimeout(min(wait if wait is not None else 0.2, 0.2, max(0.01, deadline - time.monotonic())))
            try:
                chunk = sock.recv(65536)
            except socket.timeout:
                continue
            if not chunk:
                raise AdminError("node closed the connection")
            for f in reader.feed(chunk):
                ep.receive_raw(f)
        raise AdminError(f"no lifecycle report within {timeout_s} s")
    except (OSError, ConnectionError) as exc:
        raise AdminError(str(exc)) from None
    finally:
        sock.close()


_admin_ids = itertools.count(1)

__all__ = ["AdminError", "EchoComponent", "NetNode", "admin_request", "builtin_factories"]
