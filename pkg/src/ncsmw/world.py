"""Several simulated nodes sharing one discrete-event clock."""

from __future__ import annotations

import random
from typing import Optional

from .component import Component, Shell
from .kernel import Kernel, NodeClock, ThreadSchedulingRule, make_rm_jpr
from .node import install_services
from .services.registry import RemoteBinding
from .services.transport import ChannelModel, LinkEndpoint, SimLink
from .sim import SimClock

DEFAULT_TSR = ThreadSchedulingRule.from_priorities(3, 2, 1)


class SimWorld:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.clock = SimClock()
        self.nodes: dict[str, Kernel] = {}
        self.links: dict[tuple[str, str], SimLink] = {}
        self.endpoints: dict[tuple[str, str], LinkEndpoint] = {}

    def rng(self, label: str) -> random.Random:
        return random.Random(f"{self.seed}:{label}")

    def add_node(
        self,
        node_id: str,
        tsr: Optional[ThreadSchedulingRule] = None,
        jpr=None,
        offset_ms: float = 0.0,
        skew_ppm: float = 0.0,
        swap_ms: int = 2,
        ping_period_ms: Optional[int] = None,
    ) -> Kernel:
        tsr = tsr or DEFAULT_TSR
        jpr = jpr or make_rm_jpr({1: tsr.highest}, tsr)
        clock = NodeClock(self.clock, offset_ms, skew_ppm)
        k = Kernel(tsr, jpr, "simulated", node_id=node_id, clock=clock)
        install_services(k, swap_ms=swap_ms, ping_period_ms=ping_period_ms)
        self.nodes[node_id] = k
        return k

    def connect(self, a: str, b: str, channel: ChannelModel, reverse: Optional[ChannelModel] = None) -> None:
        ka, kb = self.nodes[a], self.nodes[b]
        ma, mb = ka.services["messenger"], kb.services["messenger"]
        holder = {}
        ab = SimLink(self.clock, channel, self.rng(f"link:{a}->{b}"), lambda d: holder[b].receive_raw(d))
        ba = SimLink(self.clock, reverse or channel, self.rng(f"link:{b}->{a}"), lambda d: holder[a].receive_raw(d))
        ea = LinkEndpoint(self.clock, ab.send, lambda m: ma.on_receive(b, m))
        eb = LinkEndpoint(self.clock, ba.send, lambda m: mb.on_receive(a, m))
        holder[a], holder[b] = ea, eb
        ma.attach_link(b, ea)
        mb.attach_link(a, eb)
        self.links[(a, b)], self.links[(b, a)] = ab, ba
        self.endpoints[(a, b)], self.endpoints[(b, a)] = ea, eb

    def start_time_sync(self) -> None:
        for k in self.nodes.values():
            nt = k.services.get("network_time")
            if nt is not None:
                nt.start()

    def add_factory(self, kind: str, factory) -> None:
        for k in self.nodes.values():
            k.add_factory(kind, factory)

    def deploy(self, node_id: str, profile: str, component: Component, config=None, factory=None, kind=None):
        k = self.nodes[node_id]
        shell = Shell(profile, component, factory=factory, kind=kind, config=config)
        addr = k.register_component(profile, shell)
        for other_id, other in self.nodes.items():
            if other_id != node_id:
                other.registry.rebind(profile, RemoteBinding(node_id))
        return addr

    def now_ms(self) -> int:
        return self.clock.now_ms()

    def run_until(self, t_ms: int) -> None:
        self.clock.run_until(t_ms)
