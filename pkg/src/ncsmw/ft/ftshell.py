"""Fault-tolerant component hosting: recovery blocks and N-version execution.

An ``FTComponent`` looks like any other component to the kernel.  Inside it
a fault manager runs the configured modules, judges their outputs and
records ``FaultEvent`` entries for whatever went wrong.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from ..component import Component, Memento
from ..message import Message
from .acceptance import AcceptanceSpec, AcceptanceTest
from .voting import NO_CONSENSUS, Voter, disagreeing, vote

log = logging.getLogger(__name__)

FAULT_KINDS = ("design", "crash", "timing", "omission")


class FTConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FaultEvent:
    kind: str
    source: str
    detail: str = ""
    detected_at_ms: int = 0
    expected_by_ms: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.kind == "timing" and self.expected_by_ms is None:
            raise ValueError("timing faults carry the expected-by deadline")

    def to_content(self) -> dict:
        doc = {"kind": self.kind, "source": self.source, "detail": self.detail, "at": self.detected_at_ms}
        if self.expected_by_ms is not None:
            doc["expected_by"] = self.expected_by_ms
        return doc


class FTPolicy(str, enum.Enum):
    RECOVERY_BLOCK = "recovery_block"
    N_VERSION = "n_version"


@dataclass
class FTShellConfig:
    modules: Sequence[Callable[[], Component]]
    policy: FTPolicy = FTPolicy.RECOVERY_BLOCK
    acceptance: Optional[AcceptanceSpec] = None
    voter: Optional[Voter] = None
    weights: Optional[Sequence[float]] = None
    epsilon: float = 0.0
    vote_keys: Optional[Sequence[str]] = None
    fault_target: Optional[str] = None  # profile that receives FaultEvent messages
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.policy = FTPolicy(self.policy)
        if not self.modules:
            raise FTConfigError("at least one module is required")
        if self.policy is FTPolicy.RECOVERY_BLOCK and self.acceptance is None:
            raise FTConfigError("recovery_block needs an acceptance spec")
        if self.policy is FTPolicy.N_VERSION:
            if len(self.modules) < 2:
                raise FTConfigError("n_version needs at least two modules")
            if self.voter is None:
                raise FTConfigError("n_version needs a voter")
            self.voter = Voter(self.voter)
        if self.epsilon < 0:
            raise FTConfigError("epsilon must be >= 0")
        if self.names is not None and len(self.names) != len(self.modules):
            raise FTConfigError("one name per module")


def _merged_content(outputs: list[Message]) -> dict:
    doc: dict = {}
    for m in outputs:
        doc.update(m.content)
    return doc


class FTComponent(Component):
    """Hosts a primary and replica modules behind one profile."""

    kind = "ft_shell"

    def __init__(self, config: FTShellConfig):
        self.config = config
        self.modules = [f() for f in config.modules]
        names = config.names or [getattr(m, "kind", "module") + f"#{i}" for i, m in enumerate(self.modules)]
        self.names = list(names)
        self.order = list(range(len(self.modules)))  # order[0] is the acting primary
        self.acceptance = AcceptanceTest(config.acceptance) if config.acceptance else None
        self.faults: list[FaultEvent] = []
        self.attempt_log: list[tuple] = []  # (module index, checkpoint memento, memento after restore)
        self.block_failures = 0

    @property
    def primary(self) -> Component:
        return self.modules[self.order[0]]

    def initialize(self, config: dict) -> None:
        for m in self.modules:
            m.ctx = self.ctx
            m.initialize(config)

    def get_memento(self) -> Memento:
        return self.primary.get_memento()

    def set_memento(self, memento: Memento) -> None:
        for m in self.modules:
            m.set_memento(memento)

    def check_memento(self, memento: Memento) -> None:
        self.primary.check_memento(memento)

    def destroy(self) -> None:
        for m in self.modules:
            m.destroy()

    def execution_ms(self, m: Message) -> int:
        if self.config.policy is FTPolicy.N_VERSION:
            return sum(int(x.execution_ms(m)) for x in self.modules)
        return int(self.primary.execution_ms(m))

    def _fault(self, kind: str, source: str, detail: str) -> FaultEvent:
        ev = FaultEvent(kind, source, detail, self.now_ms())
        self.faults.append(ev)
        log.info("fault %s from %s: %s", kind, source, detail)
        return ev

    def _fault_messages(self, events: list[FaultEvent], ts: int) -> list[Message]:
        if not self.config.fault_target:
            return []
        return [Message("FaultEvent", self.config.fault_target, ev.to_content(), ts) for ev in events]

    def process_message(self, m: Message) -> list[Message]:
        if self.config.policy is FTPolicy.RECOVERY_BLOCK:
            return self._recovery_block(m)
        return self._n_version(m)

    def _recovery_block(self, m: Message) -> list[Message]:
        checkpoint = self.primary.get_memento()
        events = []
        for pos, idx in enumerate(self.order):
            module = self.modules[idx]
            if pos > 0:
                module.set_memento(checkpoint)
            try:
                outputs = list(module.process_message(m) or [])
            except Exception as exc:  # a crashing module is contained
                failure = ("crash", f"{type(exc).__name__}: {exc}")
            else:
                verdict = self.acceptance.check(_merged_content(outputs))
                if verdict.ok:
                    if pos > 0:
                        # fault handler: the accepted alternate becomes primary
                        self.order.remove(idx)
                        self.order.insert(0, idx)
                        for other in self.modules:
                            if other is not module:
                                other.set_memento(module.get_memento())
                    return outputs + self._fault_messages(events, m.timestamp_ms)
                failure = ("design", f"acceptance {verdict.reason}: {verdict.detail}")
            module.set_memento(checkpoint)
            self.attempt_log.append((idx, checkpoint, module.get_memento()))
            events.append(self._fault(failure[0], self.names[idx], failure[1]))
        self.block_failures += 1
        events.append(self._fault("design", "recovery_block", "all modules failed the acceptance test"))
        return self._fault_messages(events, m.timestamp_ms)

    def _vote_keys(self, sample: dict) -> list[str]:
        if self.config.vote_keys:
            return list(self.config.vote_keys)
        if self.config.acceptance:
            return self.config.acceptance.keys()
        return sorted(k for k, v in sample.items() if isinstance(v, (int, float, list)) and not isinstance(v, bool))

    def _n_version(self, m: Message) -> list[Message]:
        results: list[tuple[int, list[Message]]] = []
        events = []
        for idx, module in enumerate(self.modules):
            try:
                results.append((idx, list(module.process_message(m) or [])))
            except Exception as exc:
                events.append(self._fault("crash", self.names[idx], f"{type(exc).__name__}: {exc}"))
        usable = [(i, out) for i, out in results if out]
        for i, out in results:
            if not out:
                events.append(self._fault("omission", self.names[i], "no output"))
        if not usable:
            events.append(self._fault("design", "n_version", "no module produced output"))
            return self._fault_messages(events, m.timestamp_ms)
        keys = self._vote_keys(_merged_content(usable[0][1]))
        vectors = []
        for _, out in usable:
            doc = _merged_content(out)
            vec = []
            for k in keys:
                v = doc.get(k)
                vec.extend(v if isinstance(v, list) else [v])
            vectors.append(vec)
        if any(x is None for v in vectors for x in v) or len({len(v) for v in vectors}) != 1:
            events.append(self._fault("omission", "n_version", "module outputs lack vote keys"))
            return self._fault_messages(events, m.timestamp_ms)
        weights = None
        if self.config.weights is not None:
            weights = [self.config.weights[i] for i, _ in usable]
        voted = vote(self.config.voter, vectors, self.config.epsilon, weights)
        for j in disagreeing(vectors, voted, self.config.epsilon):
            events.append(self._fault("design", self.names[usable[j][0]], "output disagrees with the vote"))
        if voted is NO_CONSENSUS:
            events.append(self._fault("design", "n_version", "no consensus"))
            return self._fault_messages(events, m.timestamp_ms)
        # rebuild the first output with voted values, taking the template from an agreeing module
        agreeing = [j for j in range(len(usable)) if j not in set(disagreeing(vectors, voted, self.config.epsilon))]
        template = usable[agreeing[0] if agreeing else 0][1]
        first = template[0]
        content = dict(first.content)
        pos = 0
        for k in keys:
            v = content.get(k)
            if isinstance(v, list):
                content[k] = [float(x) for x in voted[pos:pos + len(v)]]
                pos += len(v)
            else:
                content[k] = float(voted[pos])
                pos += 1
        return [first.replace(content=content)] + template[1:] + self._fault_messages(events, m.timestamp_ms)


def ft_process(shell: FTComponent, m: Message) -> list[Message]:
    return shell.process_message(m)


def make_ft_factory(config: FTShellConfig) -> Callable[[], FTComponent]:
    return lambda: FTComponent(config)


__all__ = [
    "FAULT_KINDS",
    "FTComponent",
    "FTConfigError",
    "FTPolicy",
    "FTShellConfig",
    "FaultEvent",
    "ft_process",
    "make_ft_factory",
]
