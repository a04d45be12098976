"""Components of the pendulum control loop and the load tasks around it.

The DSP board (plant, actuator buffer, sample clock) is hardware and runs
on timer callbacks of the plant node.  Everything else is an ordinary
component driven by messages, so it can be upgraded and migrated.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..component import Component, Memento
from ..ft.lta import STALE, ControlBuffer, EstimatorState, estimator_step, linear_step, plan_block
from ..message import Message, Reliability
from ..node import timer_request
from ..services.transport import ChannelModel
from .plant import ControllerGain, Plant, PlantConfig

CONTROLLER = "pendulum-controller"
DSP_PROXY = "dsp-proxy"
REQUESTER = "requester"


@dataclass
class Recorder:
    """Shared sink for everything the experiments measure."""

    activations: list = field(default_factory=list)  # (task, k, nominal, actual, node)
    control: list = field(default_factory=list)  # (k, node, path, u0)
    ticks: list = field(default_factory=list)  # (k, t, source, u, x)
    probes_sent: list = field(default_factory=list)  # (seq, t)
    probes_received: list = field(default_factory=list)  # (seq, t, node)
    reports: list = field(default_factory=list)
    faults: list = field(default_factory=list)

    def activation(self, task: str, k: int, nominal: int, actual: int, node: str) -> None:
        self.activations.append((task, k, nominal, actual, node))

    def of_task(self, task: str) -> list:
        return [a for a in self.activations if a[0] == task]


def _vec(values) -> list:
    return [float(v) for v in np.asarray(values, dtype=float).reshape(-1)]


class DSPBoard:
    """Plant, actuator buffer and the board's own sample clock.

    Tick k happens at ``phase_ms + k * h``; it consumes the control value
    for activation k, holding the last value when none is buffered.
    """

    def __init__(self, plant: Plant, depth: int, recorder: Recorder, phase_ms: int = 14):
        self.plant = plant
        self.buffer = ControlBuffer(max(1, depth))
        self.recorder = recorder
        self.phase_ms = phase_ms
        self.u = np.zeros(plant.model.m)
        self.k = 0
        self.stale = 0

    def read(self) -> list:
        return _vec(self.plant.x)

    def push(self, start: int, block: list) -> None:
        self.buffer.push_block(start, [np.asarray(v, dtype=float) for v in block])

    def tick(self, now_ms: int) -> None:
        v = self.buffer.pop(self.k)
        if v is STALE:
            source = "hold"
            self.stale += 1
        else:
            source = "fresh"
            self.u = np.asarray(v, dtype=float).reshape(-1)
        x = self.plant.step(self.u, now_ms)
        self.recorder.ticks.append((self.k, now_ms, source, _vec(self.u), _vec(x)))
        self.k += 1

    def arm(self, clock, h_ms: int, until_ms: int) -> None:
        def fire(k=0):
            t = self.phase_ms + k * h_ms
            if t > until_ms:
                return
            clock.call_at(t, lambda: (self.tick(t), fire(k + 1)))

        fire()


@dataclass
class Outage:
    start_ms: int
    end_ms: int
    sensor: bool = True
    actuation: bool = True

    def covers(self, t: int) -> bool:
        return self.start_ms <= t < self.end_ms


class DSPProxy(Component):
    """Mediates between controllers and the board over the serial channel."""

    kind = "dsp-proxy"

    def __init__(self, board: DSPBoard, channel: ChannelModel, rng: random.Random, outages=()):
        self.board = board
        self.channel = channel
        self.rng = rng
        self.outages = list(outages)
        self.dropped = 0

    def _blocked(self, what: str) -> bool:
        t = self.now_ms()
        return any(o.covers(t) and getattr(o, what) for o in self.outages)

    def _serial(self, msg_type: str, content: dict, qos) -> list[Message]:
        delays = self.channel.sample(self.rng)
        if not delays:
            self.dropped += 1
            return []
        # a duplicate on the wire is the same frame again; the receiver ignores it by index
        return [
            timer_request(self.ctx.node_id, self.ctx.profile, d, msg_type, content, qos=qos, now_ms=self.now_ms())
            for d in delays
        ]

    def process_message(self, m: Message) -> list[Message]:
        c = m.content
        if m.msg_type == "SensorRequest":
            if self._blocked("sensor"):
                self.dropped += 1
                return []
            return self._serial("SerialAtBoard", dict(c), m.qos)
        if m.msg_type == "SerialAtBoard":
            return self._serial("SerialRx", {**c, "x": self.board.read()}, m.qos)
        if m.msg_type == "SerialRx":
            reply = {"activation": c["activation"], "x": c["x"]}
            return [Message("SensorData", c["reply_to"], reply, timestamp_ms=self.now_ms(), qos=m.qos)]
        if m.msg_type == "ControlBlock":
            if self._blocked("actuation"):
                self.dropped += 1
                return []
            return self._serial("SerialTx", dict(c), m.qos)
        if m.msg_type == "SerialTx":
            self.board.push(int(c["start"]), c["values"])
        return []


class ControllerComponent(Component):
    """State-feedback controller with a collocated estimator.

    Each Notify starts one activation: request the state, then compute a
    block of ``block_depth`` control values from the measurement, or from
    the estimator's prediction if no reply came within the sensor timeout.
    """

    kind = "pendulum-controller"
    schema_id = "pendulum-controller"
    memento_version = 1

    def __init__(self, plant_cfg: PlantConfig, recorder: Optional[Recorder] = None):
        self.plant_cfg = plant_cfg
        self.recorder = recorder if recorder is not None else Recorder()
        p = plant_cfg.plant
        self.estimator = EstimatorState(p.A, p.B, p.x0.copy())
        self.gain: ControllerGain = plant_cfg.gain("K1")
        self.depth = 1
        self.timeout_ms = 9
        self.exec_ms = 1
        self.lead = 0
        self.dsp = DSP_PROXY
        self.activation = 0  # last activation with a computed block
        self.pending: Optional[tuple] = None  # (k, nominal)
        self.u_prev = np.zeros(p.m)
        self.planned: dict = {}  # activation -> planned u

    def initialize(self, config: dict) -> None:
        self.gain = self.plant_cfg.gain(config.get("gain", "K1"))
        self.depth = int(config.get("block_depth", 1))
        self.timeout_ms = int(config.get("sensor_timeout_ms", 9))
        self.exec_ms = int(config.get("exec_ms", 1))
        self.lead = int(config.get("actuation_lead", 0))
        self.dsp = config.get("dsp_profile", DSP_PROXY)
        if self.depth < 1:
            raise ValueError("block_depth must be >= 1")
        if not 0 <= self.lead < self.depth:
            raise ValueError("actuation_lead must be in [0, block_depth)")

    def execution_ms(self, m: Message) -> int:
        return self.exec_ms if m.msg_type in ("Notify", "SensorData", "SensorTimeout") else 0

    # -- state -----------------------------------------------------------------------
    def get_memento(self) -> Memento:
        return Memento(
            self.schema_id,
            self.memento_version,
            {
                "gain": self.gain.label,
                "estimate": _vec(self.estimator.estimate),
                "u_prev": _vec(self.u_prev),
                "activation": self.activation,
                "pending": list(self.pending) if self.pending else [],
                "planned": [[k, _vec(v)] for k, v in sorted(self.planned.items())],
            },
        )

    def set_memento(self, memento: Memento) -> None:
        self.check_memento(memento)
        s = memento.state_doc
        self.estimator.estimate = np.asarray(s["estimate"], dtype=float)
        self.u_prev = np.asarray(s["u_prev"], dtype=float)
        self.activation = int(s["activation"])
        self.pending = tuple(s["pending"]) if s.get("pending") else None
        self.planned = {int(k): np.asarray(v, dtype=float) for k, v in s.get("planned", [])}

    # -- control -----------------------------------------------------------------------
    def _advance(self, k: int) -> None:
        # predict through activations this controller never computed
        while self.activation < k - 1:
            self.activation += 1
            u = self.planned.get(self.activation, self.u_prev)
            estimator_step(self.estimator, None, self.u_prev)
            self.u_prev = u

    def _compute(self, k: int, measurement) -> list[Message]:
        self._advance(k)
        x_hat = estimator_step(self.estimator, measurement, self.u_prev)
        # with a lead the block starts later; the values before it are already committed
        x_start, committed = x_hat, {}
        for i in range(self.lead):
            u = self.planned.get(k + i, committed.get(k + i - 1, self.u_prev))
            committed[k + i] = u
            x_start = linear_step(self.estimator.A, self.estimator.B, x_start, u)
        start = k + self.lead
        block = plan_block(self.estimator.A, self.estimator.B, self.gain.K, x_start, self.depth)
        self.planned = {**committed, **{start + i: u for i, u in enumerate(block)}}
        self.u_prev = self.planned[k]
        self.activation = k
        self.pending = None
        path = "measured" if measurement is not None else "estimated"
        self.recorder.control.append((k, self.ctx.node_id if self.ctx else "", path, float(block[0][0])))
        return [
            Message(
                "ControlBlock",
                self.dsp,
                {"start": start, "values": [_vec(u) for u in block]},
                timestamp_ms=self.now_ms(),
                qos=self._qos,
            )
        ]

    def process_message(self, m: Message) -> list[Message]:
        c = m.content
        if m.msg_type == "Notify":
            k = int(c["activation"])
            self._qos = m.qos
            node = self.ctx.node_id if self.ctx else ""
            self.recorder.activation(CONTROLLER, k, m.timestamp_ms, self.now_ms(), node)
            out = []
            if self.pending is not None and self.pending[0] < k:
                # the previous activation never resolved; close it on the estimate
                out += self._compute(self.pending[0], None)
            self.pending = (k, m.timestamp_ms)
            return out + [
                Message(
                    "SensorRequest",
                    self.dsp,
                    {"activation": k, "reply_to": self.ctx.profile},
                    timestamp_ms=self.now_ms(),
                    qos=m.qos,
                ),
                timer_request(
                    self.ctx.node_id, self.ctx.profile, self.timeout_ms, "SensorTimeout",
                    {"activation": k}, qos=m.qos, now_ms=self.now_ms(),
                ),
            ]
        if m.msg_type in ("SensorData", "SensorTimeout"):
            k = int(c["activation"])
            if self.pending is None or self.pending[0] != k:
                return []  # late, duplicate, or already resolved
            self._qos = m.qos
            return self._compute(k, c["x"] if m.msg_type == "SensorData" else None)
        if m.msg_type == "Probe":
            self.recorder.probes_received.append((int(c["seq"]), self.now_ms(), self.ctx.node_id if self.ctx else ""))
        return []

    _qos = None


class StressTask(Component):
    """Burns ``burn_ms`` of processor time per activation."""

    kind = "stress"

    def __init__(self, recorder: Recorder, burn_ms: int = 1000, name: str = "stress"):
        self.recorder = recorder
        self.burn_ms = burn_ms
        self.name = name

    def execution_ms(self, m: Message) -> int:
        return self.burn_ms if m.msg_type == "Notify" else 0

    def process_message(self, m: Message) -> list[Message]:
        if m.msg_type == "Notify":
            self.recorder.activation(self.name, int(m.content["activation"]), m.timestamp_ms, self.now_ms(), self.ctx.node_id)
        return []


class PeriodicTask(Component):
    """A periodic job whose execution time is drawn uniformly from [lo, hi] ms."""

    kind = "periodic-task"

    def __init__(self, name: str, lo_ms: int, hi_ms: int, recorder: Recorder, seed: int = 0):
        if not 0 <= lo_ms <= hi_ms:
            raise ValueError("need 0 <= lo <= hi")
        self.name = name
        self.lo, self.hi = lo_ms, hi_ms
        self.recorder = recorder
        self.rng = random.Random(f"{seed}:exec:{name}")

    def execution_ms(self, m: Message) -> int:
        return self.rng.randint(self.lo, self.hi) if m.msg_type == "Notify" else 0

    def process_message(self, m: Message) -> list[Message]:
        if m.msg_type == "Notify":
            self.recorder.activation(self.name, int(m.content["activation"]), m.timestamp_ms, self.now_ms(), self.ctx.node_id)
        return []


class Requester(Component):
    """Sends sequence-numbered reliable probes to a target and collects reports."""

    kind = "requester"

    def __init__(self, recorder: Recorder, target: str = CONTROLLER, probing: tuple = (0, 0)):
        self.recorder = recorder
        self.target = target
        self.probe_from, self.probe_until = probing
        self.seq = 0

    def process_message(self, m: Message) -> list[Message]:
        if m.msg_type == "Notify":
            now = self.now_ms()
            if not (self.probe_from <= now < self.probe_until):
                return []
            self.seq += 1
            self.recorder.probes_sent.append((self.seq, now))
            return [
                Message("Probe", self.target, {"seq": self.seq}, timestamp_ms=now, reliability=Reliability.RELIABLE)
            ]
        if m.msg_type == "LifecycleReport":
            self.recorder.reports.append(dict(m.content))
        return []
