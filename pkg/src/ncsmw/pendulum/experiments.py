"""Scripted, seeded experiments on simulated nodes.

Node roles: ``nodeP`` hosts the DSP proxy next to the plant, ``nodeR`` is a
remote controller host and ``nodeQ`` runs the requester that issues
management requests and probe traffic.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..kernel import TRACE_FIELDS, ThreadSchedulingRule, make_rm_jpr
from ..message import Message, QoSSpec
from ..node import MANAGER, svc
from ..services.notifier import NotificationSchedule
from ..services.transport import ChannelModel
from ..world import SimWorld
from .components import (
    CONTROLLER,
    DSP_PROXY,
    REQUESTER,
    ControllerComponent,
    DSPBoard,
    DSPProxy,
    Outage,
    PeriodicTask,
    Recorder,
    Requester,
    StressTask,
)
from .plant import Plant, PlantConfig, load_plant_config

CONTROL_PERIOD_MS = 15
MGMT_PERIOD_MS = 1000
STRESS_PERIOD_MS = 5000
PROBE_PERIOD_MS = 5

PLANT_NODE, REMOTE_NODE, REQUESTER_NODE = "nodeP", "nodeR", "nodeQ"

EVENT_KINDS = ("start_stress", "request_upgrade", "request_migrate", "inject_sensor_outage")


class ScriptError(ValueError):
    pass


class ExperimentFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ScriptEvent:
    at_ms: int
    kind: str
    args: tuple = ()


@dataclass
class ExperimentScript:
    events: list = field(default_factory=list)
    duration_ms: int = 60_000
    seed: int = 0

    def __post_init__(self):
        for e in self.events:
            if e.kind not in EVENT_KINDS:
                raise ScriptError(f"unknown event {e.kind!r}")
            if not 0 <= e.at_ms <= self.duration_ms:
                raise ScriptError(f"event {e.kind} at {e.at_ms} ms is outside the run (0..{self.duration_ms})")
        self.events = sorted(self.events, key=lambda e: e.at_ms)


def parse_script(text: str, source: str = "script") -> ExperimentScript:
    """Line format::

        duration <ms>
        seed <int>
        at <ms> start_stress
        at <ms> request_upgrade <gain label>
        at <ms> request_migrate <node>
        at <ms> inject_sensor_outage <duration ms>

    ``#`` starts a comment.
    """
    duration, seed, events = 60_000, 0, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "duration" and len(parts) == 2:
                duration = int(parts[1])
            elif parts[0] == "seed" and len(parts) == 2:
                seed = int(parts[1])
            elif parts[0] == "at" and len(parts) >= 3:
                at, kind, args = int(parts[1]), parts[2], tuple(parts[3:])
                if kind not in EVENT_KINDS:
                    raise ScriptError(f"unknown event {kind!r}")
                if kind in ("request_upgrade", "request_migrate", "inject_sensor_outage") and len(args) != 1:
                    raise ScriptError(f"{kind} takes one argument")
                if kind == "start_stress" and args:
                    raise ScriptError("start_stress takes no arguments")
                if kind == "inject_sensor_outage" and int(args[0]) <= 0:
                    raise ScriptError("outage duration must be > 0")
                events.append(ScriptEvent(at, kind, args))
            else:
                raise ScriptError(f"cannot parse {line!r}")
        except (ValueError, ScriptError) as exc:
            raise ScriptError(f"{source}:{lineno}: {exc}") from None
    try:
        return ExperimentScript(events, duration, seed)
    except ScriptError as exc:
        raise ScriptError(f"{source}: {exc}") from None


@dataclass
class ExperimentConfig:
    controller_node: str = PLANT_NODE
    gain: str = "K1"
    block_depth: int = 1
    actuation_lead: int = 0
    sensor_timeout_ms: int = 9
    controller_exec_ms: int = 1
    net_channel: ChannelModel = field(default_factory=lambda: ChannelModel(1.0, 1.0, 0.0))
    serial_channel: ChannelModel = field(default_factory=ChannelModel)
    stress_burn_ms: int = 1000
    stress_equal_priority: bool = False
    probe_window: tuple = (0, 0)
    swap_ms: int = 2

    def rm_map(self) -> dict:
        # dispatcher 1 is the most urgent
        if self.stress_equal_priority:
            return {CONTROL_PERIOD_MS: 1, MGMT_PERIOD_MS: 1, STRESS_PERIOD_MS: 1}
        return {CONTROL_PERIOD_MS: 1, MGMT_PERIOD_MS: 2, STRESS_PERIOD_MS: 3}


CONTROL_QOS = QoSSpec(crit=2, period_ms=CONTROL_PERIOD_MS, deadline_ms=CONTROL_PERIOD_MS)
MGMT_QOS = QoSSpec(crit=1, period_ms=MGMT_PERIOD_MS, deadline_ms=MGMT_PERIOD_MS)
STRESS_QOS = QoSSpec(crit=0, period_ms=STRESS_PERIOD_MS, deadline_ms=STRESS_PERIOD_MS)


# -- results ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TraceBundle:
    """CSV tables plus a metrics summary; ``write`` is byte-deterministic."""

    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    diverged_at: Optional[int] = None

    def csv_text(self, name: str) -> str:
        header, rows = self.tables[name]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [f"status {self.status}"]
        if self.diverged_at is not None:
            lines.append(f"diverged_at_ms {self.diverged_at}")
        for k in sorted(self.metrics):
            lines.append(f"{k} {_fmt(self.metrics[k])}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.tables):
            (out / f"{name}.csv").write_text(self.csv_text(name))
        (out / "summary.txt").write_text(self.summary_text())
        return out


def _stats(values: list, nominal: Optional[float] = None) -> tuple:
    """(mean, jitter): jitter is the largest deviation from ``nominal``
    (or from the mean when no nominal value applies)."""
    if not values:
        return (math.nan, math.nan)
    mean = statistics.fmean(values)
    ref = mean if nominal is None else nominal
    return (mean, max(abs(v - ref) for v in values))


def period_samples(completions: list, nominal_period: int, released: int, end_ms: int) -> list:
    """Gaps between consecutive completions; an unfinished backlog at the
    end adds the censored gap since the last completion."""
    times = sorted(completions)
    gaps = [b - a for a, b in zip(times, times[1:])]
    if released > len(times):
        last = times[-1] if times else 0
        if end_ms - last > nominal_period:
            gaps.append(end_ms - last)
    return gaps


def _delivery_rows(world: SimWorld) -> list:
    rows = []
    for node_id in sorted(world.nodes):
        for r in world.nodes[node_id].trace:
            rows.append([node_id] + r.as_list())
    return rows


def _exec_times(world: SimWorld, profile: str) -> list:
    out = []
    for k in world.nodes.values():
        for ev in k.events:
            if ev.event == "deliver" and ev.job.message.msg_type == "Notify" and ev.job.message.profile_name == profile:
                out.append(ev.end_ms - ev.start_ms)
    return out


# -- control-loop experiments -------------------------------------------------------------

class ControlLoop:
    """A seeded three-node world running the pendulum loop."""

    def __init__(self, script: ExperimentScript, cfg: ExperimentConfig, plant_cfg: PlantConfig):
        self.script = script
        self.cfg = cfg
        self.plant_cfg = plant_cfg
        self.recorder = Recorder()
        seed = script.seed
        self.world = w = SimWorld(seed)
        tsr = ThreadSchedulingRule.from_priorities(3, 2, 1)
        for node in (PLANT_NODE, REMOTE_NODE, REQUESTER_NODE):
            w.add_node(node, tsr=tsr, jpr=make_rm_jpr(cfg.rm_map(), tsr), swap_ms=cfg.swap_ms)
        for a, b in ((PLANT_NODE, REMOTE_NODE), (PLANT_NODE, REQUESTER_NODE), (REMOTE_NODE, REQUESTER_NODE)):
            w.connect(a, b, cfg.net_channel)

        self.plant = Plant(plant_cfg.plant, w.rng("plant"))
        self.board = DSPBoard(self.plant, cfg.block_depth, self.recorder, phase_ms=CONTROL_PERIOD_MS - 1)
        self.outages: list[Outage] = []
        for e in script.events:
            if e.kind == "inject_sensor_outage":
                self.outages.append(Outage(e.at_ms, e.at_ms + int(e.args[0]), sensor=True, actuation=False))
        proxy = DSPProxy(self.board, cfg.serial_channel, w.rng("serial"), self.outages)
        w.deploy(PLANT_NODE, DSP_PROXY, proxy)

        ctrl_config = {
            "gain": cfg.gain,
            "block_depth": cfg.block_depth,
            "actuation_lead": cfg.actuation_lead,
            "sensor_timeout_ms": cfg.sensor_timeout_ms,
            "exec_ms": cfg.controller_exec_ms,
        }
        factory = self.controller_factory
        w.add_factory(ControllerComponent.kind, factory)
        w.deploy(cfg.controller_node, CONTROLLER, factory(), config=ctrl_config, factory=factory,
                 kind=ControllerComponent.kind)
        w.nodes[cfg.controller_node].services["notifier"].add_schedule(
            NotificationSchedule(CONTROLLER, CONTROL_PERIOD_MS, qos=CONTROL_QOS)
        )
        self.requester = Requester(self.recorder, CONTROLLER, cfg.probe_window)
        w.deploy(REQUESTER_NODE, REQUESTER, self.requester)
        if cfg.probe_window[1] > cfg.probe_window[0]:
            w.nodes[REQUESTER_NODE].services["notifier"].add_schedule(
                NotificationSchedule(REQUESTER, PROBE_PERIOD_MS)
            )
        self.board.arm(w.nodes[PLANT_NODE].clock, plant_cfg.plant.h_ms, script.duration_ms)
        for e in script.events:
            w.clock.call_at(e.at_ms, lambda e=e: self._fire(e))

    def controller_factory(self):
        return ControllerComponent(self.plant_cfg, self.recorder)

    def _manager_request(self, node: str, msg_type: str, content: dict) -> None:
        q = self.world.nodes[REQUESTER_NODE]
        q.submit_output(
            Message(msg_type, svc(MANAGER, node), {**content, "reply_to": REQUESTER}, timestamp_ms=q.now_ms(), qos=MGMT_QOS)
        )

    def _controller_node(self) -> str:
        for node_id, k in self.world.nodes.items():
            if CONTROLLER in k.registry.local_profiles():
                return node_id
        raise ExperimentFailure("controller is not bound anywhere")

    def _fire(self, e: ScriptEvent) -> None:
        if e.kind == "start_stress":
            node = self.world.nodes[PLANT_NODE]
            stress = StressTask(self.recorder, self.cfg.stress_burn_ms)
            self.world.deploy(PLANT_NODE, "stress", stress)
            now = node.now_ms()
            # first activation exactly now, then every stress period
            node.services["notifier"].add_schedule(
                NotificationSchedule("stress", STRESS_PERIOD_MS, phase_ms=now - STRESS_PERIOD_MS, qos=STRESS_QOS)
            )
        elif e.kind == "request_upgrade":
            self._manager_request(self._controller_node(), "Upgrade", {"profile": CONTROLLER, "config": {"gain": e.args[0]}})
        elif e.kind == "request_migrate":
            self._manager_request(self._controller_node(), "Migrate", {"profile": CONTROLLER, "dest": e.args[0]})

    def run(self) -> TraceBundle:
        end = self.script.duration_ms
        self.world.run_until(end)
        return self._bundle()

    # -- metrics ---------------------------------------------------------------------
    def _bundle(self) -> TraceBundle:
        rec, end, h = self.recorder, self.script.duration_ms, CONTROL_PERIOD_MS
        b = TraceBundle()
        acts = sorted(rec.of_task(CONTROLLER), key=lambda a: (a[1], a[3]))
        b.tables["activations"] = (["task", "activation", "nominal_ms", "actual_ms", "node"], [list(a) for a in rec.activations])
        n = self.plant_cfg.plant.n
        b.tables["plant"] = (
            ["tick", "t_ms", "source", "u0"] + [f"x{i}" for i in range(n)],
            [[k, t, src, u[0]] + x for k, t, src, u, x in rec.ticks],
        )
        b.tables["control"] = (["activation", "node", "path", "u0"], [list(c) for c in rec.control])
        b.tables["delivery"] = (["node"] + TRACE_FIELDS, _delivery_rows(self.world))
        b.tables["faults"] = (
            ["kind", "source", "detail", "at_ms"],
            [["omission", DSP_PROXY, f"no sensor data for activation {k}", 0] for k, _, path, _ in rec.control if path == "estimated"],
        )
        lifecycle_events = {"deploy", "upgrade", "upgrade_aborted", "migrate_begin", "migrate_rebind", "migrate_complete",
                            "migrate_resume", "migrate_aborted", "migrate_refused", "lifecycle_error"}
        b.tables["lifecycle"] = (
            ["node", "event", "profile", "start_ms", "end_ms"],
            [[node, r.event, r.msg_type, r.start_ms, r.end_ms]
             for node in sorted(self.world.nodes) for r in self.world.nodes[node].trace if r.event in lifecycle_events],
        )
        if rec.probes_sent:
            b.tables["probes"] = (
                ["seq", "sent_ms", "received_ms", "node"],
                self._probe_rows(),
            )

        m = b.metrics
        actual = [a[3] for a in acts]
        periods = [y - x for x, y in zip(actual, actual[1:])]
        m["control_activations"] = len(acts)
        m["control_period_mean_ms"], m["control_interval_jitter_ms"] = _stats(periods, h)
        lateness = [a[3] - a[2] for a in acts]
        # jitter is the worst |actual - nominal| activation time
        m["control_period_jitter_ms"] = max((abs(x) for x in lateness), default=0)
        m["control_deadline_misses"] = sum(1 for x in lateness if x > h)
        expected = set(range(1, (end - h) // h + 1))
        seen = [a[1] for a in acts]
        m["control_lost_activations"] = len(expected - set(seen))
        m["control_duplicate_activations"] = len(seen) - len(set(seen))
        m["control_nominal_exact"] = int(all(a[2] == a[1] * h for a in acts))
        m["stale_ticks"] = self.board.stale
        m["estimated_activations"] = sum(1 for c in rec.control if c[2] == "estimated")
        xs = [np.asarray(x) for _, _, _, _, x in rec.ticks]
        m["max_state_norm"] = float(max((np.max(np.abs(x)) for x in xs), default=0.0))
        cost = [float(x @ x) * h / 1000.0 for x in xs]
        m["quadratic_cost"] = float(sum(cost))
        exec_times = _exec_times(self.world, CONTROLLER)
        m["control_exec_mean_ms"], m["control_exec_jitter_ms"] = _stats(exec_times)
        for ev in self.script.events:
            if ev.kind == "request_upgrade":
                t = ev.at_ms
                pre = [c for (k, tt, *_), c in zip(rec.ticks, cost) if tt < t]
                post = [c for (k, tt, *_), c in zip(rec.ticks, cost) if tt >= t]
                m["cost_rate_pre"] = float(sum(pre) / (len(pre) * h / 1000.0)) if pre else math.nan
                m["cost_rate_post"] = float(sum(post) / (len(post) * h / 1000.0)) if post else math.nan
        if rec.probes_sent:
            sent = {s for s, _ in rec.probes_sent}
            got = [s for s, _, _ in rec.probes_received]
            m["probes_sent"] = len(sent)
            m["probes_missing"] = len(sent - set(got))
            m["probes_duplicated"] = len(got) - len(set(got))
            m["probes_unexpected"] = len(set(got) - sent)
        for r in rec.reports:
            if r.get("action") == "migrate":
                m["migrate_ok"] = int(bool(r.get("ok")))
                if "rebind_ms" in r:
                    m["migrate_rebind_ms"] = r["rebind_ms"]
            if r.get("action") == "upgrade":
                m["upgrade_ok"] = int(bool(r.get("ok")))
                m["upgrade_pause_ms"] = r.get("pause_ms")
        if self.plant.diverged_at is not None:
            b.status = "diverged"
            b.diverged_at = self.plant.diverged_at
        return b

    def _probe_rows(self) -> list:
        got: dict = {}
        for s, t, node in self.recorder.probes_received:
            got.setdefault(s, []).append((t, node))
        rows = []
        for s, t in self.recorder.probes_sent:
            recs = got.get(s) or [("", "")]
            for rt, node in recs:
                rows.append([s, t, rt, node])
        return rows


def run_experiment(script: ExperimentScript, cfg: Optional[ExperimentConfig] = None,
                   plant: PlantConfig | str = "pendubot") -> TraceBundle:
    plant_cfg = plant if isinstance(plant, PlantConfig) else load_plant_config(plant)
    return ControlLoop(script, cfg or ExperimentConfig(), plant_cfg).run()


# -- named experiments -----------------------------------------------------------------------

def stress_experiment(seed: int = 0, equal_priority: bool = False, duration_ms: int = 60_000, plant="pendubot"):
    script = ExperimentScript([ScriptEvent(20_000, "start_stress")], duration_ms, seed)
    return run_experiment(script, ExperimentConfig(stress_equal_priority=equal_priority), plant)


def upgrade_experiment(seed: int = 0, duration_ms: int = 60_000, at_ms: int = 30_000, plant="pendubot"):
    script = ExperimentScript([ScriptEvent(at_ms, "request_upgrade", ("K2",))], duration_ms, seed)
    return run_experiment(script, ExperimentConfig(gain="K1"), plant)


def migrate_experiment(seed: int = 0, duration_ms: int = 60_000, at_ms: int = 40_000, plant="pendubot"):
    script = ExperimentScript([ScriptEvent(at_ms, "request_migrate", (PLANT_NODE,))], duration_ms, seed)
    cfg = ExperimentConfig(controller_node=REMOTE_NODE, block_depth=2, actuation_lead=1, sensor_timeout_ms=12,
                           probe_window=(at_ms - 5_000, at_ms + 5_000))
    return run_experiment(script, cfg, plant)


def zero_noise(plant_cfg: PlantConfig) -> PlantConfig:
    return replace(plant_cfg, plant=replace(plant_cfg.plant, noise_bound=0.0))


def lta_outage_experiment(seed: int = 0, depth: int = 4, outage_steps: int = 3,
                          duration_ms: int = 3_000, at_activation: int = 60, plant="pendubot"):
    """Actuator input sequences with and without a sensor outage on a
    zero-noise plant, controller remote with a one-step lead.

    Returns (baseline bundle, outage bundle)."""
    plant_cfg = zero_noise(plant if isinstance(plant, PlantConfig) else load_plant_config(plant))
    cfg = ExperimentConfig(
        controller_node=REMOTE_NODE, block_depth=depth, actuation_lead=1 if depth > 1 else 0, sensor_timeout_ms=12,
        net_channel=ChannelModel(1.0, 1.0, 0.0), serial_channel=ChannelModel(2.0, 1.0, 0.0),
    )
    base = run_experiment(ExperimentScript([], duration_ms, seed), cfg, plant_cfg)
    t0 = at_activation * CONTROL_PERIOD_MS
    event = ScriptEvent(t0, "inject_sensor_outage", (str(outage_steps * CONTROL_PERIOD_MS),))
    out = run_experiment(ExperimentScript([event], duration_ms, seed), cfg, plant_cfg)
    return base, out


def actuator_inputs(bundle: TraceBundle) -> list:
    return [row[3] for row in bundle.tables["plant"][1]]


# -- three periodic tasks under the RM placement ----------------------------------------------

RM_TABLE_PERIODS = (80, 200, 350)
RM_TABLE_SWEEP = (40, 85, 130, 175)


def rm_table_case(mid_exec_ms: int, seed: int = 0, duration_ms: int = 35_000,
                  fast=(14, 15), slow=(47, 51), mid_spread: int = 8) -> dict:
    """One case: three periodic tasks on one node under the RM placement."""
    rec = Recorder()
    w = SimWorld(seed)
    tsr = ThreadSchedulingRule.from_priorities(3, 2, 1)
    k = w.add_node("node", tsr=tsr, jpr=make_rm_jpr({80: 1, 200: 2, 350: 3}, tsr))
    bounds = {80: fast, 200: (mid_exec_ms - mid_spread, mid_exec_ms + mid_spread), 350: slow}
    for T in RM_TABLE_PERIODS:
        name = f"task{T}"
        lo, hi = bounds[T]
        w.deploy("node", name, PeriodicTask(name, lo, hi, rec, seed))
        k.services["notifier"].add_schedule(
            NotificationSchedule(name, T, phase_ms=-T, qos=QoSSpec(period_ms=T, deadline_ms=T))
        )
    w.run_until(duration_ms)
    out = {}
    for T in RM_TABLE_PERIODS:
        name = f"task{T}"
        acts = rec.of_task(name)
        released = duration_ms // T + 1
        periods = period_samples([a[3] for a in acts], T, released, duration_ms)
        lateness = [a[3] - a[2] for a in acts]
        lateness += [duration_ms - (k - 1) * T for k in range(len(acts) + 1, released + 1)]  # never completed
        out[T] = {
            "exec": _stats(_exec_times(w, name)),
            "period": _stats(periods, T),
            "release_jitter": max(lateness, default=0),
            "completed": len(acts),
            "released": released,
        }
    return out


def rm_table_experiment(seed: int = 0, sweep=RM_TABLE_SWEEP, duration_ms: int = 35_000) -> TraceBundle:
    b = TraceBundle()
    rows = []
    for case, c in enumerate(sweep, start=1):
        res = rm_table_case(c, seed, duration_ms)
        row = [case, c]
        for T in RM_TABLE_PERIODS:
            row += [res[T]["exec"][0], res[T]["exec"][1]]
        for T in RM_TABLE_PERIODS:
            row += [res[T]["period"][0], res[T]["period"][1]]
        rows.append(row)
        for T in RM_TABLE_PERIODS:
            row.append(res[T]["release_jitter"])
        for T in RM_TABLE_PERIODS:
            b.metrics[f"case{case}_task{T}_period_jitter_ms"] = res[T]["period"][1]
            b.metrics[f"case{case}_task{T}_release_jitter_ms"] = res[T]["release_jitter"]
    header = ["case", "mid_exec_ms"]
    header += [f"exec_{s}_task{T}" for T in RM_TABLE_PERIODS for s in ("mean", "jitter")]
    header += [f"period_{s}_task{T}" for T in RM_TABLE_PERIODS for s in ("mean", "jitter")]
    header += [f"release_jitter_task{T}" for T in RM_TABLE_PERIODS]
    b.tables["rm_table"] = (header, rows)
    return b


# -- priority inversion ------------------------------------------------------------------------

def inversion_experiment(pip: bool) -> TraceBundle:
    from ..sched import TaskSpec, simulate_schedule

    tasks = [
        TaskSpec("J3", 4, 40, critical_sections=[(1, 2, "R")]),
        TaskSpec("J2", 4, 30, phase=2),
        TaskSpec("J1", 2, 20, phase=2, critical_sections=[(0, 1, "R")]),
    ]
    trace = simulate_schedule(tasks, pip=pip, horizon_ms=3)
    b = TraceBundle()
    b.tables["schedule"] = (["task", "job", "start", "end", "state"],
                            [[iv.task, iv.job, iv.start, iv.end, iv.state] for iv in trace.intervals])
    b.metrics["pip"] = int(pip)
    for j in trace.jobs:
        b.metrics[f"{j.task}_blocking_ms"] = j.blocking
        b.metrics[f"{j.task}_response_ms"] = j.response
    return b


__all__ = [
    "ControlLoop",
    "ExperimentConfig",
    "ExperimentFailure",
    "ExperimentScript",
    "ScriptError",
    "ScriptEvent",
    "TraceBundle",
    "actuator_inputs",
    "inversion_experiment",
    "lta_outage_experiment",
    "migrate_experiment",
    "parse_script",
    "period_samples",
    "rm_table_case",
    "rm_table_experiment",
    "run_experiment",
    "stress_experiment",
    "upgrade_experiment",
    "zero_noise",
]
