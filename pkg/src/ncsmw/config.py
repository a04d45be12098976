"""Kernel/node config files.

Plain ``key = value`` lines; ``#`` starts a comment::

    node_id     = nodeA
    listen      = 127.0.0.1:7400
    time        = real              # real | sim
    dispatchers = 3 2 1             # priorities of dispatchers 1, 2, 3
    jpr         = rm                # rm | edf
    rm.15       = 1                 # period_ms -> dispatcher id
    rm.1000     = 2
    edf.dispatcher = 1
    swap_ms     = 2
    peer.nodeB  = 127.0.0.1:7401
    component.pendulum-controller = pendulum-controller {"gain": "K1"}

Every error names the file and line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .kernel import KernelConfigError, PlacementError, ThreadSchedulingRule, make_edf_jpr, make_rm_jpr

TIME_SOURCES = ("real", "sim")


class ConfigError(ValueError):
    pass


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {text!r}")
    p = int(port)
    if not 0 <= p <= 65535:
        raise ValueError(f"port {p} out of range")
    return host, p


@dataclass
class NodeConfig:
    node_id: str = "node"
    listen: Optional[tuple] = None
    time: str = "real"
    priorities: tuple = (3, 2, 1)
    jpr: str = "rm"
    rm_map: dict = field(default_factory=dict)
    edf_dispatcher: Optional[int] = None
    swap_ms: int = 2
    peers: dict = field(default_factory=dict)  # node id -> (host, port)
    components: list = field(default_factory=list)  # (profile, kind, config dict)
    source: str = "config"

    def tsr(self) -> ThreadSchedulingRule:
        return ThreadSchedulingRule.from_priorities(*self.priorities)

    def build_jpr(self):
        tsr = self.tsr()
        if self.jpr == "edf":
            did = self.edf_dispatcher if self.edf_dispatcher is not None else tsr.highest
            if did not in tsr.ids:
                raise KernelConfigError(f"edf dispatcher {did} is not one of {list(tsr.ids)}")
            return make_edf_jpr(did)
        return make_rm_jpr(self.rm_map or {1: tsr.highest}, tsr)


def parse_node_config(text: str, source: str = "config") -> NodeConfig:
    cfg = NodeConfig(source=source)
    rule_line = 0  # last line that shaped the scheduling rules
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()

        def fail(msg):
            raise ConfigError(f"{source}:{lineno}: {msg}")

        if not sep or not key:
            fail(f"expected key = value, got {line!r}")
        if not value:
            fail(f"{key} has no value")
        try:
            if key == "node_id":
                cfg.node_id = value
            elif key == "listen":
                cfg.listen = parse_endpoint(value)
            elif key == "time":
                if value not in TIME_SOURCES:
                    fail(f"time must be one of {TIME_SOURCES}")
                cfg.time = value
            elif key == "dispatchers":
                cfg.priorities = tuple(int(x) for x in value.split())
            elif key == "jpr":
                if value not in ("rm", "edf"):
                    fail("jpr must be rm or edf")
                cfg.jpr = value
            elif key.startswith("rm."):
                period = int(key[3:])
                if period <= 0:
                    fail("period must be > 0")
                cfg.rm_map[period] = int(value)
            elif key == "edf.dispatcher":
                cfg.edf_dispatcher = int(value)
            elif key == "swap_ms":
                cfg.swap_ms = int(value)
                if cfg.swap_ms < 0:
                    fail("swap_ms must be >= 0")
            elif key.startswith("peer."):
                cfg.peers[key[5:]] = parse_endpoint(value)
            elif key.startswith("component."):
                kind, _, conf = value.partition(" ")
                doc = json.loads(conf) if conf.strip() else {}
                if not isinstance(doc, dict):
                    fail("component config must be a JSON object")
                cfg.components.append((key[10:], kind, doc))
            else:
                fail(f"unknown key {key!r}")
        except ConfigError:
            raise
        except (ValueError, json.JSONDecodeError) as exc:
            fail(str(exc))
        if key in ("dispatchers", "jpr", "edf.dispatcher") or key.startswith("rm."):
            rule_line = lineno
    try:
        cfg.build_jpr()
    except (KernelConfigError, PlacementError) as exc:
        raise ConfigError(f"{source}:{rule_line}: {exc}") from None
    return cfg


def load_node_config(path) -> NodeConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from None
    return parse_node_config(text, str(p))


__all__ = ["ConfigError", "NodeConfig", "TIME_SOURCES", "load_node_config", "parse_endpoint", "parse_node_config"]
