"""Acceptance tests: range bounds per output key and a step (smoothness) bound."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


@dataclass(frozen=True)
class AcceptanceSpec:
    ranges: dict = field(default_factory=dict)  # key -> (lo, hi)
    max_step: Optional[float] = None
    step_keys: Optional[tuple] = None  # default: every key in ranges

    def keys(self) -> list:
        return list(self.ranges) + [k for k in (self.step_keys or ()) if k not in self.ranges]


@dataclass(frozen=True)
class AcceptanceResult:
    ok: bool
    reason: str = ""  # range | smoothness | omission
    key: str = ""
    detail: str = ""

    def __bool__(self):
        return self.ok


PASS = AcceptanceResult(True)


def _components(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(v)]


def acceptance_check(output: dict, spec: AcceptanceSpec, previous: Optional[dict] = None) -> AcceptanceResult:
    for key in spec.keys():
        if key not in output or output[key] is None:
            return AcceptanceResult(False, "omission", key, f"missing output {key!r}")
    for key, (lo, hi) in spec.ranges.items():
        for x in _components(output[key]):
            if not (lo <= x <= hi):
                return AcceptanceResult(False, "range", key, f"{key}={x} outside [{lo}, {hi}]")
    if spec.max_step is not None and previous:
        for key in spec.step_keys or tuple(spec.ranges):
            if key not in previous:
                continue
            for x, y in zip(_components(output[key]), _components(previous[key])):
                if abs(x - y) > spec.max_step:
                    return AcceptanceResult(
                        False, "smoothness", key, f"{key} moved {abs(x - y)} > {spec.max_step}"
                    )
    return PASS


class AcceptanceTest:
    """Stateful wrapper remembering the last accepted output for the step bound."""

    def __init__(self, spec: AcceptanceSpec):
        self.spec = spec
        self.previous: Optional[dict] = None

    def check(self, output: dict) -> AcceptanceResult:
        result = acceptance_check(output, self.spec, self.previous)
        if result.ok:
            self.previous = {k: output[k] for k in self.spec.keys()}
        return result
