"""Task-set files.

One task per line, ``#`` comments::

    # name  C     T    optional key=value fields
    ctrl    14.5  80
    mid     42.4  200  D=180 B=3
    low     49    350  phase=10 cs=5:2:bus,20:1:bus

``cs`` lists critical sections as ``offset:length:resource``.  Numbers may
be decimal; they are read exactly.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

from .analysis import CriticalSection, TaskSet, TaskSpec


class TaskFileError(ValueError):
    pass


def _number(text: str):
    try:
        x = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {text!r}") from None
    return int(x) if x.denominator == 1 else x


def _sections(text: str) -> list[CriticalSection]:
    out = []
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 3 or not fields[2]:
            raise ValueError(f"critical section {part!r} is not offset:length:resource")
        out.append(CriticalSection(_number(fields[0]), _number(fields[1]), fields[2]))
    return out


def parse_taskset(text: str, source: str = "taskset") -> TaskSet:
    tasks = []
    names = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) < 3:
                raise ValueError("expected: name C T [D=..] [B=..] [phase=..] [cs=..]")
            name = parts[0]
            if name in names:
                raise ValueError(f"duplicate task name {name!r}")
            kw = {}
            for opt in parts[3:]:
                key, sep, value = opt.partition("=")
                if not sep or key not in ("D", "B", "phase", "cs") or key in kw:
                    raise ValueError(f"bad field {opt!r}")
                kw[key] = _sections(value) if key == "cs" else _number(value)
            tasks.append(
                TaskSpec(
                    name,
                    _number(parts[1]),
                    _number(parts[2]),
                    D=kw.get("D"),
                    B=kw.get("B", 0),
                    critical_sections=tuple(kw.get("cs", ())),
                    phase=kw.get("phase", 0),
                )
            )
            names.add(name)
        except ValueError as exc:
            raise TaskFileError(f"{source}:{lineno}: {exc}") from None
    if not tasks:
        raise TaskFileError(f"{source}: no tasks")
    return TaskSet(tasks)


def load_taskset(path) -> TaskSet:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise TaskFileError(f"cannot read {p}: {exc}") from None
    return parse_taskset(text, str(p))


__all__ = ["TaskFileError", "load_taskset", "parse_taskset"]
