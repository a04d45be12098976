"""Per-node profile registry (semantic addressing)."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Union


class ProfileNotFound(LookupError):
    pass


class RegistryError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ComponentAddress:
    node_id: str
    local_id: int

    def __str__(self):
        return f"{self.node_id}#{self.local_id}"


@dataclass(frozen=True)
class RemoteBinding:
    node_id: str
    host: str = ""
    port: int = 0


Binding = Union[ComponentAddress, RemoteBinding]


@dataclass(frozen=True)
class ProfileEntry:
    profile: str
    binding: Binding


class ProfileRegistry:
    def __init__(self, node_id: str):
        self.node_id = node_id
        self._entries: dict[str, Binding] = {}
        self._lock = threading.RLock()

    def __contains__(self, profile: str) -> bool:
        return profile in self._entries

    def __iter__(self):
        return iter(list(self._entries.items()))

    def register(self, entry: ProfileEntry) -> None:
        with self._lock:
            if entry.profile in self._entries:
                raise RegistryError(f"profile {entry.profile!r} already bound on {self.node_id}")
            self._entries[entry.profile] = entry.binding

    def rebind(self, profile: str, binding: Binding) -> None:
        with self._lock:
            self._entries[profile] = binding

    def unregister(self, profile: str) -> None:
        with self._lock:
            self._entries.pop(profile, None)

    def resolve(self, profile: str) -> Binding:
        with self._lock:
            try:
                return self._entries[profile]
            except KeyError:
                raise ProfileNotFound(profile) from None

    def local_profiles(self) -> dict[str, ComponentAddress]:
        with self._lock:
            return {p: b for p, b in self._entries.items() if isinstance(b, ComponentAddress)}


def register_profile(reg: ProfileRegistry, entry: ProfileEntry) -> None:
    reg.register(entry)


def resolve_profile(reg: ProfileRegistry, profile: str) -> Binding:
    return reg.resolve(profile)
