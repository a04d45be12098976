"""Local temporal autonomy: model-based estimation and en-bloc control buffering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


def linear_step(A, B, x, u) -> np.ndarray:
    """x' = A x + B u.  Plant and estimator share this so results agree bitwise."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    return A @ x + B @ u


@dataclass
class EstimatorState:
    A: np.ndarray
    B: np.ndarray
    estimate: np.ndarray
    last_input: Optional[np.ndarray] = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim == 1:
            self.B = self.B.reshape(-1, 1)
        self.estimate = np.asarray(self.estimate, dtype=float).reshape(-1)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.estimate.shape != (n,):
            raise ValueError(f"inconsistent model dimensions A{self.A.shape} B{self.B.shape} x{self.estimate.shape}")


def estimator_step(e: EstimatorState, measurement, u_prev) -> np.ndarray:
    """Substitute a measurement when present, else predict one step open-loop."""
    u = np.asarray(u_prev, dtype=float).reshape(-1)
    if u.shape != (e.B.shape[1],):
        raise ValueError(f"input has shape {u.shape}, model expects ({e.B.shape[1]},)")
    if measurement is not None:
        y = np.asarray(measurement, dtype=float).reshape(-1)
        if y.shape != e.estimate.shape:
            raise ValueError(f"measurement has shape {y.shape}, model expects {e.estimate.shape}")
        e.estimate = y.copy()
    else:
        e.estimate = linear_step(e.A, e.B, e.estimate, u)
    e.last_input = u
    return e.estimate.copy()


def plan_block(A, B, K, x, depth: int) -> list[np.ndarray]:
    """Controls u_k..u_{k+depth-1} for feedback u = -K x along the model rollout."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    K = np.atleast_2d(np.asarray(K, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    block = []
    for _ in range(depth):
        u = -(K @ x)
        block.append(u)
        x = linear_step(A, B, x, u)
    return block


class _Stale:
    def __repr__(self):
        return "STALE"

    def __bool__(self):
        return False


STALE = _Stale()


@dataclass
class ControlBuffer:
    """Actuator-side buffer of control values indexed by activation."""

    depth: int
    values: dict = field(default_factory=dict)
    last_popped: Optional[int] = None
    underflows: int = 0

    def push_block(self, start: int, block) -> None:
        block = list(block)
        if not block:
            return
        for k, v in enumerate(block):
            idx = start + k
            if self.last_popped is not None and idx <= self.last_popped:
                continue
            self.values[idx] = v
        # keep only the freshest ``depth`` worth of future values beyond the block start
        limit = start + max(self.depth, len(block))
        for idx in [i for i in self.values if i >= limit]:
            del self.values[idx]

    def pop(self, activation: int):
        if self.last_popped is not None and activation <= self.last_popped:
            self.underflows += 1
            return STALE
        for idx in [i for i in self.values if i < activation]:
            del self.values[idx]
        self.last_popped = activation
        if activation in self.values:
            return self.values.pop(activation)
        self.underflows += 1
        return STALE

    def available(self) -> list[int]:
        return sorted(self.values)


def buffer_push_block(b: ControlBuffer, start: int, block) -> None:
    b.push_block(start, block)


def buffer_pop(b: ControlBuffer, activation: int):
    return b.pop(activation)
