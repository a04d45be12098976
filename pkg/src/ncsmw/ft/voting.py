"""Output voters for N-version execution over real-valued vectors."""

from __future__ import annotations

import enum
import statistics
from typing import Iterable, Sequence


class Voter(str, enum.Enum):
    FORMALIZED_MAJORITY = "formalized_majority"
    # the "generalized media voter" of the FT literature, i.e. the median voter
    GENERALIZED_MEDIAN = "generalized_median"
    FORMALIZED_PLURALITY = "formalized_plurality"
    WEIGHTED_AVERAGE = "weighted_average"


class _NoConsensus:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NO_CONSENSUS"

    def __bool__(self):
        return False


NO_CONSENSUS = _NoConsensus()


def _vec(v) -> tuple:
    if isinstance(v, (int, float)):
        return (float(v),)
    return tuple(float(x) for x in v)


def _dist(a: tuple, b: tuple) -> float:
    return max(abs(x - y) for x, y in zip(a, b))


def _clusters(values: list, epsilon: float) -> list[list[int]]:
    """For each output, the indices of outputs within ``epsilon`` of it."""
    return [[j for j, w in enumerate(values) if _dist(v, w) <= epsilon] for v in values]


def _unwrap(v: tuple, like):
    return v[0] if isinstance(like, (int, float)) else list(v)


def vote(voter, outputs: Sequence, epsilon: float = 0.0, weights: Iterable | None = None):
    """Select one output from ``outputs`` (scalars or equal-length vectors).

    ``outputs`` may also hold ``(value, weight)`` pairs when ``weights`` is
    omitted and the voter is the weighted average.  Returns
    ``NO_CONSENSUS`` when the voter cannot decide.
    """
    voter = Voter(voter)
    outputs = list(outputs)
    if not outputs:
        raise ValueError("vote needs at least one output")
    if weights is None and voter is Voter.WEIGHTED_AVERAGE and all(
        isinstance(o, tuple) and len(o) == 2 and not isinstance(o[1], (list, tuple)) for o in outputs
    ):
        weights = [o[1] for o in outputs]
        outputs = [o[0] for o in outputs]
    like = outputs[0]
    values = [_vec(o) for o in outputs]
    dims = {len(v) for v in values}
    if len(dims) != 1:
        raise ValueError(f"outputs have mismatched dimensions {sorted(dims)}")

    if voter is Voter.GENERALIZED_MEDIAN:
        return _unwrap(tuple(statistics.median(col) for col in zip(*values)), like)

    if voter is Voter.WEIGHTED_AVERAGE:
        w = [1.0] * len(values) if weights is None else [float(x) for x in weights]
        if len(w) != len(values) or any(x < 0 for x in w) or sum(w) <= 0:
            raise ValueError("weights must be non-negative, one per output, with a positive sum")
        total = sum(w)
        return _unwrap(tuple(sum(wi * col[i] for i, wi in enumerate(w)) / total for col in zip(*values)), like)

    clusters = _clusters(values, epsilon)
    best = max(range(len(values)), key=lambda i: (len(clusters[i]), -i))
    size = len(clusters[best])
    if voter is Voter.FORMALIZED_MAJORITY:
        if 2 * size <= len(values):
            return NO_CONSENSUS
        return _unwrap(values[best], like)
    # plurality: a rival cluster of equal size centred elsewhere is a tie
    for i, c in enumerate(clusters):
        if len(c) == size and _dist(values[i], values[best]) > epsilon:
            return NO_CONSENSUS
    return _unwrap(values[best], like)


def disagreeing(outputs: Sequence, voted, epsilon: float) -> list[int]:
    """Indices of outputs further than ``epsilon`` from the voted value."""
    if voted is NO_CONSENSUS:
        return list(range(len(outputs)))
    ref = _vec(voted)
    return [i for i, o in enumerate(outputs) if _dist(_vec(o), ref) > epsilon]
