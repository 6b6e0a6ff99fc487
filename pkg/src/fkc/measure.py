"""Finite measures, total variation, and the time grid.

Total variation follows the sup-minus-inf convention, which on a finite
space is the L1 norm of the difference: two probabilities are at distance
at most 2 (twice the "half-L1" convention).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import StructuralError

PROBABILITY_TOL = 1e-12


@dataclass(frozen=True)
class StateSpace:
    """Ordered, finite list of state labels."""

    labels: tuple

    def __init__(self, labels: Sequence[Hashable]):
        labels = tuple(labels)
        if not labels:
            raise ValueError("a state space needs at least one state")
        if len(set(labels)) != len(labels):
            raise ValueError("state labels must be distinct")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def range(cls, n: int, start: int = 0) -> "StateSpace":
        return cls(range(start, start + n))

    @property
    def size(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown state {label!r}") from None


@dataclass(frozen=True)
class Measure:
    """Nonnegative weights on a :class:`StateSpace`."""

    space: StateSpace
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != self.space.size:
            raise StructuralError(
                f"{w.shape[0]} weights for a space of {self.space.size} states"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("measure weights must be finite")
        if np.any(w < 0):
            raise ValueError("measure weights must be nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, space: StateSpace, label=None, *, index: int | None = None) -> "Measure":
        if index is None:
            index = space.index(label)
        w = np.zeros(space.size)
        w[index] = 1.0
        return cls(space, w)

    @classmethod
    def uniform(cls, space: StateSpace) -> "Measure":
        return cls(space, np.full(space.size, 1.0 / space.size))

    @classmethod
    def zero(cls, space: StateSpace) -> "Measure":
        return cls(space, np.zeros(space.size))

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def is_probability(self) -> bool:
        return abs(self.total_mass - 1.0) <= PROBABILITY_TOL

    def normalized(self) -> "Measure":
        mass = self.total_mass
        if mass <= 0:
            raise ValueError("cannot normalize a zero measure")
        return Measure(self.space, self.weights / mass)

    def integrate(self, f) -> float:
        return float(np.dot(self.weights, np.asarray(f, dtype=float)))

    def __getitem__(self, label) -> float:
        return float(self.weights[self.space.index(label)])

    # serialization -----------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "weight"])
        for label, w in zip(self.space.labels, self.weights):
            writer.writerow([label, repr(float(w))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, space: StateSpace | None = None) -> "Measure":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["label", "weight"]:
            raise ValueError("expected a 'label,weight' header")
        body = rows[1:]
        weights = [float(r[1]) for r in body]
        if space is None:
            space = StateSpace([_parse_label(r[0]) for r in body])
        return cls(space, weights)

    def to_json(self) -> str:
        return json.dumps(
            {"labels": list(self.space.labels), "weights": [float(w) for w in self.weights]}
        )

    @classmethod
    def from_json(cls, text: str) -> "Measure":
        obj = json.loads(text)
        return cls(StateSpace(obj["labels"]), obj["weights"])


def _parse_label(raw: str):
    try:
        return int(raw)
    except ValueError:
        return raw


def _check_same_space(mu1: Measure, mu2: Measure) -> None:
    if mu1.space != mu2.space:
        raise StructuralError("measures live on different state spaces")


def tv_distance(mu1: Measure, mu2: Measure) -> float:
    """Total variation ``sup_A (mu1-mu2)(A) - inf_A (mu1-mu2)(A)``."""
    _check_same_space(mu1, mu2)
    return float(np.abs(mu1.weights - mu2.weights).sum())


def measure_min(mu1: Measure, mu2: Measure) -> Measure:
    """Largest measure dominated by both arguments."""
    _check_same_space(mu1, mu2)
    return Measure(mu1.space, np.minimum(mu1.weights, mu2.weights))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``origin, origin + step, ..., horizon``.

    Operations elsewhere in the package address grid points by integer
    index. One time unit spans :attr:`unit` indices, which requires
    ``1/step`` to be an integer.
    """

    origin: float
    step: float
    horizon: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if self.horizon < self.origin:
            raise ValueError("grid horizon precedes origin")
        ratio = (self.horizon - self.origin) / self.step
        if abs(ratio - round(ratio)) > 1e-12 * max(1.0, ratio):
            raise ValueError("grid step must divide horizon - origin")

    @property
    def n_steps(self) -> int:
        return int(round((self.horizon - self.origin) / self.step))

    @property
    def unit(self) -> int:
        """Number of grid steps in one time unit."""
        inv = 1.0 / self.step
        k = int(round(inv))
        if k < 1 or abs(inv - k) > 1e-9 * inv:
            raise ValueError(f"grid step {self.step} does not divide one time unit")
        return k

    def time(self, index: int) -> float:
        return self.origin + index * self.step

    def times(self) -> np.ndarray:
        return self.origin + self.step * np.arange(self.n_steps + 1)

    def index(self, time: float, *, mode: str = "nearest") -> int:
        raw = (time - self.origin) / self.step
        if mode == "nearest":
            k = int(round(raw))
        elif mode == "ceil":
            k = math.ceil(raw - 1e-9)
        elif mode == "floor":
            k = math.floor(raw + 1e-9)
        else:
            raise ValueError(f"unknown rounding mode {mode!r}")
        if not 0 <= k <= self.n_steps:
            raise ValueError(f"time {time} outside grid [{self.origin}, {self.horizon}]")
        return k
