"""Candidate-object hypotheses: observation paths, existence-augmented laws."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

from .gaussian import GaussianMixture

__all__ = [
    "HypothesisKind",
    "ObservationPath",
    "PotentialIndividual",
    "ExtendedLaw",
    "Hypothesis",
    "existence_probability",
    "alive_probability",
    "update_confirmation",
]

# An observation id is the pair (scan step, index within the scan); a missed
# scan is recorded as None.
ObservationId = Tuple[int, int]


class HypothesisKind(enum.Enum):
    PROPAGATED = "propagated"
    BIRTH = "birth"
    CLUTTER = "clutter"


@dataclass(frozen=True)
class ObservationPath:
    """Per-step record of which observation a candidate was paired with.

    `entries[k]` is the pairing at scan step `start + k`. Steps before
    `start` are implicitly missed, so the all-missed path of a candidate that
    has never been detected is representable with empty entries.
    """

    start: int
    entries: Tuple[Optional[ObservationId], ...] = ()

    def extended(self, entry: Optional[ObservationId]) -> "ObservationPath":
        return ObservationPath(self.start, self.entries + (entry,))

    @property
    def last(self) -> Optional[ObservationId]:
        return self.entries[-1] if self.entries else None

    def length_at(self, step: int) -> int:
        """Conceptual path length at `step`, counting the implicit prefix."""
        return step + 1

    @property
    def never_detected(self) -> bool:
        return all(e is None for e in self.entries)


@dataclass(frozen=True)
class PotentialIndividual:
    """A candidate object: when it may have appeared and what it explained."""

    birth_step: Optional[int]
    path: ObservationPath
    kind: HypothesisKind = HypothesisKind.PROPAGATED


@dataclass(frozen=True, eq=False)
class ExtendedLaw:
    """Existence-augmented law of one candidate object.

    p_never -- probability the candidate never was an object
    p_gone  -- probability it was an object that has since disappeared
    alive   -- Gaussian mixture over live states; its total weight is the
               probability of currently being a live object

    The three masses must sum to one.
    """

    p_never: float
    p_gone: float
    alive: GaussianMixture

    def __post_init__(self):
        total = self.p_never + self.p_gone + self.alive.total_weight
        if not (-1e-6 <= self.p_never <= 1.0 + 1e-6) or not (-1e-6 <= self.p_gone <= 1.0 + 1e-6):
            raise ValueError(f"law masses out of [0, 1]: never={self.p_never}, gone={self.p_gone}")
        if not math.isclose(total, 1.0, rel_tol=0.0, abs_tol=1e-6):
            raise ValueError(f"law masses must sum to 1, got {total}")


@dataclass(frozen=True, eq=False)
class Hypothesis:
    uid: int
    individual: PotentialIndividual
    law: ExtendedLaw
    confirmed: bool = False


def existence_probability(law: ExtendedLaw) -> float:
    """Probability the candidate is or was an object: 1 - p_never."""
    return law.p_gone + law.alive.total_weight


def alive_probability(law: ExtendedLaw) -> float:
    """Probability the candidate is currently a live object."""
    return law.alive.total_weight


def update_confirmation(hypothesis: Hypothesis, confirm_threshold: float,
                        keep_threshold: float) -> Hypothesis:
    """Hysteresis rule for reported tracks.

    A hypothesis becomes confirmed when its alive probability reaches
    `confirm_threshold` and, once confirmed, stays confirmed while it remains
    at or above `keep_threshold`.
    """
    if not 0.0 <= keep_threshold <= confirm_threshold <= 1.0:
        raise ValueError("thresholds must satisfy 0 <= keep <= confirm <= 1")
    p = alive_probability(hypothesis.law)
    confirmed = p >= confirm_threshold or (hypothesis.confirmed and p >= keep_threshold)
    if confirmed == hypothesis.confirmed:
        return hypothesis
    return replace(hypothesis, confirmed=confirmed)
