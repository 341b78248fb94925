"""Annotators that answer label queries: a truth oracle, seeded noisy
simulators of unreliable crowd workers, and the HUMAN kind that only exists
behind the annotation service.

Answers are encoded as +1 (present), -1 (absent), 0 (declined / skipped).
Declined answers never consume budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import PartialLabelMatrix, build_cooccurrence
from .errors import AtamError, DataError
from .utils import np_rng

DECLINED = 0


class AnnotatorKind(str, Enum):
    ORACLE = "oracle"
    NOISY = "noisy"
    HUMAN = "human"


@dataclass
class AnnotatorProfile:
    kind: AnnotatorKind = AnnotatorKind.ORACLE
    flip_rate: float = 0.0
    skip_rate: float = 0.0
    seed: int = 0
    salient_negatives: int = 2  # negatives volunteered per sample in the seed phase

    def validate(self) -> None:
        if not (0.0 <= self.flip_rate <= 1.0 and 0.0 <= self.skip_rate <= 1.0):
            raise DataError("flip/skip rates must lie in [0, 1]")
        if self.kind == AnnotatorKind.ORACLE and (self.flip_rate or self.skip_rate):
            raise DataError("oracle must have zero flip and skip rates")
        if self.salient_negatives < 0:
            raise DataError("salient_negatives must be >= 0")


def answer_query(profile: AnnotatorProfile, truth_value: int, rng: np.random.Generator) -> int:
    """One answer draw: maybe decline, otherwise truth with a possible flip.

    The skip draw happens first; a skipped query consumes no flip draw, so the
    stream stays aligned with the query sequence.
    """
    if profile.kind == AnnotatorKind.HUMAN:
        raise AtamError("no human session")
    if truth_value not in (1, -1):
        raise DataError("truth value must be +/-1")
    if profile.skip_rate > 0 and rng.random() < profile.skip_rate:
        return DECLINED
    value = truth_value
    if profile.flip_rate > 0 and rng.random() < profile.flip_rate:
        value = -value
    return value


class Annotator:
    """Stateful wrapper owning the truth matrix and one seeded answer stream."""

    def __init__(self, profile: AnnotatorProfile, truth: np.ndarray | None):
        profile.validate()
        self.profile = profile
        if profile.kind != AnnotatorKind.HUMAN:
            if truth is None:
                raise DataError(f"{profile.kind.value} annotator needs ground truth")
            truth = np.asarray(truth, dtype=np.int8)
            if not np.isin(truth, (1, -1)).all():
                raise DataError("truth matrix must be dense +/-1")
        self.truth = truth
        self.rng = np_rng(profile.seed, "annotator")
        self._world = None  # lazy: normalized co-occurrence over the full truth
        self._freq = None

    def _world_knowledge(self) -> tuple[np.ndarray, np.ndarray]:
        if self._world is None:
            full = PartialLabelMatrix.from_truth(self.truth)
            self._world = build_cooccurrence(full).normalized
            self._freq = (self.truth == 1).sum(axis=0)
        return self._world, self._freq

    def answer(self, sample_index: int, category_index: int) -> int:
        if self.profile.kind == AnnotatorKind.HUMAN:
            raise AtamError("no human session")
        return answer_query(self.profile, int(self.truth[sample_index, category_index]), self.rng)

    def salient_subset(self, sample_index: int) -> list[tuple[int, int]]:
        """What this annotator would volunteer for a fresh sample, most salient
        first: every true positive (frequent categories first), then the
        configured number of negatives whose co-occurrence edge to the sample's
        positives is strongest."""
        if self.profile.kind == AnnotatorKind.HUMAN:
            raise AtamError("no human session")
        adj, freq = self._world_knowledge()
        row = self.truth[sample_index]
        positives = np.flatnonzero(row == 1)
        positives = positives[np.argsort(-freq[positives], kind="stable")]
        subset = [(int(c), 1) for c in positives]
        if self.profile.salient_negatives > 0 and positives.size > 0:
            negatives = np.flatnonzero(row == -1)
            if negatives.size > 0:
                strength = adj[np.ix_(negatives, positives)].max(axis=1)
                order = negatives[np.argsort(-strength, kind="stable")]
                subset.extend(
                    (int(c), -1) for c in order[: self.profile.salient_negatives]
                )
        return subset


def oracle(truth: np.ndarray, seed: int = 0, salient_negatives: int = 2) -> Annotator:
    return Annotator(
        AnnotatorProfile(kind=AnnotatorKind.ORACLE, seed=seed, salient_negatives=salient_negatives),
        truth,
    )
