import numpy as np
import pytest

from atam.annotators import (
    DECLINED,
    Annotator,
    AnnotatorKind,
    AnnotatorProfile,
    answer_query,
    oracle,
)
from atam.errors import AtamError, DataError
from atam.utils import np_rng


def toy_truth():
    # 4 samples x 3 categories, every sample has a positive
    return np.array(
        [
            [1, 1, -1],
            [1, -1, -1],
            [-1, 1, 1],
            [1, -1, 1],
        ],
        dtype=np.int8,
    )


class TestAnswer:
    def test_oracle_returns_truth(self):
        ann = oracle(toy_truth())
        assert ann.answer(0, 0) == 1
        assert ann.answer(0, 2) == -1

    def test_deterministic_full_flip(self):
        profile = AnnotatorProfile(kind=AnnotatorKind.NOISY, flip_rate=1.0, seed=3)
        rng = np_rng(3, "annotator")
        assert answer_query(profile, 1, rng) == -1

    def test_flip_frequency(self):
        profile = AnnotatorProfile(kind=AnnotatorKind.NOISY, flip_rate=0.2, seed=123)
        rng = np_rng(123, "annotator")
        flips = sum(answer_query(profile, 1, rng) == -1 for _ in range(10_000))
        assert abs(flips / 10_000 - 0.2) < 0.01

    def test_skip_frequency_and_budget_neutrality(self):
        profile = AnnotatorProfile(kind=AnnotatorKind.NOISY, skip_rate=0.3, seed=9)
        rng = np_rng(9, "annotator")
        skips = sum(answer_query(profile, 1, rng) == DECLINED for _ in range(10_000))
        assert abs(skips / 10_000 - 0.3) < 0.015

    def test_same_seed_same_answer_sequence(self):
        t = toy_truth()
        seqs = []
        for _ in range(2):
            ann = Annotator(AnnotatorProfile(kind=AnnotatorKind.NOISY, flip_rate=0.4, skip_rate=0.2, seed=7), t)
            seqs.append([ann.answer(i % 4, j % 3) for i, j in zip(range(60), range(60))])
        assert seqs[0] == seqs[1]

    def test_human_kind_raises_without_session(self):
        ann = Annotator(AnnotatorProfile(kind=AnnotatorKind.HUMAN), None)
        with pytest.raises(AtamError, match="no human session"):
            ann.answer(0, 0)

    def test_oracle_with_noise_rejected(self):
        with pytest.raises(DataError):
            Annotator(AnnotatorProfile(kind=AnnotatorKind.ORACLE, flip_rate=0.1), toy_truth())


class TestSalientSubset:
    def test_positives_always_included_and_first(self):
        ann = oracle(toy_truth(), salient_negatives=1)
        subset = ann.salient_subset(0)
        values = [v for _, v in subset]
        assert values[: values.count(1)] == [1] * values.count(1)
        pos_cats = {c for c, v in subset if v == 1}
        assert pos_cats == {0, 1}

    def test_negative_count_configurable(self):
        ann = oracle(toy_truth(), salient_negatives=0)
        assert all(v == 1 for _, v in ann.salient_subset(1))
        ann2 = oracle(toy_truth(), salient_negatives=2)
        negs = [c for c, v in ann2.salient_subset(1) if v == -1]
        assert len(negs) == 2

    def test_subset_deterministic(self):
        a = oracle(toy_truth(), seed=1)
        b = oracle(toy_truth(), seed=1)
        assert a.salient_subset(2) == b.salient_subset(2)
