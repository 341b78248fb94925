"""Budget-driven querying loop: salient-label active sampling plus the random
baseline.

The engine walks the unlabeled pool in manifest order. Each round it queries,
for a fresh block of samples, every category the current model is confident
about (probability >= S suggests present, <= 1-S suggests absent), collects
answers, commits them per sample with positives recorded first, and fine-tunes
on the grown label set. A sample whose answers carry no positive gets
follow-up queries in descending-probability order until one lands; if none
can, its answers are rolled back so every annotated sample keeps at least one
trusted positive. Budget is charged per recorded answer and never overspent;
declines are free.

The same engine backs the HTTP annotation service (answers arrive over the
wire instead of from an in-process annotator), which is what makes an
oracle-driven service session reproduce the headless loop exactly.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .annotators import DECLINED, Annotator
from .data import AnnotationBudget, PartialLabelMatrix, Provenance, build_cooccurrence
from .errors import BudgetError, ConfigError, DataError
from .losses import LossConfig, focal_loss_known, with_class_weights
from .model import AtamModel, ModelConfig, predict_probs
from .utils import np_rng

POSITIVE, NEGATIVE = 1, -1


class SamplerMode(str, Enum):
    SALIENT_ACTIVE = "salient_active"
    RANDOM = "random"


@dataclass
class SamplerConfig:
    confidence_threshold: float = 0.8   # S
    batch_samples: int = 50             # fresh samples per round
    seed_samples: int = 50              # samples in the seed round
    mode: SamplerMode = SamplerMode.SALIENT_ACTIVE
    finetune_epochs: int = 3
    finetune_lr: float = 0.01
    finetune_batch: int = 32
    adjacency_rebuild_frac: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not (0.5 < self.confidence_threshold < 1.0):
            raise ConfigError("confidence threshold must lie in (0.5, 1)")
        if self.batch_samples < 1 or self.seed_samples < 1:
            raise ConfigError("batch and seed sample counts must be >= 1")
        if self.finetune_epochs < 0 or self.finetune_batch < 1:
            raise ConfigError("bad fine-tune settings")


@dataclass
class LabelQuery:
    query_id: str
    sample_index: int
    category_index: int
    suggested_value: int
    confidence: float
    forced: bool = False


def salient_query_plan(
    probs_row: np.ndarray,
    threshold: float,
    open_categories: np.ndarray | None = None,
    needs_positive: bool = True,
) -> list[tuple[int, int, float, bool]]:
    """Which of a sample's open cells to query, as (category, suggested value,
    confidence, forced) tuples.

    Confident-present cells (p >= S) come first, then confident-absent ones
    (p <= 1-S). If the positive side is empty and the sample still lacks a
    positive, the single most likely open category is queried anyway.
    """
    row = np.asarray(probs_row, dtype=np.float64)
    open_cats = (
        np.arange(row.size) if open_categories is None else np.asarray(open_categories)
    )
    if open_cats.size == 0:
        return []
    pos_side = [(int(c), float(row[c])) for c in open_cats if row[c] >= threshold]
    pos_side.sort(key=lambda t: (-t[1], t[0]))
    plan = [(c, POSITIVE, p, False) for c, p in pos_side]
    if not pos_side and needs_positive:
        best = int(open_cats[np.argmax(row[open_cats])])
        plan.append((best, POSITIVE, float(row[best]), True))
    forced_cat = plan[-1][0] if plan and plan[-1][3] else None
    neg_side = [
        (int(c), float(row[c]))
        for c in open_cats
        if row[c] <= 1.0 - threshold and int(c) != forced_cat
    ]
    neg_side.sort(key=lambda t: (t[1], t[0]))
    plan.extend((c, NEGATIVE, 1.0 - p, False) for c, p in neg_side)
    return plan


@dataclass
class AnnotationRound:
    iteration: int
    queried: int              # labels recorded this round
    cumulative_known: int
    wall_time: float = 0.0
    checkpoint_ref: str = ""

    def to_json(self) -> dict:
        return {
            "t": self.iteration,
            "labels_recorded": self.queried,
            "cumulative_known": self.cumulative_known,
            "wall_time": self.wall_time,
            "checkpoint": self.checkpoint_ref,
        }


def write_round_trace(rounds: list[AnnotationRound], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in rounds:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


class ActiveLoopEngine:
    """One annotation session: label matrix, budget, pool cursor, and the
    model that proposes salient queries between rounds."""

    def __init__(
        self,
        features: np.ndarray,
        n_categories: int,
        budget: AnnotationBudget,
        config: SamplerConfig,
        model_config: ModelConfig,
        loss_config: LossConfig | None = None,
    ):
        config.validate()
        self.features = np.asarray(features, dtype=np.float32)
        self.config = config
        self.budget = budget
        self.labels = PartialLabelMatrix.empty(self.features.shape[0], n_categories)
        self.model = AtamModel(model_config)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=config.finetune_lr,
            momentum=0.9,
            weight_decay=1e-4,
        )
        self.loss_config = loss_config or LossConfig()
        self.cursor = 0
        self.round_index = 0
        self.rounds: list[AnnotationRound] = []
        self._known_at_build = -1
        self._query_counter = 0
        self._round_probs: dict[int, np.ndarray] = {}
        self._followup_tried: dict[int, set[int]] = {}
        self._recorded_cells: dict[int, list[int]] = {}
        self._pass_candidates: list[int] = []
        self._pass_index = 0
        self._consumed_at_pass_start = 0
        self.done = False

    # -- pool walking -------------------------------------------------------
    #
    # The pool streams the manifest once; if budget remains when the stream
    # ends, further passes revisit samples that still hold unknown cells. A
    # pass that records nothing ends the loop (cells stuck between the two
    # confidence thresholds would otherwise spin forever).

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_categories(self) -> int:
        return self.labels.n_categories

    def _advance_pass(self) -> bool:
        if self._pass_index > 0:
            if self.budget.consumed == self._consumed_at_pass_start:
                return False
        candidates = np.flatnonzero(self.labels.unknown_mask().any(axis=1)).tolist()
        if not candidates:
            return False
        self._pass_candidates = candidates
        self._pass_index += 1
        self._consumed_at_pass_start = self.budget.consumed
        self.cursor = 0
        return True

    def _next_block(self, count: int) -> list[int]:
        block: list[int] = []
        while len(block) < count:
            if self.cursor >= len(self._pass_candidates):
                if not self._advance_pass():
                    break
                continue
            block.append(self._pass_candidates[self.cursor])
            self.cursor += 1
        return block

    def _new_query_id(self) -> str:
        self._query_counter += 1
        return f"q{self._query_counter:06d}"

    def restore_round_probs(self, samples: list[int]) -> None:
        """Recompute cached per-sample probabilities (service crash recovery)."""
        if not samples:
            return
        probs = predict_probs(self.model, self.features[samples])
        for sample, row in zip(samples, probs):
            self._round_probs[sample] = row

    # -- seed round ---------------------------------------------------------

    def seed_queries(self) -> list[LabelQuery]:
        """All-category queries over the seed block (service path: the human
        decides which of them are salient enough to answer)."""
        if self.budget.limit < self.config.seed_samples:
            raise BudgetError("budget below seed requirement")
        block = self._next_block(self.config.seed_samples)
        probs = predict_probs(self.model, self.features[block])
        queries: list[LabelQuery] = []
        for sample, row in zip(block, probs):
            self._round_probs[sample] = row
            for cat in range(self.n_categories):
                p = float(row[cat])
                queries.append(
                    LabelQuery(
                        query_id=self._new_query_id(),
                        sample_index=sample,
                        category_index=cat,
                        suggested_value=POSITIVE if p >= 0.5 else NEGATIVE,
                        confidence=max(p, 1.0 - p),
                    )
                )
        return queries[: self.budget.remaining]

    def run_seed(self, annotator: Annotator) -> None:
        """Headless seed: the annotator volunteers each sample's salient subset.

        Later seed samples each keep one reserved budget slot so the ">= 1
        positive per annotated sample" rule survives tight budgets.
        """
        if self.budget.limit < self.config.seed_samples:
            raise BudgetError("budget below seed requirement")
        block = self._next_block(self.config.seed_samples)
        probs = predict_probs(self.model, self.features[block])
        for pos_in_block, sample in enumerate(block):
            self._round_probs[sample] = probs[pos_in_block]
            samples_left = len(block) - pos_in_block - 1
            cap = max(self.budget.remaining - samples_left, 0)
            group = []
            for cat, value in annotator.salient_subset(sample)[:cap]:
                ans = annotator.answer(sample, cat)
                if ans != DECLINED:
                    group.append((cat, ans))
            self._commit_group(sample, group, annotator)
        self._finish_round()

    # -- querying -----------------------------------------------------------

    def query_step(self) -> list[LabelQuery]:
        """Salient queries for the next fresh block, truncated to the budget.

        Blocks whose open cells all sit between the two confidence thresholds
        are skipped (nothing salient to ask about them right now); an empty
        result signals loop termination (budget exhausted, no unknown cells
        left, or a whole pass without progress)."""
        while self.budget.remaining > 0:
            block = self._next_block(self.config.batch_samples)
            if not block:
                return []
            probs = predict_probs(self.model, self.features[block])
            queries: list[LabelQuery] = []
            for sample, row in zip(block, probs):
                self._round_probs[sample] = row
                plan = salient_query_plan(
                    row,
                    self.config.confidence_threshold,
                    open_categories=np.flatnonzero(self.labels.unknown_mask()[sample]),
                    needs_positive=not self._has_positive(sample),
                )
                queries.extend(
                    LabelQuery(self._new_query_id(), sample, cat, value, conf, forced)
                    for cat, value, conf, forced in plan
                )
            if queries:
                return queries[: self.budget.remaining]
        return []

    # -- committing answers ---------------------------------------------------

    def _record(self, sample: int, cat: int, value: int) -> bool:
        if self.budget.consume(1) == 0:
            return False
        self.labels.record(sample, cat, value, Provenance.HUMAN_OR_ORACLE)
        self._recorded_cells.setdefault(sample, []).append(cat)
        return True

    def _has_positive(self, sample: int) -> bool:
        return bool(
            ((self.labels.states[sample] == POSITIVE) & self.labels.human_mask()[sample]).any()
        )

    def _rollback(self, sample: int) -> None:
        cells = self._recorded_cells.pop(sample, [])
        for cat in cells:
            self.labels.erase(sample, cat)
        self.budget.refund(len(cells))

    def _untried_categories(self, sample: int) -> list[int]:
        """Categories not yet recorded or follow-up-tried, most likely first."""
        row = self._round_probs[sample]
        tried = self._followup_tried.setdefault(sample, set())
        known = set(np.flatnonzero(self.labels.provenance[sample] != 0).tolist())
        cats = [c for c in range(self.n_categories) if c not in tried and c not in known]
        cats.sort(key=lambda c: (-row[c], c))
        return cats

    def _commit_group(
        self,
        sample: int,
        group: list[tuple[int, int]],
        annotator: Annotator | None,
    ) -> list[LabelQuery]:
        """Record one sample's answers (positives first) and secure a positive.

        With an in-process annotator, follow-ups are resolved on the spot; in
        service mode the needed follow-up query is returned to the caller.
        """
        ordered = sorted(group, key=lambda t: t[1] != POSITIVE)
        for cat, value in ordered:
            if not self._record(sample, cat, value):
                break
        if self._has_positive(sample) or sample not in self._recorded_cells:
            return []
        if annotator is not None:
            for cat in self._untried_categories(sample):
                if self.budget.remaining == 0:
                    break
                self._followup_tried[sample].add(cat)
                ans = annotator.answer(sample, cat)
                if ans == DECLINED:
                    continue
                if not self._record(sample, cat, ans):
                    break
                if ans == POSITIVE:
                    return []
            self._rollback(sample)
            return []
        # service mode: ask for one more category, or give up on the sample
        candidates = self._untried_categories(sample)
        if not candidates or self.budget.remaining == 0:
            self._rollback(sample)
            return []
        cat = candidates[0]
        self._followup_tried[sample].add(cat)
        row = self._round_probs[sample]
        return [
            LabelQuery(self._new_query_id(), sample, cat, POSITIVE, float(row[cat]), forced=True)
        ]

    def apply_answers(
        self,
        queries: list[LabelQuery],
        answers: dict[str, int],
        annotator: Annotator | None = None,
    ) -> list[LabelQuery]:
        """Commit a round's answers grouped per sample; returns any follow-up
        queries still needed (service mode only)."""
        by_sample: dict[int, list[tuple[int, int]]] = {}
        order: list[int] = []
        for q in queries:
            if q.sample_index not in by_sample:
                by_sample[q.sample_index] = []
                order.append(q.sample_index)
            ans = answers.get(q.query_id, DECLINED)
            if ans != DECLINED:
                by_sample[q.sample_index].append((q.category_index, ans))
        follow_ups: list[LabelQuery] = []
        for sample in order:
            follow_ups.extend(self._commit_group(sample, by_sample[sample], annotator))
        return follow_ups

    def _finish_round(self, checkpoint_ref: str = "") -> None:
        recorded = self.budget.consumed - (
            self.rounds[-1].cumulative_known if self.rounds else 0
        )
        self.rounds.append(
            AnnotationRound(
                iteration=self.round_index,
                queried=recorded,
                cumulative_known=self.budget.consumed,
                wall_time=time.time(),
                checkpoint_ref=checkpoint_ref,
            )
        )
        self.round_index += 1
        self._recorded_cells.clear()
        self._followup_tried.clear()
        self._round_probs.clear()

    # -- fine-tuning ----------------------------------------------------------

    def _maybe_rebuild_adjacency(self) -> None:
        known = self.labels.known_count
        if self._known_at_build < 0 or (
            self._known_at_build > 0
            and (known - self._known_at_build) / self._known_at_build
            > self.config.adjacency_rebuild_frac
        ):
            self.model.set_adjacency(build_cooccurrence(self.labels).normalized)
            self._known_at_build = known

    def finetune(self) -> None:
        """A few epochs on the trusted labels only, to guide the next queries."""
        rows = self.labels.annotated_rows()
        if rows.size == 0 or self.config.finetune_epochs == 0:
            return
        self._maybe_rebuild_adjacency()
        loss_cfg = with_class_weights(self.loss_config, self.labels)
        human = self.labels.human_mask()[rows]
        states = self.labels.states[rows]
        feats = torch.as_tensor(self.features[rows], dtype=torch.float32)
        rng = np_rng(self.config.seed, "finetune", self.round_index)
        self.model.train()
        for _ in range(self.config.finetune_epochs):
            perm = rng.permutation(rows.size)
            for start in range(0, rows.size, self.config.finetune_batch):
                idx = perm[start : start + self.config.finetune_batch]
                logits, probs = self.model(feats[idx])
                mask = torch.as_tensor(human[idx])
                if not mask.any():
                    continue
                flat_p = probs[mask]
                flat_y = torch.as_tensor(states[idx], dtype=torch.float32)[mask]
                cls = torch.nonzero(mask, as_tuple=False)[:, 1]
                loss = focal_loss_known(flat_p, flat_y, cls, loss_cfg)
                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()

    # -- headless loop --------------------------------------------------------

    def run_round(self, annotator: Annotator) -> bool:
        queries = self.query_step()
        if not queries:
            self.done = True
            return False
        answers = {
            q.query_id: annotator.answer(q.sample_index, q.category_index) for q in queries
        }
        self.apply_answers(queries, answers, annotator=annotator)
        self._finish_round()
        self.finetune()
        return True

    def run(self, annotator: Annotator) -> tuple[PartialLabelMatrix, list[AnnotationRound]]:
        self.run_seed(annotator)
        self.finetune()
        while self.budget.remaining > 0:
            if not self.run_round(annotator):
                break
        self.done = True
        self.labels.validate()
        return self.labels, self.rounds


def run_active_loop(
    features: np.ndarray,
    n_categories: int,
    budget: AnnotationBudget,
    config: SamplerConfig,
    model_config: ModelConfig,
    annotator: Annotator,
    loss_config: LossConfig | None = None,
) -> tuple[PartialLabelMatrix, list[AnnotationRound], ActiveLoopEngine]:
    engine = ActiveLoopEngine(features, n_categories, budget, config, model_config, loss_config)
    labels, rounds = engine.run(annotator)
    return labels, rounds, engine


# -- random baseline -----------------------------------------------------------


def spread_known_cells(truth: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask with `count` cells spread evenly over samples, one
    guaranteed true-positive cell per touched sample.

    Samples without any positive label are excluded (with their quota pushed to
    other samples), mirroring how an annotator could never volunteer a positive
    for them.
    """
    truth = np.asarray(truth)
    n, c = truth.shape
    if count > n * c:
        raise DataError("budget exceeds total label count")
    usable = np.flatnonzero((truth == 1).any(axis=1))
    if usable.size < n:
        warnings.warn(f"excluding {n - usable.size} sample(s) with no positive label")
    if usable.size == 0:
        raise DataError("no sample has a positive label")
    count = min(count, usable.size * c)
    base, extra = divmod(count, usable.size)
    quota = np.full(usable.size, base, dtype=np.int64)
    quota[rng.permutation(usable.size)[:extra]] += 1
    mask = np.zeros((n, c), dtype=bool)
    spill = 0
    for i, sample in enumerate(usable):
        take = int(quota[i]) + spill
        spill = max(take - c, 0)
        take = min(take, c)
        if take == 0:
            continue
        positives = np.flatnonzero(truth[sample] == 1)
        first = int(rng.choice(positives))
        chosen = [first]
        if take > 1:
            others = np.array([j for j in range(c) if j != first])
            chosen.extend(rng.choice(others, size=take - 1, replace=False).tolist())
        mask[sample, chosen] = True
    # spill only remains if trailing samples were saturated; hand it to any sample with room
    if spill > 0:
        for sample in usable:
            room = np.flatnonzero(~mask[sample])
            take = min(spill, room.size)
            if take > 0:
                mask[sample, rng.choice(room, size=take, replace=False)] = True
                spill -= take
            if spill == 0:
                break
    return mask


def random_sample(
    truth: np.ndarray, budget: AnnotationBudget, seed: int
) -> PartialLabelMatrix:
    """Random-annotation baseline: budgeted cells chosen uniformly, each
    touched sample keeping at least one positive."""
    rng = np_rng(seed, "random-sample")
    mask = spread_known_cells(truth, budget.limit - budget.consumed, rng)
    granted = budget.consume(int(mask.sum()))
    if granted != int(mask.sum()):  # pragma: no cover - mask is budget-bounded
        raise BudgetError("random sample overshot budget")
    labels = PartialLabelMatrix.empty(*truth.shape)
    labels.states[mask] = truth[mask]
    labels.provenance[mask] = int(Provenance.HUMAN_OR_ORACLE)
    labels.validate()
    return labels
