"""Core data model: partially labeled matrices, budget ledger, label co-occurrence.

Label state per (sample, category) cell is one of {+1 positive, -1 negative,
0 unknown}. Every cell also carries a provenance tag so the trainer can tell
trusted annotations apart from self-generated pseudo labels and the final
negative fill.

File formats owned here:
  - dataset manifest: JSONL, one header record then one record per sample
  - label matrix:     "ATAM-LABELS v1" container (states + provenance grids)
  - feature file:     "ATAM-FEATS v1" container (row-major float matrix)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import AnnotationConflictError, DataError

LABELS_MAGIC = "ATAM-LABELS v1"
FEATS_MAGIC = "ATAM-FEATS v1"

POSITIVE = 1
NEGATIVE = -1
UNKNOWN = 0


class LabelState(IntEnum):
    POSITIVE = 1
    NEGATIVE = -1
    UNKNOWN = 0


class Provenance(IntEnum):
    """Who put a value into a cell. Ordering reflects trust, not time."""

    NONE = 0
    PSEUDO = 1
    FALLBACK_NEGATIVE = 2
    HUMAN_OR_ORACLE = 3


# record_label may only move provenance along these edges
_ALLOWED_TRANSITIONS = {
    (Provenance.NONE, Provenance.PSEUDO),
    (Provenance.NONE, Provenance.HUMAN_OR_ORACLE),
    (Provenance.PSEUDO, Provenance.HUMAN_OR_ORACLE),
    (Provenance.PSEUDO, Provenance.FALLBACK_NEGATIVE),
    (Provenance.NONE, Provenance.FALLBACK_NEGATIVE),
}


@dataclass
class AnnotationBudget:
    """Counts label decisions actually recorded; never overspends its limit."""

    limit: int
    consumed: int = 0

    def __post_init__(self) -> None:
        if self.limit < 0 or not (0 <= self.consumed <= self.limit):
            raise DataError(f"invalid budget: limit={self.limit} consumed={self.consumed}")

    @property
    def remaining(self) -> int:
        return self.limit - self.consumed

    def consume(self, requested: int) -> int:
        """Grant up to `requested` label slots, truncating at the limit."""
        if requested < 0:
            raise DataError("requested budget must be >= 0")
        granted = min(requested, self.remaining)
        self.consumed += granted
        return granted

    def refund(self, amount: int) -> None:
        """Return previously consumed slots (rolled-back annotations only)."""
        if amount < 0 or amount > self.consumed:
            raise DataError(f"cannot refund {amount} of {self.consumed} consumed")
        self.consumed -= amount


class PartialLabelMatrix:
    """N x C grid of label states plus a parallel provenance grid.

    Single-writer by contract: mutations go through one owner (session or
    trainer); `snapshot()` hands out independent copies for readers.
    """

    def __init__(self, states: np.ndarray, provenance: np.ndarray):
        states = np.asarray(states, dtype=np.int8)
        provenance = np.asarray(provenance, dtype=np.int8)
        if states.shape != provenance.shape or states.ndim != 2:
            raise DataError("states/provenance must be matching 2-D grids")
        self.states = states
        self.provenance = provenance

    @classmethod
    def empty(cls, n_samples: int, n_categories: int) -> "PartialLabelMatrix":
        return cls(
            np.zeros((n_samples, n_categories), dtype=np.int8),
            np.zeros((n_samples, n_categories), dtype=np.int8),
        )

    @classmethod
    def from_truth(cls, truth: np.ndarray) -> "PartialLabelMatrix":
        """Fully known matrix (every cell trusted), e.g. for oracle world knowledge."""
        truth = np.asarray(truth, dtype=np.int8)
        if not np.isin(truth, (POSITIVE, NEGATIVE)).all():
            raise DataError("truth matrix must be dense +/-1")
        prov = np.full(truth.shape, int(Provenance.HUMAN_OR_ORACLE), dtype=np.int8)
        return cls(truth.copy(), prov)

    # -- shape / views ------------------------------------------------------

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def n_categories(self) -> int:
        return self.states.shape[1]

    def snapshot(self) -> "PartialLabelMatrix":
        return PartialLabelMatrix(self.states.copy(), self.provenance.copy())

    def human_mask(self) -> np.ndarray:
        return self.provenance == int(Provenance.HUMAN_OR_ORACLE)

    def pseudo_mask(self) -> np.ndarray:
        return self.provenance == int(Provenance.PSEUDO)

    def fallback_mask(self) -> np.ndarray:
        return self.provenance == int(Provenance.FALLBACK_NEGATIVE)

    def unknown_mask(self) -> np.ndarray:
        return self.states == UNKNOWN

    @property
    def known_count(self) -> int:
        """Number of annotator-provided labels (the budget-relevant count)."""
        return int(self.human_mask().sum())

    def annotated_rows(self) -> np.ndarray:
        """Indices of samples holding at least one trusted annotation."""
        return np.flatnonzero(self.human_mask().any(axis=1))

    # -- mutation -----------------------------------------------------------

    def record(self, sample: int, category: int, value: int, provenance: Provenance) -> None:
        """Write one cell; provenance may only move forward (trust never decays)."""
        if value not in (POSITIVE, NEGATIVE):
            raise DataError(f"recorded value must be +/-1, got {value}")
        cur = Provenance(int(self.provenance[sample, category]))
        if (cur, provenance) not in _ALLOWED_TRANSITIONS:
            raise AnnotationConflictError(
                f"annotation conflict at ({sample}, {category}): {cur.name} -> {provenance.name}"
            )
        if provenance == Provenance.FALLBACK_NEGATIVE and value != NEGATIVE:
            raise DataError("fallback fill must be negative")
        self.states[sample, category] = value
        self.provenance[sample, category] = int(provenance)

    def erase(self, sample: int, category: int) -> None:
        """Roll back a non-trusted cell to UNKNOWN (group-revert path only)."""
        self.states[sample, category] = UNKNOWN
        self.provenance[sample, category] = int(Provenance.NONE)

    def set_pseudo_layer(self, values: np.ndarray) -> None:
        """Replace the whole pseudo layer in one step.

        `values` is an N x C grid with +/-1 where a pseudo label is asserted and
        0 elsewhere. Cells owned by an annotator or by the final fill are left
        untouched; previous pseudo cells not re-asserted drop back to unknown.
        This is a layer swap, not a per-cell transition, so the regeneration of
        pseudo labels each epoch never fights the provenance ordering.
        """
        values = np.asarray(values, dtype=np.int8)
        if values.shape != self.states.shape:
            raise DataError("pseudo layer shape mismatch")
        locked = (self.provenance == int(Provenance.HUMAN_OR_ORACLE)) | (
            self.provenance == int(Provenance.FALLBACK_NEGATIVE)
        )
        if (values[locked] != 0).any():
            raise AnnotationConflictError("pseudo layer may not touch trusted or fallback cells")
        old_pseudo = self.pseudo_mask()
        clear = old_pseudo & (values == 0)
        self.states[clear] = UNKNOWN
        self.provenance[clear] = int(Provenance.NONE)
        act = (~locked) & (values != 0)
        self.states[act] = values[act]
        self.provenance[act] = int(Provenance.PSEUDO)

    # -- invariants ---------------------------------------------------------

    def validate(self, require_positive: bool = True) -> None:
        states, prov = self.states, self.provenance
        if not np.isin(states, (POSITIVE, NEGATIVE, UNKNOWN)).all():
            raise DataError("label states outside {+1,-1,0}")
        none_cells = prov == int(Provenance.NONE)
        if not (states[none_cells] == UNKNOWN).all():
            raise DataError("NONE provenance on a labeled cell")
        if not (states[~none_cells] != UNKNOWN).all():
            raise DataError("unknown cell with non-NONE provenance")
        if not (states[self.fallback_mask()] == NEGATIVE).all():
            raise DataError("fallback cell not negative")
        if require_positive:
            touched = (~none_cells).any(axis=1)
            has_pos = ((states == POSITIVE) & self.human_mask()).any(axis=1)
            bad = touched & ~has_pos
            if bad.any():
                raise DataError(
                    f"{int(bad.sum())} annotated sample(s) without a trusted positive label"
                )

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path, sample_ids: list[str] | None = None) -> None:
        header = {
            "n": self.n_samples,
            "c": self.n_categories,
            "sample_ids": sample_ids,
        }
        with open(path, "wb") as fh:
            fh.write((LABELS_MAGIC + "\n").encode())
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
            fh.write(self.states.astype("<i1").tobytes(order="C"))
            fh.write(self.provenance.astype("<i1").tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> tuple["PartialLabelMatrix", dict]:
        with open(path, "rb") as fh:
            magic = fh.readline().decode().rstrip("\n")
            if magic != LABELS_MAGIC:
                raise DataError(f"not a label matrix file (magic {magic!r})")
            header = json.loads(fh.readline().decode())
            n, c = header["n"], header["c"]
            raw = fh.read()
        need = 2 * n * c
        if len(raw) != need:
            raise DataError(f"label file truncated: {len(raw)} bytes, expected {need}")
        states = np.frombuffer(raw[: n * c], dtype="<i1").reshape(n, c).copy()
        prov = np.frombuffer(raw[n * c :], dtype="<i1").reshape(n, c).copy()
        return cls(states, prov), header


@dataclass
class CooccurrenceGraph:
    """Pairwise positive-label counts and their self-loop symmetric normalization."""

    counts: np.ndarray
    normalized: np.ndarray

    @property
    def n_categories(self) -> int:
        return self.counts.shape[0]


def normalize_adjacency(counts: np.ndarray) -> np.ndarray:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}."""
    a = np.asarray(counts, dtype=np.float64)
    a_tilde = a + np.eye(a.shape[0])
    deg = a_tilde.sum(axis=1)
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return (a_tilde * d_inv_sqrt[:, None]) * d_inv_sqrt[None, :]


def build_cooccurrence(labels: PartialLabelMatrix) -> CooccurrenceGraph:
    """Count, over samples, how often two categories are both trusted-positive.

    Only annotator-provided positives enter the counts; pseudo labels never do.
    The diagonal stays zero (self-pairs carry no information; the self-loop is
    added during normalization).
    """
    pos = ((labels.states == POSITIVE) & labels.human_mask()).astype(np.int64)
    if pos.sum() == 0:
        raise DataError("no known positives")
    counts = pos.T @ pos
    np.fill_diagonal(counts, 0)
    return CooccurrenceGraph(counts=counts, normalized=normalize_adjacency(counts))


# -- dataset manifest ---------------------------------------------------------


@dataclass
class SampleRecord:
    sample_id: str
    feature_file: str
    feature_row: int
    labels: np.ndarray | None = None  # dense +/-1 ground truth, length C

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "file": self.feature_file,
            "row": self.feature_row,
            "labels": None if self.labels is None else [int(v) for v in self.labels],
        }


@dataclass
class DatasetManifest:
    categories: list[str]
    split: str  # TRAIN / VAL / TEST
    samples: list[SampleRecord] = field(default_factory=list)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def truth_matrix(self) -> np.ndarray:
        """Dense ground-truth grid; requires every sample to carry labels."""
        rows = []
        for s in self.samples:
            if s.labels is None:
                raise DataError(f"sample {s.sample_id} has no ground-truth labels")
            rows.append(np.asarray(s.labels, dtype=np.int8))
        return np.stack(rows)

    def validate(self) -> None:
        for s in self.samples:
            if s.labels is not None:
                lab = np.asarray(s.labels)
                if lab.shape != (self.n_categories,) or not np.isin(lab, (1, -1)).all():
                    raise DataError(f"sample {s.sample_id}: malformed label vector")
        if self.split in ("VAL", "TEST"):
            missing = [s.sample_id for s in self.samples if s.labels is None]
            if missing:
                raise DataError(f"{self.split} split requires ground truth; missing for {missing[:3]}")

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            header = {"kind": "header", "categories": self.categories, "split": self.split}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for s in self.samples:
                fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        with open(path) as fh:
            first = fh.readline()
            if not first:
                raise DataError(f"empty manifest: {path}")
            header = json.loads(first)
            if header.get("kind") != "header":
                raise DataError("manifest must start with a header record")
            manifest = cls(categories=list(header["categories"]), split=header["split"])
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                labels = rec.get("labels")
                manifest.samples.append(
                    SampleRecord(
                        sample_id=rec["id"],
                        feature_file=rec["file"],
                        feature_row=int(rec["row"]),
                        labels=None if labels is None else np.asarray(labels, dtype=np.int8),
                    )
                )
        manifest.validate()
        return manifest


# -- feature files ------------------------------------------------------------


def save_features(path: str | Path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype=np.float32)
    header = {"rows": feats.shape[0], "cols": feats.shape[1], "dtype": "float32"}
    with open(path, "wb") as fh:
        fh.write((FEATS_MAGIC + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(feats.astype("<f4").tobytes(order="C"))


def load_features(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != FEATS_MAGIC:
            raise DataError(f"not a feature file (magic {magic!r})")
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    rows, cols = header["rows"], header["cols"]
    need = rows * cols * 4
    if len(raw) != need:
        raise DataError(f"feature file truncated: {len(raw)} bytes, expected {need}")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()


def load_split_features(manifest: DatasetManifest, root: str | Path) -> np.ndarray:
    """Materialize the manifest's feature rows, preserving manifest order."""
    root = Path(root)
    cache: dict[str, np.ndarray] = {}
    rows = []
    for s in manifest.samples:
        if s.feature_file not in cache:
            cache[s.feature_file] = load_features(root / s.feature_file)
        rows.append(cache[s.feature_file][s.feature_row])
    return np.stack(rows)
