"""Deterministic synthetic multi-label data with planted pair co-occurrence.

Categories come in pairs. Each pair shares a coupling strength: with
probability `cooc_strength` the two members are drawn jointly (both present or
both absent), otherwise independently, so the planted pair frequencies are
recoverable from positive-label counts. Paired categories also share a feature
direction and differ only by a contrast component, which makes the label graph
genuinely informative: features alone confuse a pair's members, co-occurrence
disambiguates them.

Features are sums of the active categories' prototypes plus Gaussian noise.
Every sample has at least one positive label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    PartialLabelMatrix,
    Provenance,
    SampleRecord,
    save_features,
    load_split_features,
)
from .errors import ConfigError, DataError
from .sampler import spread_known_cells
from .utils import canonical_json, np_rng

SPLITS = ("train", "val", "test")


def _default_rates(n_categories: int) -> tuple[float, ...]:
    """Imbalanced per-pair rates, ramping down like real category frequencies."""
    n_pairs = (n_categories + 1) // 2
    pair_rates = np.linspace(0.35, 0.12, n_pairs)
    rates = []
    for r in pair_rates:
        rates.extend([float(r), float(r)])
    return tuple(rates[:n_categories])


@dataclass
class SynthConfig:
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 600
    n_categories: int = 10
    feature_dim: int = 32
    cooc_strength: float = 0.85          # pair coupling in [0, 1]
    positive_rates: tuple[float, ...] = ()  # per category; default imbalanced ramp
    label_noise: float = 0.0             # flip probability applied to emitted truth
    separability: float = 1.6            # prototype scale vs unit feature noise
    pair_contrast: float = 0.45          # how far apart a pair's prototypes sit
    feature_noise: float = 1.0
    standardize: bool = True             # z-score all splits with train statistics
    seed: int = 0

    def resolved_rates(self) -> np.ndarray:
        rates = self.positive_rates or _default_rates(self.n_categories)
        return np.asarray(rates, dtype=np.float64)

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one sample")
        if self.n_categories < 2:
            raise ConfigError("need at least 2 categories")
        if not (0.0 <= self.cooc_strength <= 1.0):
            raise ConfigError("cooc_strength must lie in [0, 1]")
        if not (0.0 <= self.label_noise < 0.5):
            raise ConfigError("label_noise must lie in [0, 0.5)")
        rates = self.resolved_rates()
        if rates.shape != (self.n_categories,):
            raise ConfigError("positive_rates length must equal n_categories")
        if (rates <= 0.0).any() or (rates >= 0.95).any():
            raise ConfigError("positive rate targets must lie in (0, 0.95)")
        if self.feature_dim < 4 or self.feature_noise < 0 or self.separability <= 0:
            raise ConfigError("bad feature geometry settings")

    def to_dict(self) -> dict:
        d = {
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "n_categories": self.n_categories,
            "feature_dim": self.feature_dim,
            "cooc_strength": self.cooc_strength,
            "positive_rates": list(self.resolved_rates()),
            "label_noise": self.label_noise,
            "separability": self.separability,
            "pair_contrast": self.pair_contrast,
            "feature_noise": self.feature_noise,
            "standardize": self.standardize,
            "seed": self.seed,
        }
        return d


@dataclass
class SyntheticDataset:
    categories: list[str]
    manifests: dict[str, DatasetManifest]
    features: dict[str, np.ndarray]
    truth: dict[str, np.ndarray]
    config: SynthConfig | None = None

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        key = name.lower()
        return self.features[key], self.truth[key]


def planted_pair_frequencies(config: SynthConfig) -> np.ndarray:
    """Expected P(both positive) for every category pair under the plant."""
    rates = config.resolved_rates()
    c = config.n_categories
    expected = np.outer(rates, rates)
    for a in range(0, c - 1, 2):
        b = a + 1
        joint = config.cooc_strength * rates[a] + (1 - config.cooc_strength) * rates[a] * rates[b]
        expected[a, b] = expected[b, a] = joint
    np.fill_diagonal(expected, 0.0)
    return expected


def _draw_labels(config: SynthConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    rates = config.resolved_rates()
    c = config.n_categories
    labels = np.empty((count, c), dtype=np.int8)
    for i in range(count):
        while True:
            row = np.full(c, -1, dtype=np.int8)
            for a in range(0, c - 1, 2):
                b = a + 1
                if rng.random() < config.cooc_strength:
                    both = rng.random() < rates[a]
                    row[a] = row[b] = 1 if both else -1
                else:
                    row[a] = 1 if rng.random() < rates[a] else -1
                    row[b] = 1 if rng.random() < rates[b] else -1
            if c % 2 == 1:
                row[c - 1] = 1 if rng.random() < rates[c - 1] else -1
            if (row == 1).any():
                labels[i] = row
                break
    return labels


def _prototypes(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    c, f = config.n_categories, config.feature_dim
    protos = np.empty((c, f))
    for a in range(0, c, 2):
        base = rng.normal(size=f)
        base /= np.linalg.norm(base)
        if a + 1 < c:
            delta = rng.normal(size=f)
            delta -= delta @ base * base  # keep the contrast orthogonal to the shared part
            delta /= np.linalg.norm(delta)
            protos[a] = base + config.pair_contrast * delta
            protos[a + 1] = base - config.pair_contrast * delta
        else:
            protos[a] = base
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    return config.separability * protos / norms


def _make_split(
    config: SynthConfig,
    protos: np.ndarray,
    count: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    labels = _draw_labels(config, count, rng)
    active = (labels == 1).astype(np.float64)
    feats = active @ protos + config.feature_noise * rng.normal(size=(count, config.feature_dim))
    if config.label_noise > 0:
        flips = rng.random(labels.shape) < config.label_noise
        labels = labels.copy()
        labels[flips] = -labels[flips]
        # keep the >=1-positive guarantee
        dead = ~(labels == 1).any(axis=1)
        for i in np.flatnonzero(dead):
            labels[i, rng.integers(config.n_categories)] = 1
    return feats.astype(np.float32), labels


def generate(config: SynthConfig) -> SyntheticDataset:
    """Draw all three splits; same config (and seed) gives identical bytes."""
    config.validate()
    proto_rng = np_rng(config.seed, "prototypes")
    protos = _prototypes(config, proto_rng)
    categories = [f"class_{i:02d}" for i in range(config.n_categories)]
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    features: dict[str, np.ndarray] = {}
    truth: dict[str, np.ndarray] = {}
    manifests: dict[str, DatasetManifest] = {}
    for split in SPLITS:
        rng = np_rng(config.seed, "split", split)
        feats, labels = _make_split(config, protos, counts[split], rng)
        features[split] = feats
        truth[split] = labels
    if config.standardize:
        mean = features["train"].mean(axis=0)
        std = features["train"].std(axis=0)
        std[std == 0] = 1.0
        for split in SPLITS:
            features[split] = ((features[split] - mean) / std).astype(np.float32)
        manifest = DatasetManifest(categories=categories, split=split.upper())
        for i in range(counts[split]):
            manifest.samples.append(
                SampleRecord(
                    sample_id=f"{split}-{i:05d}",
                    feature_file=f"{split}.feats",
                    feature_row=i,
                    labels=labels[i],
                )
            )
        manifests[split] = manifest
    return SyntheticDataset(
        categories=categories, manifests=manifests, features=features, truth=truth, config=config
    )


def write_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        save_features(out / f"{split}.feats", dataset.features[split])
        dataset.manifests[split].save(out / f"{split}.jsonl")
    if dataset.config is not None:
        (out / "synth-config.json").write_text(canonical_json(dataset.config.to_dict()) + "\n")


def load_dataset(root: str | Path) -> SyntheticDataset:
    root = Path(root)
    manifests = {}
    features = {}
    truth = {}
    for split in SPLITS:
        path = root / f"{split}.jsonl"
        if not path.exists():
            raise DataError(f"missing manifest {path}")
        manifest = DatasetManifest.load(path)
        manifests[split] = manifest
        features[split] = load_split_features(manifest, root)
        truth[split] = manifest.truth_matrix()
    return SyntheticDataset(
        categories=manifests["train"].categories,
        manifests=manifests,
        features=features,
        truth=truth,
    )


def corrupt_missing_as_negative(
    truth: np.ndarray, keep_fraction: float, seed: int
) -> PartialLabelMatrix:
    """Missing-as-negative simulation: a kept fraction of cells stays truthful
    (each sample keeping >= 1 positive), everything else is forced negative."""
    if not (0.0 < keep_fraction <= 1.0):
        raise DataError("keep fraction must lie in (0, 1]")
    truth = np.asarray(truth, dtype=np.int8)
    n, c = truth.shape
    count = int(round(keep_fraction * n * c))
    rng = np_rng(seed, "corrupt-keep")
    mask = spread_known_cells(truth, count, rng)
    labels = PartialLabelMatrix.empty(n, c)
    labels.states[mask] = truth[mask]
    labels.provenance[mask] = int(Provenance.HUMAN_OR_ORACLE)
    forced = ~mask
    labels.states[forced] = -1
    labels.provenance[forced] = int(Provenance.FALLBACK_NEGATIVE)
    labels.validate()
    return labels
