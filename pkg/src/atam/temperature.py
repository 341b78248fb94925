"""Per-cell adaptive temperature, pseudo-label selection, and the final fill.

Each annotated sample gets one temperature per category, taken from the spread
(population standard deviation) of that category's normalized co-occurrence
edges to the sample's trusted labels, scaled and clamped. Flat edge profiles
sharpen the cell's sigmoid (the graph has no opinion), spread-out profiles
soften it (the graph dominates early and should not be trusted outright).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import NEGATIVE, UNKNOWN, PartialLabelMatrix, Provenance
from .errors import AtamError, DataError


@dataclass
class UlpConfig:
    beta: float = 0.8            # pseudo-label probability threshold
    temp_scale: float = 10.0     # multiplier on the edge-weight spread
    warmup_epochs: int = 10      # epochs before the first pseudo labels
    cap_epochs: int = 50         # epoch at which remaining unknowns become negative
    t_min: float = 0.5
    t_max: float = 20.0

    def validate(self) -> None:
        if not (0.5 < self.beta < 1.0):
            raise DataError("beta must lie in (0.5, 1)")
        if self.temp_scale <= 0:
            raise DataError("temperature scale must be > 0")
        if not (0 < self.t_min <= self.t_max):
            raise DataError("need 0 < t_min <= t_max")
        if not (0 <= self.warmup_epochs <= self.cap_epochs):
            raise DataError("warmup must not exceed the cap")


def temp_sigmoid(logits: torch.Tensor, temperature: torch.Tensor | float) -> torch.Tensor:
    """Sigmoid with a per-cell smoothing divisor: 1 / (1 + exp(-z / T))."""
    temperature = torch.as_tensor(temperature, dtype=logits.dtype, device=logits.device)
    if (temperature <= 0).any():
        raise DataError("temperature must be > 0")
    return torch.sigmoid(logits / temperature)


def compute_temperature(
    known_categories: np.ndarray | list[int],
    unknown_category: int,
    normalized_adj: np.ndarray,
    config: UlpConfig,
) -> float:
    """Temperature for one unknown cell from the sample's known-label edges."""
    known = np.asarray(known_categories, dtype=np.int64)
    if known.size == 0:
        raise DataError("no known labels for temperature")
    edges = normalized_adj[unknown_category, known]
    spread = float(np.std(edges))  # population STD: well-defined at n=1
    return float(np.clip(config.temp_scale * spread, config.t_min, config.t_max))


def compute_temperature_field(
    labels: PartialLabelMatrix,
    normalized_adj: np.ndarray,
    config: UlpConfig,
) -> np.ndarray:
    """N x C grid of temperatures; NaN on rows without any trusted label.

    Values are computed for every category of an annotated row (they are only
    consumed at unknown/pseudo cells, where the category is never part of the
    row's known set).
    """
    n, c = labels.states.shape
    field = np.full((n, c), np.nan, dtype=np.float64)
    human = labels.human_mask()
    for i in np.flatnonzero(human.any(axis=1)):
        known = np.flatnonzero(human[i])
        spread = normalized_adj[:, known].std(axis=1)
        field[i] = np.clip(config.temp_scale * spread, config.t_min, config.t_max)
    return field


def select_pseudo_labels(probs: np.ndarray, config: UlpConfig) -> np.ndarray:
    """Threshold smoothed probabilities into {+1, -1, 0=abstain} per cell."""
    probs = np.asarray(probs)
    out = np.zeros(probs.shape, dtype=np.int8)
    out[probs >= config.beta] = 1
    out[probs < (1.0 - config.beta)] = -1
    return out


def finalize_difficult_labels(
    labels: PartialLabelMatrix, epoch: int, config: UlpConfig
) -> int:
    """Turn every still-unknown cell negative once the pseudo-label phase ends.

    Returns the number of cells filled. The caller must not invoke this before
    the cap epoch.
    """
    if epoch < config.cap_epochs:
        raise AtamError(f"cap not reached: epoch {epoch} < {config.cap_epochs}")
    unknown = labels.unknown_mask()
    labels.states[unknown] = NEGATIVE
    labels.provenance[unknown] = int(Provenance.FALLBACK_NEGATIVE)
    return int(unknown.sum())
