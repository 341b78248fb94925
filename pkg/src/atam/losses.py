"""Class-weighted focal losses and the mixed training objective.

Known labels are scored with the standard sigmoid; pseudo labels with the
temperature sigmoid from :mod:`atam.temperature`, which softens or sharpens
each cell before the same focal form is applied. Both reduce by the mean over
contributing cells so the two terms stay scale-comparable in the mix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import PartialLabelMatrix
from .errors import DataError
from .temperature import temp_sigmoid

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    focal_alpha: float = 0.25
    gamma: float = 2.0
    epsilon: float = 0.5
    class_weights: np.ndarray | None = field(default=None, repr=False)  # p_beta, length C

    def validate(self) -> None:
        if self.gamma < 0:
            raise DataError("gamma must be >= 0")
        if self.epsilon < 0:
            raise DataError("epsilon must be >= 0")
        if not (0.0 <= self.focal_alpha <= 1.0):
            raise DataError("focal alpha must lie in [0, 1]")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if (w <= 0).any() or (w >= 1).any():
                raise DataError("class weights must lie in (0, 1)")
            if abs(w.sum() - 1.0) > 1e-8:
                raise DataError("class weights must sum to 1")


def class_proportions(labels: PartialLabelMatrix, floor_total: float = 0.01) -> np.ndarray:
    """Per-class share of trusted positives, floored away from exact zero.

    Classes with no known positive get floor_total / C before renormalization,
    keeping every entry strictly inside (0, 1).
    """
    pos = ((labels.states == 1) & labels.human_mask()).sum(axis=0).astype(np.float64)
    total = pos.sum()
    if total == 0:
        raise DataError("no known positives for class proportions")
    props = pos / total
    floor = floor_total / labels.n_categories
    props = np.maximum(props, floor)
    return props / props.sum()


def _focal_terms(
    p: torch.Tensor,
    targets: torch.Tensor,
    class_idx: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    if config.class_weights is None:
        raise DataError("loss config has no class weights; call class_proportions first")
    if p.shape != targets.shape or p.shape != class_idx.shape:
        raise DataError("loss inputs must share one flat cell axis")
    w = torch.as_tensor(config.class_weights, dtype=p.dtype, device=p.device)[class_idx]
    y = (targets.to(p.dtype) + 1.0) / 2.0  # {+1,-1} -> {1,0} indicator
    p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = config.focal_alpha * y * (1.0 - p) ** config.gamma * torch.log(p)
    neg = (1.0 - config.focal_alpha) * (1.0 - y) * p ** config.gamma * torch.log(1.0 - p)
    return -(w * (pos + neg))


def focal_loss_known(
    p: torch.Tensor,
    targets: torch.Tensor,
    class_idx: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    """Weighted focal loss over trusted cells; `p` comes from the standard sigmoid."""
    if p.numel() == 0:
        return torch.zeros((), dtype=p.dtype if p.is_floating_point() else torch.float32)
    return _focal_terms(p, targets, class_idx, config).mean()


def focal_loss_pseudo(
    logits: torch.Tensor,
    temperature: torch.Tensor,
    targets: torch.Tensor,
    class_idx: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    """Same focal form with the temperature sigmoid in place of the standard one."""
    if logits.numel() == 0:
        return torch.zeros((), dtype=logits.dtype if logits.is_floating_point() else torch.float32)
    temperature = torch.as_tensor(temperature, dtype=logits.dtype, device=logits.device)
    if temperature.shape != logits.shape:
        raise DataError("temperature missing for some pseudo cells")
    if not torch.isfinite(temperature).all():
        raise DataError("temperature must be finite for every pseudo cell")
    p = temp_sigmoid(logits, temperature)
    return _focal_terms(p, targets, class_idx, config).mean()


def total_loss(l_known: torch.Tensor, l_pseudo: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Mixed objective: trusted term plus epsilon-weighted pseudo term."""
    return l_known + epsilon * l_pseudo


def with_class_weights(config: LossConfig, labels: PartialLabelMatrix) -> LossConfig:
    """Return a config copy with weights taken from the matrix's trusted positives."""
    return LossConfig(
        focal_alpha=config.focal_alpha,
        gamma=config.gamma,
        epsilon=config.epsilon,
        class_weights=class_proportions(labels),
    )
