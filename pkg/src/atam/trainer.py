"""Three-phase training on a partial label matrix.

Warmup minimizes the focal loss on trusted cells. The alternate phase then,
once per epoch, regenerates pseudo labels for the unknown cells (temperature-
smoothed probabilities thresholded into +1 / -1 / abstain) and takes one epoch
of the mixed objective. At the cap epoch the still-unknown cells are filled
negative, the pseudo machinery goes inert, and training continues on the now
complete grid until the loss plateaus or the epoch budget runs out. Inference
always uses the plain model at temperature 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .data import PartialLabelMatrix, build_cooccurrence
from .errors import ConfigError, DataError, TrainingAbort
from .losses import LossConfig, focal_loss_known, focal_loss_pseudo, total_loss, with_class_weights
from .metrics import MetricsReport, evaluate
from .model import AtamModel, ModelConfig, predict_probs, save_checkpoint
from .temperature import (
    UlpConfig,
    compute_temperature_field,
    finalize_difficult_labels,
    select_pseudo_labels,
    temp_sigmoid,
)
from .utils import derive_seed, np_rng


class Phase(str, Enum):
    WARMUP = "warmup"
    ALTERNATE = "alternate"
    POST_ULP = "post_ulp"


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_every: int = 50
    lr_decay_factor: float = 10.0
    batch_size: int = 12
    max_epochs: int = 110
    plateau_tol: float = 1e-4
    plateau_window: int = 10
    ulp_enabled: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max epochs must be >= 1")
        if self.lr_decay_every < 1 or self.lr_decay_factor < 1:
            raise ConfigError("bad learning-rate schedule")
        if self.plateau_window < 1 or self.plateau_tol < 0:
            raise ConfigError("bad plateau settings")


@dataclass
class TrainState:
    epoch: int = 0
    phase: Phase = Phase.WARMUP
    labels: PartialLabelMatrix | None = None
    loss_history: list[float] = field(default_factory=list)
    finalized_cells: int = 0
    stopped_early: bool = False


@dataclass
class TrainResult:
    model: AtamModel
    state: TrainState
    epoch_metrics: list[MetricsReport | None]
    logs: list[dict]


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay_factor ** (-(epoch // config.lr_decay_every))


def phase_at(epoch: int, train_cfg: TrainConfig, ulp_cfg: UlpConfig) -> Phase:
    if not train_cfg.ulp_enabled:
        return Phase.WARMUP
    if epoch < ulp_cfg.warmup_epochs:
        return Phase.WARMUP
    if epoch < ulp_cfg.cap_epochs:
        return Phase.ALTERNATE
    return Phase.POST_ULP


def train(
    features: np.ndarray,
    labels: PartialLabelMatrix,
    model_config: ModelConfig,
    train_config: TrainConfig,
    ulp_config: UlpConfig,
    loss_config: LossConfig,
    eval_features: np.ndarray | None = None,
    eval_truth: np.ndarray | None = None,
    log_dir: str | Path | None = None,
) -> TrainResult:
    """Run the full schedule; deterministic for a fixed train_config.seed."""
    train_config.validate()
    ulp_config.validate()
    labels = labels.snapshot()
    labels.validate()
    rows = labels.annotated_rows()
    if rows.size == 0:
        raise DataError("empty known set")

    graph = build_cooccurrence(labels)
    loss_cfg = with_class_weights(loss_config, labels)
    loss_cfg.validate()
    model = AtamModel(replace(model_config, seed=derive_seed(train_config.seed, "train-model")))
    model.set_adjacency(graph.normalized)

    feats = torch.as_tensor(features[rows], dtype=torch.float32)
    n_rows = rows.size
    temp_field: torch.Tensor | None = None
    if train_config.ulp_enabled:
        field_np = compute_temperature_field(labels, graph.normalized, ulp_config)[rows]
        temp_field = torch.as_tensor(field_np, dtype=torch.float32)

    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=train_config.lr,
        momentum=train_config.momentum,
        weight_decay=train_config.weight_decay,
    )

    def masks() -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        trusted = labels.human_mask() | labels.fallback_mask()
        pseudo = labels.pseudo_mask()
        states = labels.states
        return (
            torch.as_tensor(trusted[rows]),
            torch.as_tensor(pseudo[rows]),
            torch.as_tensor(states[rows], dtype=torch.float32),
        )

    trusted_t, pseudo_t, states_t = masks()

    state = TrainState(labels=labels)
    epoch_metrics: list[MetricsReport | None] = []
    logs: list[dict] = []
    audit: list[dict] = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

    for epoch in range(train_config.max_epochs):
        phase = phase_at(epoch, train_config, ulp_config)
        if phase == Phase.POST_ULP and state.phase != Phase.POST_ULP:
            state.finalized_cells = finalize_difficult_labels(labels, epoch, ulp_config)
            trusted_t, pseudo_t, states_t = masks()
        state.phase = phase
        state.epoch = epoch

        pseudo_counts = (0, 0, 0)
        if phase == Phase.ALTERNATE:
            assert temp_field is not None
            probs = np.zeros((n_rows, labels.n_categories), dtype=np.float32)
            was_training = model.training
            model.eval()
            with torch.no_grad():
                for start in range(0, n_rows, 512):
                    z, _ = model(feats[start : start + 512])
                    t = temp_field[start : start + 512]
                    probs[start : start + 512] = temp_sigmoid(z, t).numpy()
            model.train(was_training)
            selection = select_pseudo_labels(probs, ulp_config)
            locked = (labels.human_mask() | labels.fallback_mask())[rows]
            selection[locked] = 0
            full = np.zeros(labels.states.shape, dtype=np.int8)
            full[rows] = selection
            labels.set_pseudo_layer(full)
            trusted_t, pseudo_t, states_t = masks()
            eligible = ~locked
            pseudo_counts = (
                int((selection[eligible] == 1).sum()),
                int((selection[eligible] == -1).sum()),
                int((selection[eligible] == 0).sum()),
            )

        lr = learning_rate_at(train_config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        rng = np_rng(train_config.seed, "train-epoch", epoch)
        perm = rng.permutation(n_rows)
        sum_k = sum_s = 0.0
        cells_k = cells_s = 0
        model.train()
        for start in range(0, n_rows, train_config.batch_size):
            idx = perm[start : start + train_config.batch_size]
            batch_idx = torch.as_tensor(idx, dtype=torch.long)
            logits, probs = model(feats[batch_idx])

            if phase == Phase.POST_ULP:
                k_mask = trusted_t[batch_idx] | pseudo_t[batch_idx]
            else:
                k_mask = trusted_t[batch_idx]
            l_k = _masked_known_loss(probs, states_t[batch_idx], k_mask, loss_cfg)
            n_k = int(k_mask.sum())

            if phase == Phase.ALTERNATE:
                s_mask = pseudo_t[batch_idx]
                l_s = _masked_pseudo_loss(
                    logits, temp_field[batch_idx], states_t[batch_idx], s_mask, loss_cfg
                )
                n_s = int(s_mask.sum())
                loss = total_loss(l_k, l_s, loss_cfg.epsilon)
            else:
                l_s = torch.zeros(())
                n_s = 0
                loss = l_k

            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                if log_dir is not None:
                    save_checkpoint(model, Path(log_dir) / "last_good.ckpt")
                raise TrainingAbort(f"non-finite loss at epoch {epoch}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            sum_k += float(l_k.detach()) * n_k
            cells_k += n_k
            if n_s > 0:
                sum_s += float(l_s.detach()) * n_s
                cells_s += n_s

        mean_k = sum_k / max(cells_k, 1)
        mean_s = sum_s / cells_s if cells_s else 0.0
        mean_w = mean_k + loss_cfg.epsilon * mean_s if phase == Phase.ALTERNATE else mean_k
        state.loss_history.append(mean_w)
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

        report = None
        if eval_features is not None and eval_truth is not None:
            report = evaluate(predict_probs(model, eval_features), eval_truth)
        epoch_metrics.append(report)

        logs.append(
            {
                "epoch": epoch,
                "phase": phase.value,
                "l_k": mean_k,
                "l_s": mean_s,
                "l_w": mean_w,
                "lr": lr,
                "pseudo_pos": pseudo_counts[0],
                "pseudo_neg": pseudo_counts[1],
                "abstain": pseudo_counts[2],
                "val_of1": None if report is None else report.of1,
            }
        )
        if phase == Phase.ALTERNATE and temp_field is not None:
            finite = temp_field[~torch.isnan(temp_field)]
            audit.append(
                {
                    "epoch": epoch,
                    "pseudo_pos": pseudo_counts[0],
                    "pseudo_neg": pseudo_counts[1],
                    "abstain": pseudo_counts[2],
                    "t_mean": float(finite.mean()),
                    "t_min": float(finite.min()),
                    "t_max": float(finite.max()),
                }
            )

        plateau_active = (
            phase == Phase.POST_ULP
            if train_config.ulp_enabled
            else epoch >= ulp_config.cap_epochs
        )
        w = train_config.plateau_window
        if plateau_active and len(state.loss_history) > w:
            old = state.loss_history[-w - 1]
            rel = (old - state.loss_history[-1]) / max(abs(old), 1e-12)
            if rel < train_config.plateau_tol:
                state.stopped_early = True
                state.epoch = epoch
                break

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        with open(log_dir / "train_log.jsonl", "w") as fh:
            for entry in logs:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        with open(log_dir / "pseudo_audit.jsonl", "w") as fh:
            for entry in audit:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    return TrainResult(model=model, state=state, epoch_metrics=epoch_metrics, logs=logs)


def _masked_known_loss(
    probs: torch.Tensor, states: torch.Tensor, mask: torch.Tensor, cfg: LossConfig
) -> torch.Tensor:
    if not mask.any():
        return torch.zeros(())
    cls = torch.nonzero(mask, as_tuple=False)[:, 1]
    return focal_loss_known(probs[mask], states[mask], cls, cfg)


def _masked_pseudo_loss(
    logits: torch.Tensor,
    temps: torch.Tensor,
    states: torch.Tensor,
    mask: torch.Tensor,
    cfg: LossConfig,
) -> torch.Tensor:
    if not mask.any():
        return torch.zeros(())
    cls = torch.nonzero(mask, as_tuple=False)[:, 1]
    return focal_loss_pseudo(logits[mask], temps[mask], states[mask], cls, cfg)
