"""The multi-label model: feature branch fused with a label-graph branch.

A sample's features run through a backbone and a two-layer head into a fusion
vector; category embeddings run through graph convolutions over the normalized
co-occurrence matrix into one vector per category. The per-category logit is
the plain dot product of the two, and probabilities come from the standard
sigmoid. Checkpoints are a deterministic binary container ("ATAM-CKPT v1").
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, TrainingAbort
from .utils import torch_gen

CKPT_MAGIC = "ATAM-CKPT v1"


class BackboneKind(str, Enum):
    SMALL_CONV = "small_conv"
    MLP_ON_FEATURES = "mlp_on_features"
    EXTERNAL = "external"


class EmbeddingSource(str, Enum):
    FILE = "file"
    SEEDED_RANDOM = "seeded_random"
    ONE_HOT_PROJECTED = "one_hot_projected"


@dataclass
class FrlmConfig:
    backbone: BackboneKind = BackboneKind.MLP_ON_FEATURES
    input_dim: int = 32          # raw feature length (image side for SMALL_CONV)
    feature_dim: int = 128       # backbone output width
    head_hidden: int = 96
    fusion_dim: int = 64         # head output; must match the graph branch
    init_gain: float = 1.0       # multiplies the Kaiming init bound


@dataclass
class GcnConfig:
    embed_dim: int = 32
    layer_dims: tuple[int, ...] = (64, 64)   # last entry must equal fusion_dim
    leaky_slope: float = 0.2
    embedding_source: EmbeddingSource = EmbeddingSource.SEEDED_RANDOM
    embedding_file: str | None = None
    embedding_scale: float = 1.0  # row norm of seeded-random embeddings
    init_gain: float = 1.0


@dataclass
class ModelConfig:
    n_categories: int
    frlm: FrlmConfig = field(default_factory=FrlmConfig)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.n_categories < 2:
            raise ConfigError("need at least 2 categories")
        if not self.gcn.layer_dims:
            raise ConfigError("graph branch needs at least one layer")
        if self.gcn.layer_dims[-1] != self.frlm.fusion_dim:
            raise ConfigError(
                f"fusion dim mismatch: graph branch ends at {self.gcn.layer_dims[-1]}, "
                f"head ends at {self.frlm.fusion_dim}"
            )
        if self.frlm.backbone == BackboneKind.EXTERNAL and self.frlm.input_dim != self.frlm.feature_dim:
            raise ConfigError("external backbone requires input_dim == feature_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frlm"]["backbone"] = self.frlm.backbone.value
        d["gcn"]["embedding_source"] = self.gcn.embedding_source.value
        d["gcn"]["layer_dims"] = list(self.gcn.layer_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        frlm = FrlmConfig(**{**d["frlm"], "backbone": BackboneKind(d["frlm"]["backbone"])})
        gcn = GcnConfig(
            **{
                **d["gcn"],
                "embedding_source": EmbeddingSource(d["gcn"]["embedding_source"]),
                "layer_dims": tuple(d["gcn"]["layer_dims"]),
            }
        )
        return cls(n_categories=d["n_categories"], frlm=frlm, gcn=gcn, seed=d["seed"])


def _seeded_linear(
    in_dim: int, out_dim: int, gen: torch.Generator, bias: bool = True, gain: float = 1.0
) -> nn.Linear:
    """Linear layer with Kaiming-uniform weights drawn from an explicit generator."""
    layer = nn.Linear(in_dim, out_dim, bias=bias)
    bound = gain * math.sqrt(6.0 / in_dim)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if bias:
            layer.bias.zero_()
    return layer


def gcn_propagate(
    h0: torch.Tensor,
    adjacency: torch.Tensor,
    weights: list[torch.Tensor],
    leaky_slope: float = 0.2,
) -> torch.Tensor:
    """Stacked graph convolutions: h <- LeakyReLU(adjacency @ h @ W) per layer."""
    h = h0
    for idx, w in enumerate(weights):
        if h.shape[1] != w.shape[0]:
            raise DataError(
                f"graph layer {idx}: input width {h.shape[1]} does not match weight rows {w.shape[0]}"
            )
        h = torch.nn.functional.leaky_relu(adjacency @ (h @ w), negative_slope=leaky_slope)
    return h


class AtamModel(nn.Module):
    """Feature branch + label-graph branch fused by a dot product into logits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch_gen(config.seed, "model-init")
        frlm, gcn = config.frlm, config.gcn

        if frlm.backbone == BackboneKind.MLP_ON_FEATURES:
            self.backbone = nn.Sequential(
                _seeded_linear(frlm.input_dim, frlm.feature_dim, gen, gain=frlm.init_gain),
                nn.ReLU(),
            )
        elif frlm.backbone == BackboneKind.EXTERNAL:
            self.backbone = nn.Identity()
        elif frlm.backbone == BackboneKind.SMALL_CONV:
            conv1 = nn.Conv2d(1, 8, 3, padding=1)
            conv2 = nn.Conv2d(8, 16, 3, padding=1)
            for conv in (conv1, conv2):
                bound = 1.0 / math.sqrt(conv.weight.shape[1] * 9)
                with torch.no_grad():
                    conv.weight.uniform_(-bound, bound, generator=gen)
                    conv.bias.uniform_(-bound, bound, generator=gen)
            self.backbone = nn.Sequential(
                conv1, nn.ReLU(), nn.MaxPool2d(2),
                conv2, nn.ReLU(),
                nn.AdaptiveAvgPool2d(2),
                nn.Flatten(),
                _seeded_linear(16 * 4, frlm.feature_dim, gen),
                nn.ReLU(),
            )
        else:  # pragma: no cover - enum is closed
            raise ConfigError(f"unknown backbone {frlm.backbone}")

        self.head = nn.Sequential(
            _seeded_linear(frlm.feature_dim, frlm.head_hidden, gen, gain=frlm.init_gain),
            nn.ReLU(),
            _seeded_linear(frlm.head_hidden, frlm.fusion_dim, gen, gain=frlm.init_gain),
        )

        dims = (gcn.embed_dim,) + tuple(gcn.layer_dims)
        self.gcn_weights = nn.ParameterList()
        for i in range(len(dims) - 1):
            bound = gcn.init_gain * math.sqrt(6.0 / dims[i])
            w = torch.empty(dims[i], dims[i + 1])
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=gen)
            self.gcn_weights.append(nn.Parameter(w))

        self.register_buffer("embeddings", self._build_embeddings(gen))
        self.register_buffer("adjacency", torch.eye(config.n_categories))

    def _build_embeddings(self, gen: torch.Generator) -> torch.Tensor:
        cfg = self.config.gcn
        c = self.config.n_categories
        if cfg.embedding_source == EmbeddingSource.SEEDED_RANDOM:
            emb = torch.empty(c, cfg.embed_dim).normal_(generator=gen)
            return cfg.embedding_scale * emb / emb.norm(dim=1, keepdim=True)
        if cfg.embedding_source == EmbeddingSource.ONE_HOT_PROJECTED:
            if cfg.embed_dim != c:
                raise ConfigError("one-hot embeddings require embed_dim == n_categories")
            return torch.eye(c)
        if cfg.embedding_source == EmbeddingSource.FILE:
            if not cfg.embedding_file:
                raise ConfigError("embedding_source=file needs embedding_file")
            path = Path(cfg.embedding_file)
            if path.suffix == ".npy":
                arr = np.load(path)
            else:
                arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
            if arr.shape != (c, cfg.embed_dim):
                raise ConfigError(
                    f"embedding file shape {arr.shape} != ({c}, {cfg.embed_dim})"
                )
            return torch.as_tensor(arr, dtype=torch.float32)
        raise ConfigError(f"unknown embedding source {cfg.embedding_source}")  # pragma: no cover

    # -- graph side ---------------------------------------------------------

    def set_adjacency(self, normalized: np.ndarray) -> None:
        c = self.config.n_categories
        if normalized.shape != (c, c):
            raise DataError(f"adjacency must be {c}x{c}")
        self.adjacency = torch.as_tensor(
            normalized, dtype=self.adjacency.dtype, device=self.adjacency.device
        )

    def gcn_forward(self) -> torch.Tensor:
        return gcn_propagate(
            self.embeddings,
            self.adjacency,
            list(self.gcn_weights),
            self.config.gcn.leaky_slope,
        )

    # -- full forward -------------------------------------------------------

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return per-category logits and standard-sigmoid probabilities."""
        fused = self.head(self.backbone(x))
        node_repr = self.gcn_forward()
        logits = fused @ node_repr.T
        if not torch.isfinite(logits).all():
            raise TrainingAbort(
                f"non-finite logits (input range [{x.min():.3g}, {x.max():.3g}])"
            )
        return logits, torch.sigmoid(logits)


def mll_forward(model: AtamModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Side-effect-free forward pass (logits, probabilities)."""
    return model(x)


def predict_probs(model: AtamModel, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Probabilities for a feature matrix, batched, without touching gradients."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, features.shape[0], batch_size):
            x = torch.as_tensor(features[start : start + batch_size], dtype=torch.float32)
            _, p = model(x)
            out.append(p.numpy())
    model.train(was_training)
    return np.concatenate(out, axis=0)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: AtamModel, path: str | Path, extra: dict | None = None) -> None:
    """Deterministic container: magic, JSON index, raw little-endian tensors."""
    tensors = []
    payloads = []
    for name, tensor in sorted(model.state_dict().items()):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes(order="C"))
    header = {
        "config": model.config.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write((CKPT_MAGIC + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[AtamModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != CKPT_MAGIC:
            raise DataError(f"not a checkpoint file (magic {magic!r})")
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    config = ModelConfig.from_dict(header["config"])
    model = AtamModel(config)
    state = {}
    offset = 0
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        blob = raw[offset : offset + 4 * count]
        if len(blob) != 4 * count:
            raise DataError(f"checkpoint truncated at tensor {spec['name']}")
        offset += 4 * count
        state[spec["name"]] = torch.as_tensor(
            np.frombuffer(blob, dtype="<f4").reshape(spec["shape"]).copy()
        )
    expected = {k for k in model.state_dict()}
    if set(state) != expected:
        raise DataError("checkpoint/config mismatch: tensor set differs")
    model.load_state_dict(state)
    return model, header["extra"]
