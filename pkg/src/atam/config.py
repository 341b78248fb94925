"""Flat key=value config files (INI sections per module) with CLI overrides.

Every key is registered in CONFIG_SCHEMA with its type, default, and help
line; `describe_config()` renders that table for --help. Overrides use
"section.key=value". Unknown sections or keys are config errors (exit 2).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .annotators import AnnotatorKind, AnnotatorProfile
from .errors import ConfigError
from .losses import LossConfig
from .model import BackboneKind, EmbeddingSource, FrlmConfig, GcnConfig, ModelConfig
from .sampler import SamplerConfig, SamplerMode
from .synth import SynthConfig
from .temperature import UlpConfig
from .trainer import TrainConfig
from .utils import canonical_json, sha256_text

# section -> key -> (type tag, default, help)
CONFIG_SCHEMA: dict[str, dict[str, tuple[str, object, str]]] = {
    "synth": {
        "n_train": ("int", 2000, "training samples to generate"),
        "n_val": ("int", 300, "validation samples"),
        "n_test": ("int", 600, "test samples"),
        "categories": ("int", 10, "number of label categories"),
        "feature_dim": ("int", 32, "feature vector length"),
        "cooc_strength": ("float", 0.85, "pair coupling strength in [0,1]"),
        "separability": ("float", 1.6, "prototype norm vs unit feature noise"),
        "pair_contrast": ("float", 0.45, "prototype contrast within a category pair"),
        "feature_noise": ("float", 1.0, "per-dimension Gaussian feature noise"),
        "label_noise": ("float", 0.0, "probability of flipping an emitted label"),
        "seed": ("int", 7, "generator seed (fixes the dataset bytes)"),
    },
    "sampler": {
        "confidence_threshold": ("float", 0.8, "confidence S above which a label is queried"),
        "batch_samples": ("int", 50, "fresh samples examined per querying round"),
        "seed_samples": ("int", 50, "samples annotated in the seed round"),
        "mode": ("str", "salient_active", "salient_active or random"),
        "finetune_epochs": ("int", 3, "fine-tune epochs between querying rounds"),
        "finetune_lr": ("float", 0.01, "fine-tune learning rate"),
        "finetune_batch": ("int", 32, "fine-tune batch size"),
        "adjacency_rebuild_frac": ("float", 0.05, "known-label growth that triggers a graph rebuild"),
    },
    "annotator": {
        "kind": ("str", "oracle", "oracle, noisy, or human"),
        "flip_rate": ("float", 0.0, "probability a noisy answer is inverted"),
        "skip_rate": ("float", 0.0, "probability a noisy annotator declines"),
        "salient_negatives": ("int", 2, "negatives volunteered per seed sample"),
    },
    "model": {
        "backbone": ("str", "mlp_on_features", "mlp_on_features, external, or small_conv"),
        "feature_dim": ("int", 128, "backbone output width"),
        "head_hidden": ("int", 96, "hidden width of the two-layer head"),
        "fusion_dim": ("int", 64, "fusion vector width (must match graph output)"),
        "init_gain": ("float", 1.5, "multiplier on Kaiming init bounds"),
        "embed_dim": ("int", 32, "category embedding width"),
        "gcn_dims": ("str", "64,64", "comma-separated graph layer widths"),
        "leaky_slope": ("float", 0.2, "LeakyReLU negative slope in the graph branch"),
        "embedding_source": ("str", "seeded_random", "seeded_random, one_hot_projected, or file"),
        "embedding_file": ("str", "", "category vector file (embedding_source=file)"),
        "embedding_scale": ("float", 3.0, "row norm of seeded-random embeddings"),
    },
    "ulp": {
        "beta": ("float", 0.8, "pseudo-label probability threshold"),
        "temp_scale": ("float", 10.0, "multiplier on the co-occurrence edge spread"),
        "warmup_epochs": ("int", 10, "epochs before the first pseudo labels"),
        "cap_epochs": ("int", 50, "epoch at which remaining unknowns turn negative"),
        "t_min": ("float", 0.5, "temperature clamp floor"),
        "t_max": ("float", 20.0, "temperature clamp ceiling"),
    },
    "loss": {
        "focal_alpha": ("float", 0.25, "focal weight on the positive term"),
        "gamma": ("float", 2.0, "focal exponent"),
        "epsilon": ("float", 0.5, "pseudo-loss weight in the mixed objective"),
    },
    "train": {
        "lr": ("float", 0.01, "initial learning rate"),
        "momentum": ("float", 0.9, "SGD momentum"),
        "weight_decay": ("float", 1e-4, "SGD weight decay"),
        "lr_decay_every": ("int", 50, "epochs between 10x learning-rate decays"),
        "lr_decay_factor": ("float", 10.0, "learning-rate decay factor"),
        "batch_size": ("int", 12, "training batch size"),
        "max_epochs": ("int", 110, "epoch budget"),
        "plateau_tol": ("float", 1e-4, "relative loss improvement treated as converged"),
        "plateau_window": ("int", 10, "epochs over which the plateau is measured"),
        "ulp_enabled": ("bool", True, "enable pseudo-labeling phases"),
    },
    "experiment": {
        "seeds": ("str", "0,1,2", "comma-separated run seeds"),
        "budget_fraction": ("float", 0.4, "annotation budget as a fraction of all labels"),
        "budget_fractions": ("str", "0.4,0.5,0.6,0.7,0.8", "sweep fractions"),
        "keep_fraction": ("float", 0.4, "kept-cell fraction for the noise study"),
    },
}


@dataclass
class WorkbenchConfig:
    synth: SynthConfig
    sampler: SamplerConfig
    annotator: AnnotatorProfile
    ulp: UlpConfig
    loss: LossConfig
    train: TrainConfig
    model_raw: dict = field(default_factory=dict)
    experiment_raw: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.raw))

    def seeds(self) -> list[int]:
        return _int_list(self.experiment_raw["seeds"])

    def budget_fractions(self) -> list[float]:
        return _float_list(self.experiment_raw["budget_fractions"])

    def model_config(self, n_categories: int, input_dim: int, seed: int = 0) -> ModelConfig:
        m = self.model_raw
        try:
            backbone = BackboneKind(m["backbone"])
            source = EmbeddingSource(m["embedding_source"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        gcn_dims = tuple(_int_list(m["gcn_dims"]))
        cfg = ModelConfig(
            n_categories=n_categories,
            frlm=FrlmConfig(
                backbone=backbone,
                input_dim=input_dim,
                feature_dim=m["feature_dim"],
                head_hidden=m["head_hidden"],
                fusion_dim=m["fusion_dim"],
                init_gain=m["init_gain"],
            ),
            gcn=GcnConfig(
                embed_dim=m["embed_dim"],
                layer_dims=gcn_dims,
                leaky_slope=m["leaky_slope"],
                embedding_source=source,
                embedding_file=m["embedding_file"] or None,
                embedding_scale=m["embedding_scale"],
            ),
            seed=seed,
        )
        cfg.validate()
        return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).split(",") if str(part).strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in str(text).split(",") if str(part).strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated floats, got {text!r}") from None


def _coerce(section: str, key: str, raw: str):
    kind, default, _ = CONFIG_SCHEMA[section][key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = str(raw).strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None


def load_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> WorkbenchConfig:
    values: dict[str, dict[str, object]] = {
        section: {key: spec[1] for key, spec in keys.items()}
        for section, keys in CONFIG_SCHEMA.items()
    }
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in CONFIG_SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[section][key] = _coerce(section, key, raw)
    for override in overrides or []:
        if "=" not in override or "." not in override.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {override!r}")
        target, raw = override.split("=", 1)
        section, key = target.split(".", 1)
        if section not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(section, key, raw)
    return _build(values)


def _build(values: dict[str, dict[str, object]]) -> WorkbenchConfig:
    s = values["synth"]
    synth = SynthConfig(
        n_train=s["n_train"],
        n_val=s["n_val"],
        n_test=s["n_test"],
        n_categories=s["categories"],
        feature_dim=s["feature_dim"],
        cooc_strength=s["cooc_strength"],
        separability=s["separability"],
        pair_contrast=s["pair_contrast"],
        feature_noise=s["feature_noise"],
        label_noise=s["label_noise"],
        seed=s["seed"],
    )
    sa = values["sampler"]
    try:
        mode = SamplerMode(sa["mode"])
    except ValueError:
        raise ConfigError(f"unknown sampler mode {sa['mode']!r}") from None
    sampler = SamplerConfig(
        confidence_threshold=sa["confidence_threshold"],
        batch_samples=sa["batch_samples"],
        seed_samples=sa["seed_samples"],
        mode=mode,
        finetune_epochs=sa["finetune_epochs"],
        finetune_lr=sa["finetune_lr"],
        finetune_batch=sa["finetune_batch"],
        adjacency_rebuild_frac=sa["adjacency_rebuild_frac"],
    )
    an = values["annotator"]
    try:
        kind = AnnotatorKind(an["kind"])
    except ValueError:
        raise ConfigError(f"unknown annotator kind {an['kind']!r}") from None
    annotator = AnnotatorProfile(
        kind=kind,
        flip_rate=an["flip_rate"],
        skip_rate=an["skip_rate"],
        salient_negatives=an["salient_negatives"],
    )
    u = values["ulp"]
    ulp = UlpConfig(
        beta=u["beta"],
        temp_scale=u["temp_scale"],
        warmup_epochs=u["warmup_epochs"],
        cap_epochs=u["cap_epochs"],
        t_min=u["t_min"],
        t_max=u["t_max"],
    )
    lo = values["loss"]
    loss = LossConfig(focal_alpha=lo["focal_alpha"], gamma=lo["gamma"], epsilon=lo["epsilon"])
    t = values["train"]
    train = TrainConfig(
        lr=t["lr"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        lr_decay_every=t["lr_decay_every"],
        lr_decay_factor=t["lr_decay_factor"],
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        plateau_tol=t["plateau_tol"],
        plateau_window=t["plateau_window"],
        ulp_enabled=t["ulp_enabled"],
    )
    cfg = WorkbenchConfig(
        synth=synth,
        sampler=sampler,
        annotator=annotator,
        ulp=ulp,
        loss=loss,
        train=train,
        model_raw=dict(values["model"]),
        experiment_raw=dict(values["experiment"]),
        raw={sec: dict(keys) for sec, keys in values.items()},
    )
    try:
        synth.validate()
        sampler.validate()
        annotator.validate()
        ulp.validate()
        loss.validate()
        train.validate()
    except Exception as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def describe_config() -> str:
    lines = ["Config file keys (INI sections; override with -O section.key=value):", ""]
    for section, keys in CONFIG_SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (kind, default, help_text) in keys.items():
            lines.append(f"  {key} ({kind}, default {default!r}): {help_text}")
        lines.append("")
    return "\n".join(lines)
