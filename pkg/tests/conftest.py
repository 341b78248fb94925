import numpy as np
import pytest

from atam.model import FrlmConfig, GcnConfig, ModelConfig
from atam.synth import SynthConfig, generate


def small_model_config(seed=0, c=5, input_dim=8):
    return ModelConfig(
        n_categories=c,
        frlm=FrlmConfig(input_dim=input_dim, feature_dim=16, head_hidden=12, fusion_dim=8),
        gcn=GcnConfig(embed_dim=8, layer_dims=(12, 8)),
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SynthConfig(
        n_train=48,
        n_val=12,
        n_test=24,
        n_categories=5,
        feature_dim=8,
        cooc_strength=0.8,
        separability=2.0,
        seed=101,
    )
    return generate(cfg)
