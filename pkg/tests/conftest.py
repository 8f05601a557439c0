import numpy as np
import pytest

from replay_prompt import backbone as bb
from replay_prompt.data import SyntheticTaskSpec, generate_synthetic


def tiny_backbone_config(**kw):
    base = dict(n_modalities=2, d_model=8, n_layers=3, n_heads=2, seq_len=4, n_classes=4,
                feature_widths=(6, 6), ff_width=16)
    base.update(kw)
    return bb.BackboneConfig(**base)


def tiny_task(**kw):
    base = dict(n_modalities=2, n_classes=4, feature_width=6, shared_dims=2, private_dims=2,
                noise_dims=2, seq_len=4, noise_std=0.3, n_train=96, n_val=48, n_test=48,
                n_pretrain=96, seed=0)
    base.update(kw)
    return SyntheticTaskSpec(**base)


@pytest.fixture
def tiny_weights():
    w = bb.BackboneWeights.init(tiny_backbone_config(), np.random.default_rng(0))
    w.frozen = True
    return w


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_synthetic(tiny_task(), np.random.default_rng(1))
