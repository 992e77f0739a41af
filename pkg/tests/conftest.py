import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))

from mucp.model import Batch, ModelSpec, TowerSpec
from mucp.moe import MoESpec


def tower(layers=2, dim=64, heads=4, hidden=None, max_tokens=17):
    return TowerSpec(
        num_layers=layers,
        model_dim=dim,
        num_heads=heads,
        mlp_hidden_dim=hidden if hidden is not None else 4 * dim,
        max_tokens=max_tokens,
    )


def tiny_spec(moe=None, backbone="separated", moe_modality="both"):
    """The desk-scale default: 2 layers, dim 64, 32x32 images, 16 text tokens."""
    return ModelSpec(
        backbone_mode=backbone,
        image_tower=tower(2, 64, 4, 256, max_tokens=17),
        text_tower=tower(2, 64, 4, 256, max_tokens=16),
        patch_size=8,
        image_size=32,
        vocab_size=64,
        embed_dim=32,
        moe=moe,
        moe_modality=moe_modality,
        temperature_init=0.5,
    )


def micro_spec(moe=None, backbone="separated", moe_modality="both"):
    """Much smaller than tiny; for gradient checks and smoke tests."""
    return ModelSpec(
        backbone_mode=backbone,
        image_tower=tower(2, 16, 2, 32, max_tokens=5),
        text_tower=tower(2, 16, 2, 32, max_tokens=4),
        patch_size=8,
        image_size=16,
        vocab_size=16,
        embed_dim=8,
        moe=moe,
        moe_modality=moe_modality,
        temperature_init=0.5,
    )


def make_batch(spec, batch_size, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(batch_size, 3, spec.image_size, spec.image_size))
    length = spec.text_tower.max_tokens
    ids = rng.integers(1, spec.vocab_size, size=(batch_size, length))
    real = rng.integers(2, length + 1, size=batch_size)
    pad = np.arange(length)[None, :] >= real[:, None]
    ids[pad] = 0
    return Batch(
        images=images.astype(np.float32),
        token_ids=ids.astype(np.int64),
        pad_mask=pad,
    )
