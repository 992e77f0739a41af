import hashlib

import numpy as np
import pytest

from mucp.checkpoint import Checkpoint, checkpoint_from_tensors, load_checkpoint, save_checkpoint
from mucp.model import encode, init_params, param_shapes
from mucp.moe import MoESpec
from mucp.upcycle import SurgeryError, select_moe_layers, upcycle_checkpoint, verify_equivalence

from conftest import make_batch, micro_spec, tiny_spec, tower


def dense_checkpoint(spec, seed=0):
    return checkpoint_from_tensors(init_params(spec, seed), spec, step=0, seed=seed)


# -- layer selection ----------------------------------------------------------

def test_select_layers_alternating_12():
    spec = tiny_spec()
    spec.image_tower.num_layers = 12
    assert select_moe_layers(spec)["image"] == [1, 3, 5, 7, 9, 11]


def test_select_layers_tiny_and_single():
    spec = tiny_spec()
    assert select_moe_layers(spec) == {"image": [1], "text": [1]}
    spec.text_tower.num_layers = 1
    assert select_moe_layers(spec)["text"] == []


def test_select_layers_respects_modality():
    spec = tiny_spec(moe_modality="text")
    assert select_moe_layers(spec) == {"image": [], "text": [1]}


# -- surgery ------------------------------------------------------------------

def test_experts_are_byte_identical_copies():
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=1)
    src = dense.params["img.block1.mlp.fc.w"]
    for e in (0, 7):
        clone = sparse.params[f"img.block1.moe.expert{e}.fc.w"]
        assert clone.tobytes() == src.tobytes()
    assert (
        sparse.params["img.block1.moe.expert0.proj.b"].tobytes()
        == dense.params["img.block1.mlp.proj.b"].tobytes()
    )


def test_parameter_count_identity_tiny_config():
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    sparse, report = upcycle_checkpoint(dense, MoESpec(num_experts=8), rng_seed=0)
    mlp = 64 * 256 + 256 + 256 * 64 + 64
    assert mlp == 33088
    per_layer_growth = 7 * mlp + 64 * 8
    assert per_layer_growth == 232128
    # one converted layer per tower in the tiny config
    assert report.total_params_sparse == report.total_params_dense + 2 * per_layer_growth
    assert report.copied_params + report.fresh_params == report.total_params_sparse
    assert report.converted_layers == [("img", 1), ("txt", 1)]


def test_modality_text_leaves_image_tower_byte_identical():
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=0, moe_modality="text")
    img_names = [n for n in dense.params if n.startswith("img.")]
    assert img_names == [n for n in sparse.params if n.startswith("img.")]
    for n in img_names:
        assert sparse.params[n].tobytes() == dense.params[n].tobytes()


def test_untouched_params_hash_identical():
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=3)
    untouched = [n for n in dense.params if n in sparse.params]
    for n in untouched:
        assert (
            hashlib.sha256(sparse.params[n].tobytes()).hexdigest()
            == hashlib.sha256(dense.params[n].tobytes()).hexdigest()
        )


def test_router_init_reproducible():
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    a, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=9)
    b, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=9)
    assert (
        a.params["img.block1.moe.router.w"].tobytes()
        == b.params["img.block1.moe.router.w"].tobytes()
    )
    c, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=10)
    assert (
        a.params["img.block1.moe.router.w"].tobytes()
        != c.params["img.block1.moe.router.w"].tobytes()
    )


def test_surgery_rejects_sparse_source_and_missing_params():
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=0)
    with pytest.raises(SurgeryError, match="already"):
        upcycle_checkpoint(sparse, MoESpec(), rng_seed=0)
    broken = Checkpoint(
        params={k: v for k, v in dense.params.items() if k != "img.patch.w"},
        spec=spec,
    )
    with pytest.raises(SurgeryError, match="img.patch.w"):
        upcycle_checkpoint(broken, MoESpec(), rng_seed=0)


def test_surgery_idempotent_through_file_roundtrip(tmp_path):
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=5)
    path = tmp_path / "sparse.mucp"
    save_checkpoint(sparse, path)
    loaded = load_checkpoint(path)
    assert list(loaded.params) == list(param_shapes(sparse.spec))
    assert list(loaded.params) == list(sparse.params)
    for n in sparse.params:
        assert loaded.params[n].tobytes() == sparse.params[n].tobytes()


# -- forward equivalence --------------------------------------------------------

def test_fresh_upcycle_reproduces_dense_embeddings():
    spec = tiny_spec()
    dense = dense_checkpoint(spec, seed=4)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=4)
    batch = make_batch(spec, 6, seed=4)
    assert verify_equivalence(dense, sparse, batch) < 1e-5


def test_equivalence_breaks_after_weights_move():
    spec = tiny_spec()
    dense = dense_checkpoint(spec, seed=5)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=5)
    sparse.params["img.block1.moe.expert3.fc.w"] += 0.01
    batch = make_batch(spec, 4, seed=5)
    assert verify_equivalence(dense, sparse, batch) > 0.0


def test_without_normalization_deviation_is_visible():
    spec = tiny_spec()
    dense = dense_checkpoint(spec, seed=6)
    sparse, _ = upcycle_checkpoint(dense, MoESpec(), rng_seed=6)
    batch = make_batch(spec, 4, seed=6)
    dense_params = dense.as_tensors()
    sparse_params = sparse.as_tensors()
    worst = 0.0
    for modality in ("image", "text"):
        ref, _ = encode(batch, dense_params, dense.spec, modality)
        got, _ = encode(
            batch, sparse_params, sparse.spec, modality, moe_capacity_override=10**9
        )
        worst = max(worst, float(np.max(np.abs(ref.data - got.data))))
    # top-2 gates of an 8-way softmax sum to well under 1
    assert worst > 1e-3


def test_verify_requires_sparse_model():
    spec = tiny_spec()
    dense = dense_checkpoint(spec)
    with pytest.raises(SurgeryError):
        verify_equivalence(dense, dense, make_batch(spec, 2))


def test_shared_trunk_upcycle():
    spec = tiny_spec(backbone="shared")
    dense = dense_checkpoint(spec, seed=7)
    sparse, report = upcycle_checkpoint(dense, MoESpec(), rng_seed=7)
    assert report.converted_layers == [("trunk", 1)]
    assert "trunk.block1.moe.router.w" in sparse.params
    batch = make_batch(spec, 4, seed=7)
    assert verify_equivalence(dense, sparse, batch) < 1e-5
