"""Two-tower (or shared-trunk) transformer encoders with a contrastive head.

Pre-LN blocks throughout: x <- x + Attn(LN(x)); x <- x + FFN(LN(x)), where
the FFN sublayer is either a dense MLP or a routed expert mix, following the
alternating [dense, sparse] placement. Image pooling takes the class token,
text pooling the last non-padding position; both project into a joint space
and L2-normalize.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import moe as moe_mod
from .moe import ExpertParams, MoESpec, RouterParams, moe_layer_indices
from .tensor import (
    Tensor,
    ShapeError,
    concat,
    gather_rows,
    layer_norm,
    logsumexp,
    matmul,
    narrow,
    softmax,
    take_flat,
)

LN_EPS = 1e-5


class NumericError(RuntimeError):
    """Non-finite values appeared where the contract requires finite ones."""


@dataclass
class TowerSpec:
    num_layers: int
    model_dim: int
    num_heads: int
    mlp_hidden_dim: int
    max_tokens: int

    def validate(self):
        for name in ("num_layers", "model_dim", "num_heads", "mlp_hidden_dim", "max_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"TowerSpec.{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )


@dataclass
class ModelSpec:
    backbone_mode: str  # "separated" | "shared"
    image_tower: TowerSpec
    text_tower: TowerSpec
    patch_size: int
    image_size: int
    vocab_size: int
    embed_dim: int
    moe: MoESpec = None
    moe_modality: str = "both"  # "image" | "text" | "both"
    temperature_init: float = 0.5

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def image_tokens(self) -> int:
        return self.num_patches + 1

    def tower(self, modality: str) -> TowerSpec:
        """Transformer stack serving ``modality`` (the trunk when shared)."""
        if self.backbone_mode == "shared" or modality == "image":
            return self.image_tower
        return self.text_tower

    def block_prefix(self, modality: str) -> str:
        if self.backbone_mode == "shared":
            return "trunk"
        return "img" if modality == "image" else "txt"

    def moe_layers(self, modality: str) -> list:
        """Sparse layer indices seen by ``modality``; empty when not routed."""
        if self.moe is None:
            return []
        if self.moe_modality != "both" and self.moe_modality != modality:
            return []
        return moe_layer_indices(self.tower(modality).num_layers)

    def validate(self):
        if self.backbone_mode not in ("separated", "shared"):
            raise ValueError(f"unknown backbone_mode {self.backbone_mode!r}")
        if self.moe_modality not in ("image", "text", "both"):
            raise ValueError(f"unknown moe_modality {self.moe_modality!r}")
        self.image_tower.validate()
        self.text_tower.validate()
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.image_tower.max_tokens != self.image_tokens:
            raise ValueError(
                f"image tower max_tokens {self.image_tower.max_tokens} must equal "
                f"patch count + class token = {self.image_tokens}"
            )
        if self.backbone_mode == "shared":
            if self.image_tower.model_dim != self.text_tower.model_dim:
                raise ValueError("shared mode requires equal image/text model dims")
            if self.moe is not None and self.moe_modality != "both":
                raise ValueError(
                    "a shared trunk routes both modalities; moe_modality must be 'both'"
                )
        if self.vocab_size < 1 or self.embed_dim < 1:
            raise ValueError("vocab_size and embed_dim must be positive")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be > 0")
        if self.moe is not None:
            self.moe.validate()


@dataclass
class Batch:
    images: np.ndarray  # [B, 3, H, W] float32
    token_ids: np.ndarray  # [B, L] int
    pad_mask: np.ndarray  # [B, L] bool, True at padding positions

    @property
    def batch_size(self) -> int:
        return self.images.shape[0]


# -- parameter layout ---------------------------------------------------------

def _ffn_shapes(prefix: str, tower: TowerSpec, layer: int, sparse: bool, moe: MoESpec):
    d, h = tower.model_dim, tower.mlp_hidden_dim
    base = f"{prefix}.block{layer}"
    if not sparse:
        yield f"{base}.mlp.fc.w", (d, h)
        yield f"{base}.mlp.fc.b", (h,)
        yield f"{base}.mlp.proj.w", (h, d)
        yield f"{base}.mlp.proj.b", (d,)
        return
    yield f"{base}.moe.router.w", (d, moe.num_experts)
    for e in range(moe.num_experts):
        yield f"{base}.moe.expert{e}.fc.w", (d, h)
        yield f"{base}.moe.expert{e}.fc.b", (h,)
        yield f"{base}.moe.expert{e}.proj.w", (h, d)
        yield f"{base}.moe.expert{e}.proj.b", (d,)


def _stack_shapes(prefix: str, tower: TowerSpec, sparse_layers, moe: MoESpec):
    d = tower.model_dim
    for i in range(tower.num_layers):
        base = f"{prefix}.block{i}"
        yield f"{base}.ln1.g", (d,)
        yield f"{base}.ln1.b", (d,)
        yield f"{base}.attn.qkv.w", (d, 3 * d)
        yield f"{base}.attn.qkv.b", (3 * d,)
        yield f"{base}.attn.out.w", (d, d)
        yield f"{base}.attn.out.b", (d,)
        yield f"{base}.ln2.g", (d,)
        yield f"{base}.ln2.b", (d,)
        yield from _ffn_shapes(prefix, tower, i, i in sparse_layers, moe)
    yield f"{prefix}.ln_f.g", (d,)
    yield f"{prefix}.ln_f.b", (d,)


def param_shapes(spec: ModelSpec) -> dict:
    """Ordered name -> shape map; the single source of truth for parameters."""
    shapes = {}
    img, txt = spec.image_tower, spec.text_tower
    patch_in = 3 * spec.patch_size ** 2
    shapes["img.patch.w"] = (patch_in, img.model_dim)
    shapes["img.patch.b"] = (img.model_dim,)
    shapes["img.cls"] = (1, 1, img.model_dim)
    shapes["img.pos"] = (spec.image_tokens, img.model_dim)
    text_dim = spec.tower("text").model_dim
    shapes["txt.tok"] = (spec.vocab_size, text_dim)
    shapes["txt.pos"] = (txt.max_tokens, text_dim)
    if spec.backbone_mode == "shared":
        stacks = [("trunk", img, set(spec.moe_layers("image")))]
    else:
        stacks = [
            ("img", img, set(spec.moe_layers("image"))),
            ("txt", txt, set(spec.moe_layers("text"))),
        ]
    for prefix, tower, sparse in stacks:
        shapes.update(_stack_shapes(prefix, tower, sparse, spec.moe))
    shapes["img.head.w"] = (img.model_dim, spec.embed_dim)
    shapes["txt.head.w"] = (text_dim, spec.embed_dim)
    shapes["logit_scale"] = (1,)
    return shapes


def count_params(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def init_params(spec: ModelSpec, seed: int) -> dict:
    """Seeded parameter initialization, drawn in param_shapes order."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name == "logit_scale":
            arr = np.full(shape, np.log(1.0 / spec.temperature_init), dtype=np.float32)
        elif name.endswith((".b", ".bias")):
            arr = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".g"):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith(("cls", "pos", "tok")) or name.endswith("router.w"):
            arr = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        else:
            std = 1.0 / np.sqrt(shape[0])
            arr = rng.normal(0.0, std, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def moe_params_for_layer(params: dict, prefix: str, layer: int, num_experts: int):
    base = f"{prefix}.block{layer}.moe"
    router = RouterParams(weights=params[f"{base}.router.w"])
    experts = ExpertParams(
        in_proj=[params[f"{base}.expert{e}.fc.w"] for e in range(num_experts)],
        in_bias=[params[f"{base}.expert{e}.fc.b"] for e in range(num_experts)],
        out_proj=[params[f"{base}.expert{e}.proj.w"] for e in range(num_experts)],
        out_bias=[params[f"{base}.expert{e}.proj.b"] for e in range(num_experts)],
    )
    return router, experts


# -- forward pass -------------------------------------------------------------

def patchify_embed(images: np.ndarray, params: dict, spec: ModelSpec) -> Tensor:
    """Non-overlapping patches -> linear projection, class token, positions."""
    b, c, h, w = images.shape
    ps = spec.patch_size
    if c != 3 or h != spec.image_size or w != spec.image_size:
        raise ShapeError(
            f"images {images.shape} do not match spec "
            f"(3, {spec.image_size}, {spec.image_size})"
        )
    grid = h // ps
    patches = (
        images.reshape(b, c, grid, ps, grid, ps)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, grid * grid, c * ps * ps)
        .astype(np.float32)
    )
    x = matmul(Tensor(patches), params["img.patch.w"]) + params["img.patch.b"]
    cls = params["img.cls"] + Tensor(
        np.zeros((b, 1, x.shape[2]), dtype=x.data.dtype)
    )
    x = concat([cls, x], axis=1)
    return x + params["img.pos"]


def _attention(x: Tensor, params: dict, prefix: str, num_heads: int, mask: Tensor):
    b, t, d = x.shape
    dh = d // num_heads
    qkv = matmul(x, params[f"{prefix}.qkv.w"]) + params[f"{prefix}.qkv.b"]
    q = narrow(qkv, 2, 0, d).reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3)
    k = narrow(qkv, 2, d, d).reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3)
    v = narrow(qkv, 2, 2 * d, d).reshape(b, t, num_heads, dh).transpose(0, 2, 1, 3)
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return matmul(out, params[f"{prefix}.out.w"]) + params[f"{prefix}.out.b"]


def encode(
    batch: Batch,
    params: dict,
    spec: ModelSpec,
    modality: str,
    *,
    moe_capacity_override: int = None,
    logit_jitter_rng: np.random.Generator = None,
    logit_jitter_std: float = 0.0,
):
    """Embed one modality of a batch.

    Returns (embeddings [B, embed_dim] with unit rows, list of RoutingOutcome
    for every routed layer the pass traversed; empty without expert layers).
    """
    if batch.batch_size < 1:
        raise ValueError("encode needs a non-empty batch")
    tower = spec.tower(modality)
    prefix = spec.block_prefix(modality)
    sparse_layers = set(spec.moe_layers(modality))
    outcomes = []

    if modality == "image":
        x = patchify_embed(batch.images, params, spec)
        mask = None
    else:
        ids = np.asarray(batch.token_ids, dtype=np.int64)
        if ids.max(initial=0) >= spec.vocab_size:
            raise ValueError(f"token id {ids.max()} out of vocabulary {spec.vocab_size}")
        b, seq = ids.shape
        x = gather_rows(params["txt.tok"], ids.ravel()).reshape(b, seq, -1)
        x = x + params["txt.pos"]
        neg = np.where(batch.pad_mask, np.float32(-1e9), np.float32(0.0))
        mask = Tensor(neg[:, None, None, :])

    b, t, d = x.shape
    for i in range(tower.num_layers):
        base = f"{prefix}.block{i}"
        h = layer_norm(x, params[f"{base}.ln1.g"], params[f"{base}.ln1.b"], LN_EPS)
        x = x + _attention(h, params, f"{base}.attn", tower.num_heads, mask)
        h = layer_norm(x, params[f"{base}.ln2.g"], params[f"{base}.ln2.b"], LN_EPS)
        if i in sparse_layers:
            flat = h.reshape(b * t, d)
            router, experts = moe_params_for_layer(params, prefix, i, spec.moe.num_experts)
            jitter = None
            if logit_jitter_rng is not None:
                jitter = logit_jitter_std * logit_jitter_rng.standard_normal(
                    (b * t, spec.moe.num_experts)
                )
            outcome = moe_mod.route_tokens(
                flat,
                router,
                spec.moe,
                modality=modality,
                layer_id=i,
                capacity_override=moe_capacity_override,
                logit_jitter=jitter,
            )
            mix = moe_mod.moe_mix(
                flat, experts, outcome, spec.moe.normalize_gates_after_routing
            )
            x = x + mix.reshape(b, t, d)
            outcomes.append(outcome)
        else:
            ff = (matmul(h, params[f"{base}.mlp.fc.w"]) + params[f"{base}.mlp.fc.b"]).gelu()
            x = x + matmul(ff, params[f"{base}.mlp.proj.w"]) + params[f"{base}.mlp.proj.b"]
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations in {modality} block {i}")

    x = layer_norm(x, params[f"{prefix}.ln_f.g"], params[f"{prefix}.ln_f.b"], LN_EPS)
    if modality == "image":
        pooled = narrow(x, 1, 0, 1).reshape(b, d)
        head = params["img.head.w"]
    else:
        lengths = (~batch.pad_mask).sum(axis=1)
        last = np.maximum(lengths - 1, 0)
        pooled = gather_rows(x.reshape(b * t, d), np.arange(b) * t + last)
        head = params["txt.head.w"]
    emb = matmul(pooled, head)
    sq = (emb * emb).sum(axis=1, keepdims=True)
    emb = emb * ((sq + 1e-12) ** -0.5)
    if not np.isfinite(emb.data).all():
        raise NumericError(f"non-finite embeddings from {modality} head")
    return emb, outcomes


def contrastive_loss(img_emb: Tensor, txt_emb: Tensor, temperature) -> Tensor:
    """Symmetric InfoNCE over the in-batch similarity matrix.

    ``temperature`` divides the dot-product similarities; pass a Tensor to
    learn it. Averages the image->text and text->image cross-entropies with
    coefficient 1/(2B).
    """
    b = img_emb.shape[0]
    if b < 1:
        raise ValueError("contrastive loss needs a non-empty batch")
    if img_emb.shape != txt_emb.shape:
        raise ShapeError(
            f"embedding shapes differ: {img_emb.shape} vs {txt_emb.shape}"
        )
    sims = matmul(img_emb, txt_emb.transpose(1, 0))
    if isinstance(temperature, Tensor):
        logits = sims * (temperature ** -1.0)
    else:
        logits = sims * (1.0 / float(temperature))
    lse_i2t = logsumexp(logits, axis=1)
    lse_t2i = logsumexp(logits, axis=0)
    diag = take_flat(logits, np.arange(b) * (b + 1))
    return (lse_i2t.sum() + lse_t2i.sum() - 2.0 * diag.sum()) * (1.0 / (2 * b))
