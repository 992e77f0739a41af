"""Retrieval metrics, toy zero-shot classification, inference cost
estimation, and router analytics.

The FLOPs convention: one multiply-accumulate counts as 2 FLOPs; layer
norms, activations, and attention softmax count 5 FLOPs per element; patch
projection, pooling head, and router costs are included. Expert layers are
charged K full passes per token regardless of drops (capacity buffers are
allocated up front).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Batch, ModelSpec, TowerSpec, count_params, encode
from .moe import MoESpec, RoutingOutcome
from .tensor import Tensor

TRACE_CSV_HEADER = "modality,layer,expert,assign_count,drop_count,assign_ratio,mean_gate_prob"
COST_CSV_HEADER = "config,params,image_gflops,text_gflops,total_gflops"


def _as_array(emb) -> np.ndarray:
    return emb.data if isinstance(emb, Tensor) else np.asarray(emb)


# -- retrieval ----------------------------------------------------------------

def _true_match_ranks(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """0-based rank of candidate i for query i; ties go to the lower index."""
    sims = queries @ candidates.T
    n = sims.shape[0]
    true = np.diagonal(sims)
    greater = (sims > true[:, None]).sum(axis=1)
    earlier_tie = (
        (sims == true[:, None]) & (np.arange(n)[None, :] < np.arange(n)[:, None])
    ).sum(axis=1)
    return greater + earlier_tie


def recall_at_k(img_emb, txt_emb, k: int, direction: str) -> float:
    """Fraction of queries whose paired row ranks in the top-k by dot product.

    ``direction`` is "t2i" (text queries retrieve images) or "i2t".
    """
    img, txt = _as_array(img_emb), _as_array(txt_emb)
    n = img.shape[0]
    if n == 0:
        raise ValueError("recall needs a non-empty embedding set")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got {k}")
    if direction == "t2i":
        ranks = _true_match_ranks(txt, img)
    elif direction == "i2t":
        ranks = _true_match_ranks(img, txt)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return float((ranks < k).mean())


def zero_shot_classify(img_emb, class_text_emb, labels):
    """Top-1 / top-5 accuracy of nearest-class-caption classification.

    Top-5 is None with fewer than 5 classes.
    """
    img = _as_array(img_emb)
    classes = _as_array(class_text_emb)
    labels = np.asarray(labels)
    sims = img @ classes.T
    pred = sims.argmax(axis=1)  # argmax ties resolve to the lower index
    top1 = float((pred == labels).mean())
    if classes.shape[0] < 5:
        return top1, None
    true = sims[np.arange(len(labels)), labels]
    greater = (sims > true[:, None]).sum(axis=1)
    earlier_tie = (
        (sims == true[:, None]) & (np.arange(classes.shape[0])[None, :] < labels[:, None])
    ).sum(axis=1)
    top5 = float(((greater + earlier_tie) < 5).mean())
    return top1, top5


def embed_pairs(spec: ModelSpec, params: dict, batches):
    """Embed image/text pairs over an iterable of batches; returns two arrays."""
    imgs, txts = [], []
    for batch in batches:
        img, _ = encode(batch, params, spec, "image")
        txt, _ = encode(batch, params, spec, "text")
        imgs.append(img.data)
        txts.append(txt.data)
    return np.concatenate(imgs, axis=0), np.concatenate(txts, axis=0)


# -- inference cost -----------------------------------------------------------

@dataclass
class CostReport:
    config: str
    params: int
    image_gflops: float
    text_gflops: float
    total_gflops: float

    def csv_row(self) -> str:
        return (
            f"{self.config},{self.params},{self.image_gflops:.4f},"
            f"{self.text_gflops:.4f},{self.total_gflops:.4f}"
        )


def _tower_flops(tower: TowerSpec, tokens: int, sparse_layers, moe: MoESpec, stem_macs: int) -> float:
    d, h = tower.model_dim, tower.mlp_hidden_dim
    macs = stem_macs
    elems = 0
    for layer in range(tower.num_layers):
        macs += 4 * tokens * d * d + 2 * tokens * tokens * d  # qkvo + scores/values
        elems += 2 * tokens * d  # two layer norms
        elems += tower.num_heads * tokens * tokens  # attention softmax
        if layer in sparse_layers:
            macs += moe.top_k * 2 * tokens * d * h  # K expert passes per token
            macs += tokens * d * moe.num_experts  # router
            elems += moe.top_k * tokens * h  # activations in each pass
        else:
            macs += 2 * tokens * d * h
            elems += tokens * h
    elems += tokens * d  # final layer norm
    return 2.0 * macs + 5.0 * elems


def flops_estimate(spec: ModelSpec, config_name: str = "custom") -> CostReport:
    """Inference cost of one image-text pair, in GFLOPs per tower."""
    img_tokens = spec.image_tokens
    txt_tokens = spec.text_tower.max_tokens
    img_tower = spec.tower("image")
    txt_tower = spec.tower("text")
    patch_macs = spec.num_patches * (3 * spec.patch_size**2) * img_tower.model_dim
    image = _tower_flops(
        img_tower, img_tokens, set(spec.moe_layers("image")), spec.moe, patch_macs
    )
    image += 2 * img_tower.model_dim * spec.embed_dim  # pooled projection
    text = _tower_flops(
        txt_tower, txt_tokens, set(spec.moe_layers("text")), spec.moe, 0
    )
    text += 2 * txt_tower.model_dim * spec.embed_dim
    return CostReport(
        config=config_name,
        params=count_params(spec),
        image_gflops=image / 1e9,
        text_gflops=text / 1e9,
        total_gflops=(image + text) / 1e9,
    )


# Canonical dual-encoder variants (image tower / text tower / joint dim).
_STANDARD = {
    "b32": dict(
        img=(12, 768, 12, 3072), patch=32, txt=(12, 512, 8, 2048), embed=512
    ),
    "b16": dict(
        img=(12, 768, 12, 3072), patch=16, txt=(12, 512, 8, 2048), embed=512
    ),
    "l14": dict(
        img=(24, 1024, 16, 4096), patch=14, txt=(12, 768, 12, 3072), embed=768
    ),
}
STANDARD_IMAGE_SIZE = 224
STANDARD_TEXT_TOKENS = 77
STANDARD_VOCAB = 49408


def standard_config_names():
    return [f"{base}-{kind}" for base in _STANDARD for kind in ("dense", "moe")]


def standard_model_spec(name: str) -> ModelSpec:
    """Named cost-table configs: 'b32-dense', 'b16-moe', 'l14-dense', ..."""
    try:
        base, kind = name.split("-")
        cfg = _STANDARD[base]
    except (ValueError, KeyError):
        raise KeyError(
            f"unknown config {name!r}; expected one of {standard_config_names()}"
        ) from None
    if kind not in ("dense", "moe"):
        raise KeyError(f"unknown config kind {kind!r} in {name!r}")
    il, idim, iheads, ihid = cfg["img"]
    tl, tdim, theads, thid = cfg["txt"]
    patch = cfg["patch"]
    tokens = (STANDARD_IMAGE_SIZE // patch) ** 2 + 1
    return ModelSpec(
        backbone_mode="separated",
        image_tower=TowerSpec(il, idim, iheads, ihid, tokens),
        text_tower=TowerSpec(tl, tdim, theads, thid, STANDARD_TEXT_TOKENS),
        patch_size=patch,
        image_size=STANDARD_IMAGE_SIZE,
        vocab_size=STANDARD_VOCAB,
        embed_dim=cfg["embed"],
        moe=MoESpec() if kind == "moe" else None,
        moe_modality="both",
        temperature_init=0.07,
    )


# -- router analytics -----------------------------------------------------------

@dataclass
class _LayerTrace:
    assign: np.ndarray
    drop: np.ndarray
    gate_prob_sum: np.ndarray
    tokens: int = 0


@dataclass
class RouterTrace:
    top_k: int
    layers: dict = field(default_factory=dict)  # (modality, layer) -> _LayerTrace
    modality_tokens: dict = field(default_factory=dict)

    def add(self, outcome: RoutingOutcome):
        key = (outcome.modality, outcome.layer_id)
        entry = self.layers.get(key)
        if entry is None:
            e = outcome.num_experts
            entry = _LayerTrace(
                assign=np.zeros(e, dtype=np.int64),
                drop=np.zeros(e, dtype=np.int64),
                gate_prob_sum=np.zeros(e, dtype=np.float64),
            )
            self.layers[key] = entry
        entry.assign += outcome.assignment_counts()
        entry.drop += outcome.drop_counts()
        entry.gate_prob_sum += outcome.gate_probs.data.sum(axis=0, dtype=np.float64)
        entry.tokens += outcome.num_tokens
        self.modality_tokens[outcome.modality] = (
            self.modality_tokens.get(outcome.modality, 0) + outcome.num_tokens
        )

    def conservation_holds(self) -> bool:
        """Sum of assignments plus drops equals tokens x K for every layer."""
        return all(
            int(entry.assign.sum() + entry.drop.sum()) == entry.tokens * self.top_k
            for entry in self.layers.values()
        )

    def assign_ratios(self, modality: str, layer: int) -> np.ndarray:
        """Per-expert share of the layer's pre-drop selections."""
        entry = self.layers[(modality, layer)]
        return entry.assign / (entry.tokens * self.top_k)

    def to_csv(self) -> str:
        lines = [TRACE_CSV_HEADER]
        for (modality, layer) in sorted(self.layers):
            entry = self.layers[(modality, layer)]
            denom = entry.tokens * self.top_k
            for e in range(entry.assign.shape[0]):
                lines.append(
                    f"{modality},{layer},{e},{entry.assign[e]},{entry.drop[e]},"
                    f"{entry.assign[e] / denom:.6f},"
                    f"{entry.gate_prob_sum[e] / entry.tokens:.6f}"
                )
        return "\n".join(lines) + "\n"


def collect_router_trace(
    spec: ModelSpec,
    params: dict,
    batches,
    jitter_std: float = 0.0,
    jitter_seed: int = 0,
) -> RouterTrace:
    """Accumulate per-layer per-expert assignment statistics over a dataset.

    ``jitter_std`` adds seeded logit noise, which turns an all-zero router
    into an unbiased uniform one instead of a tie-break-collapsed one.
    """
    if spec.moe is None:
        raise ValueError("dense model has no routing to trace")
    trace = RouterTrace(top_k=spec.moe.top_k)
    rng = np.random.default_rng(jitter_seed) if jitter_std else None
    for batch in batches:
        for modality in ("image", "text"):
            _, outcomes = encode(
                batch,
                params,
                spec,
                modality,
                logit_jitter_rng=rng,
                logit_jitter_std=jitter_std,
            )
            for outcome in outcomes:
                trace.add(outcome)
    if not trace.layers:
        raise ValueError("no routed layers were traversed")
    return trace


# -- token drop maps -------------------------------------------------------------

@dataclass
class DropMap:
    layer_id: int
    grid: np.ndarray  # [g, g] bool, True where the patch lost all assignments

    @property
    def cell_count(self) -> int:
        return int(self.grid.sum())

    def to_text(self) -> str:
        return "\n".join("".join("X" if c else "." for c in row) for row in self.grid) + "\n"


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap from a float [3, H, W] image in [0, 1]."""
    arr = np.clip(image, 0.0, 1.0)
    rgb = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def render_drop_map(
    spec: ModelSpec,
    params: dict,
    image: np.ndarray,
    layer: int,
    out_prefix=None,
    capacity_override: int = None,
):
    """Mark image patches whose token lost all K expert assignments.

    Writes ``<out_prefix>.ppm`` (red cells over the input) and
    ``<out_prefix>.txt`` ('.'/'X' grid) when a prefix is given.

    Returns (DropMap, RoutingOutcome for the requested layer).
    """
    if layer not in spec.moe_layers("image"):
        raise ValueError(f"layer {layer} is not a routed image layer")
    grid_side = spec.image_size // spec.patch_size
    length = spec.text_tower.max_tokens
    batch = Batch(
        images=image[None].astype(np.float32),
        token_ids=np.zeros((1, length), dtype=np.int64),
        pad_mask=np.ones((1, length), dtype=bool),
    )
    _, outcomes = encode(
        batch, params, spec, "image", moe_capacity_override=capacity_override
    )
    outcome = next(o for o in outcomes if o.layer_id == layer)
    dropped = outcome.dropped_assignments
    # token 0 is the class token; patches follow in raster order
    fully = (dropped[1:] == outcome.top_k).reshape(grid_side, grid_side)
    drop_map = DropMap(layer_id=layer, grid=fully)

    if out_prefix is not None:
        overlay = np.array(image, dtype=np.float32, copy=True)
        ps = spec.patch_size
        for gy in range(grid_side):
            for gx in range(grid_side):
                if fully[gy, gx]:
                    overlay[0, gy * ps : (gy + 1) * ps, gx * ps : (gx + 1) * ps] = 1.0
                    overlay[1, gy * ps : (gy + 1) * ps, gx * ps : (gx + 1) * ps] = 0.0
                    overlay[2, gy * ps : (gy + 1) * ps, gx * ps : (gx + 1) * ps] = 0.0
        write_ppm(f"{out_prefix}.ppm", overlay)
        with open(f"{out_prefix}.txt", "w") as f:
            f.write(drop_map.to_text())
    return drop_map, outcome
