"""Checkpoint surgery: dense model in, expert model out.

Each converted MLP layer is cloned into every expert byte-for-byte; routers
start from a small random normal so initial gates stay near uniform. Every
untouched parameter is copied unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint
from .model import Batch, ModelSpec, encode, param_shapes
from .moe import MoESpec, moe_layer_indices

ROUTER_INIT_STD = 0.02


class SurgeryError(RuntimeError):
    """Dense checkpoint and target expert layout cannot be reconciled."""


@dataclass
class SurgeryReport:
    converted_layers: list  # (stack prefix, layer index) pairs
    copied_params: int
    fresh_params: int
    total_params_dense: int
    total_params_sparse: int

    def identity_holds(self, expert_growth: int, router_params: int) -> bool:
        """total_sparse == total_dense + (E-1) * cloned MLP params + routers."""
        return (
            self.total_params_sparse
            == self.total_params_dense + expert_growth + router_params
        )

    def summary(self) -> str:
        layers = ", ".join(f"{p}[{i}]" for p, i in self.converted_layers)
        return (
            f"converted layers: {layers or 'none'}\n"
            f"copied params:    {self.copied_params}\n"
            f"fresh params:     {self.fresh_params}\n"
            f"dense total:      {self.total_params_dense}\n"
            f"sparse total:     {self.total_params_sparse}"
        )


def select_moe_layers(spec: ModelSpec) -> dict:
    """Sparse layer indices per tower under the alternating placement.

    Towers excluded by ``moe_modality`` map to an empty list.
    """
    out = {}
    for modality in ("image", "text"):
        covered = spec.moe_modality in ("both", modality)
        tower = spec.tower(modality)
        out[modality] = moe_layer_indices(tower.num_layers) if covered else []
    return out


def _converted_stacks(spec: ModelSpec):
    """(stack prefix, layer indices) pairs actually rewritten by surgery."""
    per_tower = select_moe_layers(spec)
    if spec.backbone_mode == "shared":
        return [("trunk", per_tower["image"])]
    stacks = []
    if per_tower["image"]:
        stacks.append(("img", per_tower["image"]))
    if per_tower["text"]:
        stacks.append(("txt", per_tower["text"]))
    return stacks


def upcycle_checkpoint(
    dense: Checkpoint,
    moe_spec: MoESpec,
    rng_seed: int,
    moe_modality: str = "both",
):
    """Clone dense MLPs into experts and attach random routers.

    Returns (sparse Checkpoint, SurgeryReport). The report's parameter-count
    identity is re-checked here; a failure means a layout bug, not bad input.
    """
    if dense.spec.moe is not None:
        raise SurgeryError("source checkpoint already contains expert layers")
    dense_names = param_shapes(dense.spec)
    missing = [n for n in dense_names if n not in dense.params]
    if missing:
        raise SurgeryError(f"dense checkpoint is missing parameters: {missing}")

    sparse_spec = replace(dense.spec, moe=moe_spec, moe_modality=moe_modality)
    sparse_spec.validate()
    rng = np.random.default_rng(rng_seed)

    params = {}
    copied = 0
    fresh = 0
    for name, shape in param_shapes(sparse_spec).items():
        if name in dense.params:
            params[name] = dense.params[name].copy()
            copied += params[name].size
        elif ".moe.router.w" in name:
            params[name] = rng.normal(0.0, ROUTER_INIT_STD, size=shape).astype(
                np.float32
            )
            fresh += params[name].size
        elif ".moe.expert" in name:
            stem, _, tail = name.partition(".moe.expert")
            source = f"{stem}.mlp.{tail.split('.', 1)[1]}"
            if source not in dense.params:
                raise SurgeryError(f"no dense source {source} for {name}")
            params[name] = dense.params[source].copy()
            copied += params[name].size
        else:
            raise SurgeryError(f"unexpected new parameter {name}")

    stacks = _converted_stacks(sparse_spec)
    converted = [(prefix, i) for prefix, layers in stacks for i in layers]
    report = SurgeryReport(
        converted_layers=converted,
        copied_params=copied,
        fresh_params=fresh,
        total_params_dense=int(sum(a.size for a in dense.params.values())),
        total_params_sparse=int(sum(a.size for a in params.values())),
    )

    expert_growth = 0
    router_params = 0
    for prefix, layers in stacks:
        tower = sparse_spec.image_tower if prefix in ("img", "trunk") else sparse_spec.text_tower
        d, h = tower.model_dim, tower.mlp_hidden_dim
        mlp_params = d * h + h + h * d + d
        expert_growth += (moe_spec.num_experts - 1) * mlp_params * len(layers)
        router_params += d * moe_spec.num_experts * len(layers)
    if not report.identity_holds(expert_growth, router_params):
        raise SurgeryError(
            f"parameter-count identity violated: {report.total_params_sparse} != "
            f"{report.total_params_dense} + {expert_growth} + {router_params}"
        )

    sparse = Checkpoint(
        params=params, spec=sparse_spec, step=dense.step, seed=rng_seed
    )
    sparse.validate()
    return sparse, report


def verify_equivalence(dense: Checkpoint, sparse: Checkpoint, batch: Batch) -> float:
    """Max |dense embedding - sparse embedding| over both modalities.

    Evaluation forces post-routing gate normalization and unbounded capacity;
    a freshly upcycled checkpoint must agree with its source to < 1e-5.
    """
    if sparse.spec.moe is None:
        raise SurgeryError("second checkpoint has no expert layers to verify")
    forced_spec = replace(
        sparse.spec,
        moe=replace(sparse.spec.moe, normalize_gates_after_routing=True),
    )
    dense_params = dense.as_tensors()
    sparse_params = sparse.as_tensors()
    worst = 0.0
    for modality in ("image", "text"):
        ref, _ = encode(batch, dense_params, dense.spec, modality)
        got, outcomes = encode(
            batch,
            sparse_params,
            forced_spec,
            modality,
            moe_capacity_override=10**9,
        )
        dropped = sum(o.total_dropped for o in outcomes)
        if dropped:
            raise SurgeryError(
                f"verification expected zero drops but saw {dropped} ({modality})"
            )
        worst = max(worst, float(np.max(np.abs(ref.data - got.data))))
    return worst
