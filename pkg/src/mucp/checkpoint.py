"""Named-parameter checkpoint container and its binary file format.

Layout: magic ``MUCP``, format version (u32 LE), manifest byte length
(u32 LE), a flat-text manifest (meta lines then one ``tensor`` line per
parameter), zero padding to a 64-byte boundary, then the little-endian
float32 blob. Save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .model import ModelSpec, TowerSpec, param_shapes
from .moe import MoESpec
from .tensor import Tensor

MAGIC = b"MUCP"
VERSION = 1
ALIGN = 64


class CheckpointError(RuntimeError):
    """Checkpoint file or manifest violates the format contract."""


@dataclass
class Checkpoint:
    params: dict  # ordered name -> np.ndarray float32
    spec: ModelSpec
    step: int = 0
    seed: int = 0

    def validate(self):
        expected = param_shapes(self.spec)
        missing = [n for n in expected if n not in self.params]
        extra = [n for n in self.params if n not in expected]
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match spec (missing={missing}, extra={extra})"
            )
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{name}: shape {self.params[name].shape} != spec {shape}"
                )

    def as_tensors(self, requires_grad: bool = False) -> dict:
        return {
            n: Tensor(a.astype(np.float32, copy=True), requires_grad=requires_grad)
            for n, a in self.params.items()
        }

    def total_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))


def checkpoint_from_tensors(tensors: dict, spec: ModelSpec, step: int, seed: int) -> Checkpoint:
    params = {n: t.data.astype(np.float32, copy=True) for n, t in tensors.items()}
    return Checkpoint(params=params, spec=spec, step=step, seed=seed)


# -- flat-text spec codec -----------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _tower_items(prefix: str, tower: TowerSpec):
    yield f"{prefix}.num_layers", _fmt(tower.num_layers)
    yield f"{prefix}.model_dim", _fmt(tower.model_dim)
    yield f"{prefix}.num_heads", _fmt(tower.num_heads)
    yield f"{prefix}.mlp_hidden_dim", _fmt(tower.mlp_hidden_dim)
    yield f"{prefix}.max_tokens", _fmt(tower.max_tokens)


def model_spec_items(spec: ModelSpec):
    """Flat (key, value-string) pairs that fully describe a ModelSpec."""
    yield "model.backbone_mode", spec.backbone_mode
    yield from _tower_items("model.image", spec.image_tower)
    yield from _tower_items("model.text", spec.text_tower)
    yield "model.patch_size", _fmt(spec.patch_size)
    yield "model.image_size", _fmt(spec.image_size)
    yield "model.vocab_size", _fmt(spec.vocab_size)
    yield "model.embed_dim", _fmt(spec.embed_dim)
    yield "model.moe_modality", spec.moe_modality
    yield "model.temperature_init", _fmt(spec.temperature_init)
    yield "moe.enabled", _fmt(spec.moe is not None)
    if spec.moe is not None:
        m = spec.moe
        yield "moe.num_experts", _fmt(m.num_experts)
        yield "moe.top_k", _fmt(m.top_k)
        yield "moe.capacity_factor_image", _fmt(m.capacity_factor_image)
        yield "moe.capacity_factor_text", _fmt(m.capacity_factor_text)
        yield "moe.balance_weight", _fmt(m.balance_weight)
        yield "moe.router_z_weight", _fmt(m.router_z_weight)
        yield "moe.normalize_gates_after_routing", _fmt(m.normalize_gates_after_routing)
        yield "moe.placement", m.placement


def _tower_from(items: dict, prefix: str) -> TowerSpec:
    return TowerSpec(
        num_layers=int(items[f"{prefix}.num_layers"]),
        model_dim=int(items[f"{prefix}.model_dim"]),
        num_heads=int(items[f"{prefix}.num_heads"]),
        mlp_hidden_dim=int(items[f"{prefix}.mlp_hidden_dim"]),
        max_tokens=int(items[f"{prefix}.max_tokens"]),
    )


def _parse_bool(text: str) -> bool:
    if text not in ("true", "false"):
        raise CheckpointError(f"expected true/false, got {text!r}")
    return text == "true"


def model_spec_from_items(items: dict) -> ModelSpec:
    moe = None
    if _parse_bool(items["moe.enabled"]):
        moe = MoESpec(
            num_experts=int(items["moe.num_experts"]),
            top_k=int(items["moe.top_k"]),
            capacity_factor_image=float(items["moe.capacity_factor_image"]),
            capacity_factor_text=float(items["moe.capacity_factor_text"]),
            balance_weight=float(items["moe.balance_weight"]),
            router_z_weight=float(items["moe.router_z_weight"]),
            normalize_gates_after_routing=_parse_bool(
                items["moe.normalize_gates_after_routing"]
            ),
            placement=items["moe.placement"],
        )
    return ModelSpec(
        backbone_mode=items["model.backbone_mode"],
        image_tower=_tower_from(items, "model.image"),
        text_tower=_tower_from(items, "model.text"),
        patch_size=int(items["model.patch_size"]),
        image_size=int(items["model.image_size"]),
        vocab_size=int(items["model.vocab_size"]),
        embed_dim=int(items["model.embed_dim"]),
        moe=moe,
        moe_modality=items["model.moe_modality"],
        temperature_init=float(items["model.temperature_init"]),
    )


# -- binary file format -------------------------------------------------------

def _manifest_text(ck: Checkpoint) -> str:
    lines = [f"meta.step = {ck.step}", f"meta.seed = {ck.seed}"]
    lines += [f"meta.{k} = {v}" for k, v in model_spec_items(ck.spec)]
    offset = 0
    for name, arr in ck.params.items():
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} f32 {shape} {offset}")
        offset += arr.size * 4
    return "\n".join(lines) + "\n"


def save_checkpoint(ck: Checkpoint, path) -> None:
    ck.validate()
    manifest = _manifest_text(ck).encode("utf-8")
    header = MAGIC + struct.pack("<II", VERSION, len(manifest))
    pad = (-(len(header) + len(manifest))) % ALIGN
    with open(path, "wb") as f:
        f.write(header)
        f.write(manifest)
        f.write(b"\x00" * pad)
        for arr in ck.params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, manifest_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {VERSION})"
        )
    manifest = raw[12 : 12 + manifest_len].decode("utf-8")
    blob_start = 12 + manifest_len + ((-(12 + manifest_len)) % ALIGN)
    blob = raw[blob_start:]

    meta = {}
    entries = []
    for line in manifest.splitlines():
        if not line:
            continue
        if line.startswith("meta."):
            key, _, value = line[len("meta.") :].partition(" = ")
            meta[key] = value
        elif line.startswith("tensor "):
            _, name, dtype, shape_s, offset_s = line.split(" ")
            if dtype != "f32":
                raise CheckpointError(f"{path}: unsupported dtype {dtype}")
            shape = tuple(int(d) for d in shape_s.split("x"))
            entries.append((name, shape, int(offset_s)))
        else:
            raise CheckpointError(f"{path}: unparseable manifest line {line!r}")

    params = {}
    prev_end = 0
    for name, shape, offset in entries:
        nbytes = int(np.prod(shape)) * 4
        if offset < prev_end:
            raise CheckpointError(f"{path}: overlapping or unordered slice for {name}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: slice for {name} exceeds blob")
        params[name] = (
            np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=offset)
            .reshape(shape)
            .copy()
        )
        prev_end = offset + nbytes

    spec = model_spec_from_items(meta)
    ck = Checkpoint(
        params=params, spec=spec, step=int(meta["step"]), seed=int(meta["seed"])
    )
    ck.validate()
    return ck
