"""Mixture-of-experts feed-forward layer.

Routing softmaxes over all experts, keeps the top-K gates per token, and
grants expert buffer slots first-come-first-serve in flattened token order
(sample 0's tokens first). Assignments that land on a full expert are
dropped; a token that loses every assignment passes through on the residual
alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    gather_rows,
    logsumexp,
    matmul,
    scatter_add_rows,
    softmax,
    take_flat,
)

PLACEMENT_ALTERNATING = "alternating_dense_sparse"


@dataclass
class MoESpec:
    num_experts: int = 8
    top_k: int = 2
    capacity_factor_image: float = 2.0
    capacity_factor_text: float = 2.0
    balance_weight: float = 0.01
    router_z_weight: float = 0.001
    normalize_gates_after_routing: bool = False
    placement: str = PLACEMENT_ALTERNATING

    def validate(self):
        if self.num_experts < 1:
            raise ValueError("num_experts must be positive")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(
                f"top_k={self.top_k} must be in [1, num_experts={self.num_experts}]"
            )
        if self.capacity_factor_image <= 0 or self.capacity_factor_text <= 0:
            raise ValueError("capacity factors must be > 0")
        if self.balance_weight < 0 or self.router_z_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.placement != PLACEMENT_ALTERNATING:
            raise ValueError(f"unknown placement {self.placement!r}")

    def capacity_factor(self, modality: str) -> float:
        return self.capacity_factor_image if modality == "image" else self.capacity_factor_text


@dataclass
class RouterParams:
    weights: Tensor  # [D, E], column e scores expert e


@dataclass
class ExpertParams:
    """Per-expert MLP weights; all experts share identical shapes."""

    in_proj: list  # E tensors [D, H]
    in_bias: list  # E tensors [H]
    out_proj: list  # E tensors [H, D]
    out_bias: list  # E tensors [D]

    @property
    def num_experts(self):
        return len(self.in_proj)


@dataclass
class RoutingOutcome:
    """Per-token routing record for one layer invocation."""

    layer_id: int
    modality: str
    gate_logits: Tensor  # [S, E]
    gate_probs: Tensor  # [S, E]
    topk_experts: np.ndarray  # [S, K] int, descending gate order
    kept: np.ndarray  # [S, K] bool, survived capacity
    slots: np.ndarray  # [S, K] int, buffer slot or -1 when dropped
    capacity: int

    @property
    def num_tokens(self) -> int:
        return self.topk_experts.shape[0]

    @property
    def top_k(self) -> int:
        return self.topk_experts.shape[1]

    @property
    def num_experts(self) -> int:
        return self.gate_probs.shape[1]

    @property
    def dropped_assignments(self) -> np.ndarray:
        """Per-token count of top-K selections that exceeded capacity."""
        return self.top_k - self.kept.sum(axis=1)

    @property
    def total_dropped(self) -> int:
        return int((~self.kept).sum())

    def selection_counts(self) -> np.ndarray:
        """Pre-drop top-K selections per expert."""
        return np.bincount(self.topk_experts.ravel(), minlength=self.num_experts)

    def assignment_counts(self) -> np.ndarray:
        """Post-drop surviving assignments per expert."""
        return np.bincount(
            self.topk_experts[self.kept], minlength=self.num_experts
        )

    def drop_counts(self) -> np.ndarray:
        """Dropped assignments per (over-subscribed) expert."""
        return np.bincount(
            self.topk_experts[~self.kept], minlength=self.num_experts
        )


def moe_layer_indices(num_layers: int) -> list:
    """Sparse layer positions for the alternating [dense, sparse] pattern.

    The pattern starts dense, so the 2nd, 4th, ... layers convert and exactly
    floor(L/2) of the MLPs become expert layers.
    """
    return [i for i in range(num_layers) if i % 2 == 1]


def expert_capacity(batch_tokens: int, num_experts: int, capacity_factor: float) -> int:
    """Buffer slots per expert: ceil((B_t / E) * C), zero only for empty input."""
    if batch_tokens < 0 or num_experts < 1 or capacity_factor <= 0:
        raise ValueError("need batch_tokens >= 0, num_experts >= 1, capacity > 0")
    return math.ceil((batch_tokens / num_experts) * capacity_factor)


def compute_gates(x: Tensor, router: RouterParams, top_k: int):
    """Route tokens: full-softmax gate probabilities plus top-K expert indices.

    Ties break toward the lower expert index (stable sort on descending
    probability), keeping routing deterministic.

    Returns (gate_logits [S,E], gate_probs [S,E], topk [S,K]).
    """
    num_experts = router.weights.shape[1]
    if top_k > num_experts:
        raise ValueError(f"top_k={top_k} exceeds {num_experts} experts")
    gate_logits = matmul(x, router.weights)
    gate_probs = softmax(gate_logits, axis=1)
    order = np.argsort(-gate_probs.data, axis=1, kind="stable")
    return gate_logits, gate_probs, order[:, :top_k]


def assign_tokens(
    topk: np.ndarray,
    gate_probs: Tensor,
    capacity: int,
    *,
    gate_logits: Tensor = None,
    layer_id: int = 0,
    modality: str = "image",
) -> RoutingOutcome:
    """Grant expert slots first-come-first-serve over the flattened token scan.

    Claims are ordered token-major; within a token, descending gate order
    (already the column order of ``topk``). A claim on a full expert is
    dropped.
    """
    num_tokens, top_k = topk.shape
    num_experts = gate_probs.shape[1]
    flat = topk.ravel()
    ranks = np.empty(flat.size, dtype=np.int64)
    for e in range(num_experts):
        pos = np.flatnonzero(flat == e)
        ranks[pos] = np.arange(pos.size)
    kept = (ranks < capacity).reshape(num_tokens, top_k)
    slots = np.where(kept, ranks.reshape(num_tokens, top_k), -1)
    return RoutingOutcome(
        layer_id=layer_id,
        modality=modality,
        gate_logits=gate_logits,
        gate_probs=gate_probs,
        topk_experts=topk,
        kept=kept,
        slots=slots,
        capacity=capacity,
    )


def moe_mix(
    x: Tensor,
    experts: ExpertParams,
    outcome: RoutingOutcome,
    normalize_gates_after_routing: bool,
) -> Tensor:
    """Gate-weighted sum of surviving expert outputs, without the residual."""
    num_tokens = x.shape[0]
    num_experts = experts.num_experts
    kept_flat = outcome.kept.ravel()
    tok = np.repeat(np.arange(num_tokens), outcome.top_k)[kept_flat]
    exp = outcome.topk_experts.ravel()[kept_flat]
    if tok.size == 0:
        return Tensor(np.zeros_like(x.data))

    gates = take_flat(outcome.gate_probs, tok * num_experts + exp).reshape(-1, 1)
    if normalize_gates_after_routing:
        # Rescale each token's surviving gates to sum to one; fully dropped
        # tokens have no surviving claim, so no zero denominator is touched.
        denom = scatter_add_rows(gates, tok, num_tokens)
        gates = gates * (gather_rows(denom, tok) ** -1.0)

    mix = Tensor(np.zeros_like(x.data))
    for e in range(num_experts):
        sel = np.flatnonzero(exp == e)
        if sel.size == 0:
            continue
        rows = gather_rows(x, tok[sel])
        hidden = (matmul(rows, experts.in_proj[e]) + experts.in_bias[e]).gelu()
        out = matmul(hidden, experts.out_proj[e]) + experts.out_bias[e]
        weighted = out * gather_rows(gates, sel)
        mix = mix + scatter_add_rows(weighted, tok[sel], num_tokens)
    return mix


def route_tokens(
    x: Tensor,
    router: RouterParams,
    spec: MoESpec,
    *,
    modality: str = "image",
    layer_id: int = 0,
    capacity_override: int = None,
    logit_jitter: np.ndarray = None,
) -> RoutingOutcome:
    """Gate, select top-K, and grant capacity slots for one token batch.

    ``capacity_override`` bypasses the capacity formula (used by equivalence
    checks); ``logit_jitter`` adds a constant perturbation to the gate logits
    before the softmax (used by router analytics).
    """
    num_tokens = x.shape[0]
    if logit_jitter is None:
        gate_logits, gate_probs, topk = compute_gates(x, router, spec.top_k)
    else:
        gate_logits = matmul(x, router.weights) + Tensor(
            logit_jitter.astype(x.data.dtype)
        )
        gate_probs = softmax(gate_logits, axis=1)
        topk = np.argsort(-gate_probs.data, axis=1, kind="stable")[:, : spec.top_k]
    capacity = (
        capacity_override
        if capacity_override is not None
        else expert_capacity(num_tokens, spec.num_experts, spec.capacity_factor(modality))
    )
    return assign_tokens(
        topk,
        gate_probs,
        capacity,
        gate_logits=gate_logits,
        layer_id=layer_id,
        modality=modality,
    )


def moe_forward(
    x: Tensor,
    experts: ExpertParams,
    router: RouterParams,
    spec: MoESpec,
    *,
    modality: str = "image",
    layer_id: int = 0,
    capacity_override: int = None,
    logit_jitter: np.ndarray = None,
):
    """Full expert layer: route, dispatch, and add the residual.

    Returns (y [S,D], RoutingOutcome).
    """
    outcome = route_tokens(
        x,
        router,
        spec,
        modality=modality,
        layer_id=layer_id,
        capacity_override=capacity_override,
        logit_jitter=logit_jitter,
    )
    y = x + moe_mix(x, experts, outcome, spec.normalize_gates_after_routing)
    return y, outcome


def load_balance_loss(outcome: RoutingOutcome, balance_weight: float) -> Tensor:
    """alpha * sum_e R_e * P_e over one layer invocation.

    R_e counts pre-drop top-K selections (piecewise constant, no gradient);
    P_e is the mean gate probability, which is where the gradient flows.
    """
    num_tokens = outcome.num_tokens
    if num_tokens == 0:
        raise ValueError("load balance loss needs at least one token")
    ratio = outcome.selection_counts() * (
        outcome.num_experts / (outcome.top_k * num_tokens)
    )
    mean_probs = outcome.gate_probs.mean(axis=0)
    return (mean_probs * Tensor(ratio.astype(outcome.gate_probs.dtype))).sum() * float(
        balance_weight
    )


def router_z_loss(gate_logits: Tensor, z_weight: float) -> Tensor:
    """beta * mean_j (logsumexp_e logits_j)^2, the router logit regularizer."""
    if gate_logits.shape[0] == 0:
        raise ValueError("router z-loss needs at least one token")
    lse = logsumexp(gate_logits, axis=1)
    return (lse * lse).mean() * float(z_weight)


def total_aux_loss(outcomes, spec: MoESpec) -> Tensor:
    """Balance + z losses averaged over every routed layer invocation."""
    if not outcomes:
        return Tensor(np.float32(0.0))
    total = None
    for outcome in outcomes:
        term = load_balance_loss(outcome, spec.balance_weight) + router_z_loss(
            outcome.gate_logits, spec.router_z_weight
        )
        total = term if total is None else total + term
    return total * (1.0 / len(outcomes))
