"""Optimization loop: AdamW, cosine schedule with linear warmup, and the
three regimes (dense, sparse-from-scratch, upcycled fine-tuning).

Metrics come back as preformatted CSV lines so identical (config, seed)
runs are byte-identical.
"""

from __future__ import annotations

import math
import os
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_tensors, save_checkpoint
from .data import SynthDataset
from .model import NumericError, contrastive_loss, encode
from .moe import total_aux_loss
from .tensor import Tensor

METRICS_HEADER = "step,total_loss,contrastive_loss,aux_loss,drop_frac_image,drop_frac_text,lr"
MAX_LOGIT_SCALE = math.log(100.0)  # keeps the learned temperature >= 0.01

REGIMES = ("dense", "sparse_scratch", "upcycle")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    seed: int = 0
    regime: str = "dense"
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    adam_eps: float = 1e-8

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("need 0 <= warmup_steps < steps")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear 0 -> peak over warmup, then cosine peak -> 0 at ``steps``."""
    if step < 0 or step > config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.steps - config.warmup_steps)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    config: TrainConfig,
    *,
    no_decay=frozenset(),
):
    """Decoupled weight decay Adam: p <- p - lr * (m_hat/(sqrt(v_hat)+eps) + wd*p).

    Names in ``no_decay`` skip the decay term. A missing gradient counts as
    zero, so parameters untouched this step (idle experts) still decay.
    """
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if config.weight_decay and name not in no_decay:
            p.data *= np.float32(1.0 - lr * config.weight_decay)
        p.data -= np.float32(lr) * update


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-12))
        for g in grads.values():
            g *= scale
    return norm


def _batch_index_stream(config: TrainConfig, n_train: int):
    """Epoch-shuffled index slices; each epoch's short tail batch is dropped."""
    rng = np.random.default_rng(config.seed)
    per_epoch = n_train // config.batch_size
    if per_epoch < 1:
        raise ValueError("train split smaller than one batch")
    while True:
        order = rng.permutation(n_train)
        for k in range(per_epoch):
            yield order[k * config.batch_size : (k + 1) * config.batch_size]


def _batch_stream(dataset: SynthDataset, config: TrainConfig):
    """Batches in deterministic order, prefetched on a worker thread when
    MUCP_THREADS allows one."""
    indices = _batch_index_stream(config, dataset.train_images.shape[0])

    def produce(n):
        for _, idx in zip(range(n), indices):
            yield dataset.train_batch(idx)

    workers = int(os.environ.get("MUCP_THREADS", "1"))
    if workers < 1:
        yield from produce(config.steps)
        return

    q = queue.Queue(maxsize=2)

    def worker():
        for batch in produce(config.steps):
            q.put(batch)
        q.put(None)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        batch = q.get()
        if batch is None:
            break
        yield batch
    thread.join()


def _fmt(x: float) -> str:
    return f"{float(x):.8g}"


@dataclass
class TrainResult:
    metrics: list  # CSV lines, header first
    final: Checkpoint

    def metrics_text(self) -> str:
        return "\n".join(self.metrics) + "\n"


def _drop_fraction(outcomes) -> float:
    if not outcomes:
        return 0.0
    dropped = sum(o.total_dropped for o in outcomes)
    total = sum(o.num_tokens * o.top_k for o in outcomes)
    return dropped / total


def train_run(
    start: Checkpoint,
    dataset: SynthDataset,
    config: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Contrastive + auxiliary-loss training from ``start``'s parameters.

    Writes intermediate checkpoints under ``out_dir`` when
    ``checkpoint_every`` is set; the final checkpoint is always returned.
    """
    config.validate()
    spec = start.spec
    if config.regime == "dense" and spec.moe is not None:
        raise ValueError("dense regime requires a dense checkpoint")
    if config.regime in ("sparse_scratch", "upcycle") and spec.moe is None:
        raise ValueError(f"{config.regime} regime requires expert layers")

    params = start.as_tensors(requires_grad=True)
    state = AdamState()
    metrics = [METRICS_HEADER]
    # gains, biases, and the temperature scalar are exempt from decay
    no_decay = frozenset(n for n, p in params.items() if p.data.ndim < 2)

    for step, batch in enumerate(_batch_stream(dataset, config)):
        img_emb, img_out = encode(batch, params, spec, "image")
        txt_emb, txt_out = encode(batch, params, spec, "text")
        theta = (-params["logit_scale"]).exp()
        closs = contrastive_loss(img_emb, txt_emb, theta)
        if spec.moe is not None:
            aux = total_aux_loss(img_out + txt_out, spec.moe)
            loss = closs + aux
            aux_val = aux.item()
        else:
            loss = closs
            aux_val = 0.0
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss at step {step}")
        loss.backward()

        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        clip_global_norm(grads, config.grad_clip)
        lr = lr_schedule(step, config)
        adamw_step(params, grads, state, lr, config, no_decay=no_decay)
        np.minimum(
            params["logit_scale"].data, MAX_LOGIT_SCALE, out=params["logit_scale"].data
        )
        for p in params.values():
            p.grad = None

        metrics.append(
            ",".join(
                [
                    str(step),
                    _fmt(loss.item()),
                    _fmt(closs.item()),
                    _fmt(aux_val),
                    _fmt(_drop_fraction(img_out)),
                    _fmt(_drop_fraction(txt_out)),
                    _fmt(lr),
                ]
            )
        )
        if (
            out_dir is not None
            and config.checkpoint_every
            and (step + 1) % config.checkpoint_every == 0
            and (step + 1) < config.steps
        ):
            ck = checkpoint_from_tensors(
                params, spec, step=start.step + step + 1, seed=config.seed
            )
            save_checkpoint(ck, os.path.join(out_dir, f"step{start.step + step + 1}.mucp"))

    final = checkpoint_from_tensors(
        params, spec, step=start.step + config.steps, seed=config.seed
    )
    return TrainResult(metrics=metrics, final=final)
