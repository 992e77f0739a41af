"""Synthetic paired image/caption data: one colored shape per image.

Captions are two tokens, [color, shape], padded to the model's text length,
so every (color, shape) pair forms one caption class. Rendering is seeded
and byte-reproducible; the validation split cycles through all classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Batch

PAD_TOKEN = 0

_COLORS = [
    ("red", (1.0, 0.1, 0.1)),
    ("green", (0.1, 0.9, 0.2)),
    ("blue", (0.15, 0.3, 1.0)),
    ("yellow", (0.95, 0.9, 0.1)),
    ("magenta", (0.9, 0.15, 0.9)),
    ("cyan", (0.1, 0.85, 0.9)),
    ("orange", (1.0, 0.55, 0.05)),
    ("white", (0.95, 0.95, 0.95)),
]

_SHAPES = ["square", "circle", "triangle", "diamond", "cross", "ring"]


@dataclass
class SynthSpec:
    num_shapes: int = 4
    num_colors: int = 4
    image_size: int = 32
    max_tokens: int = 16
    train_size: int = 512
    val_size: int = 64
    seed: int = 0

    def validate(self):
        if not 1 <= self.num_shapes <= len(_SHAPES):
            raise ValueError(f"num_shapes must be in [1, {len(_SHAPES)}]")
        if not 1 <= self.num_colors <= len(_COLORS):
            raise ValueError(f"num_colors must be in [1, {len(_COLORS)}]")
        if self.max_tokens < 2:
            raise ValueError("captions need at least two token positions")
        if self.val_size < self.num_shapes * self.num_colors:
            raise ValueError("val split smaller than the number of classes")

    @property
    def num_classes(self) -> int:
        return self.num_shapes * self.num_colors


def _draw_shape(size: int, shape: str, rgb, cy: float, cx: float, r: float) -> np.ndarray:
    y, x = np.indices((size, size), dtype=np.float32)
    dy, dx = y - cy, x - cx
    if shape == "square":
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif shape == "circle":
        inside = dy**2 + dx**2 <= r**2
    elif shape == "triangle":
        inside = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    elif shape == "diamond":
        inside = np.abs(dy) + np.abs(dx) <= r
    elif shape == "cross":
        arm = max(r / 3.0, 1.0)
        inside = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= r)
        )
    elif shape == "ring":
        d2 = dy**2 + dx**2
        inside = (d2 <= r**2) & (d2 >= (r / 2.0) ** 2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img = np.zeros((3, size, size), dtype=np.float32)
    for c in range(3):
        img[c][inside] = rgb[c]
    return img


def caption_tokens(color_id: int, shape_id: int, num_colors: int, max_tokens: int):
    """Two real tokens then padding; token 0 is reserved for padding."""
    ids = np.full(max_tokens, PAD_TOKEN, dtype=np.int64)
    ids[0] = 1 + color_id
    ids[1] = 1 + num_colors + shape_id
    pad = np.ones(max_tokens, dtype=bool)
    pad[:2] = False
    return ids, pad


@dataclass
class SynthDataset:
    spec: SynthSpec
    train_images: np.ndarray
    train_tokens: np.ndarray
    train_pad: np.ndarray
    train_classes: np.ndarray
    val_images: np.ndarray
    val_tokens: np.ndarray
    val_pad: np.ndarray
    val_classes: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def train_batch(self, indices) -> Batch:
        return Batch(
            images=self.train_images[indices],
            token_ids=self.train_tokens[indices],
            pad_mask=self.train_pad[indices],
        )

    def val_batch(self, indices=None) -> Batch:
        if indices is None:
            indices = np.arange(self.val_images.shape[0])
        return Batch(
            images=self.val_images[indices],
            token_ids=self.val_tokens[indices],
            pad_mask=self.val_pad[indices],
        )

    def class_caption_batch(self) -> Batch:
        """One caption per class, for zero-shot classification."""
        n = self.num_classes
        ids = np.zeros((n, self.spec.max_tokens), dtype=np.int64)
        pad = np.zeros((n, self.spec.max_tokens), dtype=bool)
        for c in range(n):
            ids[c], pad[c] = caption_tokens(
                c // self.spec.num_shapes,
                c % self.spec.num_shapes,
                self.spec.num_colors,
                self.spec.max_tokens,
            )
        images = np.zeros((n, 3, self.spec.image_size, self.spec.image_size), np.float32)
        return Batch(images=images, token_ids=ids, pad_mask=pad)


def _render_split(spec: SynthSpec, rng: np.random.Generator, classes: np.ndarray):
    n = classes.shape[0]
    size = spec.image_size
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    tokens = np.zeros((n, spec.max_tokens), dtype=np.int64)
    pad = np.zeros((n, spec.max_tokens), dtype=bool)
    r_lo, r_hi = size / 6.0, size / 3.6
    for i, cls in enumerate(classes):
        color_id = int(cls) // spec.num_shapes
        shape_id = int(cls) % spec.num_shapes
        r = rng.uniform(r_lo, r_hi)
        cy = rng.uniform(r + 1, size - r - 1)
        cx = rng.uniform(r + 1, size - r - 1)
        images[i] = _draw_shape(
            size, _SHAPES[shape_id], _COLORS[color_id][1], cy, cx, r
        )
        tokens[i], pad[i] = caption_tokens(
            color_id, shape_id, spec.num_colors, spec.max_tokens
        )
    return images, tokens, pad


def make_synth_dataset(spec: SynthSpec) -> SynthDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    train_classes = rng.integers(0, spec.num_classes, size=spec.train_size)
    val_classes = np.arange(spec.val_size) % spec.num_classes
    train = _render_split(spec, rng, train_classes)
    val = _render_split(spec, rng, val_classes)
    return SynthDataset(
        spec=spec,
        train_images=train[0],
        train_tokens=train[1],
        train_pad=train[2],
        train_classes=train_classes.astype(np.int64),
        val_images=val[0],
        val_tokens=val[1],
        val_pad=val[2],
        val_classes=val_classes.astype(np.int64),
    )
