"""Seeded procedural image domains standing in for real datasets.

Every image is rendered from a handful of random scene parameters on a
``size x size`` grid and scaled to [-1, 1]. Rendering is chunked with one
child seed per fixed-size chunk, so the result does not depend on how many
workers (``GANMEM_NUM_WORKERS``) render it.
"""
from __future__ import annotations

import colorsys
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

CHUNK = 128


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, C, H, W) in [-1, 1]
    labels: torch.Tensor | None = None  # task-local class ids
    name: str = ""

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ImageDataset":
        labels = None if self.labels is None else self.labels[idx]
        return ImageDataset(self.images[idx], labels, self.name)

    @property
    def class_count(self) -> int:
        return 1 if self.labels is None else int(self.labels.max()) + 1


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(c, c, indexing="xy")


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _paint(img, mask, color):
    mask = np.clip(mask, 0.0, 1.0)[..., None]
    img *= 1 - mask
    img += mask * color


def _soft(d, edge):
    # antialiased inside-mask from a signed distance (negative inside)
    return np.clip(0.5 - d / edge, 0.0, 1.0)


def _shape_mask(kind, xx, yy, rng, cx, cy, r, edge):
    if kind == "disk":
        return _soft(np.hypot(xx - cx, yy - cy) - r, edge)
    if kind == "ring":
        return _soft(np.abs(np.hypot(xx - cx, yy - cy) - r) - 0.3 * r, edge)
    if kind == "square":
        return _soft(np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - r, edge)
    if kind == "cross":
        d = np.minimum(
            np.maximum(np.abs(xx - cx) - r, np.abs(yy - cy) - 0.3 * r),
            np.maximum(np.abs(xx - cx) - 0.3 * r, np.abs(yy - cy) - r),
        )
        return _soft(d, edge)
    if kind == "stripes":
        ang = rng.uniform(0, np.pi)
        f = rng.uniform(2.0, 3.5)
        return 0.5 + 0.5 * np.sin(np.pi * f * (np.cos(ang) * xx + np.sin(ang) * yy) + rng.uniform(0, 6.3))
    raise ValueError(kind)


SHAPES = ("disk", "ring", "square", "cross", "stripes")


def _source(rng, xx, yy, edge):
    img = np.empty(xx.shape + (3,))
    img[:] = rng.uniform(0, 1, 3)
    for _ in range(rng.integers(1, 4)):
        kind = SHAPES[rng.integers(len(SHAPES))]
        m = _shape_mask(kind, xx, yy, rng, *rng.uniform(-0.6, 0.6, 2), rng.uniform(0.2, 0.6), edge)
        _paint(img, m, rng.uniform(0, 1, 3))
    return img


def _rings(rng, xx, yy, edge):
    img = np.empty(xx.shape + (3,))
    img[:] = _hsv(0.62, 0.8, rng.uniform(0.2, 0.35))
    for _ in range(rng.integers(1, 3)):
        m = _shape_mask("ring", xx, yy, rng, *rng.uniform(-0.4, 0.4, 2), rng.uniform(0.3, 0.6), edge)
        _paint(img, m, _hsv(rng.uniform(0.0, 0.08), 0.9, rng.uniform(0.85, 1.0)))
    return img


def _stripes(rng, xx, yy, edge):
    a = _hsv(rng.uniform(0.25, 0.33), 0.85, 0.6)
    b = _hsv(rng.uniform(0.14, 0.17), 0.9, 0.95)
    ang = np.pi / 4 + rng.uniform(-0.3, 0.3)
    m = 0.5 + 0.5 * np.sin(3 * np.pi * (np.cos(ang) * xx + np.sin(ang) * yy) + rng.uniform(0, 6.3))
    return a * (1 - m[..., None]) + b * m[..., None]


def _checker(rng, xx, yy, edge):
    f = 2.0 + rng.uniform(-0.2, 0.2)
    ox, oy = rng.uniform(0, 1, 2)
    m = 0.5 + 0.5 * np.sign(np.sin(np.pi * f * (xx + ox)) * np.sin(np.pi * f * (yy + oy)))
    a = _hsv(0.83, 0.8, rng.uniform(0.75, 0.95))
    b = _hsv(0.5, 0.8, rng.uniform(0.75, 0.95))
    return a * (1 - m[..., None]) + b * m[..., None]


def _dots(rng, xx, yy, edge):
    img = np.empty(xx.shape + (3,))
    img[:] = _hsv(0.95, 0.25, rng.uniform(0.9, 1.0))
    for _ in range(rng.integers(3, 6)):
        m = _shape_mask("disk", xx, yy, rng, *rng.uniform(-0.8, 0.8, 2), rng.uniform(0.12, 0.22), edge)
        _paint(img, m, _hsv(0.75, 0.7, rng.uniform(0.2, 0.4)))
    return img


def _wings(hue: float):
    """Related 'butterfly-like' family: mirror-symmetric two-lobed shapes."""

    def render(rng, xx, yy, edge):
        img = np.empty(xx.shape + (3,))
        img[:] = _hsv(0.3, 0.35, rng.uniform(0.35, 0.5))
        spread = rng.uniform(0.3, 0.5)
        r = rng.uniform(0.28, 0.4)
        cy = rng.uniform(-0.2, 0.2)
        h = hue + rng.uniform(-0.02, 0.02)
        for sx in (-1, 1):
            m = _shape_mask("disk", xx, yy, rng, sx * spread, cy - 0.15, r, edge)
            _paint(img, m, _hsv(h, 0.85, 0.95))
            m = _shape_mask("disk", xx, yy, rng, sx * spread * 0.8, cy + 0.35, 0.6 * r, edge)
            _paint(img, m, _hsv(h + 0.1, 0.8, 0.8))
        body = _soft(np.maximum(np.abs(xx) - 0.06, np.abs(yy - cy) - 0.5), edge)
        _paint(img, body, np.array([0.1, 0.08, 0.05]))
        return img

    return render


TASK_SHAPES = ("disk", "square", "ring", "cross", "stripes")
N_HUES = 12


def _labeled(task: int, cls: int, classes_per_task: int):
    hue = (task * classes_per_task + cls) / max(N_HUES, classes_per_task * (task + 1))
    kind = TASK_SHAPES[task % len(TASK_SHAPES)]

    def render(rng, xx, yy, edge):
        img = np.empty(xx.shape + (3,))
        img[:] = rng.uniform(0.05, 0.3)
        m = _shape_mask(kind, xx, yy, rng, *rng.uniform(-0.3, 0.3, 2), rng.uniform(0.35, 0.6), edge)
        _paint(img, m, _hsv(hue + rng.uniform(-0.015, 0.015), 0.9, rng.uniform(0.8, 1.0)))
        return img

    return render


DOMAINS = {
    "source": _source,
    "rings": _rings,
    "stripes": _stripes,
    "checker": _checker,
    "dots": _dots,
}
DOMAINS.update({f"wings{k}": _wings(0.0 + 0.07 * k) for k in range(6)})

GENERATION_STREAM = ("rings", "stripes", "checker", "dots")
RELATED_STREAM = ("wings0", "wings1", "wings2", "wings3")


def _workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("GANMEM_NUM_WORKERS", "1"))
    return max(1, workers)


def _render_chunk(args):
    renderers, seed, size, noise = args
    rng = np.random.default_rng(seed)
    xx, yy = _grid(size)
    edge = 2.0 / size
    out = np.empty((len(renderers), 3, size, size), dtype=np.float32)
    for i, render in enumerate(renderers):
        img = render(rng, xx, yy, edge)
        img = img + noise * rng.standard_normal(img.shape)
        out[i] = np.clip(img, 0, 1).transpose(2, 0, 1) * 2 - 1
    return out


def _render(renderers, size, seed, workers, noise=0.02) -> torch.Tensor:
    children = np.random.SeedSequence(seed).spawn((len(renderers) + CHUNK - 1) // CHUNK)
    jobs = [
        (renderers[i * CHUNK : (i + 1) * CHUNK], children[i], size, noise)
        for i in range(len(children))
    ]
    n = _workers(workers)
    if n == 1:
        chunks = [_render_chunk(j) for j in jobs]
    else:
        with ThreadPoolExecutor(n) as pool:
            chunks = list(pool.map(_render_chunk, jobs))
    if not chunks:
        return torch.empty(0, 3, size, size)
    return torch.from_numpy(np.concatenate(chunks))


def make_dataset(name: str, n: int, size: int, seed: int = 0, workers: int | None = None) -> ImageDataset:
    """Unlabelled images from a named domain (see ``DOMAINS``)."""
    if name not in DOMAINS:
        raise KeyError(f"unknown domain {name!r}; known: {sorted(DOMAINS)}")
    images = _render([DOMAINS[name]] * n, size, seed, workers)
    return ImageDataset(images, None, name)


def make_labeled_task(
    task: int, classes_per_task: int, n_per_class: int, size: int, seed: int = 0, workers=None
) -> ImageDataset:
    """Class-balanced labelled task; task ``t`` uses one shape family and its own hues."""
    renderers, labels = [], []
    for c in range(classes_per_task):
        renderers += [_labeled(task, c, classes_per_task)] * n_per_class
        labels += [c] * n_per_class
    images = _render(renderers, size, seed, workers)
    perm = torch.randperm(len(labels), generator=torch.Generator().manual_seed(seed))
    return ImageDataset(images[perm], torch.tensor(labels)[perm], f"task{task}")
