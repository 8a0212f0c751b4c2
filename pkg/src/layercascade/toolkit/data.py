"""Synthetic segmentation corpus with graded pixel difficulty.

Each image is a textured background (class 0) with a few anti-aliased
objects. Foreground classes come in colour pairs that differ only by
shape, so object interiors far from the boundary are not always decidable
from local colour. Faded objects, texture noise and partial-coverage edge
pixels supply the moderate and hard pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..tensorcore import IGNORE_LABEL
from . import imageio

SUPERSAMPLE = 4
SHAPES = ("disk", "square", "triangle", "ring")
MAX_FOREGROUND = 0.45


@dataclass
class SynthSample:
    image: np.ndarray  # (3, h, w) float32 in [0, 1], 8-bit quantised
    labels: np.ndarray  # (h, w) uint8
    metadata: list = field(default_factory=list)


def class_shape(c):
    return SHAPES[(c - 1) % len(SHAPES)]


def class_color(c):
    """Foreground classes 2j+1 and 2j+2 share a hue."""
    hue = ((c - 1) // 2) * 0.37 % 1.0
    h6 = hue * 6.0
    x = 1.0 - abs(h6 % 2.0 - 1.0)
    rgb = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][int(h6) % 6]
    return 0.15 + 0.7 * np.array(rgb)


def _inside(shape, u, v, cx, cy, r):
    du, dv = u - cx, v - cy
    if shape == "disk":
        return du * du + dv * dv <= r * r
    if shape == "square":
        s = 0.85 * r
        return (np.abs(du) <= s) & (np.abs(dv) <= s)
    if shape == "triangle":
        # apex up; rows are v
        top, bottom = cy - r, cy + 0.6 * r
        half = (v - top) / (bottom - top) * r
        return (v >= top) & (v <= bottom) & (np.abs(du) <= half)
    d2 = du * du + dv * dv
    return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)


def _coverage(shape, size, cx, cy, r):
    s = SUPERSAMPLE
    sub = (np.arange(size * s) + 0.5) / s
    v, u = np.meshgrid(sub, sub, indexing="ij")
    inside = _inside(shape, u, v, cx, cy, r).astype(np.float32)
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _background(rng, size):
    base = rng.uniform(0.3, 0.7) + rng.normal(0.0, 0.05, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.normal(0.0, 0.12, size=(2, 3))
    bg = base[:, None, None] + gx[:, None, None] * (xx - 0.5) + gy[:, None, None] * (yy - 0.5)
    return bg + rng.normal(0.0, 0.05, size=(3, size, size))


def boundary_band(labels):
    """Pixels on the object side of a label change (width 1)."""
    band = np.zeros(labels.shape, dtype=bool)
    for axis in (0, 1):
        for shift in (1, -1):
            nb = np.roll(labels, shift, axis=axis)
            diff = nb != labels
            # no wrap-around
            if axis == 0:
                diff[0 if shift == 1 else -1, :] = False
            else:
                diff[:, 0 if shift == 1 else -1] = False
            band |= diff
    return band & (labels != 0)


def make_sample(rng, size, class_count, ambiguity):
    image = _background(rng, size)
    labels = np.zeros((size, size), dtype=np.uint8)
    meta = []
    for _ in range(int(rng.integers(1, 5))):
        c = int(rng.integers(1, class_count))
        r = float(rng.uniform(0.12, 0.28) * size)
        cx, cy = rng.uniform(r, size - r, size=2)
        shape = class_shape(c)
        alpha = _coverage(shape, size, cx, cy, r)
        new_labels = np.where(alpha >= 0.5, c, labels)
        if (new_labels != 0).mean() > MAX_FOREGROUND:
            continue
        opacity = rng.uniform(0.55, 1.0)
        color = class_color(c) + rng.normal(0.0, 0.06, size=3)
        fg = color[:, None, None] + rng.normal(0.0, 0.08, size=(3, size, size))
        a = alpha * opacity
        image = a * fg + (1.0 - a) * image
        labels = new_labels.astype(np.uint8)
        meta.append({"class": c, "shape": shape, "cx": float(cx), "cy": float(cy), "size": r})
    if ambiguity > 0:
        band = boundary_band(labels)
        labels[band & (rng.random(labels.shape) < ambiguity)] = IGNORE_LABEL
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SynthSample(image.astype(np.float32), labels, meta)


def gen_dataset(n_samples, image_size=64, class_count=4, seed=0, ambiguity=0.0):
    if class_count < 2:
        raise ConfigError("class_count must be >= 2")
    if not 0.0 <= ambiguity <= 1.0:
        raise ConfigError("ambiguity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    return [make_sample(rng, image_size, class_count, ambiguity) for _ in range(n_samples)]


def stack(samples):
    """Samples -> ``(images (n,3,h,w), labels (n,h,w))``."""
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.labels for s in samples]))


def write_dataset(samples, out_dir, prefix="sample"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(samples):
        img, lab = f"{prefix}_{i:05d}.ppm", f"{prefix}_{i:05d}.pgm"
        imageio.write_image(out_dir / img, s.image)
        imageio.write_labels(out_dir / lab, s.labels)
        manifest.append({"image_path": img, "label_path": lab})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_manifest(path):
    """Load a manifest into stacked ``(images, labels)`` arrays."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    entries = json.loads(path.read_text())
    root = path.parent
    images = [imageio.read_image(root / e["image_path"]) for e in entries]
    labels = [imageio.read_labels(root / e["label_path"]) for e in entries]
    if not images:
        raise ConfigError(f"empty manifest {path}")
    return np.stack(images), np.stack(labels)
