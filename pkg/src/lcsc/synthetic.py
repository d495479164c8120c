"""Seeded synthetic images for desk-scale experiments and tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .imageio import RgbImage, flip_horizontal, save_ppm


def oriented_texture(rng: np.random.Generator, size: int = 96, orientation: float | None = None,
                     noise: float = 0.05) -> RgbImage:
    """Colour grating with a dominant orientation plus a weaker distractor and noise."""
    if orientation is None:
        orientation = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    freq = rng.uniform(0.06, 0.2)
    phase = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(orientation) + yy * np.sin(orientation)
    base = np.cos(2 * np.pi * freq * u + phase)
    o2 = rng.uniform(0, np.pi)
    f2 = rng.uniform(0.03, 0.3)
    u2 = xx * np.cos(o2) + yy * np.sin(o2)
    side = 0.25 * np.cos(2 * np.pi * f2 * u2 + rng.uniform(0, 2 * np.pi))
    planes = np.empty((3, size, size))
    for c in range(3):
        amp = rng.uniform(0.15, 0.35)
        mid = rng.uniform(0.35, 0.65)
        planes[c] = mid + amp * (base + side) + noise * rng.standard_normal((size, size))
    return RgbImage(np.clip(planes, 0.0, 1.0))


def texture_corpus(seed: int, count: int, size: int = 96) -> list[RgbImage]:
    rng = np.random.default_rng(seed)
    return [oriented_texture(rng, size) for _ in range(count)]


def texture_classes(seed: int, per_class: int, n_classes: int = 3, size: int = 96,
                    jitter: float = 0.12):
    """Images whose class is the grating orientation ``c * pi / n_classes``."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(per_class):
        for c in range(n_classes):
            theta = c * np.pi / n_classes + rng.uniform(-jitter, jitter)
            images.append(oriented_texture(rng, size, theta))
            labels.append(c)
    return images, labels


def raw_pixel_samples(images, count: int, seed: int, shape=(8, 16)) -> np.ndarray:
    """Random RGB pixel patches flattened to ``3 * h * w`` values, mean-removed and L2-normalised."""
    rng = np.random.default_rng(seed)
    h, w = shape
    per = -(-count // len(images))
    out = []
    for img in images:
        ys = rng.integers(0, img.height - h + 1, size=per)
        xs = rng.integers(0, img.width - w + 1, size=per)
        for y, x in zip(ys, xs):
            v = img.planes[:, y:y + h, x:x + w].ravel()
            v = v - v.mean()
            n = np.linalg.norm(v)
            out.append(v / n if n > 0 else v)
    return np.asarray(out[:count])


def head_image(rng: np.random.Generator, size: int = 96) -> RgbImage:
    """Right-facing cartoon head: disc, beak to the right, eye, crown band."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = rng.uniform(0.1, 0.9, size=3)
    planes = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    cx = size * rng.uniform(0.38, 0.48)
    cy = size * rng.uniform(0.45, 0.55)
    r = size * rng.uniform(0.24, 0.3)
    head_col = rng.uniform(0.1, 0.9, size=3)
    if np.abs(head_col - bg).max() < 0.3:
        head_col = 1.0 - bg
    disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    planes[:, disc] = head_col[:, None]
    crown = disc & (yy < cy - 0.55 * r)
    planes[:, crown] = rng.uniform(0.0, 1.0, size=3)[:, None]
    # beak: triangle from the disc edge pointing right
    length = r * rng.uniform(0.7, 1.1)
    half = r * rng.uniform(0.2, 0.32)
    bx0 = cx + 0.85 * r
    t = (xx - bx0) / length
    beak = (t >= 0) & (t <= 1) & (np.abs(yy - cy) <= half * (1 - t))
    planes[:, beak] = np.array([0.95, rng.uniform(0.5, 0.8), 0.1])[:, None]
    ex, ey = cx + 0.35 * r, cy - 0.2 * r
    eye = (xx - ex) ** 2 + (yy - ey) ** 2 <= (0.13 * r) ** 2
    planes[:, eye] = 0.02
    planes += 0.03 * rng.standard_normal(planes.shape)
    return RgbImage(np.clip(planes, 0.0, 1.0))


def mirrored_heads(seed: int, pairs: int, size: int = 96):
    """``pairs`` right-facing heads each followed by its mirrored left twin."""
    rng = np.random.default_rng(seed)
    images, directions = [], []
    for _ in range(pairs):
        right = head_image(rng, size)
        images += [right, flip_horizontal(right)]
        directions += ["right", "left"]
    return images, directions


def write_texture_dataset(out_dir, seed: int = 0, per_class_train: int = 20,
                          per_class_test: int = 20, n_classes: int = 3, size: int = 96) -> Path:
    """Write PPM images and a JSON Lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for split, count, sub in (("train", per_class_train, 0), ("test", per_class_test, 1)):
        images, labels = texture_classes(seed * 2 + sub, count, n_classes, size)
        for i, (img, lab) in enumerate(zip(images, labels)):
            rel = f"images/{split}_{i:04d}.ppm"
            save_ppm(img, out_dir / rel)
            lines.append({"image_path": rel, "label": int(lab), "split": split})
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in lines))
    return manifest
