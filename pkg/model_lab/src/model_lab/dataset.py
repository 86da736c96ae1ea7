"""A CIFAR-like synthetic dataset: 32x32x3 images, many classes, real texture.

Each class is a textured prototype (low-frequency color field plus
mid-frequency detail); samples apply per-image geometric and photometric
jitter so a classifier has to generalize rather than match templates.
Images are stored as PNGs with a labels.json index so the directory can
be swapped for a real dataset with the same layout.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image as PILImage


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    ch, cw = coarse.shape[:2]
    ys = np.linspace(0.0, ch - 1.0, size)
    xs = np.linspace(0.0, cw - 1.0, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x1] * wx
    bottom = coarse[y1][:, x0] * (1 - wx) + coarse[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


# Per-sample film-grain amplitude. Heavy grain gives the images the local
# texture statistics of busy photos, which is what the SSIM of marked
# versus original hinges on; class identity stays in the low frequencies.
GRAIN = 0.45


def make_prototype(rng: np.random.Generator, size: int) -> np.ndarray:
    # Class identity: a smooth color field plus a vertical band pattern
    # whose spatial scale matches typical image tampering, so edits to the
    # column structure genuinely disturb the class evidence.
    base = _upsample(rng.uniform(-1, 1, (4, 4, 3)), size)
    bands = _upsample(rng.uniform(-1, 1, (1, 12, 3)), size)
    return np.clip(0.5 + 0.12 * base + 0.18 * bands, 0.0, 1.0)


def make_sample(proto: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = proto
    shift_y, shift_x = rng.integers(-2, 3, size=2)
    img = np.roll(img, (int(shift_y), int(shift_x)), axis=(0, 1))
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    brightness = rng.normal(0.0, 0.05)
    img = img + brightness + rng.uniform(-GRAIN, GRAIN, img.shape)
    return np.clip(img, 0.0, 1.0)


def save_png(img: np.ndarray, path: str) -> None:
    pixels = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    # Light compression: these trees hold tens of thousands of small files.
    PILImage.fromarray(pixels, mode="RGB").save(path, format="PNG", compress_level=1)


def load_png(path: str) -> np.ndarray:
    return np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0


def synthesize(dataset_dir: str, train_size: int, test_size: int,
               num_classes: int, image_size: int, seed: int) -> None:
    """Write train/ and test/ PNG trees plus labels.json under dataset_dir."""
    rng = np.random.default_rng(seed)
    prototypes = [make_prototype(rng, image_size) for _ in range(num_classes)]
    labels: dict[str, dict[str, int]] = {"train": {}, "test": {}}
    for split, count in (("train", train_size), ("test", test_size)):
        split_dir = os.path.join(dataset_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        per_class = count // num_classes
        idx = 0
        for cls in range(num_classes):
            for _ in range(per_class):
                name = f"{idx:06d}.png"
                save_png(make_sample(prototypes[cls], rng), os.path.join(split_dir, name))
                labels[split][name] = cls
                idx += 1
    with open(os.path.join(dataset_dir, "labels.json"), "w", encoding="utf-8") as fh:
        json.dump(labels, fh, sort_keys=True)


def load_split(dataset_dir: str, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load one split as (images, labels, names); names are sorted."""
    with open(os.path.join(dataset_dir, "labels.json"), "r", encoding="utf-8") as fh:
        labels = json.load(fh)[split]
    names = sorted(labels)
    split_dir = os.path.join(dataset_dir, split)
    images = np.stack([load_png(os.path.join(split_dir, n)) for n in names])
    y = np.array([labels[n] for n in names], dtype=np.int64)
    return images, y, names


def ensure_dataset(dataset_dir: str, train_size: int, test_size: int,
                   num_classes: int, image_size: int, seed: int) -> None:
    if not os.path.exists(os.path.join(dataset_dir, "labels.json")):
        synthesize(dataset_dir, train_size, test_size, num_classes, image_size, seed)
