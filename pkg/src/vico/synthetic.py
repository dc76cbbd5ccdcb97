"""Synthetic sprite corpora with exact ground-truth masks.

One "concept" is a sprite: a fixed shape cutout over a fixed color texture.
A dataset renders the same sprite at random positions over random smooth
backgrounds, so appearance is constant while position and background vary.
The backbone warm-up uses a procedural pool of *different* sprites, each
tied to a vocabulary noun, which is what teaches the cross-attention to
read identity from the prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "Sprite",
    "random_sprite",
    "compose_scene",
    "generate_dataset",
    "PRETRAIN_WORDS",
]

PRETRAIN_WORDS = ["toy", "cat", "dog", "duck", "bear", "clock", "boot", "vase", "barn", "pot", "bowl", "plush"]


@dataclass
class Sprite:
    rgb: np.ndarray  # [s, s, 3] uint8
    alpha: np.ndarray  # [s, s] bool

    @property
    def size(self) -> int:
        return self.rgb.shape[0]


def random_sprite(rng: np.random.Generator, size: int) -> Sprite:
    """Fixed texture (coarse color grid) under a random convex-ish shape."""
    cells = 4
    grid = rng.integers(110, 256, size=(cells, cells, 3), dtype=np.int64)
    reps = int(np.ceil(size / cells))
    rgb = np.repeat(np.repeat(grid, reps, axis=0), reps, axis=1)[:size, :size].astype(np.uint8)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    r = size / 2.0
    kind = int(rng.integers(0, 3))
    if kind == 0:  # ellipse
        ay, ax = rng.uniform(0.75, 1.0, size=2)
        alpha = ((yy - cy) / (r * ay)) ** 2 + ((xx - cx) / (r * ax)) ** 2 <= 1.0
    elif kind == 1:  # diamond
        alpha = (np.abs(yy - cy) + np.abs(xx - cx)) <= r
    else:  # rounded square
        alpha = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r * rng.uniform(0.8, 0.95)
    return Sprite(rgb, alpha)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth two-corner gradient, kept dim so the sprite stands out."""
    c0 = rng.integers(10, 110, size=3).astype(np.float64)
    c1 = rng.integers(10, 110, size=3).astype(np.float64)
    ramp = (np.mgrid[0:size, 0:size][rng.integers(0, 2)]).astype(np.float64) / max(size - 1, 1)
    bg = c0[None, None, :] * (1.0 - ramp[..., None]) + c1[None, None, :] * ramp[..., None]
    return np.round(bg).astype(np.uint8)


def compose_scene(rng: np.random.Generator, sprite: Sprite, image_size: int) -> tuple:
    """Place the sprite at a random position; returns (image, bool mask)."""
    if sprite.size > image_size:
        raise ValueError(f"sprite of {sprite.size}px does not fit a {image_size}px image")
    img = _background(rng, image_size)
    lim = image_size - sprite.size
    oy = int(rng.integers(0, lim + 1))
    ox = int(rng.integers(0, lim + 1))
    mask = np.zeros((image_size, image_size), dtype=bool)
    mask[oy : oy + sprite.size, ox : ox + sprite.size] = sprite.alpha
    region = img[oy : oy + sprite.size, ox : ox + sprite.size]
    region[sprite.alpha] = sprite.rgb[sprite.alpha]
    return img, mask


def generate_dataset(out_dir, n_images: int, image_size: int = 32, seed: int = 0, sprite_frac: float = 0.55) -> dict:
    """Write the personalization corpus: images, exact masks, manifest JSON."""
    if n_images < 1:
        raise ValueError("need at least one image")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sprite = random_sprite(rng, max(4, round(image_size * sprite_frac)))
    images, masks = [], []
    for k in range(n_images):
        img, mask = compose_scene(rng, sprite, image_size)
        # generator self-check: mask pixels are exactly the composited sprite
        assert np.array_equal(img[mask], sprite.rgb[sprite.alpha]), "mask does not cover the sprite"
        img_name, mask_name = f"img_{k:03d}.png", f"mask_{k:03d}.png"
        Image.fromarray(img, "RGB").save(out / img_name, format="PNG")
        Image.fromarray(mask.astype(np.uint8) * 255, "L").save(out / mask_name, format="PNG")
        images.append(img_name)
        masks.append(mask_name)
    manifest = {
        "kind": "synthetic-sprite",
        "seed": seed,
        "image_size": image_size,
        "images": images,
        "masks": masks,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def pretrain_pool(rng: np.random.Generator, n_sprites: int, image_size: int, sprite_frac: float = 0.55) -> list:
    """Sprites for backbone warm-up, each bound to a vocabulary noun."""
    if n_sprites > len(PRETRAIN_WORDS):
        raise ValueError(f"at most {len(PRETRAIN_WORDS)} warm-up sprites supported")
    size = max(4, round(image_size * sprite_frac))
    return [(PRETRAIN_WORDS[k], random_sprite(rng, size)) for k in range(n_sprites)]
