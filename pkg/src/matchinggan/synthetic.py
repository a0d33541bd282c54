"""Procedural stroke-glyph dataset standing in for Omniglot-like characters.

Every category is a fixed set of quadratic Bezier strokes; every sample of a
category re-draws those strokes with control-point jitter, a random
similarity transform and a random pen width.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SUPERSAMPLE = 4


def _category_strokes(rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(2, 5))
    return rng.uniform(0.15, 0.85, size=(n, 3, 2))


def _bezier(ctrl: np.ndarray, steps: int = 24) -> np.ndarray:
    t = np.linspace(0.0, 1.0, steps)[:, None]
    return (1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1] + t**2 * ctrl[2]


def render_glyph(
    strokes: np.ndarray,
    rng: np.random.Generator,
    size: int = 32,
    jitter: float = 0.035,
    max_rotation: float = 0.2,
) -> np.ndarray:
    """Render one jittered instance of ``strokes`` as a uint8 ``(size, size)`` array."""
    big = size * SUPERSAMPLE
    canvas = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(canvas)
    angle = rng.uniform(-max_rotation, max_rotation)
    scale = rng.uniform(0.85, 1.1)
    shift = rng.uniform(-0.07, 0.07, size=2)
    rot = scale * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    width = max(1, int(round(rng.uniform(1.6, 3.0) * SUPERSAMPLE)))
    for ctrl in strokes:
        pts = _bezier(ctrl + rng.normal(0.0, jitter, size=ctrl.shape))
        pts = (pts - 0.5) @ rot.T + 0.5 + shift
        xy = [tuple(p) for p in np.clip(pts, 0.0, 1.0) * (big - 1)]
        draw.line(xy, fill=255, width=width, joint="curve")
    return np.asarray(canvas.resize((size, size), Image.BOX), dtype=np.uint8)


def make_glyph_arrays(
    n_categories: int, per_category: int, size: int = 32, seed: int = 0
) -> dict[int, np.ndarray]:
    """Glyph images as uint8 arrays ``{category: (n, size, size)}``."""
    rng = np.random.default_rng(seed)
    out = {}
    for c in range(n_categories):
        strokes = _category_strokes(rng)
        out[c] = np.stack([render_glyph(strokes, rng, size) for _ in range(per_category)])
    return out


def make_glyph_dataset(
    root, n_categories: int = 40, per_category: int = 40, size: int = 32, seed: int = 0
) -> Path:
    """Write a glyph dataset as ``root/glyph_XXX/NNN.png``."""
    root = Path(root)
    for c, imgs in make_glyph_arrays(n_categories, per_category, size, seed).items():
        d = root / f"glyph_{c:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            Image.fromarray(img, mode="L").save(d / f"{i:03d}.png")
    return root
