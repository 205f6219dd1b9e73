"""Synthetic 4-class 16x16 toy dataset.

Each class pairs a base color with a shape (square, disk, cross, stripes);
samples add position jitter and pixel noise. Pixel values are quantized to
8-bit steps so PNG round trips are bit-exact. Variant "b" is a disjoint
second dataset (different palette and shapes) for the robustness scenario.
"""

from __future__ import annotations

import numpy as np

from clmark.errors import InvalidInputError
from clmark.imagecore import ImageTensor

CLASSES = ("square", "disk", "cross", "stripes")
CLASSES_B = ("ring", "diag", "hbar", "dots")

_PALETTE_A = {
    "square": (0.9, 0.2, 0.2),
    "disk": (0.2, 0.8, 0.3),
    "cross": (0.25, 0.35, 0.95),
    "stripes": (0.9, 0.85, 0.2),
}
_PALETTE_B = {
    "ring": (0.85, 0.4, 0.85),
    "diag": (0.3, 0.85, 0.85),
    "hbar": (0.95, 0.6, 0.25),
    "dots": (0.55, 0.55, 0.55),
}


def _draw_shape(canvas: np.ndarray, cls: str, cy: int, cx: int, color, side: int):
    r = side // 4
    yy, xx = np.mgrid[0:side, 0:side]
    if cls == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif cls == "disk":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif cls == "cross":
        mask = ((np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= r)) | (
            (np.abs(xx - cx) <= 1) & (np.abs(yy - cy) <= r)
        )
    elif cls == "stripes":
        mask = (yy % 4 < 2) & (np.abs(xx - cx) <= r + 2)
    elif cls == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r) & (d2 >= (r - 2) ** 2)
    elif cls == "diag":
        mask = np.abs((yy - cy) - (xx - cx)) <= 1
    elif cls == "hbar":
        mask = np.abs(yy - cy) <= 2
    elif cls == "dots":
        mask = ((yy % 4 == cy % 4) & (xx % 4 == cx % 4))
    else:
        raise InvalidInputError(f"unknown toy class {cls!r}")
    canvas[mask] = color


def make_toy_image(cls: str, rng, side: int = 16, variant: str = "a") -> ImageTensor:
    palette = _PALETTE_A if variant == "a" else _PALETTE_B
    if cls not in palette:
        raise InvalidInputError(f"class {cls!r} not in variant {variant!r}")
    base = np.array(palette[cls])
    bg = rng.uniform(0.05, 0.25)
    canvas = np.full((side, side, 3), bg)
    jitter = side // 8
    cy = side // 2 + int(rng.integers(-jitter, jitter + 1))
    cx = side // 2 + int(rng.integers(-jitter, jitter + 1))
    color = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    _draw_shape(canvas, cls, cy, cx, color, side)
    canvas += rng.normal(0.0, 0.02, size=canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0)
    # 8-bit quantization so saved PNGs round-trip losslessly
    canvas = np.round(canvas * 255.0) / 255.0
    return ImageTensor(canvas)


def make_toy_dataset(
    n: int, seed: int = 0, side: int = 16, variant: str = "a"
) -> list[tuple[ImageTensor, str]]:
    """n images cycling through the variant's four classes, deterministically."""
    if n < 0:
        raise InvalidInputError("n must be non-negative")
    classes = CLASSES if variant == "a" else CLASSES_B
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70F]))
    out = []
    for i in range(n):
        cls = classes[i % len(classes)]
        out.append((make_toy_image(cls, rng, side, variant), cls))
    return out
