"""Crop-pair success probability: closed form vs. Monte Carlo.

Compositing watermarks (PoisonedEncoder, CorruptEncoder, NA) rely on random
crops sometimes isolating the trigger region and the reference region in the
two augmented views of one canvas. This demo builds an NA canvas layout and a
CorruptEncoder layout, evaluates the success probability analytically
(piecewise integral over the shared crop scale), and checks it against a
million-sample Monte Carlo estimate. Runs in a few seconds.

    python3 demos/02_crop_probability.py
"""

import math

from clmark.triggers import CropModel, LayoutSpec, Rect, crop_pair_success_probability

def na_layout(r: int, t: int) -> LayoutSpec:
    """NA composite: reference on the left half, trigger centered on the right."""
    off = (r - t) // 2
    return LayoutSpec(2 * r, r, Rect(0, 0, r, r), Rect(r, 0, 2 * r, r),
                      Rect(r + off, off, r + off + t, off + t), unit_len=r)

def corrupt_layout(bw, bh, rw, rh, tw, th) -> LayoutSpec:
    """CorruptEncoder: reference at the left edge, trigger at the remainder centroid."""
    tx = rw + (bw - rw - tw) // 2
    ty = (bh - th) // 2
    return LayoutSpec(bw, bh, Rect(0, 0, rw, rh), Rect(rw, 0, bw, bh),
                      Rect(tx, ty, tx + tw, ty + th), unit_len=rw)

crop = CropModel(scale_range=(0.02, 0.25))
for name, layout in (("NA r=16 t=6", na_layout(16, 6)),
                     ("NA r=24 t=4", na_layout(24, 4)),
                     ("CorruptEncoder 32x24", corrupt_layout(32, 24, 10, 8, 4, 4))):
    p_an = crop_pair_success_probability(layout, crop, mode="analytic")
    p_mc = crop_pair_success_probability(layout, crop, mode="montecarlo",
                                         n_samples=1_000_000, seed=0)
    sigma = math.sqrt(max(p_an * (1 - p_an), 1e-12) / 1_000_000)
    print(f"{name:22s} analytic={p_an:.5f}  montecarlo={p_mc:.5f}  "
          f"diff={abs(p_an - p_mc):.2e} (3 sigma = {3 * sigma:.2e})")
