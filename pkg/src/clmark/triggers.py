"""Watermark trigger construction and compositing layouts.

Covers the five desk-scale trigger families (patch, DCT chrominance,
concatenation, corner-layout, and composite canvas) plus the crop-pair
success probability of compositing layouts, evaluated analytically or by
Monte Carlo.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from clmark.errors import InvalidInputError, UnsupportedModeError
from clmark.imagecore import (
    RGB,
    DctBlockPlan,
    ImageTensor,
    dct2_blockwise,
    idct2_blockwise,
    rgb_to_ycbcr,
    ycbcr_to_rgb,
)

METHOD_PATCH = "patch"
METHOD_CTRL = "ctrl"
METHOD_POISONEDENCODER = "poisonedencoder"
METHOD_CORRUPTENCODER = "corruptencoder"
METHOD_NA = "na"
METHOD_BLTO = "blto"

METHODS = (
    METHOD_PATCH,
    METHOD_CTRL,
    METHOD_POISONEDENCODER,
    METHOD_CORRUPTENCODER,
    METHOD_NA,
    METHOD_BLTO,
)

# Methods whose watermark samples are trigger-modified target-class hosts.
HOST_BASED_METHODS = (METHOD_PATCH, METHOD_CTRL, METHOD_BLTO)


@dataclass(frozen=True)
class TriggerSpec:
    """A watermark key: method identifier plus all of its parameters."""

    method: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown trigger method {self.method!r}")
        _validate_params(self.method, self.params)

    def canonical_json(self) -> str:
        doc = {"method": self.method, "params": self.params, "seed": self.seed}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @staticmethod
    def from_json(text: str) -> "TriggerSpec":
        doc = json.loads(text)
        return TriggerSpec(doc["method"], doc.get("params", {}), doc.get("seed", 0))


def _validate_params(method: str, params: dict):
    if method == METHOD_CTRL:
        if params.get("magnitude", 0.1) <= 0:
            raise InvalidInputError("CTRL magnitude must be > 0")
    if method == METHOD_PATCH:
        size = params.get("size", 4)
        if size < 0:
            raise InvalidInputError("patch size must be non-negative")


def default_patch(size: int = 4, channels: int = 3) -> ImageTensor:
    """High-contrast checkerboard patch (the default patch trigger pixels)."""
    yy, xx = np.mgrid[0:size, 0:size]
    board = ((yy + xx) % 2).astype(np.float64)
    return ImageTensor(np.repeat(board[:, :, np.newaxis], channels, axis=2))


def default_patch_size(image_side: int) -> int:
    """Patch side scaled proportionally: 4 px per 32 px of image side, min 2."""
    return max(2, round(image_side * 4 / 32))


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise InvalidInputError(f"degenerate rectangle {self}")

    @property
    def w(self) -> int:
        return self.x1 - self.x0

    @property
    def h(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.w * self.h

    def contains(self, other: "Rect") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )

    def overlaps(self, other: "Rect") -> bool:
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )


@dataclass(frozen=True)
class LayoutSpec:
    """Realized geometry of a compositing trigger canvas."""

    canvas_w: int
    canvas_h: int
    ref_rect: Rect
    shadow_rect: Rect
    trigger_rect: Rect
    unit_len: int

    def __post_init__(self):
        canvas = Rect(0, 0, self.canvas_w, self.canvas_h)
        if not canvas.contains(self.ref_rect) or not canvas.contains(self.shadow_rect):
            raise InvalidInputError("reference/shadow rectangles must lie inside the canvas")
        if self.ref_rect.overlaps(self.shadow_rect):
            raise InvalidInputError("reference and shadow rectangles must not overlap")
        if self.trigger_rect.area > 0 and not self.shadow_rect.contains(self.trigger_rect):
            raise InvalidInputError("trigger rectangle must lie inside the shadow rectangle")


@dataclass(frozen=True)
class CropModel:
    """Random-crop distribution: uniform area scale, aspect, and position."""

    scale_range: tuple[float, float] = (0.2, 1.0)
    aspect_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        smin, smax = self.scale_range
        if not (0 < smin <= smax <= 1):
            raise InvalidInputError("scale_range must satisfy 0 < min <= max <= 1")
        amin, amax = self.aspect_range
        if amin <= 0 or amax < amin:
            raise InvalidInputError("aspect_range bounds must be positive and ordered")


def apply_patch_trigger(
    img: ImageTensor,
    patch: ImageTensor,
    pos: tuple[int, int] | None = None,
    seed: int = 0,
) -> ImageTensor:
    """Paste ``patch`` onto ``img`` at ``pos`` (y, x), or at a seeded random position."""
    ph, pw = patch.height, patch.width
    if ph == 0 or pw == 0:
        return img
    if patch.channels != img.channels:
        raise InvalidInputError("patch channel count must match image")
    if pos is None:
        rng = np.random.default_rng(seed)
        pos = (
            int(rng.integers(0, img.height - ph + 1)),
            int(rng.integers(0, img.width - pw + 1)),
        )
    y, x = pos
    if y < 0 or x < 0 or y + ph > img.height or x + pw > img.width:
        raise InvalidInputError(
            f"patch {ph}x{pw} at ({y},{x}) out of bounds for {img.height}x{img.width} image"
        )
    out = np.array(img.data)
    out[y : y + ph, x : x + pw, :] = patch.data
    return img.with_data(out)


DEFAULT_CTRL_BANDS = ((3, 3), (7, 7))
DEFAULT_CTRL_MAGNITUDE = 2.5


def apply_ctrl_trigger(
    img: ImageTensor,
    bands: tuple[tuple[int, int], ...] = DEFAULT_CTRL_BANDS,
    magnitude: float = DEFAULT_CTRL_MAGNITUDE,
    plan: DctBlockPlan | None = None,
) -> ImageTensor:
    """Add ``magnitude`` to DCT bands of both chrominance planes, per block.

    The image is converted to YCbCr, each Cb/Cr block gets the coefficient
    bump, and the result is converted back to RGB and clamped. The luma
    plane is untouched in the YCbCr domain.
    """
    if img.colorspace != RGB or img.channels != 3:
        raise InvalidInputError("CTRL trigger expects a 3-channel RGB image")
    plan = plan or DctBlockPlan(block_size=8, channel_mask=(1, 2))
    if set(plan.channel_mask) != {1, 2}:
        plan = DctBlockPlan(plan.block_size, (1, 2))
    for u, v in bands:
        if not (0 <= u < plan.block_size and 0 <= v < plan.block_size):
            raise InvalidInputError(
                f"band ({u},{v}) out of range for block size {plan.block_size}"
            )
    ycc = rgb_to_ycbcr(img)
    coeffs = dct2_blockwise(ycc, plan)
    b = plan.block_size
    for c in plan.channel_mask:
        for u, v in bands:
            coeffs[u::b, v::b, c] += magnitude
    pixels = idct2_blockwise(coeffs, plan)
    return ycbcr_to_rgb(ImageTensor(np.clip(pixels, 0.0, 1.0), "YCbCr"))


LAYOUT_TOP_BOTTOM = "top-bottom"
LAYOUT_BOTTOM_TOP = "bottom-top"
LAYOUT_LEFT_RIGHT = "left-right"
LAYOUT_RIGHT_LEFT = "right-left"
PE_LAYOUTS = (LAYOUT_TOP_BOTTOM, LAYOUT_BOTTOM_TOP, LAYOUT_LEFT_RIGHT, LAYOUT_RIGHT_LEFT)


def compose_poisonedencoder(
    target: ImageTensor, reference: ImageTensor, layout: str
) -> ImageTensor:
    """Concatenate target and reference on a doubled canvas, no gap or overlap."""
    if target.data.shape != reference.data.shape:
        raise InvalidInputError("target and reference must have equal dimensions")
    if layout not in PE_LAYOUTS:
        raise InvalidInputError(f"unknown layout {layout!r}")
    if layout == LAYOUT_TOP_BOTTOM:
        canvas = np.concatenate([target.data, reference.data], axis=0)
    elif layout == LAYOUT_BOTTOM_TOP:
        canvas = np.concatenate([reference.data, target.data], axis=0)
    elif layout == LAYOUT_LEFT_RIGHT:
        canvas = np.concatenate([target.data, reference.data], axis=1)
    else:
        canvas = np.concatenate([reference.data, target.data], axis=1)
    return ImageTensor(canvas, target.colorspace)


def remainder_centroid(bg_w: int, bg_h: int, ref: Rect) -> tuple[float, float]:
    """Centroid of the background region outside ``ref`` (continuous coords)."""
    a_full = bg_w * bg_h
    a_ref = ref.area
    if a_full <= a_ref:
        raise InvalidInputError("reference covers the whole background")
    cx = (a_full * bg_w / 2 - a_ref * (ref.x0 + ref.x1) / 2) / (a_full - a_ref)
    cy = (a_full * bg_h / 2 - a_ref * (ref.y0 + ref.y1) / 2) / (a_full - a_ref)
    return cx, cy


def compose_corruptencoder(
    reference_obj: ImageTensor,
    trigger: ImageTensor,
    background: ImageTensor,
    rng_seed: int = 0,
) -> tuple[ImageTensor, LayoutSpec]:
    """Place the reference object at a seeded corner of the background and the
    trigger at the centroid of the remaining area."""
    rw, rh = reference_obj.width, reference_obj.height
    bw, bh = background.width, background.height
    tw, th = trigger.width, trigger.height
    if bw < 2 * rw or bh < 2 * rh:
        raise InvalidInputError(
            f"background {bw}x{bh} must be at least twice the {rw}x{rh} reference"
        )
    if reference_obj.channels != background.channels or trigger.channels != background.channels:
        raise InvalidInputError("channel counts must match")
    rng = np.random.default_rng(rng_seed)
    corner = int(rng.integers(0, 4))  # 0 TL, 1 TR, 2 BL, 3 BR
    rx = 0 if corner in (0, 2) else bw - rw
    ry = 0 if corner in (0, 1) else bh - rh
    ref_rect = Rect(rx, ry, rx + rw, ry + rh)

    cx, cy = remainder_centroid(bw, bh, ref_rect)
    tx = int(round(cx - tw / 2))
    ty = int(round(cy - th / 2))
    trig_rect = Rect(tx, ty, tx + tw, ty + th)
    canvas_rect = Rect(0, 0, bw, bh)
    if not canvas_rect.contains(trig_rect) or (
        trig_rect.area > 0 and trig_rect.overlaps(ref_rect)
    ):
        raise InvalidInputError("trigger does not fit in the remaining area")

    # Shadow: the rectangular complement strip opposite the reference, which
    # contains the centroid when the background is >= 2x the reference.
    sx0, sx1 = (rw, bw) if rx == 0 else (0, bw - rw)
    shadow_rect = Rect(sx0, 0, sx1, bh)
    if trig_rect.area > 0 and not shadow_rect.contains(trig_rect):
        sy0, sy1 = (rh, bh) if ry == 0 else (0, bh - rh)
        shadow_rect = Rect(0, sy0, bw, sy1)
    out = np.array(background.data)
    out[ry : ry + rh, rx : rx + rw, :] = reference_obj.data
    if trig_rect.area > 0:
        out[ty : ty + th, tx : tx + tw, :] = trigger.data
    layout = LayoutSpec(bw, bh, ref_rect, shadow_rect, trig_rect, unit_len=rw)
    return background.with_data(out), layout


def compose_na(
    shadow: ImageTensor, reference: ImageTensor, trigger: ImageTensor
) -> tuple[ImageTensor, LayoutSpec]:
    """Composite canvas: reference at (0,0), trigger-embedded shadow beside it.

    Canvas is twice as wide as the (square, equal-sided) inputs; the trigger
    is centered within the shadow region.
    """
    r = reference.height
    if reference.width != r or shadow.height != r or shadow.width != r:
        raise InvalidInputError("shadow and reference must be square with equal side")
    if shadow.channels != reference.channels:
        raise InvalidInputError("channel counts must match")
    tw, th = trigger.width, trigger.height
    if tw > r or th > r:
        raise InvalidInputError("trigger must fit inside the shadow image")
    shadow_with_trigger = shadow
    ty = (r - th) // 2
    tx = (r - tw) // 2
    if tw > 0 and th > 0:
        shadow_with_trigger = apply_patch_trigger(shadow, trigger, (ty, tx))
    canvas = np.concatenate([reference.data, shadow_with_trigger.data], axis=1)
    layout = LayoutSpec(
        canvas_w=2 * r,
        canvas_h=r,
        ref_rect=Rect(0, 0, r, r),
        shadow_rect=Rect(r, 0, 2 * r, r),
        trigger_rect=Rect(r + tx, ty, r + tx + tw, ty + th),
        unit_len=r,
    )
    return ImageTensor(canvas, reference.colorspace), layout


def _contain_interval(lo_outer, hi_outer, lo_inner, hi_inner, side):
    """Valid top-left range for a crop of size ``side`` that contains
    [lo_inner, hi_inner] and stays within [lo_outer, hi_outer]."""
    lo = max(lo_outer, hi_inner - side)
    hi = min(lo_inner, hi_outer - side)
    return max(0.0, hi - lo)


def _p_contain(rect_inner: Rect, rect_outer: Rect, side, cw, ch):
    """P(crop of given side contains rect_inner and lies inside rect_outer),
    position uniform over the canvas. Vectorized over ``side``."""
    side = np.asarray(side, dtype=np.float64)
    fits = (side <= cw) & (side <= ch)
    denom_x = np.maximum(cw - side, 0.0)
    denom_y = np.maximum(ch - side, 0.0)
    len_x = np.maximum(
        0.0,
        np.minimum(rect_inner.x0, rect_outer.x1 - side)
        - np.maximum(rect_outer.x0, rect_inner.x1 - side),
    )
    len_y = np.maximum(
        0.0,
        np.minimum(rect_inner.y0, rect_outer.y1 - side)
        - np.maximum(rect_outer.y0, rect_inner.y1 - side),
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.where(denom_x > 0, len_x / denom_x, 0.0)
        py = np.where(denom_y > 0, len_y / denom_y, 0.0)
    return np.where(fits, px * py, 0.0)


def _p_inside(rect: Rect, side, cw, ch):
    """P(crop of given side lies inside rect), position uniform over canvas."""
    side = np.asarray(side, dtype=np.float64)
    fits = (side <= cw) & (side <= ch)
    denom_x = np.maximum(cw - side, 0.0)
    denom_y = np.maximum(ch - side, 0.0)
    len_x = np.maximum(0.0, rect.w - side)
    len_y = np.maximum(0.0, rect.h - side)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.where(denom_x > 0, len_x / denom_x, 0.0)
        py = np.where(denom_y > 0, len_y / denom_y, 0.0)
    return np.where(fits, px * py, 0.0)


def crop_pair_event_probability_at_scale(layout: LayoutSpec, s, crop_area: float):
    """p1(s) * p2(s): joint success probability of the crop pair at scale s."""
    side = np.sqrt(np.asarray(s, dtype=np.float64) * crop_area)
    p1 = _p_contain(layout.trigger_rect, layout.shadow_rect, side, layout.canvas_w, layout.canvas_h)
    p2 = _p_inside(layout.ref_rect, side, layout.canvas_w, layout.canvas_h)
    return p1 * p2


def _scale_breakpoints(layout: LayoutSpec, smin, smax, area):
    """Scales where the piecewise-linear position intervals change regime."""
    pts = set()
    rect_inner, rect_outer = layout.trigger_rect, layout.shadow_rect
    candidates = [
        rect_inner.x1 - rect_outer.x0,
        rect_outer.x1 - rect_inner.x0,
        rect_inner.y1 - rect_outer.y0,
        rect_outer.y1 - rect_inner.y0,
        rect_outer.w,
        rect_outer.h,
        layout.ref_rect.w,
        layout.ref_rect.h,
        rect_inner.w,
        rect_inner.h,
    ]
    for side in candidates:
        if side > 0:
            s = side * side / area
            if smin < s < smax:
                pts.add(s)
    for dim in (layout.canvas_w, layout.canvas_h):
        s = dim * dim / area
        if smin < s < smax:
            pts.add(s)
    return sorted(pts)


def crop_pair_success_probability(
    layout: LayoutSpec,
    crop: CropModel,
    mode: str = "analytic",
    n_samples: int = 1_000_000,
    seed: int = 0,
) -> float:
    """Probability that two random crops isolate the trigger+shadow and the
    reference regions respectively, with disjoint crops.

    Both crops share one area scale drawn uniformly from the crop model (the
    coupling in the closed-form integral); positions are independent.
    ``mode`` is "analytic" (square crops only) or "montecarlo".
    """
    area = float(layout.canvas_w * layout.canvas_h)
    smin, smax = crop.scale_range
    if mode == "analytic":
        if crop.aspect_range != (1.0, 1.0):
            raise UnsupportedModeError(
                "analytic mode supports only square crops (aspect_range (1, 1))"
            )
        if smax == smin:
            return float(crop_pair_event_probability_at_scale(layout, smin, area))
        pts = _scale_breakpoints(layout, smin, smax, area)
        val, _ = quad(
            lambda s: crop_pair_event_probability_at_scale(layout, s, area),
            smin,
            smax,
            points=pts or None,
            limit=200,
        )
        return float(val / (smax - smin))
    if mode == "montecarlo":
        return _crop_pair_mc(layout, crop, n_samples, seed)
    raise UnsupportedModeError(f"unknown mode {mode!r}")


def _crop_pair_mc(layout: LayoutSpec, crop: CropModel, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    area = float(layout.canvas_w * layout.canvas_h)
    cw, ch = float(layout.canvas_w), float(layout.canvas_h)
    smin, smax = crop.scale_range
    amin, amax = crop.aspect_range
    s = rng.uniform(smin, smax, size=n)

    def sample_crop():
        a = rng.uniform(amin, amax, size=n)
        w = np.sqrt(s * area * a)
        h = np.sqrt(s * area / a)
        fits = (w <= cw) & (h <= ch)
        x = rng.uniform(0.0, np.maximum(cw - w, 1e-300))
        y = rng.uniform(0.0, np.maximum(ch - h, 1e-300))
        return x, y, w, h, fits

    x1, y1, w1, h1, f1 = sample_crop()
    x2, y2, w2, h2, f2 = sample_crop()
    trig, sh, ref = layout.trigger_rect, layout.shadow_rect, layout.ref_rect
    ok1 = (
        f1
        & (x1 <= trig.x0) & (x1 + w1 >= trig.x1)
        & (y1 <= trig.y0) & (y1 + h1 >= trig.y1)
        & (x1 >= sh.x0) & (x1 + w1 <= sh.x1)
        & (y1 >= sh.y0) & (y1 + h1 <= sh.y1)
    )
    ok2 = (
        f2
        & (x2 >= ref.x0) & (x2 + w2 <= ref.x1)
        & (y2 >= ref.y0) & (y2 + h2 <= ref.y1)
    )
    disjoint = (
        (x1 + w1 <= x2) | (x2 + w2 <= x1) | (y1 + h1 <= y2) | (y2 + h2 <= y1)
    )
    return float(np.mean(ok1 & ok2 & disjoint))
