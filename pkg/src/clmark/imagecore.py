"""Image representation, codecs, color conversion, and blockwise 2-D DCT.

Images are stored as float arrays in [0, 1]; 8-bit codecs quantize on
save. Color conversion uses full-range BT.601 coefficients and the DCT is
orthonormal (type II with ``norm="ortho"``) so Parseval holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.fft import dctn, idctn

from clmark.errors import ImageIOError, InvalidInputError

RGB = "RGB"
YCBCR = "YCbCr"

# Full-range BT.601 (JFIF) matrices.
_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCBCR_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136286, -0.714136286],
        [1.0, 1.772, 0.0],
    ]
)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


@dataclass(frozen=True)
class ImageTensor:
    """An H x W x C image with scalars in [0, 1] and a color-space tag."""

    data: np.ndarray
    colorspace: str = RGB

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise InvalidInputError(
                f"image data must be HxW or HxWxC with C in (1, 3), got shape {arr.shape}"
            )
        if self.colorspace not in (RGB, YCBCR):
            raise InvalidInputError(f"unknown colorspace {self.colorspace!r}")
        if self.colorspace == YCBCR and arr.shape[2] != 3:
            raise InvalidInputError("YCbCr images must have 3 channels")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("image data contains non-finite values")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray, colorspace: str | None = None) -> "ImageTensor":
        return ImageTensor(data, colorspace or self.colorspace)

    def flat(self) -> np.ndarray:
        """Row-major flattened copy, for encoder input."""
        return self.data.reshape(-1).copy()


@dataclass(frozen=True)
class DctBlockPlan:
    """Blockwise transform layout: block size and the channels it touches."""

    block_size: int = 8
    channel_mask: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.block_size < 1:
            raise InvalidInputError("block_size must be positive")
        if len(self.channel_mask) == 0:
            raise InvalidInputError("channel_mask must be non-empty")
        object.__setattr__(self, "channel_mask", tuple(sorted(set(self.channel_mask))))


def rgb_to_ycbcr(img: ImageTensor) -> ImageTensor:
    """Convert an RGB image to full-range BT.601 YCbCr, clamped to [0, 1]."""
    if img.colorspace != RGB or img.channels != 3:
        raise InvalidInputError("rgb_to_ycbcr expects a 3-channel RGB image")
    out = img.data @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET
    return ImageTensor(out, YCBCR)


def ycbcr_to_rgb(img: ImageTensor) -> ImageTensor:
    """Inverse of :func:`rgb_to_ycbcr` up to clamping."""
    if img.colorspace != YCBCR:
        raise InvalidInputError("ycbcr_to_rgb expects a YCbCr image")
    out = (img.data - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T
    return ImageTensor(out, RGB)


def _check_divisible(h: int, w: int, block: int):
    if h % block or w % block:
        raise InvalidInputError(
            f"image dims {h}x{w} not divisible by block size {block}; pad first"
        )


def _blocks(plane: np.ndarray, b: int) -> np.ndarray:
    """View an HxW plane as (H/b, W/b, b, b) blocks."""
    h, w = plane.shape
    return plane.reshape(h // b, b, w // b, b).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    nbh, nbw, b, _ = blocks.shape
    return blocks.transpose(0, 2, 1, 3).reshape(nbh * b, nbw * b)


def dct2_blockwise(img: ImageTensor, plan: DctBlockPlan) -> np.ndarray:
    """Orthonormal type-II 2-D DCT per block per masked channel.

    Unmasked channels are copied through unchanged. Returns a float array
    shaped like ``img.data`` (coefficients are unbounded).
    """
    _check_divisible(img.height, img.width, plan.block_size)
    bad = [c for c in plan.channel_mask if c >= img.channels]
    if bad:
        raise InvalidInputError(f"channel_mask {bad} out of range for {img.channels} channels")
    out = np.array(img.data, dtype=np.float64)
    for c in plan.channel_mask:
        blocks = _blocks(out[:, :, c], plan.block_size)
        coeffs = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
        out[:, :, c] = _unblocks(coeffs)
    return out


def idct2_blockwise(coeffs: np.ndarray, plan: DctBlockPlan, clamp: bool = False) -> np.ndarray:
    """Exact inverse of :func:`dct2_blockwise` up to float tolerance.

    Returns a raw float array; pass ``clamp=True`` to clip into [0, 1]
    (callers construct an :class:`ImageTensor` themselves, which clamps).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 3:
        raise InvalidInputError("coefficient tensor must be HxWxC")
    h, w, ch = coeffs.shape
    _check_divisible(h, w, plan.block_size)
    bad = [c for c in plan.channel_mask if c >= ch]
    if bad:
        raise InvalidInputError(f"channel_mask {bad} out of range for {ch} channels")
    out = np.array(coeffs)
    for c in plan.channel_mask:
        blocks = _blocks(out[:, :, c], plan.block_size)
        pixels = idctn(blocks, type=2, norm="ortho", axes=(-2, -1))
        out[:, :, c] = _unblocks(pixels)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def pad_edge(img: ImageTensor, block_size: int) -> ImageTensor:
    """Edge-replicate pad so both dims divide ``block_size``."""
    ph = (-img.height) % block_size
    pw = (-img.width) % block_size
    if ph == 0 and pw == 0:
        return img
    padded = np.pad(img.data, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return ImageTensor(padded, img.colorspace)


def to_uint8(img: ImageTensor) -> np.ndarray:
    return np.round(img.data * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray, colorspace: str = RGB) -> ImageTensor:
    return ImageTensor(arr.astype(np.float64) / 255.0, colorspace)


def load_image(path: str | Path) -> ImageTensor:
    """Read a PNG or binary PPM file into an RGB/grayscale ImageTensor."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                arr = np.asarray(im)[:, :, np.newaxis]
            elif im.mode == "RGB":
                arr = np.asarray(im)
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return from_uint8(arr)


def save_image(img: ImageTensor, path: str | Path):
    """Write an 8-bit PNG or binary PPM (by extension); lossless for 8-bit data."""
    path = Path(path)
    if img.colorspace != RGB:
        raise InvalidInputError("only RGB/grayscale images can be saved")
    arr = to_uint8(img)
    mode = "L" if img.channels == 1 else "RGB"
    if mode == "L":
        arr = arr[:, :, 0]
    suffix = path.suffix.lower()
    if suffix not in (".png", ".ppm"):
        raise ImageIOError(f"unsupported image extension {suffix!r} for {path}")
    try:
        im = Image.fromarray(arr, mode=mode)
        if suffix == ".ppm":
            im = im.convert("RGB")
        im.save(path)
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def image_equal(a: ImageTensor, b: ImageTensor) -> bool:
    return (
        a.colorspace == b.colorspace
        and a.data.shape == b.data.shape
        and bool(np.array_equal(a.data, b.data))
    )
