"""Perceptual fidelity between clean and watermarked images (SSIM).

Uses uniform (box) windows rather than the canonical Gaussian weighting so
every window statistic has an exact closed form.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from clmark.errors import ImageIOError, InvalidInputError
from clmark.imagecore import ImageTensor, load_image

_LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


def _to_gray(img: ImageTensor) -> np.ndarray:
    if img.channels == 1:
        return img.data[:, :, 0]
    return img.data @ _LUMA


def ssim(a: ImageTensor, b: ImageTensor) -> float:
    """Mean structural similarity over sliding uniform windows, in [-1, 1]."""
    if a.data.shape != b.data.shape:
        raise InvalidInputError("ssim inputs must have identical dimensions")
    x = _to_gray(a)
    y = _to_gray(b)
    win = min(SSIM_WINDOW, x.shape[0], x.shape[1])
    wx = sliding_window_view(x, (win, win)).reshape(-1, win * win)
    wy = sliding_window_view(y, (win, win)).reshape(-1, win * win)
    mx = wx.mean(axis=1)
    my = wy.mean(axis=1)
    vx = wx.var(axis=1)
    vy = wy.var(axis=1)
    cov = ((wx - mx[:, None]) * (wy - my[:, None])).mean(axis=1)
    num = (2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def fidelity_report(clean_dir: str | Path, watermarked_dir: str | Path, manifest) -> dict:
    """Per-item and aggregate SSIM for the manifest's watermarked items.

    Host-based methods compare each watermarked file against its clean
    host; compositing methods have no clean host and are not applicable.
    """
    from clmark.embed import WatermarkManifest
    from clmark.triggers import HOST_BASED_METHODS

    assert isinstance(manifest, WatermarkManifest)
    if not manifest.watermarked_ids:
        raise InvalidInputError("manifest has no watermarked items to report on")
    if manifest.method not in HOST_BASED_METHODS:
        return {
            "method": manifest.method,
            "applicable": False,
            "items": [],
            "mean": None,
            "min": None,
        }
    clean_dir = Path(clean_dir)
    wm_dir = Path(watermarked_dir)
    items = []
    for item_id in manifest.watermarked_ids:
        clean_path = clean_dir / f"{item_id}.png"
        wm_path = wm_dir / f"{item_id}.png"
        for p in (clean_path, wm_path):
            if not p.exists():
                raise ImageIOError(f"missing image for id {item_id!r}: {p}")
        items.append({"id": item_id, "ssim": ssim(load_image(clean_path), load_image(wm_path))})
    values = [it["ssim"] for it in items]
    return {
        "method": manifest.method,
        "applicable": True,
        "items": items,
        "mean": float(np.mean(values)),
        "min": float(np.min(values)),
    }


def write_fidelity_csv(report: dict, path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "ssim"])
        for it in report["items"]:
            writer.writerow([it["id"], f"{it['ssim']:.9g}"])


def write_fidelity_json(report: dict, path: str | Path):
    with open(path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
