"""Watermark-embedding pipeline.

Selects the owner-held target-class subset, generates watermark samples
from a TriggerSpec, mixes them into the released dataset directory, and
writes the watermark manifest. Datasets are flat directories of PNG files
keyed by id, described by a JSON-lines item list plus a JSON header.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from clmark.errors import CapacityError, InvalidInputError
from clmark.imagecore import ImageTensor, load_image, save_image
from clmark.toydata import make_toy_dataset
from clmark.triggers import (
    HOST_BASED_METHODS,
    METHOD_BLTO,
    METHOD_CTRL,
    METHOD_NA,
    METHOD_PATCH,
    TriggerSpec,
    apply_ctrl_trigger,
    apply_patch_trigger,
    compose_na,
    default_patch,
)

MANIFEST_ITEMS = "manifest.jsonl"
MANIFEST_HEADER = "dataset.json"
WATERMARK_MANIFEST = "watermark.json"


@dataclass(frozen=True)
class DatasetItem:
    id: str
    path: str
    label: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    items: tuple[DatasetItem, ...]
    source_hash: str
    created_at: str

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("dataset item ids must be unique")
        object.__setattr__(self, "items", tuple(self.items))

    def ids_for_class(self, cls: str | None) -> list[str]:
        return [it.id for it in self.items if it.label == cls]

    def labels(self) -> list[str]:
        return sorted({it.label for it in self.items if it.label is not None})


@dataclass(frozen=True)
class WatermarkManifest:
    trigger_fingerprint: str
    method: str
    rate: float
    target_class: str
    watermarked_ids: tuple[str, ...]
    seed: int
    trigger_spec: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "trigger_fingerprint": self.trigger_fingerprint,
            "method": self.method,
            "rate": self.rate,
            "target_class": self.target_class,
            "watermarked_ids": list(self.watermarked_ids),
            "seed": self.seed,
            "trigger_spec": self.trigger_spec,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "WatermarkManifest":
        doc = json.loads(text)
        return WatermarkManifest(
            trigger_fingerprint=doc["trigger_fingerprint"],
            method=doc["method"],
            rate=doc["rate"],
            target_class=doc["target_class"],
            watermarked_ids=tuple(doc["watermarked_ids"]),
            seed=doc["seed"],
            trigger_spec=doc.get("trigger_spec", {}),
        )


def write_dataset(out_dir: str | Path, images: list[tuple[ImageTensor, str | None]], seed: int = 0) -> DatasetManifest:
    """Write images as <id>.png plus manifest files; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    hasher = hashlib.sha256()
    for i, (img, label) in enumerate(images):
        item_id = f"img{i:05d}"
        path = f"{item_id}.png"
        save_image(img, out_dir / path)
        hasher.update((out_dir / path).read_bytes())
        items.append(DatasetItem(item_id, path, label))
    manifest = DatasetManifest(
        items=tuple(items),
        source_hash=hasher.hexdigest(),
        created_at=f"seed:{seed}",
    )
    save_dataset_manifest(manifest, out_dir)
    return manifest


def save_dataset_manifest(manifest: DatasetManifest, out_dir: str | Path):
    out_dir = Path(out_dir)
    tmp = out_dir / (MANIFEST_ITEMS + ".tmp")
    with open(tmp, "w") as fh:
        for it in manifest.items:
            fh.write(json.dumps({"id": it.id, "path": it.path, "label": it.label}, sort_keys=True))
            fh.write("\n")
    os.replace(tmp, out_dir / MANIFEST_ITEMS)
    header = {
        "source_hash": manifest.source_hash,
        "created_at": manifest.created_at,
        "items": MANIFEST_ITEMS,
    }
    tmp = out_dir / (MANIFEST_HEADER + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, out_dir / MANIFEST_HEADER)


def load_dataset_manifest(dataset_dir: str | Path) -> DatasetManifest:
    dataset_dir = Path(dataset_dir)
    header_path = dataset_dir / MANIFEST_HEADER
    items_path = dataset_dir / MANIFEST_ITEMS
    if not header_path.exists() or not items_path.exists():
        raise InvalidInputError(f"{dataset_dir} is not a dataset directory (missing manifest)")
    header = json.loads(header_path.read_text())
    items = []
    for line in items_path.read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        items.append(DatasetItem(doc["id"], doc["path"], doc.get("label")))
    return DatasetManifest(tuple(items), header["source_hash"], header["created_at"])


def load_dataset_images(
    manifest: DatasetManifest, dataset_dir: str | Path
) -> list[tuple[ImageTensor, str | None]]:
    dataset_dir = Path(dataset_dir)
    return [(load_image(dataset_dir / it.path), it.label) for it in manifest.items]


def generate_toy_dataset(out_dir: str | Path, n: int, seed: int, variant: str = "a") -> DatasetManifest:
    return write_dataset(out_dir, make_toy_dataset(n, seed=seed, variant=variant), seed=seed)


def _trigger_patch(spec: TriggerSpec, image_side: int) -> ImageTensor:
    size = spec.params.get("size", 4)
    pixels = spec.params.get("pixels")
    if pixels is not None:
        return ImageTensor(np.array(pixels, dtype=np.float64))
    return default_patch(size)


def apply_trigger(spec: TriggerSpec, img: ImageTensor) -> ImageTensor:
    """Apply a host-based or query-time trigger to one image."""
    if spec.method == METHOD_PATCH:
        patch = _trigger_patch(spec, img.height)
        pos = spec.params.get("position", "corner")
        if pos == "corner":
            pos = (img.height - patch.height, img.width - patch.width)
        elif pos == "random":
            pos = None
        else:
            pos = tuple(pos)
        return apply_patch_trigger(img, patch, pos, seed=spec.seed)
    if spec.method == METHOD_CTRL:
        bands = tuple(tuple(b) for b in spec.params.get("bands", [[3, 3], [7, 7]]))
        magnitude = spec.params.get("magnitude", 0.6)
        return apply_ctrl_trigger(img, bands=bands, magnitude=magnitude)
    if spec.method == METHOD_BLTO:
        from clmark.blto import TriggerGenerator, apply_generator

        gen = TriggerGenerator(
            tuple(spec.params["shape"]),
            np.array(spec.params["generator"], dtype=np.float64),
            spec.params.get("linf_bound", 0.15),
        )
        return apply_generator(gen, img)
    if spec.method == METHOD_NA:
        # Query-time trigger for NA: its patch, centered in the image.
        patch = _trigger_patch(spec, img.height)
        pos = ((img.height - patch.height) // 2, (img.width - patch.width) // 2)
        return apply_patch_trigger(img, patch, pos)
    raise InvalidInputError(f"method {spec.method!r} has no per-image trigger application")


def embed_watermark(
    manifest: DatasetManifest,
    dataset_dir: str | Path,
    spec: TriggerSpec,
    target_class: str,
    rate: float,
    seed: int,
    out_dir: str | Path,
) -> WatermarkManifest:
    """Write the released (watermarked) dataset under out_dir.

    Host-based methods replace round(rate * N) target-class items with
    trigger-applied copies; NA appends that many composite canvases as new
    items. Untouched items are copied byte-for-byte.
    """
    if not (0 < rate < 1):
        raise InvalidInputError("rate must lie in (0, 1)")
    if spec.method not in HOST_BASED_METHODS + (METHOD_NA,):
        raise InvalidInputError(
            f"method {spec.method!r} is not an embeddable watermark method"
        )
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_wm = round(rate * len(manifest.items))
    if n_wm == 0:
        raise InvalidInputError("rate rounds to zero watermarked items; nothing to verify")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3B]))
    target_ids = sorted(manifest.ids_for_class(target_class))
    if spec.method in HOST_BASED_METHODS:
        if len(target_ids) < n_wm:
            raise CapacityError(n_wm, len(target_ids), f"target-class {target_class!r} samples")
        chosen = sorted(rng.choice(target_ids, size=n_wm, replace=False).tolist())
        chosen_set = set(chosen)
        items = []
        for it in manifest.items:
            src = dataset_dir / it.path
            dst = out_dir / it.path
            if it.id in chosen_set:
                save_image(apply_trigger(spec, load_image(src)), dst)
            else:
                shutil.copyfile(src, dst)
            items.append(it)
        new_manifest = DatasetManifest(tuple(items), manifest.source_hash, manifest.created_at)
    else:  # NA compositing: new items added, originals untouched
        if not target_ids:
            raise CapacityError(n_wm, 0, f"target-class {target_class!r} samples")
        non_target_ids = sorted(it.id for it in manifest.items if it.label != target_class)
        if not non_target_ids:
            raise CapacityError(n_wm, 0, "non-target shadow samples")
        by_id = {it.id: it for it in manifest.items}
        items = list(manifest.items)
        for it in manifest.items:
            shutil.copyfile(dataset_dir / it.path, out_dir / it.path)
        patch = _trigger_patch(spec, 0)
        chosen = []
        for k in range(n_wm):
            shadow_id = non_target_ids[int(rng.integers(0, len(non_target_ids)))]
            ref_id = target_ids[int(rng.integers(0, len(target_ids)))]
            shadow = load_image(dataset_dir / by_id[shadow_id].path)
            ref = load_image(dataset_dir / by_id[ref_id].path)
            composite, _layout = compose_na(shadow, ref, patch)
            wm_id = f"wm{k:05d}"
            save_image(composite, out_dir / f"{wm_id}.png")
            items.append(DatasetItem(wm_id, f"{wm_id}.png", None))
            chosen.append(wm_id)
        new_manifest = DatasetManifest(tuple(items), manifest.source_hash, manifest.created_at)
    save_dataset_manifest(new_manifest, out_dir)
    wm_manifest = WatermarkManifest(
        trigger_fingerprint=spec.fingerprint(),
        method=spec.method,
        rate=rate,
        target_class=target_class,
        watermarked_ids=tuple(chosen),
        seed=seed,
        trigger_spec=json.loads(spec.canonical_json()),
    )
    tmp = out_dir / (WATERMARK_MANIFEST + ".tmp")
    tmp.write_text(wm_manifest.to_json())
    os.replace(tmp, out_dir / WATERMARK_MANIFEST)
    return wm_manifest


def build_query_set(
    manifest: DatasetManifest,
    dataset_dir: str | Path,
    spec: TriggerSpec,
    target_class: str,
    n: int,
    seed: int,
) -> tuple[list[ImageTensor], list[ImageTensor]]:
    """n clean non-target-class samples (stratified) paired with their
    trigger-applied versions."""
    if n == 0:
        return [], []
    dataset_dir = Path(dataset_dir)
    classes = [c for c in manifest.labels() if c != target_class]
    if not classes:
        raise CapacityError(n, 0, "non-target classes")
    pools = {c: sorted(manifest.ids_for_class(c)) for c in classes}
    total = sum(len(v) for v in pools.values())
    if total < n:
        raise CapacityError(n, total, "non-target-class samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7]))
    for c in classes:
        pool = pools[c]
        rng.shuffle(pool)
    by_id = {it.id: it for it in manifest.items}
    chosen: list[str] = []
    i = 0
    while len(chosen) < n:
        c = classes[i % len(classes)]
        if pools[c]:
            chosen.append(pools[c].pop())
        i += 1
    clean = [load_image(dataset_dir / by_id[cid].path) for cid in chosen]
    watermarked = [apply_trigger(spec, img) for img in clean]
    return clean, watermarked
