import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from clmark.embed import (
    WatermarkManifest,
    apply_trigger,
    build_query_set,
    embed_watermark,
    generate_toy_dataset,
    load_dataset_images,
    load_dataset_manifest,
)
from clmark.errors import CapacityError, InvalidInputError
from clmark.imagecore import image_equal, load_image
from clmark.triggers import HOST_BASED_METHODS, TriggerSpec


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    manifest = generate_toy_dataset(root, 60, seed=0)
    return manifest, root


def patch_spec(seed=0):
    return TriggerSpec("patch", {"size": 4, "position": "corner"}, seed)


class TestToyDataset:
    def test_manifest_round_trip(self, toy):
        manifest, root = toy
        back = load_dataset_manifest(root)
        assert back == manifest

    def test_four_balanced_classes(self, toy):
        manifest, _ = toy
        labels = manifest.labels()
        assert len(labels) == 4
        counts = [len(manifest.ids_for_class(c)) for c in labels]
        assert all(c == 15 for c in counts)

    def test_deterministic_generation(self, tmp_path):
        generate_toy_dataset(tmp_path / "a", 20, seed=5)
        generate_toy_dataset(tmp_path / "b", 20, seed=5)
        match, mismatch, errors = filecmp.cmpfiles(
            tmp_path / "a",
            tmp_path / "b",
            [p.name for p in (tmp_path / "a").iterdir()],
            shallow=False,
        )
        assert not mismatch and not errors

    def test_variants_differ(self, tmp_path):
        ma = generate_toy_dataset(tmp_path / "a", 8, seed=0, variant="a")
        mb = generate_toy_dataset(tmp_path / "b", 8, seed=0, variant="b")
        assert set(ma.labels()).isdisjoint(mb.labels())


class TestEmbed:
    def test_rate_accounting(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        wm = embed_watermark(manifest, root, patch_spec(), target, 0.10, 0, tmp_path / "wm")
        assert len(wm.watermarked_ids) == round(0.10 * len(manifest.items))
        assert wm.method == "patch"
        assert wm.target_class == target

    def test_hosts_come_from_target_class(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[1]
        wm = embed_watermark(manifest, root, patch_spec(), target, 0.2, 0, tmp_path / "wm")
        target_ids = set(manifest.ids_for_class(target))
        assert set(wm.watermarked_ids) <= target_ids

    def test_untouched_files_byte_identical(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        wm = embed_watermark(manifest, root, patch_spec(), target, 0.1, 0, tmp_path / "wm")
        marked = set(wm.watermarked_ids)
        for item in manifest.items:
            src = (root / item.path).read_bytes()
            dst = (tmp_path / "wm" / item.path).read_bytes()
            assert (src == dst) == (item.id not in marked)

    def test_watermarked_files_match_apply_trigger(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        spec = patch_spec()
        wm = embed_watermark(manifest, root, spec, target, 0.1, 0, tmp_path / "wm")
        by_id = {it.id: it for it in manifest.items}
        for item_id in wm.watermarked_ids:
            clean = load_image(root / by_id[item_id].path)
            marked = load_image(tmp_path / "wm" / by_id[item_id].path)
            assert image_equal(marked, apply_trigger(spec, clean))

    def test_deterministic_embedding(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        wm1 = embed_watermark(manifest, root, patch_spec(), target, 0.1, 3, tmp_path / "a")
        wm2 = embed_watermark(manifest, root, patch_spec(), target, 0.1, 3, tmp_path / "b")
        assert wm1.watermarked_ids == wm2.watermarked_ids
        assert (tmp_path / "a" / "watermark.json").read_bytes() == (
            tmp_path / "b" / "watermark.json"
        ).read_bytes()

    def test_seed_changes_selection(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        wm1 = embed_watermark(manifest, root, patch_spec(), target, 0.1, 0, tmp_path / "a")
        wm2 = embed_watermark(manifest, root, patch_spec(), target, 0.1, 99, tmp_path / "b")
        assert wm1.watermarked_ids != wm2.watermarked_ids

    def test_capacity_error(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        with pytest.raises(CapacityError):
            embed_watermark(manifest, root, patch_spec(), target, 0.9, 0, tmp_path / "wm")

    def test_bad_rate_rejected(self, toy, tmp_path):
        manifest, root = toy
        with pytest.raises(InvalidInputError):
            embed_watermark(manifest, root, patch_spec(), manifest.labels()[0], 1.5, 0, tmp_path / "x")

    def test_na_appends_composites(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        spec = TriggerSpec("na", {"size": 4}, 0)
        wm = embed_watermark(manifest, root, spec, target, 0.1, 0, tmp_path / "na")
        out_manifest = load_dataset_manifest(tmp_path / "na")
        n_extra = len(out_manifest.items) - len(manifest.items)
        assert n_extra == len(wm.watermarked_ids) == round(0.1 * len(manifest.items))
        # composite canvases are twice as wide
        img, _ = load_dataset_images(out_manifest, tmp_path / "na")[-1]
        assert img.width == 2 * img.height

    def test_watermark_manifest_round_trip(self, toy, tmp_path):
        manifest, root = toy
        target = manifest.labels()[0]
        wm = embed_watermark(manifest, root, patch_spec(), target, 0.1, 0, tmp_path / "wm")
        back = WatermarkManifest.from_json((tmp_path / "wm" / "watermark.json").read_text())
        assert back == wm


class TestQuerySet:
    def test_pairs_and_exclusion(self, toy):
        manifest, root = toy
        target = manifest.labels()[0]
        spec = patch_spec()
        clean, marked = build_query_set(manifest, root, spec, target, 24, seed=0)
        assert len(clean) == len(marked) == 24
        for c, m in zip(clean, marked):
            assert image_equal(m, apply_trigger(spec, c))

    def test_stratified_over_nontarget_classes(self, toy):
        manifest, root = toy
        target = manifest.labels()[0]
        clean, _ = build_query_set(manifest, root, patch_spec(), target, 30, seed=0)
        # target-class images excluded: compare against files of target ids
        target_files = {
            (root / it.path).read_bytes() for it in manifest.items if it.label == target
        }
        from clmark.imagecore import save_image
        import io

        # Save each query to bytes via a temp dir equivalent: compare pixel data
        target_imgs = [
            load_image(root / it.path).data.tobytes()
            for it in manifest.items
            if it.label == target
        ]
        for img in clean:
            assert img.data.tobytes() not in target_imgs

    def test_deterministic(self, toy):
        manifest, root = toy
        target = manifest.labels()[0]
        a, _ = build_query_set(manifest, root, patch_spec(), target, 12, seed=4)
        b, _ = build_query_set(manifest, root, patch_spec(), target, 12, seed=4)
        for x, y in zip(a, b):
            assert image_equal(x, y)

    def test_too_many_queries_rejected(self, toy):
        manifest, root = toy
        target = manifest.labels()[0]
        with pytest.raises(CapacityError):
            build_query_set(manifest, root, patch_spec(), target, 1000, seed=0)


class TestApplyTrigger:
    @pytest.mark.parametrize("method", HOST_BASED_METHODS)
    def test_host_based_changes_image(self, toy, method):
        manifest, root = toy
        img, _ = load_dataset_images(manifest, root)[0]
        if method == "patch":
            spec = patch_spec()
        elif method == "ctrl":
            spec = TriggerSpec("ctrl", {"bands": [[3, 3]], "magnitude": 1.0}, 0)
        else:
            side = img.height
            gen_params = list(np.random.default_rng(0).uniform(-0.1, 0.1, side * side * 3))
            spec = TriggerSpec(
                "blto",
                {"shape": [side, side, 3], "generator": gen_params, "linf_bound": 0.15},
                0,
            )
        out = apply_trigger(spec, img)
        assert out.data.shape == img.data.shape
        assert not image_equal(out, img)
