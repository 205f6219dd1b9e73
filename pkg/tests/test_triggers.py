import json

import numpy as np
import pytest

from clmark.errors import InvalidInputError
from clmark.imagecore import DctBlockPlan, ImageTensor, dct2_blockwise, rgb_to_ycbcr
from clmark.triggers import (
    PE_LAYOUTS,
    Rect,
    TriggerSpec,
    apply_ctrl_trigger,
    apply_patch_trigger,
    compose_corruptencoder,
    compose_na,
    compose_poisonedencoder,
    default_patch,
    remainder_centroid,
)

from conftest import random_image


class TestTriggerSpec:
    def test_canonical_json_sorted_and_stable(self):
        a = TriggerSpec("patch", {"size": 4, "position": "corner"}, 7)
        b = TriggerSpec("patch", {"position": "corner", "size": 4}, 7)
        assert a.canonical_json() == b.canonical_json()
        assert a.fingerprint() == b.fingerprint()
        doc = json.loads(a.canonical_json())
        assert list(doc.keys()) == sorted(doc.keys())

    def test_fingerprint_distinguishes(self):
        a = TriggerSpec("patch", {"size": 4}, 7)
        b = TriggerSpec("patch", {"size": 5}, 7)
        c = TriggerSpec("patch", {"size": 4}, 8)
        assert len({a.fingerprint(), b.fingerprint(), c.fingerprint()}) == 3

    def test_json_round_trip(self):
        a = TriggerSpec("ctrl", {"bands": [[3, 3]], "magnitude": 1.5}, 3)
        back = TriggerSpec.from_json(a.canonical_json())
        assert back == a

    def test_unknown_method_rejected(self):
        with pytest.raises(InvalidInputError):
            TriggerSpec("steganography", {}, 0)


class TestPatchTrigger:
    def test_pastes_exact_pixels(self, rng):
        img = random_image(rng)
        patch = default_patch(4)
        out = apply_patch_trigger(img, patch, (12, 12))
        np.testing.assert_array_equal(out.data[12:16, 12:16], patch.data)
        # everything else untouched
        mask = np.ones((16, 16), dtype=bool)
        mask[12:16, 12:16] = False
        np.testing.assert_array_equal(out.data[mask], img.data[mask])

    def test_out_of_bounds_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            apply_patch_trigger(random_image(rng), default_patch(4), (14, 0))

    def test_random_position_deterministic(self, rng):
        img = random_image(rng)
        patch = default_patch(4)
        a = apply_patch_trigger(img, patch, None, seed=5)
        b = apply_patch_trigger(img, patch, None, seed=5)
        np.testing.assert_array_equal(a.data, b.data)

    def test_checkerboard_patch(self):
        patch = default_patch(4)
        assert patch.data.shape == (4, 4, 3)
        assert set(np.unique(patch.data)) == {0.0, 1.0}
        # alternating cells
        assert patch.data[0, 0, 0] != patch.data[0, 1, 0]


class TestCtrlTrigger:
    def test_band_energy_oracle(self, rng):
        """Independent oracle: re-measure the DCT bands of the output.

        The perturbation is applied in an orthonormal basis, so each targeted
        Cb/Cr coefficient must rise by exactly the magnitude (absent clamping;
        use a mid-gray image so no clamping occurs).
        """
        img = ImageTensor(np.full((16, 16, 3), 0.5))
        mag = 0.8
        out = apply_ctrl_trigger(img, bands=((3, 3),), magnitude=mag)
        plan = DctBlockPlan(block_size=8, channel_mask=(1, 2))
        before = dct2_blockwise(rgb_to_ycbcr(img), plan)
        after = dct2_blockwise(rgb_to_ycbcr(out), plan)
        for c in (1, 2):
            band = after[3::8, 3::8, c] - before[3::8, 3::8, c]
            np.testing.assert_allclose(band, mag, atol=0.02)

    def test_luma_nearly_untouched(self, rng):
        img = ImageTensor(np.full((16, 16, 3), 0.5))
        out = apply_ctrl_trigger(img, magnitude=0.5)
        y_before = rgb_to_ycbcr(img).data[:, :, 0]
        y_after = rgb_to_ycbcr(out).data[:, :, 0]
        assert np.max(np.abs(y_after - y_before)) < 2.0 / 255.0

    def test_deterministic(self, rng):
        img = random_image(rng)
        np.testing.assert_array_equal(
            apply_ctrl_trigger(img).data, apply_ctrl_trigger(img).data
        )

    def test_bad_band_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            apply_ctrl_trigger(random_image(rng), bands=((8, 0),))


class TestPoisonedEncoder:
    def test_all_layouts_geometry(self, rng):
        t = random_image(rng, 8, 8)
        r = random_image(rng, 8, 8)
        outs = {}
        for layout in PE_LAYOUTS:
            out = compose_poisonedencoder(t, r, layout)
            assert out.data.shape in ((16, 8, 3), (8, 16, 3))
            outs[layout] = out
        np.testing.assert_array_equal(outs["top-bottom"].data[:8], t.data)
        np.testing.assert_array_equal(outs["top-bottom"].data[8:], r.data)
        np.testing.assert_array_equal(outs["bottom-top"].data[:8], r.data)
        np.testing.assert_array_equal(outs["left-right"].data[:, :8], t.data)
        np.testing.assert_array_equal(outs["right-left"].data[:, :8], r.data)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            compose_poisonedencoder(random_image(rng, 8, 8), random_image(rng, 8, 9), "top-bottom")


class TestRemainderCentroid:
    def test_matches_pixel_average_oracle(self):
        """Independent oracle: brute-force mean of remaining pixel centers."""
        for (bw, bh, ref) in [
            (20, 10, Rect(0, 0, 5, 5)),
            (16, 16, Rect(8, 8, 16, 16)),
            (30, 12, Rect(25, 0, 30, 6)),
        ]:
            xs, ys = np.meshgrid(np.arange(bw) + 0.5, np.arange(bh) + 0.5)
            inside = (xs > ref.x0) & (xs < ref.x1) & (ys > ref.y0) & (ys < ref.y1)
            cx_o = xs[~inside].mean()
            cy_o = ys[~inside].mean()
            cx, cy = remainder_centroid(bw, bh, ref)
            assert cx == pytest.approx(cx_o, abs=1e-9)
            assert cy == pytest.approx(cy_o, abs=1e-9)

    def test_full_cover_rejected(self):
        with pytest.raises(InvalidInputError):
            remainder_centroid(8, 8, Rect(0, 0, 8, 8))


class TestCorruptEncoder:
    def test_geometry_contract(self, rng):
        ref = random_image(rng, 6, 6)
        trig = random_image(rng, 3, 3)
        bg = random_image(rng, 24, 24)
        out, layout = compose_corruptencoder(ref, trig, bg, rng_seed=11)
        assert out.data.shape == bg.data.shape
        rr, tr, sr = layout.ref_rect, layout.trigger_rect, layout.shadow_rect
        assert not rr.overlaps(tr)
        assert sr.contains(tr)
        assert not rr.overlaps(sr)
        # reference pasted at a corner
        assert (rr.x0, rr.y0) in [(0, 0), (18, 0), (0, 18), (18, 18)]
        np.testing.assert_array_equal(
            out.data[rr.y0 : rr.y1, rr.x0 : rr.x1], ref.data
        )
        np.testing.assert_array_equal(
            out.data[tr.y0 : tr.y1, tr.x0 : tr.x1], trig.data
        )

    def test_trigger_near_remainder_centroid(self, rng):
        ref = random_image(rng, 6, 6)
        trig = random_image(rng, 3, 3)
        bg = random_image(rng, 24, 24)
        _, layout = compose_corruptencoder(ref, trig, bg, rng_seed=3)
        cx, cy = remainder_centroid(24, 24, layout.ref_rect)
        tcx = (layout.trigger_rect.x0 + layout.trigger_rect.x1) / 2
        tcy = (layout.trigger_rect.y0 + layout.trigger_rect.y1) / 2
        assert abs(tcx - cx) <= 0.5 and abs(tcy - cy) <= 0.5

    def test_corner_depends_on_seed(self, rng):
        ref = random_image(rng, 6, 6)
        trig = random_image(rng, 3, 3)
        bg = random_image(rng, 24, 24)
        corners = {
            compose_corruptencoder(ref, trig, bg, rng_seed=s)[1].ref_rect for s in range(12)
        }
        assert len(corners) > 1

    def test_small_background_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            compose_corruptencoder(
                random_image(rng, 6, 6), random_image(rng, 2, 2), random_image(rng, 10, 24)
            )


class TestNa:
    def test_canvas_geometry(self, rng):
        shadow = random_image(rng, 10, 10)
        ref = random_image(rng, 10, 10)
        trig = random_image(rng, 4, 4)
        out, layout = compose_na(shadow, ref, trig)
        assert out.data.shape == (10, 20, 3)
        assert layout.canvas_w == 20 and layout.canvas_h == 10
        assert layout.ref_rect == Rect(0, 0, 10, 10)
        assert layout.shadow_rect == Rect(10, 0, 20, 10)
        np.testing.assert_array_equal(out.data[:, :10], ref.data)
        # trigger centered in the shadow half
        tr = layout.trigger_rect
        assert tr == Rect(13, 3, 17, 7)
        np.testing.assert_array_equal(out.data[3:7, 13:17], trig.data)
        # shadow pixels outside trigger untouched
        np.testing.assert_array_equal(out.data[0:3, 10:], shadow.data[0:3])

    def test_non_square_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            compose_na(random_image(rng, 10, 11), random_image(rng, 10, 10), random_image(rng, 2, 2))

    def test_oversized_trigger_rejected(self, rng):
        with pytest.raises(InvalidInputError):
            compose_na(random_image(rng, 8, 8), random_image(rng, 8, 8), random_image(rng, 9, 9))
