"""Acceptance gate: ten end-to-end criteria, one test each.

Each test prints a single PASS line with its headline numbers so the suite
output doubles as a results table. Criteria 5 and 7 share one session-scoped
training fixture (the expensive part: 15 desk-scale pretraining runs).
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import special

import clmark.embed as embed_mod
from clmark.blto import BltoConfig, apply_generator, run_blto
from clmark.cltrain import TrainConfig, ntxent_loss, pretrain, simsiam_loss
from clmark.downstream import train_probe
from clmark.imagecore import (
    DctBlockPlan,
    ImageTensor,
    dct2_blockwise,
    idct2_blockwise,
    rgb_to_ycbcr,
    ycbcr_to_rgb,
)
from clmark.modelio import load_encoder, save_encoder
from clmark.suspectio import InProcessSuspect, RemoteSuspect, serve
from clmark.toydata import make_toy_dataset
from clmark.triggers import (
    CropModel,
    LayoutSpec,
    Rect,
    TriggerSpec,
    crop_pair_success_probability,
)
from clmark.verify import (
    OutputBatch,
    VerifyConfig,
    mean_pairwise_cosine,
    sweep_thresholds,
    t_test_one_sample,
    verify,
)

SEEDS = (0, 1, 2, 3, 4)
METHODS = {
    "ctrl": {"bands": [[3, 3], [7, 7]], "magnitude": 2.5},
    "patch": {"size": 6, "position": "corner"},
}


def train_config(seed):
    return TrainConfig(seed=seed, epochs=100, batch_size=64, learning_rate=2.0,
                       temperature=1.0, arch=(16 * 16 * 3, 256, 64))


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    """Datasets, watermarks, and per-seed encoders/reports for criteria 5+7."""
    root = tmp_path_factory.mktemp("e2e")
    manifest = embed_mod.generate_toy_dataset(root / "toy", 2000, 0, "a")
    target = manifest.labels()[0]
    clean_imgs = [im for im, _ in embed_mod.load_dataset_images(manifest, root / "toy")]
    manifest_b = embed_mod.generate_toy_dataset(root / "toy_b", 400, 1, "b")
    labeled_b = [
        (im, lab)
        for im, lab in embed_mod.load_dataset_images(manifest_b, root / "toy_b")
        if lab
    ]
    per_method = {}
    for method, params in METHODS.items():
        spec = TriggerSpec(method, params, 0)
        embed_mod.embed_watermark(manifest, root / "toy", spec, target, 0.10, 0, root / f"wm_{method}")
        wmf = embed_mod.load_dataset_manifest(root / f"wm_{method}")
        wm_imgs = [im for im, _ in embed_mod.load_dataset_images(wmf, root / f"wm_{method}")]
        queries = embed_mod.build_query_set(manifest, root / "toy", spec, target, 100, 0)
        per_method[method] = (wm_imgs, queries)

    results = {}
    for seed in SEEDS:
        cfg = train_config(seed)
        vcfg = VerifyConfig(threshold=0.10, batches=5, seed=seed)
        t0 = time.process_time()
        enc_clean, _ = pretrain(clean_imgs, cfg)
        clean_elapsed = time.process_time() - t0
        assert clean_elapsed < 300, "pretraining exceeded the 5-minute CPU budget"
        row = {}
        for method, (wm_imgs, (q_clean, q_wm)) in per_method.items():
            enc_ip, _ = pretrain(wm_imgs, cfg)
            rep_ip = verify(InProcessSuspect(enc_ip), q_clean, q_wm, "feature", vcfg)
            rep_clean = verify(InProcessSuspect(enc_clean), q_clean, q_wm, "feature", vcfg)
            row[method] = (rep_ip, rep_clean)
            if method == "ctrl":
                probe_ip = train_probe(enc_ip, labeled_b, seed=seed)
                probe_clean = train_probe(enc_clean, labeled_b, seed=seed)
                soft_ip = verify(InProcessSuspect(enc_ip, probe_ip), q_clean, q_wm, "soft", vcfg)
                soft_clean = verify(
                    InProcessSuspect(enc_clean, probe_clean), q_clean, q_wm, "soft", vcfg
                )
                row["soft"] = (soft_ip, soft_clean)
        results[seed] = row
    return results


class TestAcceptance:
    def test_01_numeric_kernels(self, rng):
        t0 = time.time()
        plan = DctBlockPlan(block_size=8, channel_mask=(0, 1, 2))
        worst_rt = worst_pe = worst_col = 0.0
        for _ in range(100):
            img = ImageTensor(rng.uniform(0, 1, size=(32, 32, 3)))
            coeffs = dct2_blockwise(img, plan)
            back = idct2_blockwise(coeffs, plan)
            worst_rt = max(worst_rt, float(np.max(np.abs(back - img.data))))
            for c in range(3):
                worst_pe = max(
                    worst_pe,
                    abs(np.sum(img.data[:, :, c] ** 2) - np.sum(coeffs[:, :, c] ** 2)),
                )
            col = ycbcr_to_rgb(rgb_to_ycbcr(img))
            worst_col = max(worst_col, float(np.max(np.abs(col.data - img.data))))
        elapsed = time.time() - t0
        assert worst_rt < 1e-6
        assert worst_pe < 1e-6
        assert worst_col <= 2 / 255
        assert elapsed < 5
        print(
            f"\nPASS 01 numeric kernels: dct_rt={worst_rt:.2e} parseval={worst_pe:.2e} "
            f"color={worst_col:.2e} ({elapsed:.1f}s)"
        )

    def test_02_gradient_checks(self):
        t0 = time.time()
        rng = np.random.default_rng(42)
        worst = 0.0
        z_slots_zero = True
        for trial in range(100):
            n = int(rng.integers(2, 8))
            d = int(rng.integers(2, 10))
            use_ntxent = trial % 2 == 0
            if use_ntxent:
                tau = float(rng.uniform(0.2, 1.5))
                z1, z2 = rng.normal(size=(2, n, d))
                _, (g1, g2) = ntxent_loss(z1, z2, tau)
                grads = {"z1": (z1, g1), "z2": (z2, g2)}
                def loss_at(name, z):
                    a = z if name == "z1" else z1
                    b = z if name == "z2" else z2
                    return ntxent_loss(a, b, tau)[0]
            else:
                p1, p2, z1, z2 = rng.normal(size=(4, n, d))
                _, g = simsiam_loss(p1, p2, z1, z2)
                z_slots_zero &= bool(np.all(g[2] == 0) and np.all(g[3] == 0))
                grads = {"p1": (p1, g[0]), "p2": (p2, g[1])}
                def loss_at(name, p):
                    a = p if name == "p1" else p1
                    b = p if name == "p2" else p2
                    return simsiam_loss(a, b, z1, z2)[0]
            for name, (z, g) in grads.items():
                for _ in range(3):
                    i = int(rng.integers(n)); j = int(rng.integers(d))
                    eps = 1e-6
                    zp, zm = z.copy(), z.copy()
                    zp[i, j] += eps
                    zm[i, j] -= eps
                    num = (loss_at(name, zp) - loss_at(name, zm)) / (2 * eps)
                    denom = max(abs(num), abs(g[i, j]), 1e-8)
                    worst = max(worst, abs(num - g[i, j]) / denom)
        elapsed = time.time() - t0
        assert worst < 1e-4
        assert z_slots_zero
        assert elapsed < 30
        print(f"\nPASS 02 gradient checks: max_rel_err={worst:.2e} ({elapsed:.1f}s)")

    def test_03_crop_probability_oracle(self):
        t0 = time.time()

        def na_layout(r, t):
            off = (r - t) // 2
            return LayoutSpec(2 * r, r, Rect(0, 0, r, r), Rect(r, 0, 2 * r, r),
                              Rect(r + off, off, r + off + t, off + t), unit_len=r)

        def ce_layout(bw, bh, rw, rh, tw, th):
            tx = rw + (bw - rw - tw) // 2
            ty = (bh - th) // 2
            return LayoutSpec(bw, bh, Rect(0, 0, rw, rh), Rect(rw, 0, bw, bh),
                              Rect(tx, ty, tx + tw, ty + th), unit_len=rw)

        layouts = [
            na_layout(16, 6), na_layout(16, 10), na_layout(24, 4),
            ce_layout(32, 24, 10, 8, 4, 4), ce_layout(40, 20, 12, 10, 6, 6),
        ]
        crop = CropModel(scale_range=(0.02, 0.25))
        lines = []
        for idx, layout in enumerate(layouts):
            p_an = crop_pair_success_probability(layout, crop, mode="analytic")
            p_mc = crop_pair_success_probability(
                layout, crop, mode="montecarlo", n_samples=1_000_000, seed=idx
            )
            sigma = math.sqrt(max(p_an * (1 - p_an), 1e-12) / 1_000_000)
            assert abs(p_an - p_mc) <= 3 * sigma, (idx, p_an, p_mc, sigma)
            lines.append(f"L{idx}:|{p_an:.5f}-{p_mc:.5f}|<={3*sigma:.1e}")
        elapsed = time.time() - t0
        assert elapsed < 60
        print(f"\nPASS 03 crop probability oracle: {' '.join(lines)} ({elapsed:.1f}s)")

    def test_04_statistics_oracles(self):
        rng = np.random.default_rng(7)
        worst_cos = 0.0
        for trial in range(50):
            n = int(rng.integers(3, 12))
            level = ("feature", "soft", "hard")[trial % 3]
            if level == "feature":
                v = rng.normal(size=(n, 6))
            elif level == "soft":
                raw = rng.uniform(0.01, 1, size=(n, 4))
                v = raw / raw.sum(axis=1, keepdims=True)
            else:
                v = np.eye(4)[rng.integers(0, 4, size=n)]
            got = mean_pairwise_cosine(OutputBatch(level, v))
            brute = np.mean([
                float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
                for a, b in itertools.combinations(v, 2)
            ])
            worst_cos = max(worst_cos, abs(got - brute))
            if level == "hard":
                labels = np.argmax(v, axis=1)
                agree = sum(1 for a, b in itertools.combinations(labels, 2) if a == b)
                assert got == agree / (n * (n - 1) / 2)
        assert worst_cos < 1e-12

        worst_p = 0.0
        for _ in range(20):
            m = int(rng.integers(3, 15))
            deltas = rng.normal(rng.uniform(-0.1, 0.4), 0.1, size=m)
            tau = float(rng.uniform(0, 0.2))
            t_stat, p = t_test_one_sample(deltas, tau)
            df = m - 1
            x = df / (df + t_stat * t_stat)
            p_ref = 0.5 * special.betainc(df / 2, 0.5, x)
            if t_stat < 0:
                p_ref = 1 - p_ref
            worst_p = max(worst_p, abs(p - p_ref))
        assert worst_p < 1e-6
        print(f"\nPASS 04 statistics oracles: cos_err={worst_cos:.1e} p_err={worst_p:.1e}")

    def test_05_end_to_end_watermark_signal(self, e2e):
        lines = []
        for method in METHODS:
            good = 0
            for seed in SEEDS:
                rep_ip, rep_clean = e2e[seed][method]
                ok = (
                    rep_ip.delta - rep_clean.delta > 0.05
                    and rep_ip.p_value < 0.05
                    and rep_clean.p_value > 0.05
                )
                good += ok
                lines.append(
                    f"{method}/s{seed}: dIP={rep_ip.delta:.3f} pIP={rep_ip.p_value:.2g} "
                    f"dCL={rep_clean.delta:.3f} pCL={rep_clean.p_value:.2g} {'ok' if ok else 'MISS'}"
                )
            assert good >= 4, (method, lines)
        print("\nPASS 05 end-to-end signal:\n  " + "\n  ".join(lines))

    def test_06_blto_desk_scale(self):
        t0 = time.time()
        pairs = make_toy_dataset(200, seed=0)
        imgs = [im for im, _ in pairs]
        refs = [im for im, lab in pairs if lab == "square"][:16]
        lines = []
        for seed in range(3):
            cfg = BltoConfig(
                inner_steps=200, outer_steps=10, alternations=2, seed=seed,
                surrogate=TrainConfig(arch=(16 * 16 * 3, 128, 32), epochs=1000, batch_size=32),
                linf_bound=0.15, probe_batch=32,
            )
            result = run_blto(imgs, refs, cfg)
            assert result.final_objective > result.initial_objective, (seed, result)
            assert np.max(np.abs(result.generator.delta())) <= cfg.linf_bound + 1e-12
            for img in imgs[:50]:
                out = apply_generator(result.generator, img)
                assert np.max(np.abs(out.data - img.data)) <= cfg.linf_bound + 1e-12
            lines.append(f"s{seed}: {result.initial_objective:.3f}->{result.final_objective:.3f}")
        elapsed = time.time() - t0
        assert elapsed < 600
        print(f"\nPASS 06 blto: {' '.join(lines)} ({elapsed:.1f}s)")

    def test_07_robustness_scenario(self, e2e):
        lines = []
        good = 0
        for seed in SEEDS:
            soft_ip, soft_clean = e2e[seed]["soft"]
            sep = soft_ip.delta - soft_clean.delta
            good += sep >= 0.03
            lines.append(f"s{seed}: dIP={soft_ip.delta:.3f} dNon={soft_clean.delta:.3f} sep={sep:.3f}")
        assert good >= 4, lines
        print("\nPASS 07 robustness (soft level, retrained probe):\n  " + "\n  ".join(lines))

    def test_08_transport_equivalence(self, tmp_path, rng):
        from clmark.cltrain import EncoderModel, init_params

        arch = (16 * 16 * 3, 32, 16)
        encoder = EncoderModel(arch=arch, params=init_params(arch, seed=0), activation="relu")
        save_encoder(encoder, tmp_path / "enc.bin")
        server = serve(str(tmp_path / "enc.bin"))
        try:
            imgs = [ImageTensor(rng.uniform(0, 1, size=(16, 16, 3))) for _ in range(64)]
            local = InProcessSuspect(encoder).query(imgs, "feature").vectors
            remote = RemoteSuspect(server.url).query(imgs, "feature").vectors
            worst = float(np.max(np.abs(local - remote)))
            assert worst < 1e-6
            d = np.linalg.norm(local[:, None, :] - remote[None, :, :], axis=2)
            assert np.all(np.argmin(d, axis=1) == np.arange(64)), "order not preserved"
            # byte-level schema conformance
            import json
            import urllib.request

            payload = {
                "level": "feature",
                "images": [{"h": 16, "w": 16, "c": 3, "data": [float(v) for v in imgs[0].flat()]}],
            }
            req = urllib.request.Request(
                server.url + "/query", data=json.dumps(payload).encode(),
                headers={"Content-Type": "application/json"}, method="POST",
            )
            with urllib.request.urlopen(req) as resp:
                body = json.loads(resp.read())
            assert set(body) == {"vectors", "dim"}
            assert all(float(f"{v:.9g}") == v for v in body["vectors"][0])
        finally:
            server.shutdown()
        print(f"\nPASS 08 transport equivalence: max_abs_diff={worst:.2e} over 64 probes")

    def test_09_determinism(self, tmp_path):
        spec = TriggerSpec("patch", {"size": 6, "position": "corner"}, 3)
        digests = []
        for run in ("a", "b"):
            root = tmp_path / run
            manifest = embed_mod.generate_toy_dataset(root / "toy", 80, 3, "a")
            target = manifest.labels()[0]
            embed_mod.embed_watermark(manifest, root / "toy", spec, target, 0.1, 3, root / "wm")
            wmf = embed_mod.load_dataset_manifest(root / "wm")
            imgs = [im for im, _ in embed_mod.load_dataset_images(wmf, root / "wm")]
            cfg = TrainConfig(seed=3, epochs=3, batch_size=16, arch=(16 * 16 * 3, 32, 16))
            model, _ = pretrain(imgs, cfg)
            save_encoder(model, root / "enc.bin")
            q_clean, q_wm = embed_mod.build_query_set(manifest, root / "toy", spec, target, 20, 3)
            report = verify(
                InProcessSuspect(load_encoder(root / "enc.bin")), q_clean, q_wm,
                "feature", VerifyConfig(threshold=0.1, batches=4, seed=3),
            )
            import json

            digests.append((
                (root / "toy" / "manifest.jsonl").read_bytes(),
                (root / "wm" / "watermark.json").read_bytes(),
                (root / "enc.bin").read_bytes(),
                json.dumps(report.to_dict(), sort_keys=True).encode(),
            ))
        assert digests[0] == digests[1]
        print("\nPASS 09 determinism: manifests, model files, and reports byte-identical")

    def test_10_sweep_sanity(self):
        rng = np.random.default_rng(0)
        ip = rng.normal(0.3, 0.05, size=500)
        nonip = rng.normal(0.0, 0.05, size=500)
        grid = np.linspace(-0.5, 0.8, 53)
        rows = sweep_thresholds(ip, nonip, grid)
        tprs = [r[1] for r in rows]
        fprs = [r[2] for r in rows]
        assert all(a >= b for a, b in zip(tprs, tprs[1:]))
        assert all(a >= b for a, b in zip(fprs, fprs[1:]))
        assert (tprs[0], fprs[0]) == (1.0, 1.0)
        assert (tprs[-1], fprs[-1]) == (0.0, 0.0)
        print("\nPASS 10 sweep sanity: TPR/FPR monotone; endpoints (1,1) and (0,0)")
