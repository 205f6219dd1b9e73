"""Command-line surface: embed, train, probe, serve, verify, sweep,
fidelity, toy-dataset generation, and the end-to-end scenario runner.

Exit codes: 0 success / verification NotProven, 2 usage error,
3 verification decided Infringing, 1 any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from clmark import blto as blto_mod
from clmark import embed as embed_mod
from clmark import modelio
from clmark import suspectio
from clmark.cltrain import AugConfig, TrainConfig, pretrain
from clmark.downstream import train_probe
from clmark.errors import ClmarkError
from clmark.fidelity import fidelity_report, write_fidelity_csv, write_fidelity_json
from clmark.imagecore import load_image
from clmark.triggers import (
    DEFAULT_CTRL_MAGNITUDE,
    METHOD_BLTO,
    METHOD_CTRL,
    METHOD_NA,
    METHOD_PATCH,
    TriggerSpec,
)
from clmark.verify import VerifyConfig, DECISION_INFRINGING, verify

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INFRINGING = 3


def _env_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("CLMARK_SEED")
    return int(env) if env else 0


def _load_config(path: str | None) -> dict:
    """key = value lines; '#' comments allowed."""
    if not path:
        return {}
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ClmarkError(f"config line not key = value: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(args: argparse.Namespace, parser_defaults: dict, config: dict):
    for key, value in config.items():
        if not hasattr(args, key):
            continue
        current = getattr(args, key)
        if current == parser_defaults.get(key):
            default = parser_defaults.get(key)
            caster = type(default) if default is not None else str
            if caster is bool:
                value = value.lower() in ("1", "true", "yes")
            else:
                value = caster(value)
            setattr(args, key, value)


def _dataset(path: str):
    manifest = embed_mod.load_dataset_manifest(path)
    return manifest, Path(path)


def _train_config(args) -> TrainConfig:
    side = args.side
    return TrainConfig(
        framework=args.framework,
        temperature=args.temperature,
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=_env_seed(args.seed),
        augmentation=AugConfig(),
        arch=(side * side * 3, 256, 64),
    )


def _write_json(path: str | Path, doc: dict):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _make_trigger_spec(args, manifest, dataset_dir) -> TriggerSpec:
    seed = _env_seed(args.seed)
    if args.method == METHOD_PATCH:
        return TriggerSpec(METHOD_PATCH, {"size": args.patch_size, "position": "corner"}, seed)
    if args.method == METHOD_CTRL:
        return TriggerSpec(
            METHOD_CTRL,
            {"bands": [[3, 3], [7, 7]], "magnitude": args.magnitude},
            seed,
        )
    if args.method == METHOD_NA:
        return TriggerSpec(METHOD_NA, {"size": args.patch_size}, seed)
    if args.method == METHOD_BLTO:
        images = [
            img for img, _ in embed_mod.load_dataset_images(manifest, dataset_dir)
        ]
        labels = [it.label for it in manifest.items]
        refs = [img for img, label in zip(images, labels) if label == args.target_class]
        side = images[0].height
        cfg = blto_mod.BltoConfig(
            inner_steps=args.blto_inner_steps,
            outer_steps=args.blto_outer_steps,
            alternations=args.blto_alternations,
            seed=seed,
            surrogate=TrainConfig(arch=(side * side * 3, 128, 32), epochs=1000, batch_size=32),
            linf_bound=args.epsilon,
        )
        gen = blto_mod.run_blto(images, refs[: args.blto_refs], cfg).generator
        return TriggerSpec(
            METHOD_BLTO,
            {
                "shape": list(gen.shape),
                "generator": [float(f"{v:.17g}") for v in gen.params],
                "linf_bound": gen.linf_bound,
            },
            seed,
        )
    raise ClmarkError(f"unknown method {args.method!r}")


def cmd_toy(args) -> int:
    embed_mod.generate_toy_dataset(args.out, args.n, _env_seed(args.seed), args.variant)
    print(f"wrote toy dataset ({args.n} images, variant {args.variant}) to {args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    manifest, dataset_dir = _dataset(args.dataset)
    spec = _make_trigger_spec(args, manifest, dataset_dir)
    wm = embed_mod.embed_watermark(
        manifest, dataset_dir, spec, args.target_class, args.rate, _env_seed(args.seed), args.out
    )
    (Path(args.out) / "trigger.json").write_text(spec.canonical_json() + "\n")
    print(
        f"embedded {len(wm.watermarked_ids)} {wm.method} watermark samples "
        f"(fingerprint {wm.trigger_fingerprint[:16]}...) into {args.out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    manifest, dataset_dir = _dataset(args.dataset)
    images = [img for img, _ in embed_mod.load_dataset_images(manifest, dataset_dir)]
    args.side = images[0].height
    cfg = _train_config(args)
    model, trace = pretrain(images, cfg)
    modelio.save_encoder(model, args.out)
    _write_json(
        str(args.out) + ".trace.json",
        {
            "loss_trace": trace,
            "config": {
                "framework": cfg.framework,
                "temperature": cfg.temperature,
                "batch_size": cfg.batch_size,
                "epochs": cfg.epochs,
                "learning_rate": cfg.learning_rate,
                "seed": cfg.seed,
                "arch": list(cfg.arch),
            },
        },
    )
    print(f"trained {cfg.framework} encoder ({cfg.epochs} epochs) -> {args.out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    manifest, dataset_dir = _dataset(args.labeled)
    encoder = modelio.load_encoder(args.encoder)
    labeled = [
        (img, label)
        for img, label in embed_mod.load_dataset_images(manifest, dataset_dir)
        if label is not None
    ]
    probe = train_probe(encoder, labeled, epochs=args.epochs, lr=args.lr, seed=_env_seed(args.seed))
    modelio.save_probe(probe, args.out)
    print(f"trained probe over classes {list(probe.class_names)} -> {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    host, _, port = args.bind.rpartition(":")
    server = suspectio.serve(args.encoder, args.probe, (host or "127.0.0.1", int(port)))
    print(f"serving suspect model at {server.url} (Ctrl-C to stop)", flush=True)
    try:
        server.thread.join()
    except KeyboardInterrupt:
        server.shutdown()
    return EXIT_OK


def cmd_verify(args) -> int:
    manifest, dataset_dir = _dataset(args.queries)
    spec = TriggerSpec.from_json(Path(args.trigger).read_text())
    clean, watermarked = embed_mod.build_query_set(
        manifest, dataset_dir, spec, args.target_class, args.n, _env_seed(args.seed)
    )
    suspect = suspectio.open_suspect(args.suspect, args.probe)
    cfg = VerifyConfig(
        threshold=args.tau, batches=args.batches, alpha=args.alpha, seed=_env_seed(args.seed)
    )
    report = verify(
        suspect,
        clean,
        watermarked,
        args.level,
        cfg,
        metadata={
            "trigger_fingerprint": spec.fingerprint(),
            "suspect": args.suspect,
            "n": args.n,
            "config": {
                "threshold": cfg.threshold,
                "batches": cfg.batches,
                "alpha": cfg.alpha,
                "seed": cfg.seed,
            },
        },
    )
    doc = report.to_dict()
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc, sort_keys=True, indent=2))
    return EXIT_INFRINGING if report.decision == DECISION_INFRINGING else EXIT_OK


def _read_deltas(paths: list[str]) -> list[float]:
    out = []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        out.append(float(doc["delta"]))
    return out


def cmd_sweep(args) -> int:
    from clmark.verify import sweep_thresholds

    start, stop, step = (float(v) for v in args.grid.split(":"))
    grid = np.arange(start, stop + step / 2, step)
    rows = sweep_thresholds(_read_deltas(args.ip_reports), _read_deltas(args.nonip_reports), grid)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "tpr", "fpr"])
        for tau, tpr, fpr in rows:
            writer.writerow([f"{tau:.9g}", f"{tpr:.9g}", f"{fpr:.9g}"])
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return EXIT_OK


def cmd_fidelity(args) -> int:
    manifest = embed_mod.WatermarkManifest.from_json(Path(args.manifest).read_text())
    report = fidelity_report(args.clean, args.watermarked, manifest)
    write_fidelity_json(report, args.out + ".json")
    write_fidelity_csv(report, args.out + ".csv")
    if report["applicable"]:
        print(f"mean SSIM {report['mean']:.4f}, min {report['min']:.4f} -> {args.out}.json/.csv")
    else:
        print(f"method {report['method']} is compositing; per-host SSIM not applicable")
    return EXIT_OK


def cmd_scenario_robustness(args) -> int:
    """Pretrain on a watermarked toy set, retrain the probe on a second
    disjoint toy set, then verify at soft and hard levels."""
    seed = _env_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clean_dir = out / "toy_a"
    wm_dir = out / "toy_a_wm"
    probe_dir = out / "toy_b"
    manifest = embed_mod.generate_toy_dataset(clean_dir, args.n, seed, "a")
    target = manifest.labels()[0]
    spec = TriggerSpec(
        METHOD_CTRL, {"bands": [[3, 3], [7, 7]], "magnitude": DEFAULT_CTRL_MAGNITUDE}, seed
    )
    embed_mod.embed_watermark(manifest, clean_dir, spec, target, args.rate, seed, wm_dir)
    probe_manifest = embed_mod.generate_toy_dataset(probe_dir, max(200, args.n // 5), seed + 1, "b")

    wm_manifest = embed_mod.load_dataset_manifest(wm_dir)
    wm_images = [img for img, _ in embed_mod.load_dataset_images(wm_manifest, wm_dir)]
    side = wm_images[0].height
    cfg = TrainConfig(seed=seed, epochs=args.epochs, arch=(side * side * 3, 256, 64))
    encoder, _ = pretrain(wm_images, cfg)

    labeled = [
        (img, label)
        for img, label in embed_mod.load_dataset_images(probe_manifest, probe_dir)
        if label is not None
    ]
    probe = train_probe(encoder, labeled, seed=seed)
    suspect = suspectio.InProcessSuspect(encoder, probe)
    clean, watermarked = embed_mod.build_query_set(manifest, clean_dir, spec, target, args.n_queries, seed)
    vcfg = VerifyConfig(threshold=args.tau, batches=args.batches, seed=seed)
    reports = {}
    for level in ("soft", "hard"):
        report = verify(suspect, clean, watermarked, level, vcfg)
        reports[level] = report.to_dict()
        _write_json(out / f"report_{level}.json", reports[level])
    print(json.dumps({lvl: {"delta": r["delta"], "p_value": r["p_value"], "decision": r["decision"]} for lvl, r in reports.items()}, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clmark",
        description="Dataset watermarking and ownership verification for contrastive learning",
    )
    parser.add_argument("--config", help="key = value config file; fills unset flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="generate the synthetic 4-class toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=("a", "b"), default="a")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("embed", help="embed a watermark into a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", required=True, choices=(METHOD_PATCH, METHOD_CTRL, METHOD_BLTO, METHOD_NA))
    p.add_argument("--rate", type=float, default=0.01)
    p.add_argument("--target-class", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=6)
    p.add_argument("--magnitude", type=float, default=DEFAULT_CTRL_MAGNITUDE)
    p.add_argument("--epsilon", type=float, default=0.15)
    p.add_argument("--blto-inner-steps", type=int, default=200)
    p.add_argument("--blto-outer-steps", type=int, default=10)
    p.add_argument("--blto-alternations", type=int, default=2)
    p.add_argument("--blto-refs", type=int, default=16)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="pretrain the tiny contrastive encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--framework", choices=("simclr", "simsiam"), default="simclr")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="train a linear probe on a frozen encoder")
    p.add_argument("--encoder", required=True)
    p.add_argument("--labeled", required=True, help="labeled dataset directory")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("serve", help="serve a suspect model over HTTP")
    p.add_argument("--encoder", required=True)
    p.add_argument("--probe", default=None)
    p.add_argument("--bind", default="127.0.0.1:8790")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("verify", help="black-box ownership verification")
    p.add_argument("--suspect", required=True, help="URL or encoder model file")
    p.add_argument("--probe", default=None, help="probe file for in-process soft/hard levels")
    p.add_argument("--trigger", required=True, help="trigger spec JSON (the watermark key)")
    p.add_argument("--queries", required=True, help="clean dataset directory for query sampling")
    p.add_argument("--target-class", required=True)
    p.add_argument("--level", choices=("feature", "soft", "hard"), default="feature")
    p.add_argument("--tau", type=float, default=0.10)
    p.add_argument("--batches", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="TPR/FPR threshold sweep over report deltas")
    p.add_argument("--ip-reports", nargs="+", required=True)
    p.add_argument("--nonip-reports", nargs="+", required=True)
    p.add_argument("--grid", default="0:0.3:0.02", help="start:stop:step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fidelity", help="SSIM fidelity report for a watermark manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--watermarked", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_fidelity)

    p = sub.add_parser("scenario", help="end-to-end scenario runner")
    scen = p.add_subparsers(dest="scenario", required=True)
    pr = scen.add_parser("robustness", help="pretrain watermarked, re-probe on second dataset, re-verify")
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--out", default="scenario_out")
    pr.add_argument("--n", type=int, default=2000)
    pr.add_argument("--rate", type=float, default=0.10)
    pr.add_argument("--epochs", type=int, default=100)
    pr.add_argument("--tau", type=float, default=0.05)
    pr.add_argument("--batches", type=int, default=5)
    pr.add_argument("--n-queries", type=int, default=100)
    pr.set_defaults(func=cmd_scenario_robustness)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = _load_config(args.config)
    defaults = {
        action.dest: action.default
        for action in parser._subparsers._group_actions[0].choices[args.command]._actions
    }
    _apply_config(args, defaults, config)
    try:
        return args.func(args)
    except ClmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
